#pragma once

// The structure-aware generative network.
//
// Encoder: per-part voxel features and per-pair box features are refined by
// two GRUs over `iterations` steps, exchanging attention messages between the
// geometry and structure branches after the first step. Two sequence GRUs
// collapse the refined features, a third fuses them with the part mask into
// (mu, log sigma) of the latent Gaussian.
//
// Decoder: a splitter GRU turns z (with the mask) into a geometry seed and a
// structure seed; two decoder GRUs unroll k part features and K pair features,
// which the geometry/structure decoders map to voxel grids and box pairs. Each
// part's final box is the mean of its candidate boxes from the pairs it is in.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sagnet/layers.hpp"
#include "sagnet/shapes.hpp"

namespace sagnet {

struct ModelConfig {
  std::size_t k = 2;
  std::size_t resolution = 16;
  std::size_t feature_dim = 512;
  std::size_t latent_dim = 512;
  std::size_t iterations = 2;
  std::vector<std::size_t> channels{8, 16, 32, 64};
  std::uint64_t seed = 1;

  std::size_t pair_count() const { return k * (k - 1) / 2; }

  void validate() const {
    if (k < 2) throw ContractError("ModelConfig: k must be at least 2");
    if (iterations < 1 || iterations > 4) throw ContractError("ModelConfig: iterations must be in 1..4");
    if (feature_dim == 0 || latent_dim == 0) throw ContractError("ModelConfig: dimensions must be positive");
    if (channels.empty()) throw ContractError("ModelConfig: need at least one conv layer");
    bottleneck_side(resolution, channels.size());
  }

  /// Conv widths for r = 2^L: 8, 16, 32, ... with one layer per halving.
  static std::vector<std::size_t> default_channels(std::size_t resolution) {
    std::vector<std::size_t> ch;
    std::size_t c = 8;
    for (std::size_t r = resolution; r > 1; r /= 2, c *= 2) ch.push_back(c);
    return ch;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"k", c.k},
                        {"resolution", c.resolution},
                        {"feature_dim", c.feature_dim},
                        {"latent_dim", c.latent_dim},
                        {"iterations", c.iterations},
                        {"channels", c.channels},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.k = j.at("k").get<std::size_t>();
  c.resolution = j.at("resolution").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.iterations = j.at("iterations").get<std::size_t>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// A mini-batch in tensor form.
template <class T>
struct Batch {
  std::size_t size = 0;
  std::vector<Tensor<T>> voxels;     ///< k x [B,1,r,r,r]
  std::vector<Tensor<T>> voxel_flat; ///< k x [B,r^3]
  std::vector<Tensor<T>> pairs;      ///< K x [B,12]
  std::vector<Tensor<T>> part_mask;  ///< k x [B,1]
  std::vector<Tensor<T>> pair_mask;  ///< K x [B,1]
  Tensor<T> mask;                    ///< [B,k]
};

template <class T>
Batch<T> make_batch(std::span<const ShapeSample> samples, std::size_t k, std::size_t r) {
  if (samples.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t b = samples.size(), cells = r * r * r;
  const auto pairs = pair_index_list(k);
  Batch<T> batch;
  batch.size = b;
  batch.mask = Tensor<T>({b, k});
  for (std::size_t i = 0; i < k; ++i) {
    batch.voxels.emplace_back(Dims{b, 1, r, r, r});
    batch.voxel_flat.emplace_back(Dims{b, cells});
    batch.part_mask.emplace_back(Dims{b, 1});
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    batch.pairs.emplace_back(Dims{b, kPairWidth});
    batch.pair_mask.emplace_back(Dims{b, 1});
  }
  for (std::size_t n = 0; n < b; ++n) {
    const ShapeSample& s = samples[n];
    if (s.parts.size() != k || s.resolution() != r)
      throw ContractError("make_batch: sample has k=" + std::to_string(s.parts.size()) + ", r=" + std::to_string(s.resolution()) +
                          "; model expects k=" + std::to_string(k) + ", r=" + std::to_string(r));
    for (std::size_t i = 0; i < k; ++i) {
      const T present = s.mask.present(i) ? T(1) : T(0);
      batch.mask[n * k + i] = present;
      batch.part_mask[i][n] = present;
      auto v = s.parts[i].values();
      for (std::size_t c = 0; c < cells; ++c) {
        batch.voxels[i][n * cells + c] = static_cast<T>(v[c]);
        batch.voxel_flat[i][n * cells + c] = static_cast<T>(v[c]);
      }
    }
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto [i, j] = pairs[p];
      const auto pv = pair_vector(s, i, j);
      for (std::size_t c = 0; c < kPairWidth; ++c) batch.pairs[p][n * kPairWidth + c] = static_cast<T>(pv[c]);
      batch.pair_mask[p][n] = (s.mask.present(i) && s.mask.present(j)) ? T(1) : T(0);
    }
  }
  return batch;
}

/// Geometry features h_i and structure features h_{i,j} after exchange step t.
template <class T>
struct ExchangeState {
  std::vector<Var<T>> geo;  ///< k x [B,H]
  std::vector<Var<T>> str;  ///< K x [B,H], pair_index_list order
  std::size_t t = 0;
};

template <class T>
struct Messages {
  std::vector<Var<T>> geo;
  std::vector<Var<T>> str;
};

template <class T>
struct LatentDistribution {
  Var<T> mu;
  Var<T> log_sigma;
  Var<T> hv;  ///< fused feature the heads read from
};

template <class T>
struct DecodedFeatures {
  std::vector<Var<T>> geo;  ///< h'_i
  std::vector<Var<T>> str;  ///< h'_{i,j}
};

template <class T>
struct Decoded {
  DecodedFeatures<T> features;
  std::vector<Var<T>> voxel_logits;  ///< k x [B, r^3]
  std::vector<Var<T>> pair_boxes;    ///< K x [B, 12]
};

template <class T>
class SagNet {
 public:
  explicit SagNet(ModelConfig config) : config_(std::move(config)), store_(std::make_unique<ParamStore<T>>()) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, SeedStream::kInit));
    const std::size_t h = config_.feature_dim, z = config_.latent_dim, k = config_.k;
    auto& s = *store_;
    geo_enc_ = GeoEncoder<T>(s, "geo_enc", config_.resolution, config_.channels, h, rng);
    str_enc_ = StrEncoder<T>(s, "str_enc", h, rng);
    gru_geo_ = GruCell<T>(s, "gru_geo", h, h, rng);
    gru_str_ = GruCell<T>(s, "gru_str", h, h, rng);
    gate_geo_ = AttentionGate<T>(s, "gate_geo", h, rng);
    gate_str_ = AttentionGate<T>(s, "gate_str", h, rng);
    seq_geo_ = GruCell<T>(s, "seq_geo", h, h, rng);
    seq_str_ = GruCell<T>(s, "seq_str", h, h, rng);
    fuse_fc_geo_ = Linear<T>(s, "fuse_fc_geo", h + k, h, rng, Activation::kTanh);
    fuse_fc_str_ = Linear<T>(s, "fuse_fc_str", h + k, h, rng, Activation::kTanh);
    gru_fuse_ = GruCell<T>(s, "gru_fuse", h, h, rng);
    head_mu_ = Linear<T>(s, "head_mu", h, z, rng);
    head_log_sigma_ = Linear<T>(s, "head_log_sigma", h, z, rng);
    split_fc_ = Linear<T>(s, "split_fc", z + k, h, rng, Activation::kTanh);
    gru_split_ = GruCell<T>(s, "gru_split", 0, h, rng);
    dec_geo_ = GruCell<T>(s, "dec_geo", 0, h, rng);
    dec_str_ = GruCell<T>(s, "dec_str", 0, h, rng);
    geo_dec_ = GeoDecoder<T>(s, "geo_dec", config_.resolution, config_.channels, h, rng);
    str_dec_ = StrDecoder<T>(s, "str_dec", h, rng);
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<T>& params() noexcept { return *store_; }
  const ParamStore<T>& params() const noexcept { return *store_; }

  const GeoEncoder<T>& geo_encoder() const { return geo_enc_; }
  const GeoDecoder<T>& geo_decoder() const { return geo_dec_; }
  const StrEncoder<T>& str_encoder() const { return str_enc_; }
  const StrDecoder<T>& str_decoder() const { return str_dec_; }
  const GruCell<T>& geo_gru() const { return gru_geo_; }
  const AttentionGate<T>& geo_gate() const { return gate_geo_; }
  const AttentionGate<T>& str_gate() const { return gate_str_; }

  Var<T> zeros(Tape<T>& tape, std::size_t batch, std::size_t width) const {
    return tape.constant(Tensor<T>({batch, width}));
  }

  /// Attention messages:
  ///   m_i    = sum_{j != i} f_g([h_i, h_ij]) * h_ij
  ///   m_ij   = f_s([h_ij, h_i]) * h_i + f_s([h_ij, h_j]) * h_j
  /// Pairs with an absent part contribute nothing.
  Messages<T> attention_messages(Tape<T>& tape, const ExchangeState<T>& st, const std::vector<Var<T>>& part_mask,
                                 const std::vector<Var<T>>& pair_mask) const {
    const std::size_t k = st.geo.size();
    const auto pairs = pair_index_list(k);
    if (st.str.size() != pairs.size() || part_mask.size() != k || pair_mask.size() != pairs.size())
      throw ContractError("attention_messages: state does not match k=" + std::to_string(k));
    Messages<T> m;
    std::vector<std::optional<Var<T>>> acc(k);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto [i, j] = pairs[p];
      const Var<T> hij = st.str[p];
      for (std::size_t end : {i, j}) {
        Var<T> term = ad::mul(gate_geo_(tape, st.geo[end], hij), hij);
        acc[end] = acc[end].has_value() ? ad::add(*acc[end], term) : term;
      }
      Var<T> mij = ad::add(ad::mul(gate_str_(tape, hij, st.geo[i]), st.geo[i]), ad::mul(gate_str_(tape, hij, st.geo[j]), st.geo[j]));
      m.str.push_back(ad::row_scale(mij, pair_mask[p]));
    }
    for (std::size_t i = 0; i < k; ++i) m.geo.push_back(ad::row_scale(*acc[i], part_mask[i]));
    return m;
  }

  /// Runs the two analysis branches for `iterations` exchange steps.
  ExchangeState<T> analyze(Tape<T>& tape, const Batch<T>& batch, std::size_t iterations = 0) const {
    if (iterations == 0) iterations = config_.iterations;
    const std::size_t k = config_.k, kk = config_.pair_count(), b = batch.size, h = config_.feature_dim;
    if (batch.voxels.size() != k || batch.pairs.size() != kk)
      throw ContractError("analyze: batch has " + std::to_string(batch.voxels.size()) + " parts, model expects " + std::to_string(k));
    std::vector<Var<T>> pm, qm;
    for (const auto& t : batch.part_mask) pm.push_back(tape.constant(t));
    for (const auto& t : batch.pair_mask) qm.push_back(tape.constant(t));

    ExchangeState<T> st;
    for (std::size_t i = 0; i < k; ++i) {
      Var<T> feat = geo_enc_(tape, tape.constant(batch.voxels[i]));
      st.geo.push_back(ad::row_scale(gru_geo_.step(tape, zeros(tape, b, h), feat), pm[i]));
    }
    for (std::size_t p = 0; p < kk; ++p) {
      Var<T> feat = str_enc_(tape, tape.constant(batch.pairs[p]));
      st.str.push_back(ad::row_scale(gru_str_.step(tape, zeros(tape, b, h), feat), qm[p]));
    }
    st.t = 1;
    for (; st.t < iterations; ++st.t) {
      const Messages<T> m = attention_messages(tape, st, pm, qm);
      for (std::size_t i = 0; i < k; ++i) st.geo[i] = ad::row_scale(gru_geo_.step(tape, st.geo[i], m.geo[i]), pm[i]);
      for (std::size_t p = 0; p < kk; ++p) st.str[p] = ad::row_scale(gru_str_.step(tape, st.str[p], m.str[p]), qm[p]);
    }
    return st;
  }

  /// Collapses the feature sequences and fuses them with the mask into (mu, log sigma).
  LatentDistribution<T> fuse(Tape<T>& tape, const ExchangeState<T>& st, const Tensor<T>& mask) const {
    const std::size_t b = mask.dim(0), h = config_.feature_dim;
    Var<T> c = tape.constant(mask);
    Var<T> hg = zeros(tape, b, h);
    for (const auto& f : st.geo) hg = seq_geo_.step(tape, hg, f);
    Var<T> hs = zeros(tape, b, h);
    for (const auto& f : st.str) hs = seq_str_.step(tape, hs, f);
    Var<T> hv = zeros(tape, b, h);
    hv = gru_fuse_.step(tape, hv, fuse_fc_geo_(tape, ad::concat<T>({hg, c})));
    hv = gru_fuse_.step(tape, hv, fuse_fc_str_(tape, ad::concat<T>({hs, c})));
    return {head_mu_(tape, hv), head_log_sigma_(tape, hv), hv};
  }

  /// z = mu + sigma * n.
  static Var<T> reparameterize(Tape<T>& tape, const LatentDistribution<T>& d, const Tensor<T>& noise) {
    return ad::add(d.mu, ad::mul(ad::exp(d.log_sigma), tape.constant(noise)));
  }

  Decoded<T> generate(Tape<T>& tape, Var<T> z, const Tensor<T>& mask) const {
    const std::size_t k = config_.k, kk = config_.pair_count();
    const std::size_t b = mask.dim(0);
    if (z.dims() != Dims{b, config_.latent_dim}) throw ShapeError("generate: latent must be [B," + std::to_string(config_.latent_dim) + "]");
    Var<T> c = tape.constant(mask);
    Var<T> s0 = split_fc_(tape, ad::concat<T>({z, c}));
    Var<T> geo_seed = gru_split_.step(tape, s0);
    Var<T> str_seed = gru_split_.step(tape, geo_seed);

    Decoded<T> out;
    std::vector<Tensor<T>> part_mask(k, Tensor<T>({b, 1}));
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t i = 0; i < k; ++i) part_mask[i][n] = mask[n * k + i];
    const auto pairs = pair_index_list(k);

    Var<T> g = geo_seed;
    for (std::size_t i = 0; i < k; ++i) {
      g = dec_geo_.step(tape, g);
      Var<T> hi = ad::row_scale(g, tape.constant(part_mask[i]));
      out.features.geo.push_back(hi);
      out.voxel_logits.push_back(geo_dec_(tape, hi));
    }
    Var<T> s = str_seed;
    for (std::size_t p = 0; p < kk; ++p) {
      s = dec_str_.step(tape, s);
      Tensor<T> pm({b, 1});
      for (std::size_t n = 0; n < b; ++n) pm[n] = part_mask[pairs[p].first][n] * part_mask[pairs[p].second][n];
      Var<T> hp = ad::row_scale(s, tape.constant(pm));
      out.features.str.push_back(hp);
      out.pair_boxes.push_back(str_dec_(tape, hp));
    }
    return out;
  }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore<T>> store_;
  GeoEncoder<T> geo_enc_;
  StrEncoder<T> str_enc_;
  GruCell<T> gru_geo_, gru_str_;
  AttentionGate<T> gate_geo_, gate_str_;
  GruCell<T> seq_geo_, seq_str_;
  Linear<T> fuse_fc_geo_, fuse_fc_str_;
  GruCell<T> gru_fuse_;
  Linear<T> head_mu_, head_log_sigma_;
  Linear<T> split_fc_;
  GruCell<T> gru_split_, dec_geo_, dec_str_;
  GeoDecoder<T> geo_dec_;
  StrDecoder<T> str_dec_;
};

/// Final box of each part: mean of its candidate boxes over the pairs it belongs
/// to, restricted to pairs whose partner is present (all k-1 candidates if none is).
/// `pair_boxes` holds K rows of 12 values in pair_index_list order.
inline std::vector<Box6> average_candidate_boxes(std::span<const std::array<float, 12>> pair_boxes, const PartMask& mask) {
  const std::size_t k = mask.size();
  const auto pairs = pair_index_list(k);
  if (pair_boxes.size() != pairs.size()) throw ContractError("average_candidate_boxes: expected K pair predictions");
  std::vector<Box6> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!mask.present(i)) continue;
    std::array<double, 6> acc{};
    std::size_t used = 0;
    for (const bool restrict : {true, false}) {
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [a, b] = pairs[p];
        if (a != i && b != i) continue;
        const std::size_t partner = a == i ? b : a;
        if (restrict && !mask.present(partner)) continue;
        const std::size_t off = a == i ? 0 : 6;
        for (std::size_t c = 0; c < 6; ++c) acc[c] += pair_boxes[p][off + c];
        ++used;
      }
      if (used > 0) break;
    }
    std::array<float, 6> v{};
    for (std::size_t c = 0; c < 6; ++c) v[c] = static_cast<float>(acc[c] / static_cast<double>(used));
    out[i] = Box6::from_array(v);
  }
  return out;
}

/// Converts decoder outputs into samples with real-valued occupancies; absent parts are zeroed.
template <class T>
std::vector<ShapeSample> decoded_to_samples(const Decoded<T>& d, const Tensor<T>& mask, std::size_t resolution,
                                            const std::string& class_id = {}) {
  const std::size_t b = mask.dim(0), k = mask.dim(1), cells = resolution * resolution * resolution;
  std::vector<ShapeSample> out;
  for (std::size_t n = 0; n < b; ++n) {
    ShapeSample s = empty_sample(k, static_cast<std::uint32_t>(resolution), class_id);
    for (std::size_t i = 0; i < k; ++i) s.mask.flags[i] = mask[n * k + i] != T(0) ? 1 : 0;
    std::vector<std::array<float, 12>> pb(d.pair_boxes.size());
    for (std::size_t p = 0; p < d.pair_boxes.size(); ++p)
      for (std::size_t c = 0; c < kPairWidth; ++c) pb[p][c] = static_cast<float>(d.pair_boxes[p].value()[n * kPairWidth + c]);
    s.boxes = average_candidate_boxes(pb, s.mask);
    for (std::size_t i = 0; i < k; ++i) {
      if (!s.mask.present(i)) continue;
      const Tensor<T>& logits = d.voxel_logits[i].value();
      auto v = s.parts[i].values();
      for (std::size_t c = 0; c < cells; ++c) v[c] = static_cast<float>(ad::detail::sigmoid_scalar(logits[n * cells + c]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <class T>
Tensor<T> mask_tensor(std::span<const PartMask> masks, std::size_t k) {
  Tensor<T> m({masks.size(), k});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n].size() != k) throw ContractError("mask_tensor: mask has wrong length");
    for (std::size_t i = 0; i < k; ++i) m[n * k + i] = masks[n].present(i) ? T(1) : T(0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Model directories: config.json + weights.sagw.
// ---------------------------------------------------------------------------

inline constexpr const char* kWeightsFile = "weights.sagw";
inline constexpr const char* kConfigFile = "config.json";

inline ModelConfig load_model_config(const std::filesystem::path& dir) {
  std::ifstream in(dir / kConfigFile);
  if (!in) throw Error("cannot open " + (dir / kConfigFile).string());
  nlohmann::json j;
  in >> j;
  return model_config_from_json(j.contains("model") ? j.at("model") : j);
}

template <class T>
SagNet<T> load_model(const std::filesystem::path& dir) {
  SagNet<T> model(load_model_config(dir));
  load_weights(model.params(), dir / kWeightsFile);
  return model;
}

}  // namespace sagnet
