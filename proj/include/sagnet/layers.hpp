#pragma once

// Neural building blocks: parameter registry, fully-connected and GRU layers,
// attention gates, the convolutional geometry encoder/decoder, the box-pair
// structure encoder/decoder, and the SAGW checkpoint format.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sagnet/autodiff.hpp"
#include "sagnet/common.hpp"
#include "sagnet/shapes.hpp"

namespace sagnet {

using ad::Dims;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Owns every learnable tensor. Parameters have stable addresses and unique names.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Dims dims) {
    if (index_.contains(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
    params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, Tensor<T>(dims), Tensor<T>(dims)}));
    index_.emplace(name, params_.size() - 1);
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: no parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Copies values by name from a store of another precision.
  template <class U>
  void assign_from(const ParamStore<U>& other) {
    if (other.size() != size()) throw ContractError("ParamStore: parameter count mismatch");
    for (std::size_t i = 0; i < other.size(); ++i) {
      Parameter<T>& p = get(other[i].name);
      if (p.value.dims() != other[i].value.dims()) throw ContractError("ParamStore: dims mismatch for " + p.name);
      p.value = other[i].value.template cast<T>();
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Weights ~ U(+-sqrt(6 / (fan_in + fan_out))).
template <class T>
void glorot_uniform(Parameter<T>& p, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : p.value.vec()) v = static_cast<T>(dist(rng));
}

enum class Activation { kNone, kTanh, kSigmoid };

template <class T>
Var<T> activate(Var<T> x, Activation a) {
  switch (a) {
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kSigmoid: return ad::sigmoid(x);
    default: return x;
  }
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         Activation act = Activation::kNone)
      : w_(&store.add(name + ".w", {in, out})), b_(&store.add(name + ".b", {out})), act_(act) {
    glorot_uniform(*w_, in, out, rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return activate(ad::add_bias(ad::matmul(x, tape.parameter(*w_)), tape.parameter(*b_)), act_);
  }

  Parameter<T>& weight() { return *w_; }
  Parameter<T>& bias() { return *b_; }
  std::size_t in_dim() const { return w_->value.dim(0); }
  std::size_t out_dim() const { return w_->value.dim(1); }

 private:
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
  Activation act_ = Activation::kNone;
};

/// Initial gate biases. Starting with z near 0 and r near 1 lets a fresh cell pass
/// its candidate through at full scale; at zero bias each step halves the signal.
inline constexpr double kUpdateGateBias = -2.0;
inline constexpr double kResetGateBias = 2.0;

/// Gated recurrent unit:
///   z  = sigmoid(x Wz + h Uz + bz)
///   r  = sigmoid(x Wr + h Ur + br)
///   n  = tanh(x Wn + (r * h) Un + bn)
///   h' = (1 - z) * n + z * h
/// An input width of 0 builds a cell that is driven by its hidden state alone.
template <class T>
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParamStore<T>& store, const std::string& name, std::size_t input, std::size_t hidden, Rng& rng)
      : hidden_(hidden) {
    for (int g = 0; g < 3; ++g) {
      const std::string gate = name + "." + "zrn"[g];
      if (input > 0) {
        w_[g] = &store.add(gate + ".w", {input, hidden});
        glorot_uniform(*w_[g], input, hidden, rng);
      }
      u_[g] = &store.add(gate + ".u", {hidden, hidden});
      glorot_uniform(*u_[g], hidden, hidden, rng);
      b_[g] = &store.add(gate + ".b", {hidden});
    }
    b_[0]->value.fill(T(kUpdateGateBias));
    b_[1]->value.fill(T(kResetGateBias));
  }

  std::size_t hidden_dim() const noexcept { return hidden_; }

  Var<T> step(Tape<T>& tape, Var<T> h, std::optional<Var<T>> x = std::nullopt) const {
    if (x.has_value() && w_[0] == nullptr) throw ContractError("GruCell: input given to an input-free cell");
    auto pre = [&](int g, Var<T> hh) {
      Var<T> acc = ad::matmul(hh, tape.parameter(*u_[g]));
      if (x.has_value()) acc = ad::add(ad::matmul(*x, tape.parameter(*w_[g])), acc);
      return ad::add_bias(acc, tape.parameter(*b_[g]));
    };
    Var<T> z = ad::sigmoid(pre(0, h));
    Var<T> r = ad::sigmoid(pre(1, h));
    Var<T> cand = ad::matmul(ad::mul(r, h), tape.parameter(*u_[2]));
    if (x.has_value()) cand = ad::add(ad::matmul(*x, tape.parameter(*w_[2])), cand);
    Var<T> n = ad::tanh(ad::add_bias(cand, tape.parameter(*b_[2])));
    return ad::add(n, ad::mul(z, ad::sub(h, n)));
  }

  Parameter<T>& update_bias() { return *b_[0]; }

 private:
  std::size_t hidden_ = 0;
  std::array<Parameter<T>*, 3> w_{};
  std::array<Parameter<T>*, 3> u_{};
  std::array<Parameter<T>*, 3> b_{};
};

/// f([a, b]) = sigmoid([a, b] W + c): one gate vector per feature pair.
template <class T>
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(ParamStore<T>& store, const std::string& name, std::size_t dim, Rng& rng)
      : fc_(store, name, 2 * dim, dim, rng, Activation::kSigmoid) {}

  Var<T> operator()(Tape<T>& tape, Var<T> a, Var<T> b) const { return fc_(tape, ad::concat<T>({a, b})); }

 private:
  Linear<T> fc_;
};

/// Side length of the coarsest feature volume.
inline std::size_t bottleneck_side(std::size_t resolution, std::size_t layers) {
  const std::size_t factor = std::size_t{1} << layers;
  if (layers == 0 || resolution % factor != 0)
    throw ContractError("resolution " + std::to_string(resolution) + " is not divisible by 2^" + std::to_string(layers));
  return resolution / factor;
}

inline constexpr std::size_t kConvKernel = 4;
/// Glorot fans count actual connections: a stride-2, kernel-4 convolution links each
/// output to cin*64 inputs and each input to cout*8 outputs; the transpose is the reverse.
inline constexpr std::size_t kKernelTaps = 64;
inline constexpr std::size_t kStridedTaps = 8;

/// Stride-2 convolutions (kernel 4, pad 1, tanh) halving the grid per layer,
/// then a fully-connected layer to a feature vector.
template <class T>
class GeoEncoder {
 public:
  GeoEncoder() = default;
  GeoEncoder(ParamStore<T>& store, const std::string& name, std::size_t resolution, const std::vector<std::size_t>& channels,
             std::size_t feature, Rng& rng)
      : resolution_(resolution) {
    std::size_t cin = 1;
    for (std::size_t l = 0; l < channels.size(); ++l) {
      const std::string ln = name + ".conv" + std::to_string(l);
      auto& w = store.add(ln + ".w", {channels[l], cin, kConvKernel, kConvKernel, kConvKernel});
      glorot_uniform(w, cin * kKernelTaps, channels[l] * kStridedTaps, rng);
      auto& b = store.add(ln + ".b", {channels[l]});
      convs_.emplace_back(&w, &b);
      cin = channels[l];
    }
    side_ = bottleneck_side(resolution, channels.size());
    flat_ = cin * side_ * side_ * side_;
    fc_ = Linear<T>(store, name + ".fc", flat_, feature, rng);
  }

  /// x: [B, 1, r, r, r] -> [B, feature]
  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    const Dims& d = x.dims();
    if (d.size() != 5 || d[1] != 1 || d[2] != resolution_)
      throw ShapeError("geo_encode: expected [B,1," + std::to_string(resolution_) + "^3] voxels, got " + ad::dims_string(d));
    for (const auto& [w, b] : convs_) x = ad::tanh(ad::conv3d(x, tape.parameter(*w), tape.parameter(*b)));
    return fc_(tape, ad::reshape(x, {d[0], flat_}));
  }

 private:
  std::size_t resolution_ = 0;
  std::size_t side_ = 0;
  std::size_t flat_ = 0;
  std::vector<std::pair<Parameter<T>*, Parameter<T>*>> convs_;
  Linear<T> fc_;
};

/// Mirror of GeoEncoder: FC to the bottleneck volume, then stride-2 transposed
/// convolutions back to r^3. Returns voxel logits; sigmoid gives occupancy.
template <class T>
class GeoDecoder {
 public:
  GeoDecoder() = default;
  GeoDecoder(ParamStore<T>& store, const std::string& name, std::size_t resolution, const std::vector<std::size_t>& channels,
             std::size_t feature, Rng& rng)
      : resolution_(resolution) {
    side_ = bottleneck_side(resolution, channels.size());
    top_ = channels.back();
    fc_ = Linear<T>(store, name + ".fc", feature, top_ * side_ * side_ * side_, rng, Activation::kTanh);
    for (std::size_t l = channels.size(); l-- > 0;) {
      const std::size_t cin = channels[l];
      const std::size_t cout = l == 0 ? 1 : channels[l - 1];
      const std::string ln = name + ".deconv" + std::to_string(channels.size() - 1 - l);
      auto& w = store.add(ln + ".w", {cin, cout, kConvKernel, kConvKernel, kConvKernel});
      glorot_uniform(w, cin * kStridedTaps, cout * kKernelTaps, rng);
      auto& b = store.add(ln + ".b", {cout});
      deconvs_.emplace_back(&w, &b);
    }
  }

  /// h: [B, feature] -> logits [B, r^3]
  Var<T> operator()(Tape<T>& tape, Var<T> h) const {
    const std::size_t batch = h.dims().at(0);
    Var<T> x = ad::reshape(fc_(tape, h), {batch, top_, side_, side_, side_});
    for (std::size_t l = 0; l < deconvs_.size(); ++l) {
      x = ad::conv_transpose3d(x, tape.parameter(*deconvs_[l].first), tape.parameter(*deconvs_[l].second));
      if (l + 1 < deconvs_.size()) x = ad::tanh(x);
    }
    return ad::reshape(x, {batch, resolution_ * resolution_ * resolution_});
  }

 private:
  std::size_t resolution_ = 0;
  std::size_t side_ = 0;
  std::size_t top_ = 0;
  Linear<T> fc_;
  std::vector<std::pair<Parameter<T>*, Parameter<T>*>> deconvs_;
};

inline constexpr std::size_t kPairWidth = 12;

/// Box pair (12 reals) -> feature, one FC + tanh.
template <class T>
class StrEncoder {
 public:
  StrEncoder() = default;
  StrEncoder(ParamStore<T>& store, const std::string& name, std::size_t feature, Rng& rng)
      : fc_(store, name + ".fc", kPairWidth, feature, rng, Activation::kTanh) {}
  Var<T> operator()(Tape<T>& tape, Var<T> pair) const { return fc_(tape, pair); }

 private:
  Linear<T> fc_;
};

/// Feature -> box pair (12 reals), linear.
template <class T>
class StrDecoder {
 public:
  StrDecoder() = default;
  StrDecoder(ParamStore<T>& store, const std::string& name, std::size_t feature, Rng& rng)
      : fc_(store, name + ".fc", feature, kPairWidth, rng) {}
  Var<T> operator()(Tape<T>& tape, Var<T> h) const { return fc_(tape, h); }

 private:
  Linear<T> fc_;
};

// ---------------------------------------------------------------------------
// SAGW checkpoints: magic, u32 version, u32 tensor count, then per tensor
// u32 name length, name, u32 ndim, u32 dims..., f32 data (little-endian).
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kWeightsMagic{'S', 'A', 'G', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

inline std::vector<std::uint8_t> encode_weights(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(kWeightsMagic.begin(), kWeightsMagic.end());
  detail::put_u32(out, kWeightsVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.value.vec()) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes, "weights");
  rd.need(4);
  if (std::memcmp(bytes.data(), kWeightsMagic.data(), 4) != 0) throw FormatError("weights: bad magic", 0);
  rd.take(4);
  const auto version_at = rd.offset();
  if (rd.u32() != kWeightsVersion) throw FormatError("weights: unsupported version", version_at);
  const auto count = rd.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = rd.u32();
    auto name = rd.take(len);
    t.name.assign(name.begin(), name.end());
    const auto ndim_at = rd.offset();
    const auto ndim = rd.u32();
    if (ndim > 8) throw FormatError("weights: implausible rank for " + t.name, ndim_at);
    Dims dims(ndim);
    for (auto& d : dims) d = rd.u32();
    const std::size_t n = ad::element_count(dims);
    rd.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) {
      const auto at = rd.offset();
      v = rd.f32();
      if (!std::isfinite(v)) throw FormatError("weights: non-finite value in " + t.name, at);
    }
    t.value = Tensor<float>(std::move(dims), std::move(data));
    out.push_back(std::move(t));
  }
  if (!rd.at_end()) throw FormatError("weights: trailing bytes", rd.offset());
  return out;
}

template <class T>
void save_weights(const ParamStore<T>& store, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < store.size(); ++i) tensors.push_back({store[i].name, store[i].value.template cast<float>()});
  detail::write_file(path, encode_weights(tensors));
}

/// Loads every parameter of `store` by name; missing, extra or mis-shaped tensors are errors.
template <class T>
void load_weights(ParamStore<T>& store, const std::filesystem::path& path) {
  const auto tensors = decode_weights(detail::read_file(path));
  if (tensors.size() != store.size())
    throw FormatError("weights: expected " + std::to_string(store.size()) + " tensors, file has " + std::to_string(tensors.size()), 8);
  for (const auto& t : tensors) {
    Parameter<T>& p = store.get(t.name);
    if (p.value.dims() != t.value.dims()) throw ContractError("weights: dims mismatch for " + t.name);
    p.value = t.value.template cast<T>();
  }
}

}  // namespace sagnet
