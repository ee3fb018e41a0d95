#pragma once

// Two-phase training.
//
// Phase 1 minimizes the reconstruction loss L_f with z = mu. Phase 2 samples
// z = mu + sigma * n and minimizes L_f + lambda * L_KL + eta * R, where lambda
// and eta ramp linearly from 0 to their maxima over `ramp_iters` phase-2 steps.
// Optimization is plain SGD (optional momentum) with global-norm clipping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sagnet/model.hpp"

namespace sagnet {

struct AnnealSchedule {
  double lambda_max = 0.8;
  double eta_max = 0.8;
  std::size_t ramp_iters = 60000;

  /// Weight after `phase2_step` steps of phase 2: linear ramp, clamped at the maximum.
  static double ramp(double max_value, std::size_t phase2_step, std::size_t ramp_iters) {
    if (ramp_iters == 0) return max_value;
    const double f = std::min(1.0, static_cast<double>(phase2_step) / static_cast<double>(ramp_iters));
    return max_value * f;
  }
  double lambda(std::size_t phase2_step) const { return ramp(lambda_max, phase2_step, ramp_iters); }
  double eta(std::size_t phase2_step) const { return ramp(eta_max, phase2_step, ramp_iters); }
};

struct TrainConfig {
  ModelConfig model;
  std::size_t iterations = 2000;
  std::size_t phase1_iters = 400;
  std::size_t batch_size = 10;
  double learning_rate = 0.001;
  double momentum = 0.0;
  double clip_norm = 5.0;
  double box_weight = 10.0;
  AnnealSchedule anneal;
  std::size_t checkpoint_every = 0;  ///< 0: only at the end
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    if (iterations == 0) throw ContractError("TrainConfig: iterations must be positive");
    if (phase1_iters > iterations) throw ContractError("TrainConfig: phase1 longer than the run");
    if (batch_size == 0) throw ContractError("TrainConfig: batch size must be positive");
    if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("TrainConfig: momentum must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"model", to_json(c.model)},
                        {"training",
                         {{"iterations", c.iterations},
                          {"phase1_iters", c.phase1_iters},
                          {"batch_size", c.batch_size},
                          {"learning_rate", c.learning_rate},
                          {"momentum", c.momentum},
                          {"clip_norm", c.clip_norm},
                          {"box_weight", c.box_weight},
                          {"lambda_max", c.anneal.lambda_max},
                          {"eta_max", c.anneal.eta_max},
                          {"ramp_iters", c.anneal.ramp_iters},
                          {"checkpoint_every", c.checkpoint_every},
                          {"seed", c.seed}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = model_config_from_json(j.at("model"));
  const auto& t = j.at("training");
  c.iterations = t.at("iterations").get<std::size_t>();
  c.phase1_iters = t.at("phase1_iters").get<std::size_t>();
  c.batch_size = t.at("batch_size").get<std::size_t>();
  c.learning_rate = t.at("learning_rate").get<double>();
  c.momentum = t.at("momentum").get<double>();
  c.clip_norm = t.at("clip_norm").get<double>();
  c.box_weight = t.at("box_weight").get<double>();
  c.anneal.lambda_max = t.at("lambda_max").get<double>();
  c.anneal.eta_max = t.at("eta_max").get<double>();
  c.anneal.ramp_iters = t.at("ramp_iters").get<std::size_t>();
  c.checkpoint_every = t.at("checkpoint_every").get<std::size_t>();
  c.seed = t.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

struct LossReport {
  std::size_t iter = 0;
  int phase = 1;
  double l_f = 0.0;
  double l_kl = 0.0;
  double r_reg = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double eta = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

// ---------------------------------------------------------------------------
// Scalar losses on plain values.
// ---------------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-6;

/// Decoder output for one shape: per-part occupancy probabilities and the raw
/// 12-D pair predictions in pair_index_list order.
struct Reconstruction {
  std::vector<VoxelGrid> voxels;
  std::vector<std::array<float, 12>> pairs;
};

/// Sum over present parts of mean voxel BCE, plus box_weight times the squared
/// error of every present pair's 12-D vector.
inline double loss_reconstruction(const ShapeSample& target, const Reconstruction& rec, double box_weight = 10.0) {
  const std::size_t k = target.parts.size();
  const auto pairs = pair_index_list(k);
  if (rec.voxels.size() != k || rec.pairs.size() != pairs.size())
    throw ContractError("loss_reconstruction: decoded k does not match the sample");
  double voxel_term = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!target.mask.present(i)) continue;
    auto y = target.parts[i].values();
    auto p = rec.voxels[i].values();
    if (p.size() != y.size()) throw ContractError("loss_reconstruction: resolution mismatch");
    double acc = 0.0;
    for (std::size_t c = 0; c < y.size(); ++c) {
      const double q = std::clamp(static_cast<double>(p[c]), kProbabilityClamp, 1.0 - kProbabilityClamp);
      acc -= y[c] * std::log(q) + (1.0 - y[c]) * std::log(1.0 - q);
    }
    voxel_term += acc / static_cast<double>(y.size());
  }
  double box_term = 0.0;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    if (!target.mask.present(i) || !target.mask.present(j)) continue;
    const auto t = pair_vector(target, i, j);
    for (std::size_t c = 0; c < 12; ++c) {
      const double d = static_cast<double>(rec.pairs[p][c]) - t[c];
      box_term += d * d;
    }
  }
  return voxel_term + box_weight * box_term;
}

/// KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 ln sigma).
inline double loss_kl(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ContractError("loss_kl: mu and sigma differ in length");
  double acc = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) {
    if (!(sigma[d] > 0.0)) throw ContractError("loss_kl: sigma must be positive");
    acc += mu[d] * mu[d] + sigma[d] * sigma[d] - 1.0 - 2.0 * std::log(sigma[d]);
  }
  return 0.5 * acc;
}

/// Sum of squared L2 distances between encoder and decoder features.
inline double loss_feature_reg(std::span<const std::vector<double>> encoder, std::span<const std::vector<double>> decoded) {
  if (encoder.size() != decoded.size()) throw ContractError("loss_feature_reg: feature counts differ");
  double acc = 0.0;
  for (std::size_t f = 0; f < encoder.size(); ++f) {
    if (encoder[f].size() != decoded[f].size()) throw ContractError("loss_feature_reg: feature widths differ");
    for (std::size_t c = 0; c < encoder[f].size(); ++c) {
      const double d = decoded[f][c] - encoder[f][c];
      acc += d * d;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Differentiable batch losses.
// ---------------------------------------------------------------------------

template <class T>
struct LossTerms {
  Var<T> l_f;
  Var<T> l_kl;
  Var<T> r_reg;
  Var<T> total;
  ExchangeState<T> state;
  LatentDistribution<T> latent;
  Decoded<T> decoded;
};

/// Batch-mean reconstruction loss from decoder logits.
template <class T>
Var<T> reconstruction_loss(Tape<T>& tape, const Batch<T>& batch, const Decoded<T>& d, T box_weight) {
  const T inv_b = T(1) / static_cast<T>(batch.size);
  std::vector<Var<T>> terms;
  for (std::size_t i = 0; i < d.voxel_logits.size(); ++i) {
    Var<T> bce = ad::bce_logits_rows(d.voxel_logits[i], tape.constant(batch.voxel_flat[i]));
    terms.push_back(ad::sum(ad::row_scale(bce, tape.constant(batch.part_mask[i]))));
  }
  for (std::size_t p = 0; p < d.pair_boxes.size(); ++p) {
    Var<T> diff = ad::sub(d.pair_boxes[p], tape.constant(batch.pairs[p]));
    terms.push_back(ad::scale(ad::sum(ad::row_scale(ad::square(diff), tape.constant(batch.pair_mask[p]))), box_weight));
  }
  Var<T> acc = terms.front();
  for (std::size_t t = 1; t < terms.size(); ++t) acc = ad::add(acc, terms[t]);
  return ad::scale(acc, inv_b);
}

/// Batch-mean closed-form KL to the standard normal prior.
template <class T>
Var<T> kl_loss(const LatentDistribution<T>& d) {
  const T inv_b = T(1) / static_cast<T>(d.mu.dims().at(0));
  Var<T> var = ad::exp(ad::scale(d.log_sigma, T(2)));
  Var<T> inner = ad::sub(ad::add(ad::square(d.mu), var), ad::scale(d.log_sigma, T(2)));
  return ad::scale(ad::add_scalar(ad::sum(inner), -static_cast<T>(d.mu.size())), T(0.5) * inv_b);
}

/// Batch-mean feature regularizer between encoder state and decoder features.
template <class T>
Var<T> feature_reg_loss(const ExchangeState<T>& enc, const DecodedFeatures<T>& dec) {
  const T inv_b = T(1) / static_cast<T>(enc.geo.front().dims().at(0));
  std::optional<Var<T>> acc;
  auto add_pairs = [&acc](const std::vector<Var<T>>& a, const std::vector<Var<T>>& b) {
    if (a.size() != b.size()) throw ContractError("feature_reg_loss: feature counts differ");
    for (std::size_t i = 0; i < a.size(); ++i) {
      Var<T> s = ad::sum(ad::square(ad::sub(b[i], a[i])));
      acc = acc.has_value() ? ad::add(*acc, s) : s;
    }
  };
  add_pairs(enc.geo, dec.geo);
  add_pairs(enc.str, dec.str);
  return ad::scale(*acc, inv_b);
}

/// Full forward pass and loss assembly. With `noise` the latent is sampled
/// (z = mu + sigma * n); without, z = mu.
template <class T>
LossTerms<T> compute_losses(Tape<T>& tape, const SagNet<T>& model, const Batch<T>& batch, const Tensor<T>* noise,
                            T lambda, T eta, T box_weight) {
  LossTerms<T> out;
  out.state = model.analyze(tape, batch);
  out.latent = model.fuse(tape, out.state, batch.mask);
  Var<T> z = noise != nullptr ? SagNet<T>::reparameterize(tape, out.latent, *noise) : out.latent.mu;
  out.decoded = model.generate(tape, z, batch.mask);
  out.l_f = reconstruction_loss(tape, batch, out.decoded, box_weight);
  out.l_kl = kl_loss(out.latent);
  out.r_reg = feature_reg_loss(out.state, out.decoded.features);
  out.total = out.l_f;
  if (lambda != T(0)) out.total = ad::add(out.total, ad::scale(out.l_kl, lambda));
  if (eta != T(0)) out.total = ad::add(out.total, ad::scale(out.r_reg, eta));
  return out;
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

/// Empirical distribution of part masks in a dataset, keyed by the mask bytes.
struct MaskPrior {
  std::vector<std::pair<PartMask, std::size_t>> entries;

  static MaskPrior from(std::span<const ShapeSample> data) {
    std::map<std::vector<std::uint8_t>, std::size_t> counts;
    for (const auto& s : data) ++counts[s.mask.flags];
    MaskPrior p;
    for (const auto& [flags, n] : counts) p.entries.push_back({PartMask{flags}, n});
    return p;
  }

  PartMask draw(Rng& rng) const {
    if (entries.empty()) throw ContractError("MaskPrior: empty");
    std::size_t total = 0;
    for (const auto& e : entries) total += e.second;
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng);
    for (const auto& e : entries) {
      if (pick < e.second) return e.first;
      pick -= e.second;
    }
    return entries.back().first;
  }
};

inline nlohmann::json to_json(const MaskPrior& p) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [m, n] : p.entries) arr.push_back({{"mask", m.flags}, {"count", n}});
  return arr;
}

inline MaskPrior mask_prior_from_json(const nlohmann::json& j) {
  MaskPrior p;
  for (const auto& e : j) p.entries.push_back({PartMask{e.at("mask").get<std::vector<std::uint8_t>>()}, e.at("count").get<std::size_t>()});
  return p;
}

inline constexpr const char* kMaskPriorFile = "mask_prior.json";
inline constexpr const char* kLossLogFile = "loss.csv";

template <class T = float>
class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<ShapeSample> data)
      : config_(std::move(config)),
        data_(std::move(data)),
        model_((config_.validate(), config_.model)),
        batch_rng_(derive_seed(config_.seed, SeedStream::kBatches)),
        noise_rng_(derive_seed(config_.seed, SeedStream::kNoise)) {
    if (data_.empty()) throw ContractError("train: dataset is empty");
    for (const auto& s : data_) {
      if (s.parts.size() != config_.model.k || s.resolution() != config_.model.resolution)
        throw ContractError("train: dataset k/resolution does not match the model config");
    }
    order_.resize(data_.size());
    std::iota(order_.begin(), order_.end(), 0);
    cursor_ = order_.size();
  }

  SagNet<T>& model() noexcept { return model_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<LossReport>& log() const noexcept { return log_; }
  std::size_t iteration() const noexcept { return iter_; }
  bool done() const noexcept { return iter_ >= config_.iterations; }
  MaskPrior mask_prior() const { return MaskPrior::from(data_); }

  /// One SGD iteration. Parameters are left untouched if the step faults.
  LossReport step() {
    std::vector<ShapeSample> items;
    items.reserve(config_.batch_size);
    for (std::size_t n = 0; n < config_.batch_size; ++n) items.push_back(data_[next_index()]);
    const Batch<T> batch = make_batch<T>(items, config_.model.k, config_.model.resolution);

    LossReport rep;
    rep.iter = iter_;
    rep.phase = iter_ < config_.phase1_iters ? 1 : 2;
    std::optional<Tensor<T>> noise;
    if (rep.phase == 2) {
      const std::size_t p2 = iter_ - config_.phase1_iters;
      rep.lambda = config_.anneal.lambda(p2);
      rep.eta = config_.anneal.eta(p2);
      noise = Tensor<T>({batch.size, config_.model.latent_dim});
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (auto& v : noise->vec()) v = static_cast<T>(gauss(noise_rng_));
    }

    model_.params().zero_grad();
    Tape<T> tape;
    LossTerms<T> terms = compute_losses(tape, model_, batch, noise ? &*noise : nullptr, static_cast<T>(rep.lambda),
                                        static_cast<T>(rep.eta), static_cast<T>(config_.box_weight));
    tape.backward(terms.total);
    rep.l_f = terms.l_f.value()[0];
    rep.l_kl = terms.l_kl.value()[0];
    rep.r_reg = terms.r_reg.value()[0];
    rep.total = terms.total.value()[0];

    double sq = 0.0;
    for (auto* p : model_.params().all()) sq += static_cast<double>(as_array(p->grad).square().sum());
    rep.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rep.grad_norm)) throw NumericFault("train: non-finite gradient at iteration " + std::to_string(iter_));
    double factor = 1.0;
    if (config_.clip_norm > 0.0 && rep.grad_norm > config_.clip_norm) {
      factor = config_.clip_norm / rep.grad_norm;
      rep.clipped = true;
    }
    apply_update(static_cast<T>(factor));
    ++iter_;
    log_.push_back(rep);
    return rep;
  }

 private:
  std::size_t next_index() {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), batch_rng_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  void apply_update(T grad_scale) {
    auto params = model_.params().all();
    if (velocity_.empty() && config_.momentum > 0.0)
      for (auto* p : params) velocity_.emplace_back(p->value.dims());
    const T lr = static_cast<T>(config_.learning_rate);
    const T mu = static_cast<T>(config_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = as_array(params[i]->value);
      const auto g = as_array(params[i]->grad);
      if (mu > T(0)) {
        auto vel = as_array(velocity_[i]);
        vel = mu * vel + grad_scale * g;
        v -= lr * vel;
      } else {
        v -= (lr * grad_scale) * g;
      }
    }
  }

  static Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> as_array(Tensor<T>& t) {
    return {t.data(), static_cast<Eigen::Index>(t.size())};
  }

  TrainConfig config_;
  std::vector<ShapeSample> data_;
  SagNet<T> model_;
  Rng batch_rng_;
  Rng noise_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t iter_ = 0;
  std::vector<LossReport> log_;
  std::vector<Tensor<T>> velocity_;
};

inline std::string loss_csv_header() { return "iter,l_f,l_kl,r_reg,total,lambda,eta\n"; }

inline std::string loss_csv_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.iter << ',' << r.l_f << ',' << r.l_kl << ',' << r.r_reg << ',' << r.total << ',' << r.lambda
     << ',' << r.eta << '\n';
  return os.str();
}

/// Writes config.json, weights.sagw and mask_prior.json into `dir`.
template <class T>
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config, const SagNet<T>& model, const MaskPrior& prior) {
  std::filesystem::create_directories(dir);
  save_weights(model.params(), dir / kWeightsFile);
  std::ofstream(dir / kConfigFile, std::ios::trunc) << to_json(config).dump(2) << "\n";
  std::ofstream(dir / kMaskPriorFile, std::ios::trunc) << to_json(prior).dump(2) << "\n";
}

inline MaskPrior load_mask_prior(const std::filesystem::path& dir) {
  std::ifstream in(dir / kMaskPriorFile);
  if (!in) throw Error("cannot open " + (dir / kMaskPriorFile).string());
  nlohmann::json j;
  in >> j;
  return mask_prior_from_json(j);
}

struct TrainResult {
  std::vector<LossReport> log;
  bool faulted = false;
  std::string fault;
};

/// Runs the whole schedule. With an output directory, writes checkpoints every
/// `checkpoint_every` iterations and at the end, plus the loss CSV. On a numeric
/// fault the last good parameters are checkpointed and the fault is reported.
template <class T = float>
TrainResult train(Trainer<T>& trainer, const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const LossReport&)>& on_step = {}) {
  TrainResult result;
  const auto prior = trainer.mask_prior();
  std::optional<std::ofstream> csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    csv.emplace(*out_dir / kLossLogFile, std::ios::trunc);
    *csv << loss_csv_header();
  }
  const std::size_t every = trainer.config().checkpoint_every;
  try {
    while (!trainer.done()) {
      const LossReport r = trainer.step();
      if (csv) *csv << loss_csv_row(r);
      if (on_step) on_step(r);
      if (out_dir && every > 0 && trainer.iteration() % every == 0) save_checkpoint(*out_dir, trainer.config(), trainer.model(), prior);
    }
  } catch (const NumericFault& f) {
    result.faulted = true;
    result.fault = f.what();
  }
  if (out_dir) save_checkpoint(*out_dir, trainer.config(), trainer.model(), prior);
  result.log = trainer.log();
  return result;
}

}  // namespace sagnet
