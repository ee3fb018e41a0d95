#pragma once

// Procedures on a trained model: sampling from the prior, latent interpolation,
// iterative part completion, and geometry <-> structure mapping.
//
// Every encode/decode here runs one shape per batch, so a shape's output does
// not depend on what else is being processed alongside it.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "sagnet/metrics.hpp"
#include "sagnet/model.hpp"
#include "sagnet/training.hpp"

namespace sagnet::tasks {

/// Latent mean of each sample.
template <class T>
Tensor<T> encode_mu(const SagNet<T>& model, const ShapeSample& s) {
  const auto& c = model.config();
  Tape<T> tape;
  const Batch<T> batch = make_batch<T>(std::span<const ShapeSample>(&s, 1), c.k, c.resolution);
  const auto st = model.analyze(tape, batch);
  return model.fuse(tape, st, batch.mask).mu.value();
}

/// Decodes one latent row [1, Z] under a mask; voxels are probabilities.
template <class T>
ShapeSample decode(const SagNet<T>& model, const Tensor<T>& z, const PartMask& mask, const std::string& class_id = {}) {
  const auto& c = model.config();
  Tape<T> tape;
  const Tensor<T> m = mask_tensor<T>(std::span<const PartMask>(&mask, 1), c.k);
  const auto d = model.generate(tape, tape.constant(z), m);
  return decoded_to_samples(d, m, c.resolution, class_id).front();
}

template <class T>
ShapeSample reconstruct(const SagNet<T>& model, const ShapeSample& s) {
  return decode(model, encode_mu(model, s), s.mask, s.class_id);
}

inline ShapeSample binarized(ShapeSample s) {
  for (auto& g : s.parts) g = binarize(g);
  return s;
}

// ---------------------------------------------------------------------------
// Sampling.
// ---------------------------------------------------------------------------

struct SampleOptions {
  std::size_t count = 1000;
  std::uint64_t seed = 1;
  std::optional<PartMask> fixed_mask;  ///< otherwise drawn from the mask prior
  unsigned threads = 1;
  bool binarize = true;
  std::string class_id;
};

struct SampleResult {
  std::vector<ShapeSample> shapes;
  std::vector<std::vector<double>> latents;
};

/// z ~ N(0, I) per shape, mask from the prior (or fixed), decoded.
template <class T>
SampleResult sample_shapes(const SagNet<T>& model, const MaskPrior& prior, const SampleOptions& opt) {
  const std::size_t zdim = model.config().latent_dim;
  Rng zrng(derive_seed(opt.seed, SeedStream::kSampling, 0));
  Rng mrng(derive_seed(opt.seed, SeedStream::kSampling, 1));
  std::normal_distribution<double> gauss(0.0, 1.0);
  SampleResult out;
  std::vector<PartMask> masks;
  for (std::size_t n = 0; n < opt.count; ++n) {
    std::vector<double> z(zdim);
    for (auto& v : z) v = gauss(zrng);
    out.latents.push_back(std::move(z));
    masks.push_back(opt.fixed_mask ? *opt.fixed_mask : prior.draw(mrng));
  }
  out.shapes.resize(opt.count);
  parallel_for(opt.count, opt.threads, [&](std::size_t n) {
    Tensor<T> z({1, zdim});
    for (std::size_t d = 0; d < zdim; ++d) z[d] = static_cast<T>(out.latents[n][d]);
    ShapeSample s = decode(model, z, masks[n], opt.class_id);
    out.shapes[n] = opt.binarize ? binarized(std::move(s)) : std::move(s);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Interpolation.
// ---------------------------------------------------------------------------

/// Decodes z_t = (1 - t) z_a + t z_b at `steps` uniform t in [0, 1], endpoints
/// included. Each endpoint is decoded under its own sample's mask; intermediate
/// shapes use the union of both masks.
template <class T>
std::vector<ShapeSample> interpolate(const SagNet<T>& model, const ShapeSample& a, const ShapeSample& b, std::size_t steps) {
  if (steps < 2) throw ContractError("interpolate: need at least 2 steps");
  const Tensor<T> za = encode_mu(model, a), zb = encode_mu(model, b);
  PartMask both = a.mask;
  for (std::size_t i = 0; i < both.size(); ++i) both.flags[i] = (a.mask.present(i) || b.mask.present(i)) ? 1 : 0;
  std::vector<ShapeSample> out;
  for (std::size_t s = 0; s < steps; ++s) {
    if (s == 0) {
      out.push_back(decode(model, za, a.mask, a.class_id));
      continue;
    }
    if (s == steps - 1) {
      out.push_back(decode(model, zb, b.mask, b.class_id));
      continue;
    }
    const T t = static_cast<T>(static_cast<double>(s) / static_cast<double>(steps - 1));
    Tensor<T> z(za.dims());
    for (std::size_t d = 0; d < z.size(); ++d) z[d] = (T(1) - t) * za[d] + t * zb[d];
    out.push_back(decode(model, z, both, a.class_id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feedback loops.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kFeedbackIterations = 300;
inline constexpr double kInitExtentMin = 0.1;
inline constexpr double kInitExtentMax = 0.5;

inline VoxelGrid random_voxels(std::uint32_t r, Rng& rng) {
  VoxelGrid g(r);
  std::bernoulli_distribution coin(0.5);
  for (std::uint32_t z = 0; z < r; ++z)
    for (std::uint32_t y = 0; y < r; ++y)
      for (std::uint32_t x = 0; x < r; ++x) g.at(x, y, z) = coin(rng) ? 1.0F : 0.0F;
  return g;
}

inline Box6 random_box(Rng& rng) {
  std::uniform_real_distribution<double> centre(0.0, 1.0), extent(kInitExtentMin, kInitExtentMax);
  Box6 b;
  for (int a = 0; a < 3; ++a) b.center[a] = static_cast<float>(centre(rng));
  for (int a = 0; a < 3; ++a) b.extents[a] = static_cast<float>(extent(rng));
  return b;
}

struct CompletionProblem {
  ShapeSample partial;
  std::set<std::size_t> missing;
  std::size_t iterations = kFeedbackIterations;
};

struct FeedbackResult {
  ShapeSample sample;
  std::vector<double> change_norms;  ///< per iteration, over the overwritten values
  std::optional<double> error;       ///< mapping error against the input, when defined
};

namespace detail {

inline double overwrite_voxels(VoxelGrid& dst, const VoxelGrid& src) {
  const VoxelGrid b = binarize(src);
  double acc = 0.0;
  auto d = dst.values();
  auto s = b.values();
  for (std::size_t c = 0; c < d.size(); ++c) {
    const double diff = static_cast<double>(s[c]) - d[c];
    acc += diff * diff;
  }
  dst = b;
  return acc;
}

inline double overwrite_box(Box6& dst, const Box6& src) {
  const double d = metrics::box_distance(dst, src);
  dst = src;
  return d * d;
}

inline void require_finite(const ShapeSample& s, const char* what) {
  for (const auto& g : s.parts)
    for (float v : g.values())
      if (!std::isfinite(v)) throw NumericFault(std::string(what) + ": non-finite voxel value");
  for (const auto& b : s.boxes)
    for (float v : b.to_array())
      if (!std::isfinite(v)) throw NumericFault(std::string(what) + ": non-finite box value");
}

}  // namespace detail

/// Fills the missing parts by repeatedly encoding the whole shape, decoding it,
/// and overwriting only the missing parts (voxels thresholded at 0.5).
template <class T>
FeedbackResult complete(const SagNet<T>& model, const CompletionProblem& problem, std::uint64_t seed) {
  const ShapeSample& in = problem.partial;
  const std::size_t k = in.parts.size();
  if (k != model.config().k) throw ContractError("complete: sample k does not match the model");
  FeedbackResult res;
  res.sample = in;
  if (problem.missing.empty()) return res;
  for (auto i : problem.missing)
    if (i >= k) throw ContractError("complete: missing part index out of range");
  if (problem.missing.size() == k) throw ContractError("complete: every part is missing; sample from the prior instead");

  Rng rng(derive_seed(seed, SeedStream::kSampling, 7));
  ShapeSample& s = res.sample;
  for (auto i : problem.missing) {
    s.mask.flags[i] = 1;
    s.parts[i] = random_voxels(in.resolution(), rng);
    s.boxes[i] = random_box(rng);
  }
  for (std::size_t it = 0; it < problem.iterations; ++it) {
    const ShapeSample out = reconstruct(model, s);
    detail::require_finite(out, "complete");
    double change = 0.0;
    for (auto i : problem.missing) {
      change += detail::overwrite_voxels(s.parts[i], out.parts[i]);
      change += detail::overwrite_box(s.boxes[i], out.boxes[i]);
    }
    res.change_norms.push_back(std::sqrt(change));
  }
  return res;
}

enum class Direction { kGeometryToStructure, kStructureToGeometry };

inline Direction parse_direction(const std::string& s) {
  if (s == "g2s" || s == "G2S") return Direction::kGeometryToStructure;
  if (s == "s2g" || s == "S2G") return Direction::kStructureToGeometry;
  throw ContractError("map: direction must be g2s or s2g, got '" + s + "'");
}

/// Recovers the unknown modality of every present part: boxes for G2S, voxels
/// for S2G. The error is the mean box L2 (G2S) or the summed part Chamfer
/// distance (S2G) against the input.
template <class T>
FeedbackResult map_modality(const SagNet<T>& model, const ShapeSample& truth, Direction dir, std::size_t iterations,
                            std::uint64_t seed) {
  const std::size_t k = truth.parts.size();
  if (k != model.config().k) throw ContractError("map: sample k does not match the model");
  if (!truth.mask.any()) throw ContractError("map: sample has no present parts");
  Rng rng(derive_seed(seed, SeedStream::kSampling, 8));
  FeedbackResult res;
  res.sample = truth;
  ShapeSample& s = res.sample;
  for (std::size_t i = 0; i < k; ++i) {
    if (!s.mask.present(i)) continue;
    if (dir == Direction::kGeometryToStructure) s.boxes[i] = random_box(rng);
    else s.parts[i] = random_voxels(truth.resolution(), rng);
  }
  for (std::size_t it = 0; it < iterations; ++it) {
    const ShapeSample out = reconstruct(model, s);
    detail::require_finite(out, "map");
    double change = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!s.mask.present(i)) continue;
      if (dir == Direction::kGeometryToStructure) change += detail::overwrite_box(s.boxes[i], out.boxes[i]);
      else change += detail::overwrite_voxels(s.parts[i], out.parts[i]);
    }
    res.change_norms.push_back(std::sqrt(change));
  }
  double err = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!s.mask.present(i)) continue;
    if (dir == Direction::kGeometryToStructure) {
      err += metrics::box_distance(s.boxes[i], truth.boxes[i]);
      ++n;
    } else {
      err += metrics::chamfer(metrics::part_points(s, i), metrics::part_points(truth, i));
    }
  }
  res.error = dir == Direction::kGeometryToStructure ? err / static_cast<double>(n) : err;
  return res;
}

// ---------------------------------------------------------------------------
// OBJ export: one cube per occupied voxel, one group per part.
// ---------------------------------------------------------------------------

inline void write_obj(std::ostream& os, const ShapeSample& s) {
  os << std::setprecision(9);
  os << "# " << (s.class_id.empty() ? "shape" : s.class_id) << "\n";
  std::size_t base = 1;
  static constexpr int kFaces[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1}, {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  for (std::size_t i = 0; i < s.parts.size(); ++i) {
    if (!s.mask.present(i)) continue;
    os << "g part_" << i << "\n";
    const VoxelGrid g = s.parts[i].is_binary() ? s.parts[i] : binarize(s.parts[i]);
    const auto r = g.resolution();
    const Box6& b = s.boxes[i];
    std::array<double, 3> cell{};
    for (int a = 0; a < 3; ++a) cell[a] = static_cast<double>(b.extents[a]) / r;
    for (std::uint32_t z = 0; z < r; ++z)
      for (std::uint32_t y = 0; y < r; ++y)
        for (std::uint32_t x = 0; x < r; ++x) {
          if (g.at(x, y, z) != 1.0F) continue;
          const std::array<std::uint32_t, 3> idx{x, y, z};
          for (int v = 0; v < 8; ++v) {
            os << 'v';
            for (int a = 0; a < 3; ++a) os << ' ' << b.min(a) + (idx[a] + ((v >> a) & 1)) * cell[a];
            os << '\n';
          }
          for (const auto& f : kFaces) os << "f " << base + f[0] << ' ' << base + f[1] << ' ' << base + f[2] << ' ' << base + f[3] << '\n';
          base += 8;
        }
  }
}

inline void write_obj(const std::filesystem::path& path, const ShapeSample& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  write_obj(os, s);
}

}  // namespace sagnet::tasks
