#pragma once

// Evaluation metrics: point-cloud distances, shape distance, part-wise MMD/COV,
// symmetry and coplanarity scores, joint cavity scores, a mode classifier with
// an inception-style score, and nearest-neighbour retrieval.
//
// Point clouds live in normalized shape coordinates: one point per occupied
// voxel centre, placed inside the part's box.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "sagnet/common.hpp"
#include "sagnet/layers.hpp"
#include "sagnet/shapes.hpp"
#include "sagnet/synthjoints.hpp"

namespace sagnet::metrics {

using Cloud = std::vector<Point3>;

enum class Ground { kChamfer, kEmd };

inline constexpr std::size_t kChamferBudget = 256;
inline constexpr std::size_t kEmdBudget = 64;
inline constexpr std::size_t kEmdMaxPoints = 256;

struct EvalPointCloud {
  Cloud points;
  std::vector<std::uint32_t> part_id;
};

inline double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Points of one part, thresholded at 0.5. An empty grid collapses to its box centre.
inline Cloud part_points(const ShapeSample& s, std::size_t i) {
  const VoxelGrid& g = s.parts.at(i);
  Cloud pts = voxel_to_points(g.is_binary() ? g : binarize(g), s.boxes.at(i));
  if (pts.empty()) pts.push_back({s.boxes[i].center[0], s.boxes[i].center[1], s.boxes[i].center[2]});
  return pts;
}

inline EvalPointCloud point_cloud(const ShapeSample& s) {
  EvalPointCloud c;
  for (std::size_t i = 0; i < s.parts.size(); ++i) {
    if (!s.mask.present(i)) continue;
    for (const auto& p : part_points(s, i)) {
      c.points.push_back(p);
      c.part_id.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return c;
}

/// Deterministic evenly strided resampling to exactly n points (repeats when n > |pts|).
inline Cloud resample_strided(const Cloud& pts, std::size_t n) {
  if (pts.empty()) throw ContractError("resample: empty cloud");
  Cloud out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = pts[i * pts.size() / n];
  return out;
}

/// Uniform resampling with replacement.
inline Cloud resample_uniform(const Cloud& pts, std::size_t n, Rng& rng) {
  if (pts.empty()) throw ContractError("resample: empty cloud");
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  Cloud out(n);
  for (auto& p : out) p = pts[pick(rng)];
  return out;
}

namespace detail {

inline double directed_chamfer(std::span<const Point3> a, std::span<const Point3> b) {
  double acc = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    acc += std::sqrt(best);
  }
  return acc;
}

}  // namespace detail

/// Summed symmetric nearest-neighbour distance.
inline double chamfer(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) throw ContractError("chamfer: empty point cloud");
  return detail::directed_chamfer(a, b) + detail::directed_chamfer(b, a);
}

inline double chamfer(const EvalPointCloud& a, const EvalPointCloud& b) { return chamfer(a.points, b.points); }

/// Minimum-cost assignment of rows to columns for a square cost matrix
/// (Hungarian method with potentials, O(n^3)). Returns the column for each row.
inline std::vector<std::size_t> solve_assignment(const Eigen::MatrixXd& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw ContractError("solve_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

/// Exact earth mover's distance between equal-size clouds: total Euclidean
/// cost of the minimum perfect matching.
inline double emd(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.size() != b.size()) throw ContractError("emd: cloud sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw ContractError("emd: empty point cloud");
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) cost(i, j) = distance(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(j)]);
  const auto match = solve_assignment(cost);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) total += cost(i, static_cast<Eigen::Index>(match[static_cast<std::size_t>(i)]));
  return total;
}

/// EMD after resampling both clouds uniformly with replacement to n points.
inline double emd_resampled(const Cloud& a, const Cloud& b, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n > kEmdMaxPoints) throw ContractError("emd: point budget must be in [1, 256]");
  // Each side draws from its own stream so equal clouds get equal subsets.
  Rng rng_a(seed), rng_b(seed);
  const Cloud ra = resample_uniform(a, n, rng_a);
  const Cloud rb = resample_uniform(b, n, rng_b);
  return emd(ra, rb);
}

struct DistanceOptions {
  Ground ground = Ground::kChamfer;
  std::size_t chamfer_points = kChamferBudget;
  std::size_t emd_points = kEmdBudget;
  std::uint64_t seed = 0;
};

inline double box_distance(const Box6& a, const Box6& b) {
  const auto x = a.to_array(), y = b.to_array();
  double acc = 0.0;
  for (std::size_t c = 0; c < 6; ++c) {
    const double d = static_cast<double>(x[c]) - y[c];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double cloud_distance(const Cloud& a, const Cloud& b, const DistanceOptions& opt) {
  if (opt.ground == Ground::kEmd) return emd_resampled(a, b, opt.emd_points, opt.seed);
  return chamfer(resample_strided(a, opt.chamfer_points), resample_strided(b, opt.chamfer_points));
}

/// Box distance plus point-cloud distance between part i of x and part j of y.
inline double part_distance(const ShapeSample& x, std::size_t i, const ShapeSample& y, std::size_t j, const DistanceOptions& opt = {}) {
  return box_distance(x.boxes.at(i), y.boxes.at(j)) + cloud_distance(part_points(x, i), part_points(y, j), opt);
}

/// Sum over parts present in both shapes of box L2 plus point-cloud distance.
inline double shape_distance(const ShapeSample& x, const ShapeSample& y, const DistanceOptions& opt = {}) {
  if (x.parts.size() != y.parts.size()) throw ContractError("shape_distance: part counts differ");
  double d = 0.0;
  for (std::size_t i = 0; i < x.parts.size(); ++i)
    if (x.mask.present(i) && y.mask.present(i)) d += part_distance(x, i, y, i, opt);
  return d;
}

// ---------------------------------------------------------------------------
// Minimum matching distance and coverage over parts.
// ---------------------------------------------------------------------------

struct MmdCov {
  double mmd = 0.0;
  double cov = 0.0;
};

/// Parts are compared slot by slot. COV: every generated part is matched to its
/// nearest training part; the share of training shapes that own a matched part.
/// MMD: per training shape, the mean over its parts of the nearest generated
/// part distance, averaged over training shapes.
inline MmdCov mmd_cov(std::span<const ShapeSample> generated, std::span<const ShapeSample> training, const DistanceOptions& opt = {},
                      unsigned threads = 1) {
  if (generated.empty() || training.empty()) throw ContractError("mmd_cov: empty shape list");
  const std::size_t k = training.front().parts.size();
  for (const auto& s : generated)
    if (s.parts.size() != k) throw ContractError("mmd_cov: part counts differ");
  for (const auto& s : training)
    if (s.parts.size() != k) throw ContractError("mmd_cov: part counts differ");

  const std::size_t ng = generated.size(), nt = training.size();
  const double inf = std::numeric_limits<double>::infinity();
  // dist[slot][g * nt + t]
  std::vector<std::vector<double>> dist(k, std::vector<double>(ng * nt, inf));
  parallel_for(ng, threads, [&](std::size_t g) {
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t i = 0; i < k; ++i)
        if (generated[g].mask.present(i) && training[t].mask.present(i))
          dist[i][g * nt + t] = part_distance(generated[g], i, training[t], i, opt);
  });

  std::vector<char> covered(nt, 0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t g = 0; g < ng; ++g) {
      if (!generated[g].mask.present(i)) continue;
      std::size_t best = nt;
      double bd = inf;
      for (std::size_t t = 0; t < nt; ++t)
        if (dist[i][g * nt + t] < bd) {
          bd = dist[i][g * nt + t];
          best = t;
        }
      if (best < nt) covered[best] = 1;
    }

  double mmd_sum = 0.0;
  std::size_t scored = 0;
  for (std::size_t t = 0; t < nt; ++t) {
    double acc = 0.0;
    std::size_t parts = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!training[t].mask.present(i)) continue;
      double bd = inf;
      for (std::size_t g = 0; g < ng; ++g) bd = std::min(bd, dist[i][g * nt + t]);
      if (std::isfinite(bd)) {
        acc += bd;
        ++parts;
      }
    }
    if (parts > 0) {
      mmd_sum += acc / static_cast<double>(parts);
      ++scored;
    }
  }
  MmdCov out;
  out.mmd = scored > 0 ? mmd_sum / static_cast<double>(scored) : 0.0;
  out.cov = static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(nt);
  return out;
}

// ---------------------------------------------------------------------------
// Symmetry and coplanarity.
// ---------------------------------------------------------------------------

struct MirrorPlane {
  int axis = 0;
  double offset = 0.5;
};

/// The x mid-plane of the union of the present parts' boxes.
inline MirrorPlane default_mirror_plane(const ShapeSample& s) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < s.parts.size(); ++i) {
    if (!s.mask.present(i)) continue;
    lo = std::min(lo, s.boxes[i].min(0));
    hi = std::max(hi, s.boxes[i].max(0));
  }
  if (!std::isfinite(lo)) throw ContractError("mirror plane: no present parts");
  return {0, 0.5 * (lo + hi)};
}

/// Part i reflected across the plane: the box centre is mirrored and the grid flipped.
inline std::pair<VoxelGrid, Box6> reflect_part(const ShapeSample& s, std::size_t i, const MirrorPlane& plane) {
  if (plane.axis < 0 || plane.axis > 2) throw ContractError("reflect_part: axis must be 0, 1 or 2");
  const VoxelGrid& g = s.parts.at(i);
  const auto r = g.resolution();
  VoxelGrid out(r);
  for (std::uint32_t z = 0; z < r; ++z)
    for (std::uint32_t y = 0; y < r; ++y)
      for (std::uint32_t x = 0; x < r; ++x) {
        std::array<std::uint32_t, 3> src{x, y, z};
        src[static_cast<std::size_t>(plane.axis)] = r - 1 - src[static_cast<std::size_t>(plane.axis)];
        out.at(x, y, z) = g.at(src[0], src[1], src[2]);
      }
  Box6 b = s.boxes[i];
  b.center[static_cast<std::size_t>(plane.axis)] =
      static_cast<float>(2.0 * plane.offset - static_cast<double>(b.center[static_cast<std::size_t>(plane.axis)]));
  return {std::move(out), b};
}

/// Distance between part i mirrored across the plane and part j.
inline double symmetry_score(const ShapeSample& s, std::size_t i, std::size_t j, const MirrorPlane& plane,
                             const DistanceOptions& opt = {}) {
  if (i >= s.parts.size() || j >= s.parts.size()) throw ContractError("symmetry_score: part index out of range");
  if (!s.mask.present(i) || !s.mask.present(j)) throw ContractError("symmetry_score: both parts must be present");
  auto [grid, box] = reflect_part(s, i, plane);
  ShapeSample tmp;
  tmp.parts = {std::move(grid), s.parts[j]};
  tmp.boxes = {box, s.boxes[j]};
  tmp.mask = PartMask::all(2);
  return part_distance(tmp, 0, tmp, 1, opt);
}

inline double symmetry_score(const ShapeSample& s, std::size_t i, std::size_t j) {
  return symmetry_score(s, i, j, default_mirror_plane(s));
}

/// Distance from the fourth box centre to the plane through the first three.
inline double coplanarity_score(const ShapeSample& s, const std::array<std::size_t, 4>& parts) {
  std::array<Eigen::Vector3d, 4> c;
  for (std::size_t n = 0; n < 4; ++n) {
    const std::size_t i = parts[n];
    if (i >= s.parts.size() || !s.mask.present(i)) throw ContractError("coplanarity_score: parts must be present");
    c[n] = Eigen::Vector3d(s.boxes[i].center[0], s.boxes[i].center[1], s.boxes[i].center[2]);
  }
  const Eigen::Vector3d e1 = c[1] - c[0], e2 = c[2] - c[0];
  const Eigen::Vector3d normal = e1.cross(e2);
  const double scale = std::max(e1.norm() * e2.norm(), 1e-300);
  // Centres are stored in single precision, so collinearity is only resolvable to ~1e-7.
  if (normal.norm() <= 1e-6 * scale) throw DegenerateGeometry("coplanarity_score: first three centroids are collinear");
  return std::abs(normal.dot(c[3] - c[0])) / normal.norm();
}

// ---------------------------------------------------------------------------
// Joint cavity scores.
// ---------------------------------------------------------------------------

struct CavityEntry {
  double r_o = 0.0;
  double r_e = 0.0;
  double r = 1.0;
  bool degenerate = false;
};

struct CavityReport {
  std::vector<CavityEntry> samples;
  double mean_r_o = 0.0;
  double mean_r_e = 0.0;
  double r_over = 0.0;  ///< mean(R_e) - mean(R_o)
  double median_r = 0.0;
  std::size_t degenerate = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Fit scores of 2-part joints after thresholding at 0.5. Degenerate samples keep
/// their guarded values (0 for an undefined ratio) and are counted.
inline CavityReport cavity_scores(std::span<const ShapeSample> samples, unsigned threads = 1) {
  if (samples.empty()) throw ContractError("cavity_scores: no samples");
  CavityReport rep;
  rep.samples.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t n) {
    ShapeSample s = samples[n];
    for (auto& g : s.parts)
      if (!g.is_binary()) g = binarize(g);
    const auto f = joints::fit_oracle(s);
    rep.samples[n] = {f.r_o, f.r_e, f.r(), f.degenerate};
  });
  std::vector<double> rs;
  for (const auto& e : rep.samples) {
    rep.mean_r_o += e.r_o;
    rep.mean_r_e += e.r_e;
    rep.degenerate += e.degenerate ? 1 : 0;
    rs.push_back(e.r);
  }
  rep.mean_r_o /= static_cast<double>(samples.size());
  rep.mean_r_e /= static_cast<double>(samples.size());
  rep.r_over = rep.mean_r_e - rep.mean_r_o;
  rep.median_r = median(std::move(rs));
  return rep;
}

/// Tenon of sample n paired with the mortise of sample (n + offset) mod N.
inline std::vector<ShapeSample> shuffled_pairs(std::span<const ShapeSample> samples, std::size_t offset = 1) {
  std::vector<ShapeSample> out;
  const std::size_t n = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    ShapeSample s = samples[i];
    const ShapeSample& other = samples[(i + offset) % n];
    s.parts[joints::kMortise] = other.parts[joints::kMortise];
    s.boxes[joints::kMortise] = other.boxes[joints::kMortise];
    s.mask.flags[joints::kMortise] = other.mask.flags[joints::kMortise];
    out.push_back(std::move(s));
  }
  return out;
}

/// Two-sided sign test p-value for paired differences; ties are dropped.
inline double sign_test_p(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("sign_test: lengths differ");
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) ++pos;
    else if (a[i] > b[i]) ++neg;
  }
  const std::size_t n = pos + neg;
  if (n == 0) return 1.0;
  const std::size_t kmin = std::min(pos, neg);
  // P(X <= kmin) for X ~ Binomial(n, 1/2), in log space
  double tail = 0.0;
  for (std::size_t k = 0; k <= kmin; ++k) {
    const double lg = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0);
    tail += std::exp(lg);
  }
  return std::min(1.0, 2.0 * tail);
}

// ---------------------------------------------------------------------------
// Mode classifier and inception-style score.
// ---------------------------------------------------------------------------

/// exp(E_x KL(p(y|x) || p(y))) over rows of class probabilities.
inline double inception_score(const std::vector<std::vector<double>>& probs) {
  if (probs.empty()) throw ContractError("inception_score: no samples");
  const std::size_t c = probs.front().size();
  std::vector<double> marginal(c, 0.0);
  for (const auto& p : probs) {
    if (p.size() != c) throw ContractError("inception_score: ragged probabilities");
    for (std::size_t j = 0; j < c; ++j) marginal[j] += p[j];
  }
  for (auto& m : marginal) m /= static_cast<double>(probs.size());
  double kl = 0.0;
  for (const auto& p : probs)
    for (std::size_t j = 0; j < c; ++j)
      if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(marginal[j]));
  return std::exp(kl / static_cast<double>(probs.size()));
}

struct ClassifierConfig {
  std::uint32_t resolution = 16;
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t train_count = 1600;
  std::size_t heldout_count = 400;
  std::size_t iterations = 1500;
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 11;
};

/// Small 3D CNN predicting the connection mode of a joint from the two-channel
/// (tenon, mortise) world grid.
class ModeClassifier {
 public:
  explicit ModeClassifier(ClassifierConfig config = {}) : config_(std::move(config)) {
    Rng rng(derive_seed(config_.seed, SeedStream::kInit));
    std::size_t cin = 2;
    for (std::size_t l = 0; l < config_.channels.size(); ++l) {
      const std::string ln = "cls.conv" + std::to_string(l);
      auto& w = store_.add(ln + ".w", {config_.channels[l], cin, kConvKernel, kConvKernel, kConvKernel});
      glorot_uniform(w, cin * kKernelTaps, config_.channels[l] * kStridedTaps, rng);
      convs_.emplace_back(&w, &store_.add(ln + ".b", {config_.channels[l]}));
      cin = config_.channels[l];
    }
    const std::size_t side = bottleneck_side(config_.resolution, config_.channels.size());
    flat_ = cin * side * side * side;
    fc_ = Linear<float>(store_, "cls.fc", flat_, joints::kModeCount, rng);
  }

  bool trained() const noexcept { return trained_; }
  double heldout_accuracy() const noexcept { return heldout_accuracy_; }
  const ClassifierConfig& config() const noexcept { return config_; }

  ad::Tensor<float> inputs(std::span<const ShapeSample> samples) const {
    const std::size_t r = config_.resolution, cells = r * r * r;
    ad::Tensor<float> x({samples.size(), 2, r, r, r});
    for (std::size_t n = 0; n < samples.size(); ++n) {
      ShapeSample s = samples[n];
      for (auto& g : s.parts)
        if (!g.is_binary()) g = binarize(g);
      const auto w = joints::world_grid(s, static_cast<std::uint32_t>(r));
      if (w.degenerate) continue;
      auto t = w.tenon.values();
      auto m = w.mortise.values();
      std::copy(t.begin(), t.end(), x.vec().begin() + static_cast<std::ptrdiff_t>((2 * n) * cells));
      std::copy(m.begin(), m.end(), x.vec().begin() + static_cast<std::ptrdiff_t>((2 * n + 1) * cells));
    }
    return x;
  }

  ad::Var<float> logits(ad::Tape<float>& tape, const ad::Tensor<float>& x) const {
    ad::Var<float> h = tape.constant(x);
    for (const auto& [w, b] : convs_) h = ad::tanh(ad::conv3d(h, tape.parameter(*w), tape.parameter(*b)));
    return fc_(tape, ad::reshape(h, {x.dim(0), flat_}));
  }

  std::vector<std::vector<double>> predict_proba(std::span<const ShapeSample> samples) const {
    if (!trained_) throw ContractError("mode classifier is not trained");
    std::vector<std::vector<double>> out;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
      const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
      ad::Tape<float> tape;
      const auto& l = logits(tape, inputs(chunk)).value();
      const std::size_t c = joints::kModeCount;
      for (std::size_t n = 0; n < chunk.size(); ++n) {
        std::vector<double> p(c);
        double mx = -std::numeric_limits<double>::infinity(), z = 0.0;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(l[n * c + j]));
        for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(l[n * c + j] - mx));
        for (auto& v : p) v /= z;
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  double accuracy(std::span<const ShapeSample> samples, std::span<const std::uint8_t> labels) const {
    const auto probs = predict_proba(samples);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < probs.size(); ++n) {
      const auto best = std::max_element(probs[n].begin(), probs[n].end()) - probs[n].begin();
      hits += best == static_cast<std::ptrdiff_t>(labels[n]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(probs.size());
  }

  /// Trains on freshly generated joints and measures held-out accuracy.
  void train() {
    const auto data = joints::generate_dataset(config_.train_count, derive_seed(config_.seed, SeedStream::kData, 0),
                                               config_.resolution, true);
    const auto heldout = joints::generate_dataset(config_.heldout_count, derive_seed(config_.seed, SeedStream::kData, 1),
                                                  config_.resolution, true);
    const ad::Tensor<float> all = inputs(data.samples);
    const std::size_t cells = all.size() / data.samples.size();
    Rng rng(derive_seed(config_.seed, SeedStream::kBatches));
    std::vector<std::size_t> order(data.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    auto params = store_.all();
    std::vector<std::vector<float>> vel;
    for (auto* p : params) vel.emplace_back(p->value.size(), 0.0F);
    const std::size_t r = config_.resolution;
    for (std::size_t it = 0; it < config_.iterations; ++it) {
      ad::Tensor<float> x({config_.batch_size, 2, r, r, r});
      std::vector<std::size_t> labels;
      for (std::size_t n = 0; n < config_.batch_size; ++n) {
        if (cursor >= order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const std::size_t idx = order[cursor++];
        std::copy_n(all.vec().begin() + static_cast<std::ptrdiff_t>(idx * cells), cells,
                    x.vec().begin() + static_cast<std::ptrdiff_t>(n * cells));
        labels.push_back(static_cast<std::size_t>(data.labels[idx]));
      }
      store_.zero_grad();
      ad::Tape<float> tape;
      auto loss = ad::softmax_xent(logits(tape, x), labels);
      tape.backward(loss);
      const float lr = static_cast<float>(config_.learning_rate), mu = static_cast<float>(config_.momentum);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& v = params[p]->value.vec();
        const auto& g = params[p]->grad.vec();
        for (std::size_t c = 0; c < v.size(); ++c) {
          vel[p][c] = mu * vel[p][c] + g[c];
          v[c] -= lr * vel[p][c];
        }
      }
    }
    trained_ = true;
    heldout_accuracy_ = accuracy(heldout.samples, heldout.labels);
  }

  void save(const std::filesystem::path& path) const { save_weights(store_, path); }
  void load(const std::filesystem::path& path, double heldout_accuracy) {
    load_weights(store_, path);
    trained_ = true;
    heldout_accuracy_ = heldout_accuracy;
  }

 private:
  ClassifierConfig config_;
  ParamStore<float> store_;
  std::vector<std::pair<ad::Parameter<float>*, ad::Parameter<float>*>> convs_;
  std::size_t flat_ = 0;
  Linear<float> fc_;
  bool trained_ = false;
  double heldout_accuracy_ = 0.0;
};

/// Inception-style score of generated joints under a trained mode classifier.
inline double inception_mode_score(std::span<const ShapeSample> generated, const ModeClassifier& classifier) {
  if (!classifier.trained()) throw ContractError("inception_mode_score: classifier is not trained");
  return inception_score(classifier.predict_proba(generated));
}

// ---------------------------------------------------------------------------
// Retrieval and curves.
// ---------------------------------------------------------------------------

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

struct Retrieval {
  std::vector<Neighbor> neighbors;
  bool clamped = false;  ///< n exceeded the dataset size
};

/// The n nearest dataset entries by shape distance, ties broken by index.
inline Retrieval knn_retrieve(const ShapeSample& query, std::span<const ShapeSample> dataset, std::size_t n = 3,
                              const DistanceOptions& opt = {}, unsigned threads = 1) {
  if (dataset.empty()) throw ContractError("knn_retrieve: empty dataset");
  Retrieval out;
  if (n > dataset.size()) {
    n = dataset.size();
    out.clamped = true;
  }
  std::vector<Neighbor> all(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) { all[i] = {i, shape_distance(query, dataset[i], opt)}; });
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
  all.resize(n);
  out.neighbors = std::move(all);
  return out;
}

/// Percentage of scores at or below each threshold.
inline std::vector<std::pair<double, double>> threshold_curve(std::span<const double> scores, std::span<const double> thresholds) {
  std::vector<std::pair<double, double>> out;
  for (double t : thresholds) {
    const auto hits = std::count_if(scores.begin(), scores.end(), [t](double s) { return s <= t; });
    out.emplace_back(t, scores.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(scores.size()));
  }
  return out;
}

inline std::string curve_csv(const std::vector<std::pair<double, double>>& curve) {
  std::ostringstream os;
  os << "threshold,percentage\n" << std::setprecision(9);
  for (const auto& [t, p] : curve) os << t << ',' << p << '\n';
  return os.str();
}

}  // namespace sagnet::metrics
