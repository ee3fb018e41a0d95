#pragma once

// Procedural tenon-mortise joints.
//
// Part 0 is the tenon: a solid box, so its grid is all ones. Part 1 is the
// mortise: a solid block whose grid has a box-shaped cavity opening onto one
// or two faces. The cavity is laid out on whole cells of the mortise grid and
// the tenon box is exactly the cavity's world-space extent, so the two parts
// fit without a single voxel of overlap or gap.
//
// Connection modes:
//   0 +x face   1 -x face   2 +y face   3 -y face   4 +z face   5 -z face
//   6 notch on the (+x, +z) edge        7 notch on the (-x, +z) edge
// Mirroring across the x mid-plane swaps 0<->1 and 6<->7.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sagnet/common.hpp"
#include "sagnet/shapes.hpp"

namespace sagnet::joints {

inline constexpr int kModeCount = 8;
inline constexpr std::size_t kTenon = 0;
inline constexpr std::size_t kMortise = 1;
inline constexpr const char* kClassName = "joint";
/// World voxels spanning one unit of normalized shape coordinates.
inline constexpr double kWorldUnit = 24.0;

class SpecError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct JointSpec {
  int mode = 0;
  std::uint32_t resolution = 16;
  /// Mortise block size in world voxels per axis.
  std::array<int, 3> block_size{20, 20, 20};
  /// Cavity (= tenon) extent per axis in mortise-grid cells. For face modes the
  /// entry axis holds the insertion depth.
  std::array<int, 3> tenon_size{10, 6, 6};
  /// Cell offsets on the contact face: the two non-entry axes in ascending order
  /// for face modes; offset[0] positions the notch along y for notch modes.
  std::array<int, 2> tenon_offset{4, 4};

  friend bool operator==(const JointSpec&, const JointSpec&) = default;
};

/// Entry axis and direction for face modes.
inline int entry_axis(int mode) { return mode / 2; }
inline bool entry_positive(int mode) { return mode % 2 == 0; }
inline bool is_notch(int mode) { return mode >= 6; }

inline std::array<int, 2> face_axes(int axis) {
  switch (axis) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    default: return {0, 1};
  }
}

/// Half-open cell range [lo, hi) of the cavity along each axis.
inline std::array<std::array<int, 2>, 3> cavity_cells(const JointSpec& spec) {
  const int r = static_cast<int>(spec.resolution);
  std::array<std::array<int, 2>, 3> c{};
  if (!is_notch(spec.mode)) {
    const int a = entry_axis(spec.mode);
    const int depth = spec.tenon_size[a];
    c[a] = entry_positive(spec.mode) ? std::array<int, 2>{r - depth, r} : std::array<int, 2>{0, depth};
    const auto f = face_axes(a);
    for (int n = 0; n < 2; ++n) c[f[n]] = {spec.tenon_offset[n], spec.tenon_offset[n] + spec.tenon_size[f[n]]};
  } else {
    const int dx = spec.tenon_size[0];
    c[0] = spec.mode == 6 ? std::array<int, 2>{r - dx, r} : std::array<int, 2>{0, dx};
    c[2] = {r - spec.tenon_size[2], r};
    c[1] = {spec.tenon_offset[0], spec.tenon_offset[0] + spec.tenon_size[1]};
  }
  return c;
}

inline void validate(const JointSpec& spec) {
  if (spec.mode < 0 || spec.mode >= kModeCount) throw SpecError("JointSpec: mode must be in 0..7");
  if (spec.resolution < 4) throw SpecError("JointSpec: resolution must be at least 4");
  for (int s : spec.block_size)
    if (s <= 0 || s > static_cast<int>(kWorldUnit)) throw SpecError("JointSpec: block size must be in 1..24 voxels");
  const int r = static_cast<int>(spec.resolution);
  const auto cells = cavity_cells(spec);
  for (int a = 0; a < 3; ++a) {
    if (spec.tenon_size[a] <= 0) throw SpecError("JointSpec: tenon size must be positive");
    if (spec.tenon_size[a] >= r) throw SpecError("JointSpec: tenon larger than block along axis " + std::to_string(a));
    if (cells[a][0] < 0 || cells[a][1] > r) throw SpecError("JointSpec: tenon offset outside the block");
  }
  // The tenon footprint must stay strictly inside the contact face.
  if (!is_notch(spec.mode)) {
    for (int a : face_axes(entry_axis(spec.mode)))
      if (cells[a][0] < 1 || cells[a][1] > r - 1) throw SpecError("JointSpec: tenon must lie strictly inside the face");
  } else if (cells[1][0] < 1 || cells[1][1] > r - 1) {
    throw SpecError("JointSpec: notch must lie strictly inside the block along y");
  }
}

/// Box of the whole mortise block, centered in the unit cube.
inline Box6 block_box(const JointSpec& spec) {
  Box6 b;
  for (int a = 0; a < 3; ++a) {
    b.center[a] = 0.5F;
    b.extents[a] = static_cast<float>(spec.block_size[a] / kWorldUnit);
  }
  return b;
}

inline ShapeSample generate_joint(const JointSpec& spec) {
  validate(spec);
  const auto r = spec.resolution;
  const auto cells = cavity_cells(spec);

  ShapeSample s;
  s.class_id = kClassName;
  s.mask = PartMask::all(2);

  VoxelGrid mortise(r, 1.0F);
  for (int z = cells[2][0]; z < cells[2][1]; ++z)
    for (int y = cells[1][0]; y < cells[1][1]; ++y)
      for (int x = cells[0][0]; x < cells[0][1]; ++x) mortise.at(x, y, z) = 0.0F;

  Box6 tenon_box;
  for (int a = 0; a < 3; ++a) {
    const double ext = spec.block_size[a] / kWorldUnit;
    const double lo = 0.5 - 0.5 * ext + ext * cells[a][0] / r;
    const double hi = 0.5 - 0.5 * ext + ext * cells[a][1] / r;
    tenon_box.center[a] = static_cast<float>(0.5 * (lo + hi));
    tenon_box.extents[a] = static_cast<float>(hi - lo);
  }

  s.parts = {VoxelGrid(r, 1.0F), std::move(mortise)};
  s.boxes = {tenon_box, block_box(spec)};
  return s;
}

/// The spec of the same joint reflected across the block's x mid-plane.
inline JointSpec mirror_x(JointSpec spec) {
  const int r = static_cast<int>(spec.resolution);
  switch (spec.mode) {
    case 0: spec.mode = 1; break;
    case 1: spec.mode = 0; break;
    case 6: spec.mode = 7; break;
    case 7: spec.mode = 6; break;
    default:
      // y/z faces: x is the first face axis.
      spec.tenon_offset[0] = r - spec.tenon_offset[0] - spec.tenon_size[0];
      break;
  }
  return spec;
}

/// Uniform ranges used by the random generator, in cells of the mortise grid.
struct JointRanges {
  int block_min = 16;
  int block_max = 24;
  double cross_min = 0.25;  ///< tenon cross-section, fraction of the face side
  double cross_max = 0.50;
  double depth_min = 0.40;  ///< protrusion length, fraction of the block side
  double depth_max = 0.80;
};

inline JointSpec random_spec(Rng& rng, int mode, std::uint32_t resolution, const JointRanges& ranges = {}) {
  const int r = static_cast<int>(resolution);
  auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, std::max(lo, hi))(rng); };
  const int cross_lo = std::max(1, static_cast<int>(std::ceil(ranges.cross_min * r)));
  const int cross_hi = std::max(cross_lo, static_cast<int>(std::floor(ranges.cross_max * r)));
  const int depth_lo = std::max(1, static_cast<int>(std::ceil(ranges.depth_min * r)));
  const int depth_hi = std::min(r - 1, std::max(depth_lo, static_cast<int>(std::floor(ranges.depth_max * r))));

  JointSpec spec;
  spec.mode = mode;
  spec.resolution = resolution;
  for (auto& b : spec.block_size) b = uniform_int(ranges.block_min, ranges.block_max);
  if (!is_notch(mode)) {
    const int a = entry_axis(mode);
    spec.tenon_size[a] = uniform_int(depth_lo, depth_hi);
    const auto f = face_axes(a);
    for (int n = 0; n < 2; ++n) {
      spec.tenon_size[f[n]] = uniform_int(cross_lo, std::min(cross_hi, r - 2));
      spec.tenon_offset[n] = uniform_int(1, r - 1 - spec.tenon_size[f[n]]);
    }
  } else {
    spec.tenon_size[0] = uniform_int(depth_lo, depth_hi);
    spec.tenon_size[2] = uniform_int(depth_lo, depth_hi);
    spec.tenon_size[1] = uniform_int(cross_lo, std::min(cross_hi, r - 2));
    spec.tenon_offset = {uniform_int(1, r - 1 - spec.tenon_size[1]), 0};
  }
  return spec;
}

struct JointDataset {
  std::vector<ShapeSample> samples;
  std::vector<std::uint8_t> labels;
  std::vector<JointSpec> specs;
};

/// count joints; sample i is a pure function of (seed, i). With `stratified`
/// the modes cycle 0..7 instead of being drawn uniformly.
inline JointDataset generate_dataset(std::size_t count, std::uint64_t seed, std::uint32_t resolution = 16,
                                     bool stratified = false, unsigned threads = 1, const JointRanges& ranges = {}) {
  if (count < 1) throw ContractError("generate_dataset: count must be at least 1");
  JointDataset ds;
  ds.samples.resize(count);
  ds.labels.resize(count);
  ds.specs.resize(count);
  parallel_for(count, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, SeedStream::kData, i));
    const int mode = stratified ? static_cast<int>(i % kModeCount) : std::uniform_int_distribution<int>(0, kModeCount - 1)(rng);
    ds.specs[i] = random_spec(rng, mode, resolution, ranges);
    ds.samples[i] = generate_joint(ds.specs[i]);
    ds.labels[i] = static_cast<std::uint8_t>(mode);
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Fit oracle.
// ---------------------------------------------------------------------------

/// Both parts resampled onto one grid spanning the union of their boxes.
struct WorldGrid {
  std::uint32_t resolution = 0;
  Box6 bounds;
  VoxelGrid tenon;    ///< tenon occupancy
  VoxelGrid mortise;  ///< mortise occupancy
  VoxelGrid inside_mortise_box;
  bool degenerate = false;
};

namespace detail {

inline bool valid_box(const Box6& b) {
  for (float e : b.extents)
    if (!(e > 0.0F) || !std::isfinite(e)) return false;
  for (float c : b.center)
    if (!std::isfinite(c)) return false;
  return true;
}

inline bool occupied_at(const VoxelGrid& g, const Box6& b, const Point3& p) {
  if (!b.contains(p)) return false;
  const auto r = g.resolution();
  std::array<std::uint32_t, 3> idx{};
  for (int a = 0; a < 3; ++a) {
    const double f = (p[a] - b.min(a)) / b.extents[a] * r;
    idx[a] = static_cast<std::uint32_t>(std::clamp(static_cast<long>(std::floor(f)), 0L, static_cast<long>(r) - 1));
  }
  return g.at(idx[0], idx[1], idx[2]) >= 0.5F;
}

}  // namespace detail

/// Resamples a 2-part sample into a common grid of `resolution` cells per axis
/// (0 = the sample's own resolution).
inline WorldGrid world_grid(const ShapeSample& s, std::uint32_t resolution = 0) {
  if (s.parts.size() != 2) throw ContractError("world_grid: joints have exactly 2 parts, got " + std::to_string(s.parts.size()));
  const auto r = resolution != 0 ? resolution : s.resolution();
  WorldGrid w;
  w.resolution = r;
  w.tenon = VoxelGrid(r);
  w.mortise = VoxelGrid(r);
  w.inside_mortise_box = VoxelGrid(r);

  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < 2; ++i)
    if (s.mask.present(i) && detail::valid_box(s.boxes[i])) live.push_back(i);
  if (live.empty()) {
    w.degenerate = true;
    return w;
  }
  std::array<double, 3> lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
  for (auto i : live)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], s.boxes[i].min(a));
      hi[a] = std::max(hi[a], s.boxes[i].max(a));
    }
  Box6 bounds;
  for (int a = 0; a < 3; ++a) {
    bounds.center[a] = static_cast<float>(0.5 * (lo[a] + hi[a]));
    bounds.extents[a] = static_cast<float>(hi[a] - lo[a]);
  }
  w.bounds = bounds;

  const bool tenon_live = s.mask.present(kTenon) && detail::valid_box(s.boxes[kTenon]);
  const bool mortise_live = s.mask.present(kMortise) && detail::valid_box(s.boxes[kMortise]);
  for (std::uint32_t z = 0; z < r; ++z)
    for (std::uint32_t y = 0; y < r; ++y)
      for (std::uint32_t x = 0; x < r; ++x) {
        Point3 p{};
        const std::array<std::uint32_t, 3> idx{x, y, z};
        for (int a = 0; a < 3; ++a) p[a] = lo[a] + (idx[a] + 0.5) / r * (hi[a] - lo[a]);
        if (tenon_live && detail::occupied_at(s.parts[kTenon], s.boxes[kTenon], p)) w.tenon.at(x, y, z) = 1.0F;
        if (mortise_live) {
          if (s.boxes[kMortise].contains(p)) w.inside_mortise_box.at(x, y, z) = 1.0F;
          if (detail::occupied_at(s.parts[kMortise], s.boxes[kMortise], p)) w.mortise.at(x, y, z) = 1.0F;
        }
      }
  return w;
}

struct FitScores {
  double r_o = 0.0;  ///< share of mortise material overlapped by tenon material
  double r_e = 0.0;  ///< share of the mortise cavity filled by tenon material
  bool degenerate = false;
  double r() const { return 1.0 - (r_e - r_o); }
};

/// Exact fit scores of a binary 2-part joint on the shared world grid.
inline FitScores fit_oracle(const ShapeSample& s) {
  if (s.parts.size() != 2) throw ContractError("fit_oracle: expected k=2, got k=" + std::to_string(s.parts.size()));
  for (const auto& g : s.parts)
    if (!g.is_binary()) throw ContractError("fit_oracle: voxels must be binary");
  const WorldGrid w = world_grid(s);
  FitScores f;
  f.degenerate = w.degenerate;
  if (w.degenerate) return f;

  std::size_t mortise_occ = 0, overlap = 0, cavity = 0, filled = 0, tenon_occ = 0;
  auto t = w.tenon.values();
  auto m = w.mortise.values();
  auto in = w.inside_mortise_box.values();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const bool tv = t[i] != 0.0F;
    const bool mv = m[i] != 0.0F;
    tenon_occ += tv ? 1 : 0;
    if (mv) {
      ++mortise_occ;
      overlap += tv ? 1 : 0;
    } else if (in[i] != 0.0F) {
      ++cavity;
      filled += tv ? 1 : 0;
    }
  }
  if (mortise_occ > 0) f.r_o = static_cast<double>(overlap) / static_cast<double>(mortise_occ);
  if (cavity > 0) f.r_e = static_cast<double>(filled) / static_cast<double>(cavity);
  f.degenerate = mortise_occ == 0 || cavity == 0 || tenon_occ == 0;
  return f;
}

}  // namespace sagnet::joints
