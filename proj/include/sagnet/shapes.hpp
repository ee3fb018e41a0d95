#pragma once

// Part-based shape representation and the on-disk dataset format.
//
// A shape of a class with k canonical parts is stored as k occupancy grids
// (each spanning its part's bounding box), k boxes and a presence mask.
// Pairwise structure is derived on demand from the boxes via pair_index_list.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sagnet/common.hpp"

namespace sagnet {

using Point3 = std::array<double, 3>;

/// Cubic occupancy grid, x-fastest (index = x + r * (y + r * z)).
class VoxelGrid {
 public:
  VoxelGrid() = default;
  explicit VoxelGrid(std::uint32_t resolution, float fill = 0.0F)
      : resolution_(resolution), occupancy_(static_cast<std::size_t>(resolution) * resolution * resolution, fill) {
    if (resolution == 0) throw ContractError("VoxelGrid: resolution must be positive");
  }
  VoxelGrid(std::uint32_t resolution, std::vector<float> values) : resolution_(resolution), occupancy_(std::move(values)) {
    if (resolution == 0) throw ContractError("VoxelGrid: resolution must be positive");
    if (occupancy_.size() != static_cast<std::size_t>(resolution) * resolution * resolution)
      throw ContractError("VoxelGrid: expected r^3 values");
  }

  std::uint32_t resolution() const noexcept { return resolution_; }
  std::size_t size() const noexcept { return occupancy_.size(); }

  std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const noexcept {
    return x + static_cast<std::size_t>(resolution_) * (y + static_cast<std::size_t>(resolution_) * z);
  }
  float at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const { return occupancy_[index(x, y, z)]; }
  float& at(std::uint32_t x, std::uint32_t y, std::uint32_t z) { return occupancy_[index(x, y, z)]; }

  std::span<const float> values() const noexcept { return occupancy_; }
  std::span<float> values() noexcept { return occupancy_; }

  bool is_binary() const {
    return std::all_of(occupancy_.begin(), occupancy_.end(), [](float v) { return v == 0.0F || v == 1.0F; });
  }
  std::size_t occupied_count() const {
    return static_cast<std::size_t>(std::count_if(occupancy_.begin(), occupancy_.end(), [](float v) { return v >= 0.5F; }));
  }

  friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

 private:
  std::uint32_t resolution_ = 0;
  std::vector<float> occupancy_;
};

/// Thresholds real-valued occupancies: v >= threshold -> 1, else 0.
inline VoxelGrid binarize(const VoxelGrid& grid, float threshold = 0.5F) {
  VoxelGrid out(grid.resolution());
  auto src = grid.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= threshold ? 1.0F : 0.0F;
  return out;
}

/// Axis-aligned box: center then extents (length, width, height), in normalized shape coordinates.
struct Box6 {
  std::array<float, 3> center{};
  std::array<float, 3> extents{};

  std::array<float, 6> to_array() const {
    return {center[0], center[1], center[2], extents[0], extents[1], extents[2]};
  }
  static Box6 from_array(std::span<const float> v) {
    if (v.size() != 6) throw ContractError("Box6: expected 6 values");
    return Box6{{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
  }
  double min(int axis) const { return static_cast<double>(center[axis]) - 0.5 * extents[axis]; }
  double max(int axis) const { return static_cast<double>(center[axis]) + 0.5 * extents[axis]; }
  bool contains(const Point3& p) const {
    for (int a = 0; a < 3; ++a)
      if (p[a] < min(a) || p[a] >= max(a)) return false;
    return true;
  }
  bool is_zero() const {
    return std::all_of(center.begin(), center.end(), [](float v) { return v == 0.0F; }) &&
           std::all_of(extents.begin(), extents.end(), [](float v) { return v == 0.0F; });
  }

  friend bool operator==(const Box6&, const Box6&) = default;
};

/// Presence flags of the k canonical parts.
struct PartMask {
  std::vector<std::uint8_t> flags;

  std::size_t size() const noexcept { return flags.size(); }
  bool present(std::size_t i) const { return flags.at(i) != 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(flags.begin(), flags.end(), [](std::uint8_t f) { return f != 0; }));
  }
  bool any() const { return count() > 0; }

  static PartMask all(std::size_t k) { return PartMask{std::vector<std::uint8_t>(k, 1)}; }

  friend bool operator==(const PartMask&, const PartMask&) = default;
};

struct ShapeSample {
  std::string class_id;
  std::vector<VoxelGrid> parts;
  std::vector<Box6> boxes;
  PartMask mask;

  std::size_t part_count() const noexcept { return parts.size(); }
  std::uint32_t resolution() const { return parts.empty() ? 0 : parts.front().resolution(); }

  friend bool operator==(const ShapeSample&, const ShapeSample&) = default;
};

/// A sample with k absent parts (all-zero voxels and boxes).
inline ShapeSample empty_sample(std::size_t k, std::uint32_t r, std::string class_id = {}) {
  ShapeSample s;
  s.class_id = std::move(class_id);
  s.parts.assign(k, VoxelGrid(r));
  s.boxes.assign(k, Box6{});
  s.mask.flags.assign(k, 0);
  return s;
}

/// Checks structural invariants. Absent parts must be all zeros.
inline void validate(const ShapeSample& s, bool require_binary) {
  const std::size_t k = s.parts.size();
  if (k == 0 || s.boxes.size() != k || s.mask.size() != k)
    throw ContractError("ShapeSample: parts, boxes and mask must all have k entries");
  const auto r = s.parts.front().resolution();
  for (std::size_t i = 0; i < k; ++i) {
    const auto& g = s.parts[i];
    if (g.resolution() != r) throw ContractError("ShapeSample: parts differ in resolution");
    for (float v : g.values())
      if (!std::isfinite(v)) throw ContractError("ShapeSample: non-finite voxel value");
    if (require_binary && !g.is_binary()) throw ContractError("ShapeSample: voxels must be binary");
    if (!s.mask.present(i)) {
      if (g.occupied_count() != 0 || !s.boxes[i].is_zero())
        throw ContractError("ShapeSample: absent part " + std::to_string(i) + " must be all zeros");
    }
  }
}

using PairIndex = std::vector<std::pair<std::size_t, std::size_t>>;

/// All (i, j) with i < j < k in lexicographic order; K = k(k-1)/2 entries.
inline PairIndex pair_index_list(std::size_t k) {
  if (k < 2) throw ContractError("pair_index_list: need at least 2 parts, got " + std::to_string(k));
  PairIndex pairs;
  pairs.reserve(k * (k - 1) / 2);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) pairs.emplace_back(i, j);
  return pairs;
}

/// Position of pair (i, j), i < j, within pair_index_list(k).
inline std::size_t pair_position(std::size_t k, std::size_t i, std::size_t j) {
  if (i >= j || j >= k) throw ContractError("pair_position: need i < j < k");
  return i * k - i * (i + 1) / 2 + (j - i - 1);
}

/// The 12-D structure vector of a pair: box_i followed by box_j.
inline std::array<float, 12> pair_vector(const ShapeSample& s, std::size_t i, std::size_t j) {
  std::array<float, 12> v{};
  const auto a = s.boxes.at(i).to_array();
  const auto b = s.boxes.at(j).to_array();
  std::copy(a.begin(), a.end(), v.begin());
  std::copy(b.begin(), b.end(), v.begin() + 6);
  return v;
}

/// Center of voxel (x, y, z) mapped affinely into the box volume.
inline Point3 voxel_center(const Box6& box, std::uint32_t r, std::uint32_t x, std::uint32_t y, std::uint32_t z) {
  const std::array<std::uint32_t, 3> idx{x, y, z};
  Point3 p{};
  for (int a = 0; a < 3; ++a)
    p[a] = box.min(a) + (static_cast<double>(idx[a]) + 0.5) / static_cast<double>(r) * box.extents[a];
  return p;
}

/// One point per occupied voxel of a binary grid.
inline std::vector<Point3> voxel_to_points(const VoxelGrid& grid, const Box6& box) {
  if (!grid.is_binary()) throw ContractError("voxel_to_points: grid must be binary");
  std::vector<Point3> pts;
  const auto r = grid.resolution();
  for (std::uint32_t z = 0; z < r; ++z)
    for (std::uint32_t y = 0; y < r; ++y)
      for (std::uint32_t x = 0; x < r; ++x)
        if (grid.at(x, y, z) == 1.0F) pts.push_back(voxel_center(box, r, x, y, z));
  return pts;
}

// ---------------------------------------------------------------------------
// Binary shape files and dataset directories.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kShapeMagic{'S', 'A', 'G', 'S'};
inline constexpr std::uint32_t kShapeFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xFFU));
}
inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint64_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated data", bytes_.size());
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes_[pos_ + b]) << (8 * b);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

/// Serializes one shape; voxels must be binary.
inline std::vector<std::uint8_t> encode_shape(const ShapeSample& s) {
  validate(s, /*require_binary=*/true);
  const auto k = static_cast<std::uint32_t>(s.parts.size());
  const auto r = s.resolution();
  const std::size_t cells = static_cast<std::size_t>(r) * r * r;
  const std::size_t packed = (cells + 7) / 8;

  std::vector<std::uint8_t> out;
  out.reserve(16 + k + k * 24 + k * packed);
  out.insert(out.end(), kShapeMagic.begin(), kShapeMagic.end());
  detail::put_u32(out, kShapeFormatVersion);
  detail::put_u32(out, k);
  detail::put_u32(out, r);
  for (auto f : s.mask.flags) out.push_back(f != 0 ? 1 : 0);
  for (const auto& b : s.boxes)
    for (float v : b.to_array()) detail::put_f32(out, v);
  for (const auto& g : s.parts) {
    std::vector<std::uint8_t> bits(packed, 0);
    auto vals = g.values();
    for (std::size_t i = 0; i < cells; ++i)
      if (vals[i] == 1.0F) bits[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
    out.insert(out.end(), bits.begin(), bits.end());
  }
  return out;
}

/// Parses one shape file. expected_k / expected_r of 0 skip the consistency check.
inline ShapeSample decode_shape(std::span<const std::uint8_t> bytes, std::uint32_t expected_k = 0,
                                std::uint32_t expected_r = 0, const std::string& what = "shape") {
  detail::ByteReader rd(bytes, what);
  rd.need(4);
  if (std::memcmp(bytes.data(), kShapeMagic.data(), 4) != 0) throw FormatError(what + ": bad magic", 0);
  rd.take(4);
  const auto version_at = rd.offset();
  if (rd.u32() != kShapeFormatVersion) throw FormatError(what + ": unsupported version", version_at);
  const auto k_at = rd.offset();
  const auto k = rd.u32();
  if (k == 0 || (expected_k != 0 && k != expected_k)) throw FormatError(what + ": part count inconsistent with dataset", k_at);
  const auto r_at = rd.offset();
  const auto r = rd.u32();
  if (r == 0 || r > 1024 || (expected_r != 0 && r != expected_r))
    throw FormatError(what + ": resolution inconsistent with dataset", r_at);

  ShapeSample s;
  s.mask.flags.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    const auto at = rd.offset();
    const auto f = rd.u8();
    if (f > 1) throw FormatError(what + ": mask byte must be 0 or 1", at);
    s.mask.flags[i] = f;
  }
  s.boxes.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    std::array<float, 6> v{};
    for (auto& x : v) {
      const auto at = rd.offset();
      x = rd.f32();
      if (!std::isfinite(x)) throw FormatError(what + ": non-finite box coordinate", at);
    }
    s.boxes[i] = Box6::from_array(v);
  }
  const std::size_t cells = static_cast<std::size_t>(r) * r * r;
  const std::size_t packed = (cells + 7) / 8;
  s.parts.reserve(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    auto bits = rd.take(packed);
    VoxelGrid g(r);
    auto vals = g.values();
    for (std::size_t c = 0; c < cells; ++c) vals[c] = ((bits[c / 8] >> (c % 8)) & 1U) != 0 ? 1.0F : 0.0F;
    s.parts.push_back(std::move(g));
  }
  if (!rd.at_end()) throw FormatError(what + ": trailing bytes", rd.offset());
  return s;
}

struct Manifest {
  int format_version = kManifestFormatVersion;
  std::string class_name;
  std::uint32_t k = 0;
  std::uint32_t resolution = 0;
  std::size_t count = 0;
  std::vector<std::string> files;
};

inline nlohmann::json to_json(const Manifest& m) {
  return nlohmann::json{{"format_version", m.format_version}, {"class_name", m.class_name}, {"k", m.k},
                        {"resolution", m.resolution}, {"count", m.count}, {"files", m.files}};
}

inline std::string shape_file_name(std::size_t index) {
  std::ostringstream os;
  os << "shape_" << std::setw(6) << std::setfill('0') << index << ".sags";
  return os.str();
}

/// Writes samples as a dataset directory. All samples must share k and r.
inline Manifest save_dataset(const std::filesystem::path& dir, std::span<const ShapeSample> samples,
                             const std::string& class_name, std::uint32_t k, std::uint32_t r) {
  if (k == 0 || r == 0) throw ContractError("save_dataset: k and resolution must be positive");
  for (const auto& s : samples)
    if (s.parts.size() != k || s.resolution() != r) throw ContractError("save_dataset: samples disagree on k or resolution");
  std::filesystem::create_directories(dir);
  Manifest m;
  m.class_name = class_name;
  m.k = k;
  m.resolution = r;
  m.count = samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    m.files.push_back(shape_file_name(i));
    detail::write_file(dir / m.files.back(), encode_shape(samples[i]));
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << to_json(m).dump(2) << "\n";
  if (!out) throw Error("cannot write manifest in " + dir.string());
  return m;
}

inline Manifest save_dataset(const std::filesystem::path& dir, std::span<const ShapeSample> samples) {
  if (samples.empty()) throw ContractError("save_dataset: cannot infer k/resolution from an empty list");
  return save_dataset(dir, samples, samples.front().class_id, static_cast<std::uint32_t>(samples.front().parts.size()),
                      samples.front().resolution());
}

inline Manifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what(), 0);
  }
  Manifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.class_name = j.at("class_name").get<std::string>();
    m.k = j.at("k").get<std::uint32_t>();
    m.resolution = j.at("resolution").get<std::uint32_t>();
    m.count = j.at("count").get<std::size_t>();
    m.files = j.at("files").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what(), 0);
  }
  if (m.format_version != kManifestFormatVersion) throw FormatError("manifest.json: unsupported format_version", 0);
  if (m.count != m.files.size()) throw FormatError("manifest.json: count does not match file list", 0);
  return m;
}

inline std::vector<ShapeSample> load_dataset(const std::filesystem::path& dir, Manifest* manifest_out = nullptr) {
  const Manifest m = load_manifest(dir);
  std::vector<ShapeSample> samples;
  samples.reserve(m.count);
  for (const auto& f : m.files) {
    const auto bytes = detail::read_file(dir / f);
    auto s = decode_shape(bytes, m.k, m.resolution, f);
    s.class_id = m.class_name;
    samples.push_back(std::move(s));
  }
  if (manifest_out != nullptr) *manifest_out = m;
  return samples;
}

}  // namespace sagnet
