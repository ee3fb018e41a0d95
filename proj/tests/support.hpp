#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "sagnet/model.hpp"
#include "sagnet/shapes.hpp"

namespace sagnet::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sagnet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline VoxelGrid random_grid(std::uint32_t r, Rng& rng, double density = 0.4) {
  VoxelGrid g(r);
  std::bernoulli_distribution coin(density);
  for (auto& v : g.values()) v = coin(rng) ? 1.0F : 0.0F;
  return g;
}

inline Box6 random_box(Rng& rng) {
  std::uniform_real_distribution<float> c(0.1F, 0.9F), e(0.05F, 0.6F);
  return Box6{{c(rng), c(rng), c(rng)}, {e(rng), e(rng), e(rng)}};
}

/// Valid binary sample; each part is absent with probability `p_absent` (at least one stays).
inline ShapeSample random_sample(std::size_t k, std::uint32_t r, Rng& rng, double p_absent = 0.0) {
  ShapeSample s = empty_sample(k, r, "random");
  std::bernoulli_distribution absent(p_absent);
  for (std::size_t i = 0; i < k; ++i) {
    if (i > 0 && absent(rng)) continue;
    s.mask.flags[i] = 1;
    s.parts[i] = random_grid(r, rng);
    s.boxes[i] = random_box(rng);
  }
  return s;
}

/// Smallest model that still exercises every component.
inline ModelConfig tiny_config(std::size_t k = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.k = k;
  c.resolution = 8;
  c.feature_dim = 6;
  c.latent_dim = 4;
  c.iterations = 2;
  c.channels = {2, 3};
  c.seed = seed;
  return c;
}

}  // namespace sagnet::testing
