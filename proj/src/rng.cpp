#include "rsde/rng.hpp"

#include <cmath>

namespace rsde {

namespace {

inline void philox_round(uint32_t& c0, uint32_t& c1, uint32_t& c2,
                         uint32_t& c3, uint32_t k0, uint32_t k1) {
  constexpr uint64_t kMul0 = 0xD2511F53ull;
  constexpr uint64_t kMul1 = 0xCD9E8D57ull;
  uint64_t p0 = kMul0 * c0;
  uint64_t p1 = kMul1 * c2;
  uint32_t h0 = static_cast<uint32_t>(p0 >> 32);
  uint32_t l0 = static_cast<uint32_t>(p0);
  uint32_t h1 = static_cast<uint32_t>(p1 >> 32);
  uint32_t l1 = static_cast<uint32_t>(p1);
  uint32_t n0 = h1 ^ c1 ^ k0;
  uint32_t n2 = h0 ^ c3 ^ k1;
  c0 = n0;
  c1 = l1;
  c2 = n2;
  c3 = l0;
}

}  // namespace

std::array<uint32_t, 4> philox4x32(uint64_t seed, uint64_t stream,
                                   uint64_t index) {
  uint32_t c0 = static_cast<uint32_t>(index);
  uint32_t c1 = static_cast<uint32_t>(index >> 32);
  uint32_t c2 = static_cast<uint32_t>(stream);
  uint32_t c3 = static_cast<uint32_t>(stream >> 32);
  uint32_t k0 = static_cast<uint32_t>(seed);
  uint32_t k1 = static_cast<uint32_t>(seed >> 32);
  constexpr uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    philox_round(c0, c1, c2, c3, k0, k1);
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return {c0, c1, c2, c3};
}

std::array<double, 4> uniform4(uint64_t seed, uint64_t stream, uint64_t index) {
  auto w = philox4x32(seed, stream, index);
  constexpr double kScale = 1.0 / 4294967296.0;  // 2^-32
  return {(w[0] + 0.5) * kScale, (w[1] + 0.5) * kScale, (w[2] + 0.5) * kScale,
          (w[3] + 0.5) * kScale};
}

namespace {

// Two Box-Muller normals from one block.
inline std::array<double, 2> normal_pair(uint64_t seed, uint64_t stream,
                                         uint64_t block) {
  auto u = uniform4(seed, stream, block);
  double radius = std::sqrt(-2.0 * std::log(u[0]));
  double angle = 2.0 * kPi * u[1];
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

}  // namespace

double normal_at(uint64_t seed, uint64_t stream, uint64_t index) {
  auto z = normal_pair(seed, stream, index >> 1);
  return z[index & 1];
}

void normal_fill(uint64_t seed, uint64_t stream, uint64_t first,
                 std::vector<double>& out) {
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = normal_at(seed, stream, first + i);
  }
}

BrownianPath::BrownianPath(int dimension, double horizon, int base_steps,
                           uint64_t seed, uint64_t path_index)
    : dim_(dimension),
      horizon_(horizon),
      base_steps_(base_steps),
      seed_(seed),
      path_index_(path_index) {
  if (dimension < 1 || horizon <= 0.0 || base_steps < 1) {
    throw ConfigError("BrownianPath needs dimension>=1, horizon>0, steps>=1");
  }
}

double BrownianPath::step(int level) const {
  return horizon_ / (static_cast<double>(base_steps_) * (1ull << level));
}

// Stream layout: path index in the high bits, then coordinate, then the
// refinement level the draw belongs to.  Draws at different levels never
// collide, which is what makes refinement consistent.
Mat BrownianPath::base_level() const {
  Mat inc(dim_, base_steps_);
  double root_dt = std::sqrt(step(0));
  for (int c = 0; c < dim_; ++c) {
    uint64_t stream = (path_index_ << 16) | (static_cast<uint64_t>(c) << 8);
    for (int k = 0; k < base_steps_; ++k) {
      inc(c, k) = root_dt * normal_at(seed_, stream, k);
    }
  }
  return inc;
}

Mat BrownianPath::refine(const Mat& coarse, int child_level) const {
  Mat fine(dim_, coarse.cols() * 2);
  double half_root = 0.5 * std::sqrt(2.0 * step(child_level));
  for (int c = 0; c < dim_; ++c) {
    uint64_t stream = (path_index_ << 16) | (static_cast<uint64_t>(c) << 8) |
                      static_cast<uint64_t>(child_level);
    for (int k = 0; k < coarse.cols(); ++k) {
      double bridge = half_root * normal_at(seed_, stream, k);
      double left = 0.5 * coarse(c, k) + bridge;
      fine(c, 2 * k) = left;
      fine(c, 2 * k + 1) = coarse(c, k) - left;
    }
  }
  return fine;
}

Mat BrownianPath::increments(int level) {
  if (level < 0 || level > 40) throw ConfigError("refinement level out of range");
  while (static_cast<int>(levels_.size()) <= level) {
    if (levels_.empty()) {
      levels_.push_back(base_level());
    } else {
      int child = static_cast<int>(levels_.size());
      Mat next = refine(levels_.back(), child);
      levels_.push_back(std::move(next));
    }
  }
  return levels_[level];
}

}  // namespace rsde
