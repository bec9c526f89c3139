// Counter-based random numbers (Philox4x32-10) and dyadically refinable
// Brownian paths.  Every draw is a pure function of (seed, stream, index), so
// simulations are reproducible for any thread count and path order, and a
// refined path keeps the increments of its coarse version exactly.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rsde/base.hpp"

namespace rsde {

// One 4x32 Philox block, 10 rounds.  Key = (seed lo, seed hi),
// counter = (index lo, index hi, stream lo, stream hi).
std::array<uint32_t, 4> philox4x32(uint64_t seed, uint64_t stream,
                                   uint64_t index);

// Uniforms in (0,1), four per block.
std::array<double, 4> uniform4(uint64_t seed, uint64_t stream, uint64_t index);

// Standard normal with absolute addressing: the value is independent of the
// order in which indices are requested.
double normal_at(uint64_t seed, uint64_t stream, uint64_t index);

// Fills `out` with normals at indices [first, first + out.size()).
void normal_fill(uint64_t seed, uint64_t stream, uint64_t first,
                 std::vector<double>& out);

// Sequential uniforms in (0,1) drawn from one (seed, stream) lane.  A thin
// convenience over uniform4 for sampling sweeps that do not need absolute
// addressing.
class UniformStream {
 public:
  UniformStream(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

  double next() {
    if (pos_ == 4) {
      buf_ = uniform4(seed_, stream_, index_++);
      pos_ = 0;
    }
    return buf_[pos_++];
  }

  // Uniform over [lo, hi).
  double range(double lo, double hi) { return lo + (hi - lo) * next(); }

  int index(int count) {
    int i = static_cast<int>(next() * count);
    return i < count ? i : count - 1;
  }

 private:
  uint64_t seed_, stream_;
  uint64_t index_ = 0;
  std::array<double, 4> buf_{};
  int pos_ = 4;
};

// Brownian motion on [0, horizon] seen through its dyadic increments.
// Level L has base_steps * 2^L increments; midpoint bridge draws refine a
// parent increment into two children whose sum equals the parent exactly.
class BrownianPath {
 public:
  BrownianPath(int dimension, double horizon, int base_steps, uint64_t seed,
               uint64_t path_index);

  int dimension() const { return dim_; }
  double horizon() const { return horizon_; }
  int base_steps() const { return base_steps_; }
  uint64_t seed() const { return seed_; }
  uint64_t path_index() const { return path_index_; }

  // Increment matrix at refinement `level`: dimension rows,
  // base_steps * 2^level columns.  Cached; returned by value so callers are
  // immune to cache growth.
  Mat increments(int level);

  double step(int level) const;

 private:
  Mat base_level() const;
  Mat refine(const Mat& coarse, int child_level) const;

  int dim_;
  double horizon_;
  int base_steps_;
  uint64_t seed_;
  uint64_t path_index_;
  std::vector<Mat> levels_;
};

}  // namespace rsde
