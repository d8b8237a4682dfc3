#include "brain3d/bridge.hpp"

#include "brain3d/errors.hpp"

namespace brain3d {

std::vector<PoolSegment> pool_segments(std::size_t n, std::size_t k) {
  if (k < 1 || k > n) throw ShapeError("compress_tokens: require 1 <= K <= N");
  std::vector<PoolSegment> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i].begin = (i * n) / k;
    out[i].end = ((i + 1) * n + k - 1) / k;
  }
  return out;
}

}  // namespace brain3d
