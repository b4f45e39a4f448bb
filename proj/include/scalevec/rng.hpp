#pragma once

#include <cstdint>
#include <vector>

namespace scalevec {

// Minimal PCG32 (O'Neill's pcg32 generator, XSH-RR output). All randomness in
// the project goes through this type so that streams are bit-identical across
// platforms and standard-library versions.
class Pcg32 {
 public:
  static constexpr uint64_t kDefaultStream = 0xda3e39cb94b95bdbULL;

  explicit Pcg32(uint64_t initstate, uint64_t initseq = kDefaultStream)
      : state_(0), inc_((initseq << 1u) | 1u) {
    next_u32();
    state_ += initstate;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // Modulo mapping; the slight bias is irrelevant here and the mapping is part
  // of the documented stream contract for fold generation.
  uint32_t bounded(uint32_t bound) { return next_u32() % bound; }

  // Uniform in [0,1), 32 bits of resolution.
  double uniform01() { return next_u32() * 0x1p-32; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Fisher-Yates, descending index, j = next_u32() % (i+1).
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = bounded(static_cast<uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  uint64_t inc_;
};

}  // namespace scalevec
