#pragma once

// Random generators shared by the property-style tests.

#include <random>
#include <vector>

#include "sketchnet/codec.hpp"

namespace sketchnet::testing {

/// Uniformly random note/rest layout with random pitches; always well-formed.
inline FrameSequence random_measure(std::mt19937_64& rng, int lo = 0, int hi = 127) {
  std::uniform_int_distribution<int> kind(0, 2);
  std::uniform_int_distribution<int> pitch(lo, hi);
  FrameSequence f;
  int prev = kRest;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    int k = kind(rng);
    if (k == 1 && prev == kRest) k = 0;
    f[i] = k == 0 ? pitch(rng) : (k == 1 ? kHold : kRest);
    prev = f[i];
  }
  return f;
}

inline std::vector<FrameSequence> random_measures(std::mt19937_64& rng, int n, int lo = 0,
                                                  int hi = 127) {
  std::vector<FrameSequence> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(random_measure(rng, lo, hi));
  return out;
}

}  // namespace sketchnet::testing
