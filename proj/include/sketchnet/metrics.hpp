#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "sketchnet/codec.hpp"

namespace sketchnet {

namespace detail {

inline void require_same_length(std::span<const FrameSequence> a, std::span<const FrameSequence> b) {
  if (a.size() != b.size()) throw ShapeMismatch("generated and reference measure counts differ");
}

}  // namespace detail

/// Over frames where the truth has an onset: fraction where the generated
/// token is the same pitch. Throws NoOnsets when the truth has none.
inline double pitch_accuracy(std::span<const FrameSequence> gen, std::span<const FrameSequence> truth) {
  detail::require_same_length(gen, truth);
  std::size_t onsets = 0, hit = 0;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    for (std::size_t t = 0; t < kFramesPerMeasure; ++t) {
      if (!is_onset(truth[m][t])) continue;
      ++onsets;
      hit += gen[m][t] == truth[m][t];
    }
  }
  if (onsets == 0) throw NoOnsets("reference has no onsets");
  return static_cast<double>(hit) / static_cast<double>(onsets);
}

/// Fraction of frames whose onset/hold/rest class agrees.
inline double rhythm_accuracy(std::span<const FrameSequence> gen, std::span<const FrameSequence> truth) {
  detail::require_same_length(gen, truth);
  if (truth.empty()) throw EmptyInput("no measures to compare");
  std::size_t hit = 0;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    const auto a = rhythm_of(gen[m]);
    const auto b = rhythm_of(truth[m]);
    for (std::size_t t = 0; t < kFramesPerMeasure; ++t) hit += a[t] == b[t];
  }
  return static_cast<double>(hit) / static_cast<double>(truth.size() * kFramesPerMeasure);
}

/// Onset pitches of consecutive measures, in order.
inline std::vector<int> onset_pitches(std::span<const FrameSequence> measures) {
  std::vector<int> out;
  for (const auto& f : measures) {
    for (int t : f.tokens) {
      if (is_onset(t)) out.push_back(t);
    }
  }
  return out;
}

inline std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct LcsAccuracy {
  double value = 1.0;
  bool empty_source = false;  // value is 1.0 by convention; leave out of means
};

/// LCS of the onset-pitch strings over the whole region, normalized by the
/// source string length.
inline LcsAccuracy lcs_pitch_accuracy(std::span<const FrameSequence> gen, std::span<const FrameSequence> source) {
  const auto g = onset_pitches(gen);
  const auto s = onset_pitches(source);
  if (s.empty()) return {1.0, true};
  return {static_cast<double>(lcs_length(g, s)) / static_cast<double>(s.size()), false};
}

inline constexpr int kBootstrapSamples = 10000;

/// Two-sided paired bootstrap test of mean(a - b). Pairs are resampled with
/// replacement; p = 2 (k + 1) / (n + 1) capped at 1, where k counts resampled
/// means on the far side of zero (or at zero) from the observed mean.
inline double bootstrap_test(std::span<const double> a, std::span<const double> b, std::mt19937_64& rng,
                             int n_samples = kBootstrapSamples) {
  if (a.size() != b.size()) throw ShapeMismatch("paired samples differ in length");
  if (a.empty()) throw EmptyInput("no paired samples");
  if (n_samples < 1) throw RangeError("n_samples must be positive");
  const auto n = a.size();
  std::vector<double> d(n);
  double observed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    observed += d[i];
  }
  observed /= static_cast<double>(n);
  if (observed == 0.0) return 1.0;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  long against = 0;
  for (int s = 0; s < n_samples; ++s) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += d[pick(rng)];
    if (observed > 0 ? sum <= 0.0 : sum >= 0.0) ++against;
  }
  return std::min(1.0, 2.0 * static_cast<double>(against + 1) / static_cast<double>(n_samples + 1));
}

}  // namespace sketchnet
