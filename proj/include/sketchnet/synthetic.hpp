#pragma once

// Toy folk-tune generator emitting ABC books. Tunes are built from 4-bar
// phrases; a per-tune repetition level decides how often the opening phrase
// comes back, so corpora mix highly repetitive and through-composed tunes.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sketchnet/errors.hpp"

namespace sketchnet::synthetic {

struct Options {
  int measures = 32;  // multiple of 4
  int tunes_per_file = 50;
};

inline constexpr std::array<int, 12> kScale = {57, 59, 60, 62, 64, 65, 67, 69, 71, 72, 74, 76};
inline constexpr std::array<const char*, 12> kScaleAbc = {"A,", "B,", "C", "D", "E", "F", "G", "A", "B", "c", "d", "e"};

// Bar patterns in eighth notes; negative entries are rests.
inline const std::vector<std::vector<int>>& bar_patterns() {
  static const std::vector<std::vector<int>> p = {
      {2, 2, 2, 2}, {1, 1, 1, 1, 1, 1, 1, 1}, {3, 1, 2, 2}, {2, 1, 1, 2, 2}, {4, 2, 2},
      {2, 2, 4},    {1, 1, 2, 1, 1, 2},       {2, 2, 2, 1, 1}, {4, 4},      {3, 1, 3, 1},
      {2, 2, 2, -2}, {6, 2},                  {1, 1, 1, 1, 4}, {2, -2, 2, 2},
  };
  return p;
}

struct Bar {
  std::vector<int> lengths;  // eighths, negative = rest
  std::vector<int> degrees;  // scale index per note (ignored for rests)
};

inline Bar random_bar(std::mt19937_64& rng, int& degree) {
  const auto& pats = bar_patterns();
  Bar b;
  b.lengths = pats[std::uniform_int_distribution<std::size_t>(0, pats.size() - 1)(rng)];
  std::discrete_distribution<int> step({1, 3, 4, 1, 4, 3, 1});  // -3..+3
  for (int len : b.lengths) {
    if (len > 0) {
      degree = std::clamp(degree + step(rng) - 3, 0, static_cast<int>(kScale.size()) - 1);
    }
    b.degrees.push_back(degree);
  }
  return b;
}

inline std::string bar_to_abc(const Bar& b) {
  std::string s;
  for (std::size_t i = 0; i < b.lengths.size(); ++i) {
    const int len = b.lengths[i];
    s += len < 0 ? "z" : kScaleAbc[static_cast<std::size_t>(b.degrees[i])];
    const int n = len < 0 ? -len : len;
    if (n != 1) s += std::to_string(n);
  }
  return s;
}

/// One tune as ABC text. `repetition` in [0, 1] is the chance that each later
/// phrase restates the opening phrase.
inline std::string make_tune(int number, double repetition, std::mt19937_64& rng, const Options& opt = {}) {
  if (opt.measures < 4 || opt.measures % 4 != 0) throw RangeError("synthetic tunes need a multiple of 4 measures");
  int degree = std::uniform_int_distribution<int>(3, 7)(rng);
  auto phrase = [&] {
    std::vector<Bar> p;
    for (int i = 0; i < 4; ++i) p.push_back(random_bar(rng, degree));
    return p;
  };
  const auto opening = phrase();
  std::vector<Bar> bars(opening);
  std::bernoulli_distribution repeat(repetition);
  for (int ph = 1; ph < opt.measures / 4; ++ph) {
    const auto next = repeat(rng) ? opening : phrase();
    bars.insert(bars.end(), next.begin(), next.end());
  }
  bars.back() = Bar{{4, 4}, {2, 2}};

  std::ostringstream out;
  out << "X:" << number << "\nT:Toy tune " << number << "\nM:4/4\nL:1/8\nQ:1/4=" << 100 + 10 * (number % 5)
      << "\nK:C\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    out << bar_to_abc(bars[i]) << (i + 1 == bars.size() ? " |]\n" : (i % 4 == 3 ? " |\n" : " | "));
  }
  return out.str();
}

/// Writes `count` tunes into ABC books under `dir`; returns the file paths.
inline std::vector<std::filesystem::path> write_corpus(const std::filesystem::path& dir, int count,
                                                       std::uint64_t seed, const Options& opt = {}) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> level(0.0, 1.0);
  std::vector<std::filesystem::path> files;
  std::ofstream out;
  for (int i = 0; i < count; ++i) {
    if (i % opt.tunes_per_file == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "toy_%03d.abc", i / opt.tunes_per_file);
      files.push_back(dir / name);
      out = std::ofstream(files.back());
      if (!out) throw Error("cannot write " + files.back().string());
    }
    out << make_tune(i + 1, level(rng), rng, opt) << '\n';
  }
  return files;
}

}  // namespace sketchnet::synthetic
