#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/corpus.hpp"
#include "sketchnet/metrics.hpp"
#include "sketchnet/pipeline.hpp"

namespace sketchnet {

/// Mean frame cross-entropy of per-measure logits (24 x 130) against the
/// reference frames.
template <class T>
double frame_cross_entropy(std::span<const Matrix<T>> logits, std::span<const FrameSequence> truth) {
  if (logits.size() != truth.size()) throw ShapeMismatch("logit and reference measure counts differ");
  if (truth.empty()) throw EmptyInput("no measures to score");
  double total = 0;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    const auto& z = logits[m];
    if (z.rows() != static_cast<Eigen::Index>(kFramesPerMeasure) || z.cols() != kFrameVocab) {
      throw ShapeMismatch("logits must be 24 x 130");
    }
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
      const Eigen::RowVectorXd row = z.row(t).template cast<double>();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      total += lse - row(truth[m][static_cast<std::size_t>(t)]);
    }
  }
  return total / static_cast<double>(truth.size() * kFramesPerMeasure);
}

/// Order-independent mean: values are summed in sorted order.
inline double stable_mean(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct WindowScore {
  std::string key;
  double loss = 0;
  std::optional<double> pitch_acc;  // absent when the truth has no onsets
  double rhythm_acc = 0;
};

struct SetSummary {
  std::size_t windows = 0;
  std::size_t pitch_skipped = 0;
  double loss = 0;
  double pitch_acc = 0;
  double rhythm_acc = 0;
};

inline SetSummary summarize(std::span<const WindowScore> scores) {
  SetSummary s;
  s.windows = scores.size();
  std::vector<double> loss, pitch, rhythm;
  for (const auto& w : scores) {
    loss.push_back(w.loss);
    rhythm.push_back(w.rhythm_acc);
    if (w.pitch_acc) pitch.push_back(*w.pitch_acc);
    else ++s.pitch_skipped;
  }
  s.loss = stable_mean(loss);
  s.pitch_acc = stable_mean(pitch);
  s.rhythm_acc = stable_mean(rhythm);
  return s;
}

struct EvalReport {
  std::string model;  // "inpainter" or "connector"
  std::map<std::string, std::vector<WindowScore>> sets;  // "Test", "Test-R", "Test-NR"

  SetSummary summary(const std::string& set) const { return summarize(sets.at(set)); }

  nlohmann::json to_json() const {
    nlohmann::json j{{"model", model}, {"sets", nlohmann::json::object()}};
    for (const auto& [name, scores] : sets) {
      const auto s = summarize(scores);
      auto windows = nlohmann::json::array();
      for (const auto& w : scores) {
        windows.push_back({{"key", w.key},
                           {"loss", w.loss},
                           {"pitch_acc", w.pitch_acc ? nlohmann::json(*w.pitch_acc) : nlohmann::json(nullptr)},
                           {"rhythm_acc", w.rhythm_acc}});
      }
      j["sets"][name] = {{"windows", s.windows},
                         {"pitch_skipped", s.pitch_skipped},
                         {"loss", s.loss},
                         {"pitch_acc", s.pitch_acc},
                         {"rhythm_acc", s.rhythm_acc},
                         {"per_window", windows}};
    }
    return j;
  }
};

inline const std::vector<std::string>& report_sets() {
  static const std::vector<std::string> names{"Test", "Test-R", "Test-NR"};
  return names;
}

/// Scores completions of `windows`, batch by batch, with a free-running decoder.
template <class T>
std::vector<WindowScore> score_windows(const ModelStack<T>& stack, std::span<const ContextWindow> windows,
                                       bool use_connector, std::size_t batch = 64) {
  std::vector<WindowScore> out;
  for (std::size_t i = 0; i < windows.size(); i += batch) {
    const auto chunk = windows.subspan(i, std::min(batch, windows.size() - i));
    const auto res = stack.complete(chunk, use_connector);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto& w = chunk[b];
      WindowScore s;
      s.key = w.key();
      s.loss = frame_cross_entropy<T>(res.logits[b], w.missing);
      s.rhythm_acc = rhythm_accuracy(res.missing[b], w.missing);
      try {
        s.pitch_acc = pitch_accuracy(res.missing[b], w.missing);
      } catch (const NoOnsets&) {
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Free-running loss for a single window.
template <class T>
double eval_loss(const ModelStack<T>& stack, const ContextWindow& window, bool use_connector = true) {
  const auto res = stack.complete(std::span(&window, 1), use_connector);
  return frame_cross_entropy<T>(res.logits[0], window.missing);
}

template <class T>
EvalReport evaluate(const ModelStack<T>& stack, const Corpus& corpus, bool use_connector = true) {
  EvalReport r;
  r.model = use_connector ? "connector" : "inpainter";
  const auto test = corpus.test_windows();
  if (test.empty()) throw TooFewWindows("no test windows");
  r.sets["Test"] = score_windows(stack, std::span<const ContextWindow>(test), use_connector);
  std::map<std::string, const WindowScore*> by_key;
  for (const auto& s : r.sets["Test"]) by_key[s.key] = &s;
  auto pick = [&](const std::vector<std::string>& keys) {
    std::vector<WindowScore> v;
    for (const auto& k : keys) {
      const auto it = by_key.find(k);
      if (it == by_key.end()) throw ValidationError("subset window " + k + " is not a test window");
      v.push_back(*it->second);
    }
    return v;
  };
  r.sets["Test-R"] = pick(corpus.manifest.test_r);
  r.sets["Test-NR"] = pick(corpus.manifest.test_nr);
  return r;
}

/// loss / pAcc / rAcc for each test set, one row per model.
inline std::string format_table(std::span<const EvalReport> reports) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s", "Model");
  out += line;
  for (const auto& s : report_sets()) {
    std::snprintf(line, sizeof line, " | %-8s %-23s", s.c_str(), "");
    out += line;
  }
  out += "\n";
  std::snprintf(line, sizeof line, "%-12s", "");
  out += line;
  for (std::size_t i = 0; i < report_sets().size(); ++i) {
    std::snprintf(line, sizeof line, " | %-10s %-10s %-10s", "loss", "pAcc", "rAcc");
    out += line;
  }
  out += "\n";
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-12s", r.model.c_str());
    out += line;
    for (const auto& s : report_sets()) {
      const auto sum = r.sets.count(s) ? r.summary(s) : SetSummary{};
      std::snprintf(line, sizeof line, " | %-10.3f %-10.3f %-10.3f", sum.loss, sum.pitch_acc, sum.rhythm_acc);
      out += line;
    }
    out += "\n";
  }
  return out;
}

// ---- virtual control -----------------------------------------------------------

struct ControlCell {
  double pitch_acc = 0;   // LCS accuracy vs the sketch source
  double rhythm_acc = 0;  // vs the sketch source
};

struct ControlReport {
  std::size_t pairs = 0;
  std::size_t empty_sources = 0;  // pairs left out of pitch means
  ControlCell pitch_control;
  ControlCell rhythm_control;
  ControlCell baseline;
  double rhythm_p = 1.0;  // rhythm control vs baseline, rhythm accuracy
  double pitch_p = 1.0;   // pitch control vs baseline, LCS accuracy

  struct Pair {
    std::size_t a = 0, b = 0;
    LcsAccuracy pitch_ctrl_lcs, rhythm_ctrl_lcs, base_lcs;
    double pitch_ctrl_rhythm = 0, rhythm_ctrl_rhythm = 0, base_rhythm = 0;
  };
  std::vector<Pair> per_pair;

  nlohmann::json to_json() const {
    auto cell = [](const ControlCell& c) { return nlohmann::json{{"pitch_acc", c.pitch_acc}, {"rhythm_acc", c.rhythm_acc}}; };
    return {{"pairs", pairs},
            {"empty_sources", empty_sources},
            {"pitch_control", cell(pitch_control)},
            {"rhythm_control", cell(rhythm_control)},
            {"baseline", cell(baseline)},
            {"rhythm_p", rhythm_p},
            {"pitch_p", pitch_p}};
  }
};

/// Sketch carrying B's rhythm for every missing measure.
inline SketchSpec rhythm_sketch(const ContextWindow& source) {
  SketchSpec s;
  const auto shape = source.shape();
  for (int m = 0; m < shape.missing; ++m) {
    s.measures.push_back({shape.past + m, std::nullopt, rhythm_of(source.missing[static_cast<std::size_t>(m)])});
  }
  return s;
}

/// Sketch carrying B's onset pitches for every missing measure that has any.
inline SketchSpec pitch_sketch(const ContextWindow& source) {
  SketchSpec s;
  const auto shape = source.shape();
  for (int m = 0; m < shape.missing; ++m) {
    auto p = onset_pitches(std::span(&source.missing[static_cast<std::size_t>(m)], 1));
    if (!p.empty()) s.measures.push_back({shape.past + m, std::move(p), std::nullopt});
  }
  return s;
}

inline std::string format_control(const ControlReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%-16s %-10s %-10s\n%-16s %-10.3f %-10.3f\n%-16s %-10.3f %-10.3f\n%-16s %-10.3f %-10.3f\n"
                "pairs %zu, rhythm p = %.4g, pitch p = %.4g\n",
                "Control", "pAcc", "rAcc", "pitch", r.pitch_control.pitch_acc, r.pitch_control.rhythm_acc, "rhythm",
                r.rhythm_control.pitch_acc, r.rhythm_control.rhythm_acc, "none", r.baseline.pitch_acc,
                r.baseline.rhythm_acc, r.pairs, r.rhythm_p, r.pitch_p);
  return buf;
}

/// For random pairs (A, B) of distinct windows: complete A with B's rhythm,
/// with B's pitch contour, and with no sketch, then score each against B's
/// missing measures.
template <class T>
ControlReport virtual_control_experiment(const ModelStack<T>& stack, std::span<const ContextWindow> windows,
                                         std::size_t n_pairs, std::mt19937_64& rng, std::size_t batch = 64,
                                         int bootstrap_samples = kBootstrapSamples) {
  if (windows.size() < 2) throw TooFewWindows("the control experiment needs at least two windows");
  std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
  ControlReport r;
  r.pairs = n_pairs;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    ControlReport::Pair p;
    p.a = pick(rng);
    do p.b = pick(rng);
    while (p.b == p.a);
    r.per_pair.push_back(p);
  }
  for (std::size_t i = 0; i < n_pairs; i += batch) {
    const auto n = std::min(batch, n_pairs - i);
    std::vector<ContextWindow> as;
    std::vector<SketchSpec> rs, ps;
    for (std::size_t k = i; k < i + n; ++k) {
      const auto& p = r.per_pair[k];
      as.push_back(windows[p.a]);
      rs.push_back(rhythm_sketch(windows[p.b]));
      ps.push_back(pitch_sketch(windows[p.b]));
    }
    const auto by_rhythm = stack.complete(as, true, &rs);
    const auto by_pitch = stack.complete(as, true, &ps);
    const auto base = stack.complete(as, true);
    for (std::size_t k = 0; k < n; ++k) {
      auto& p = r.per_pair[i + k];
      const auto& src = windows[p.b].missing;
      p.rhythm_ctrl_rhythm = rhythm_accuracy(by_rhythm.missing[k], src);
      p.rhythm_ctrl_lcs = lcs_pitch_accuracy(by_rhythm.missing[k], src);
      p.pitch_ctrl_rhythm = rhythm_accuracy(by_pitch.missing[k], src);
      p.pitch_ctrl_lcs = lcs_pitch_accuracy(by_pitch.missing[k], src);
      p.base_rhythm = rhythm_accuracy(base.missing[k], src);
      p.base_lcs = lcs_pitch_accuracy(base.missing[k], src);
    }
  }
  std::vector<double> rr, pr, br, rl, pl, bl;
  for (const auto& p : r.per_pair) {
    rr.push_back(p.rhythm_ctrl_rhythm);
    pr.push_back(p.pitch_ctrl_rhythm);
    br.push_back(p.base_rhythm);
    if (p.base_lcs.empty_source) {
      ++r.empty_sources;
      continue;
    }
    rl.push_back(p.rhythm_ctrl_lcs.value);
    pl.push_back(p.pitch_ctrl_lcs.value);
    bl.push_back(p.base_lcs.value);
  }
  r.rhythm_control = {stable_mean(rl), stable_mean(rr)};
  r.pitch_control = {stable_mean(pl), stable_mean(pr)};
  r.baseline = {stable_mean(bl), stable_mean(br)};
  r.rhythm_p = bootstrap_test(rr, br, rng, bootstrap_samples);
  if (!pl.empty()) r.pitch_p = bootstrap_test(pl, bl, rng, bootstrap_samples);
  return r;
}

}  // namespace sketchnet
