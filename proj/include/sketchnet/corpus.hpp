#pragma once

// Corpus building, melody-level train/test split, context windows and the
// repetition / non-repetition test subsets.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/checkpoint.hpp"
#include "sketchnet/inpainter.hpp"
#include "sketchnet/score.hpp"

namespace sketchnet {

struct ContextWindow {
  std::vector<FrameSequence> past;
  std::vector<FrameSequence> missing;
  std::vector<FrameSequence> future;
  std::string source_id;
  int start = 0;

  WindowShape shape() const {
    return {static_cast<int>(past.size()), static_cast<int>(missing.size()), static_cast<int>(future.size())};
  }
  std::string key() const { return source_id + "@" + std::to_string(start); }
  std::vector<FrameSequence> all() const {
    std::vector<FrameSequence> v(past);
    v.insert(v.end(), missing.begin(), missing.end());
    v.insert(v.end(), future.begin(), future.end());
    return v;
  }
};

/// Every window starting at a multiple of `stride` that fits inside the melody.
inline std::vector<ContextWindow> make_windows(const Melody& melody, WindowShape shape = {}, int stride = 1) {
  if (shape.past < 0 || shape.missing < 0 || shape.future < 0 || shape.total() < 1) {
    throw RangeError("window sizes must be non-negative with a positive total");
  }
  if (stride < 1) throw RangeError("stride must be at least 1");
  std::vector<ContextWindow> out;
  const auto n = static_cast<int>(melody.size());
  for (int s = 0; s + shape.total() <= n; s += stride) {
    ContextWindow w;
    const auto at = melody.measures.begin() + s;
    w.past.assign(at, at + shape.past);
    w.missing.assign(at + shape.past, at + shape.past + shape.missing);
    w.future.assign(at + shape.past + shape.missing, at + shape.total());
    w.source_id = melody.meta.source_id;
    w.start = s;
    out.push_back(std::move(w));
  }
  return out;
}

/// Fraction of aligned past/future frames holding the same token.
inline double context_similarity(const ContextWindow& w) {
  if (w.past.size() != w.future.size()) throw ShapeMismatch("past and future blocks differ in length");
  if (w.past.empty()) throw ShapeMismatch("window has no context");
  std::size_t same = 0;
  for (std::size_t m = 0; m < w.past.size(); ++m) {
    for (std::size_t t = 0; t < kFramesPerMeasure; ++t) same += w.past[m][t] == w.future[m][t];
  }
  return static_cast<double>(same) / static_cast<double>(w.past.size() * kFramesPerMeasure);
}

struct Subsets {
  std::vector<ContextWindow> repetition;
  std::vector<ContextWindow> non_repetition;
};

/// Top and bottom deciles by context similarity, under the total order
/// (similarity desc, source_id asc, start asc).
inline Subsets make_subsets(const std::vector<ContextWindow>& test) {
  if (test.size() < 10) throw TooFewWindows("need at least 10 test windows, got " + std::to_string(test.size()));
  std::vector<std::pair<double, const ContextWindow*>> ranked;
  for (const auto& w : test) ranked.emplace_back(context_similarity(w), &w);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    if (a.second->source_id != b.second->source_id) return a.second->source_id < b.second->source_id;
    return a.second->start < b.second->start;
  });
  const auto k = test.size() / 10;
  Subsets s;
  for (std::size_t i = 0; i < k; ++i) {
    s.repetition.push_back(*ranked[i].second);
    s.non_repetition.push_back(*ranked[ranked.size() - k + i].second);
  }
  return s;
}

// ---- corpus ----------------------------------------------------------------

struct SkippedScore {
  std::string source;
  std::string reason;
};

struct SplitManifest {
  std::uint64_t seed = 7;
  WindowShape shape;
  int train_stride = 4;
  int test_stride = 16;
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> test_r;   // window keys
  std::vector<std::string> test_nr;  // window keys
  std::vector<SkippedScore> skipped;

  nlohmann::json to_json() const {
    auto skip = nlohmann::json::array();
    for (const auto& s : skipped) skip.push_back({{"source", s.source}, {"reason", s.reason}});
    return {{"seed", seed},
            {"window", {shape.past, shape.missing, shape.future}},
            {"train_stride", train_stride},
            {"test_stride", test_stride},
            {"train", train},
            {"test", test},
            {"test_R", test_r},
            {"test_NR", test_nr},
            {"skipped", skip}};
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.seed = j.at("seed");
    const auto& w = j.at("window");
    m.shape = {w.at(0), w.at(1), w.at(2)};
    m.train_stride = j.at("train_stride");
    m.test_stride = j.at("test_stride");
    m.train = j.at("train").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    m.test_r = j.at("test_R").get<std::vector<std::string>>();
    m.test_nr = j.at("test_NR").get<std::vector<std::string>>();
    for (const auto& s : j.value("skipped", nlohmann::json::array())) m.skipped.push_back({s.at("source"), s.at("reason")});
    return m;
  }
};

struct Corpus {
  std::vector<Melody> melodies;
  SplitManifest manifest;

  const Melody& find(const std::string& id) const {
    for (const auto& m : melodies) {
      if (m.meta.source_id == id) return m;
    }
    throw Error("melody " + id + " is not in the corpus");
  }

  std::vector<const Melody*> select(const std::vector<std::string>& ids) const {
    std::vector<const Melody*> out;
    for (const auto& id : ids) out.push_back(&find(id));
    return out;
  }

  std::vector<ContextWindow> windows(const std::vector<std::string>& ids, int stride) const {
    std::vector<ContextWindow> out;
    for (const auto* m : select(ids)) {
      auto w = make_windows(*m, manifest.shape, stride);
      out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
  }

  std::vector<ContextWindow> train_windows() const { return windows(manifest.train, manifest.train_stride); }
  std::vector<ContextWindow> test_windows() const { return windows(manifest.test, manifest.test_stride); }

  std::vector<ContextWindow> windows_by_key(const std::vector<std::string>& keys) const {
    std::vector<ContextWindow> out;
    const auto all = test_windows();
    for (const auto& k : keys) {
      auto it = std::find_if(all.begin(), all.end(), [&](const ContextWindow& w) { return w.key() == k; });
      if (it == all.end()) throw Error("window " + k + " is not a test window");
      out.push_back(*it);
    }
    return out;
  }
};

/// Seeded melody-level split; the test share is round(N / 9).
inline void split_melodies(Corpus& corpus, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& m : corpus.melodies) ids.push_back(m.meta.source_id);
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(ids.size()) / 9.0));
  auto& m = corpus.manifest;
  m.seed = seed;
  m.test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  m.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test), ids.end());
  std::sort(m.test.begin(), m.test.end());
  std::sort(m.train.begin(), m.train.end());
  m.test_r.clear();
  m.test_nr.clear();
  const auto test = corpus.test_windows();
  if (test.size() >= 10) {
    const auto s = make_subsets(test);
    for (const auto& w : s.repetition) m.test_r.push_back(w.key());
    for (const auto& w : s.non_repetition) m.test_nr.push_back(w.key());
  }
}

/// Builds a corpus from in-memory melodies (ids must be unique).
inline Corpus corpus_from_melodies(std::vector<Melody> melodies, std::uint64_t seed = 7, WindowShape shape = {}) {
  if (melodies.empty()) throw EmptyCorpus("no usable melodies");
  Corpus c;
  c.melodies = std::move(melodies);
  std::sort(c.melodies.begin(), c.melodies.end(),
            [](const Melody& a, const Melody& b) { return a.meta.source_id < b.meta.source_id; });
  for (std::size_t i = 1; i < c.melodies.size(); ++i) {
    if (c.melodies[i].meta.source_id == c.melodies[i - 1].meta.source_id) {
      throw Error("duplicate melody id " + c.melodies[i].meta.source_id);
    }
  }
  c.manifest.shape = shape;
  split_melodies(c, seed);
  return c;
}

/// Parses every .abc / .mid / .midi file below `raw_dir`. Scores that are not
/// monophonic 4/4 are skipped and listed in the manifest.
inline Corpus build_corpus(const std::filesystem::path& raw_dir, std::uint64_t seed = 7, WindowShape shape = {}) {
  if (!std::filesystem::is_directory(raw_dir)) throw EmptyCorpus(raw_dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(raw_dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".abc" || ext == ".mid" || ext == ".midi") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<Melody> melodies;
  std::vector<SkippedScore> skipped;
  for (const auto& f : files) {
    const auto rel = std::filesystem::relative(f, raw_dir).generic_string();
    const auto bytes = read_file(f);
    if (f.extension() == ".abc" || f.extension() == ".ABC") {
      const auto tunes = abc::split_tunes(bytes);
      for (std::size_t i = 0; i < tunes.size(); ++i) {
        const auto id = tunes.size() == 1 ? rel : rel + "#" + std::to_string(i + 1);
        try {
          auto m = abc::parse(tunes[i], id);
          if (m.measures.empty()) throw ParseError("no measures");
          melodies.push_back(std::move(m));
        } catch (const Error& e) {
          skipped.push_back({id, e.what()});
        }
      }
    } else {
      try {
        const std::span<const std::uint8_t> data(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
        melodies.push_back(parse_score(data, ScoreFormat::Midi, rel));
      } catch (const Error& e) {
        skipped.push_back({rel, e.what()});
      }
    }
  }
  if (melodies.empty()) throw EmptyCorpus("no monophonic 4/4 scores found in " + raw_dir.string());
  auto c = corpus_from_melodies(std::move(melodies), seed, shape);
  c.manifest.skipped = std::move(skipped);
  return c;
}

// ---- persistence -------------------------------------------------------------

inline nlohmann::json melody_to_json(const Melody& m) {
  auto measures = nlohmann::json::array();
  for (const auto& f : m.measures) measures.push_back(f.tokens);
  return {{"id", m.meta.source_id}, {"meta", {{"key", m.meta.key}, {"tempo", m.meta.tempo}}}, {"measures", measures}};
}

/// Reads a measure array of 24 in-vocabulary tokens.
inline FrameSequence frames_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != kFramesPerMeasure) throw ValidationError("a measure must hold 24 tokens");
  FrameSequence f;
  for (std::size_t t = 0; t < kFramesPerMeasure; ++t) {
    if (!j[t].is_number_integer()) throw ValidationError("frame tokens must be integers");
    f[t] = j[t].get<int>();
    if (!in_frame_vocab(f[t])) throw ValidationError("frame token " + std::to_string(f[t]) + " out of range");
  }
  return f;
}

inline Melody melody_from_json(const nlohmann::json& j) {
  Melody m;
  m.meta.source_id = j.at("id");
  const auto& meta = j.value("meta", nlohmann::json::object());
  m.meta.key = meta.value("key", std::string("C"));
  m.meta.tempo = meta.value("tempo", 120.0);
  for (const auto& f : j.at("measures")) m.measures.push_back(frames_from_json(f));
  return m;
}

/// Writes corpus.jsonl and manifest.json into `dir`.
inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "corpus.jsonl");
  if (!out) throw Error("cannot write " + (dir / "corpus.jsonl").string());
  for (const auto& m : c.melodies) out << melody_to_json(m).dump() << '\n';
  std::ofstream man(dir / "manifest.json");
  man << c.manifest.to_json().dump(2) << '\n';
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  std::ifstream in(dir / "corpus.jsonl");
  if (!in) throw EmptyCorpus("cannot read " + (dir / "corpus.jsonl").string());
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) c.melodies.push_back(melody_from_json(nlohmann::json::parse(line)));
  }
  if (c.melodies.empty()) throw EmptyCorpus("corpus is empty");
  c.manifest = SplitManifest::from_json(nlohmann::json::parse(read_file(dir / "manifest.json")));
  return c;
}

}  // namespace sketchnet
