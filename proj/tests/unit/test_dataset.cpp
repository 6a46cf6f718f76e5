#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>
#include <set>

#include "common/generators.hpp"
#include "sketchnet/corpus.hpp"
#include "sketchnet/synthetic.hpp"

using namespace sketchnet;

namespace {

Melody random_melody(const std::string& id, int measures, std::mt19937_64& rng) {
  Melody m;
  m.meta.source_id = id;
  m.measures = testing::random_measures(rng, measures);
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("sketchnet_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

ContextWindow window_from(const std::vector<FrameSequence>& past, const std::vector<FrameSequence>& future,
                          const std::string& id = "w", int start = 0) {
  ContextWindow w;
  w.past = past;
  w.future = future;
  w.missing = std::vector<FrameSequence>(4, FrameSequence::rest());
  w.source_id = id;
  w.start = start;
  return w;
}

}  // namespace

TEST_CASE("window counts") {
  std::mt19937_64 rng(1);
  CHECK(make_windows(random_melody("a", 16, rng), {}, 1).size() == 1);
  CHECK(make_windows(random_melody("a", 15, rng), {}, 1).empty());
  const auto w = make_windows(random_melody("a", 20, rng), {}, 4);
  REQUIRE(w.size() == 2);
  CHECK(w[0].start == 0);
  CHECK(w[1].start == 4);
  CHECK(make_windows(random_melody("a", 20, rng), {}, 1).size() == 5);
  CHECK_THROWS_AS(make_windows(random_melody("a", 20, rng), {}, 0), RangeError);
  CHECK_THROWS_AS(make_windows(random_melody("a", 20, rng), {0, 0, 0}, 1), RangeError);
}

TEST_CASE("windows are verbatim slices of their melody") {
  std::mt19937_64 rng(2);
  for (int n : {16, 17, 31, 40}) {
    const auto m = random_melody("m", n, rng);
    for (int stride : {1, 3, 4, 16}) {
      for (const auto& w : make_windows(m, {}, stride)) {
        CHECK(w.shape() == WindowShape{});
        const auto all = w.all();
        for (int i = 0; i < 16; ++i) CHECK(all[static_cast<std::size_t>(i)] == m.measures[static_cast<std::size_t>(w.start + i)]);
      }
    }
  }
}

TEST_CASE("context similarity") {
  std::mt19937_64 rng(3);
  const auto ctx = testing::random_measures(rng, 6);
  CHECK(context_similarity(window_from(ctx, ctx)) == 1.0);

  FrameSequence onsets;
  onsets.tokens.fill(60);
  const std::vector<FrameSequence> rests(6, FrameSequence::rest()), notes(6, onsets);
  CHECK(context_similarity(window_from(rests, notes)) == 0.0);

  auto half = rests;
  for (auto& f : half) {
    for (std::size_t t = 0; t < 12; ++t) f[t] = 60;
  }
  CHECK(context_similarity(window_from(rests, half)) == 0.5);

  // Brute-force oracle over random pairs.
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = testing::random_measures(rng, 6, 60, 61);
    const auto b = testing::random_measures(rng, 6, 60, 61);
    int same = 0;
    for (int m = 0; m < 6; ++m) {
      for (int t = 0; t < 24; ++t) same += a[static_cast<std::size_t>(m)].tokens[static_cast<std::size_t>(t)] ==
                                           b[static_cast<std::size_t>(m)].tokens[static_cast<std::size_t>(t)];
    }
    CHECK(context_similarity(window_from(a, b)) == Catch::Approx(same / 144.0));
  }
  CHECK_THROWS_AS(context_similarity(window_from(rests, std::vector<FrameSequence>(5, onsets))), ShapeMismatch);
}

TEST_CASE("subsets take the extreme deciles") {
  std::mt19937_64 rng(4);
  std::vector<ContextWindow> windows;
  for (int i = 0; i < 10; ++i) {
    auto past = std::vector<FrameSequence>(6, FrameSequence::rest());
    auto future = past;
    for (int t = 0; t < i * 10; ++t) future[static_cast<std::size_t>(t / 24)][static_cast<std::size_t>(t % 24)] = 60;
    windows.push_back(window_from(past, future, "s" + std::to_string(i)));
  }
  const auto s = make_subsets(windows);
  REQUIRE(s.repetition.size() == 1);
  REQUIRE(s.non_repetition.size() == 1);
  CHECK(s.repetition[0].source_id == "s0");
  CHECK(s.non_repetition[0].source_id == "s9");

  std::vector<ContextWindow> ties;
  for (int i = 9; i >= 0; --i) ties.push_back(window_from(std::vector<FrameSequence>(6, FrameSequence::rest()),
                                                        std::vector<FrameSequence>(6, FrameSequence::rest()),
                                                        "t" + std::to_string(i)));
  const auto t = make_subsets(ties);
  CHECK(t.repetition[0].source_id == "t0");
  CHECK(t.non_repetition[0].source_id == "t9");
  auto shuffled = ties;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(make_subsets(shuffled).repetition[0].source_id == "t0");

  ties.pop_back();
  CHECK_THROWS_AS(make_subsets(ties), TooFewWindows);
}

TEST_CASE("subset sizes and similarity ordering on random windows") {
  std::mt19937_64 rng(5);
  std::vector<ContextWindow> windows;
  for (int i = 0; i < 57; ++i) {
    windows.push_back(window_from(testing::random_measures(rng, 6, 60, 62), testing::random_measures(rng, 6, 60, 62),
                                  "r" + std::to_string(i)));
  }
  const auto s = make_subsets(windows);
  CHECK(s.repetition.size() == 5);
  CHECK(s.non_repetition.size() == 5);
  double r = 0, nr = 0;
  for (const auto& w : s.repetition) r += context_similarity(w);
  for (const auto& w : s.non_repetition) nr += context_similarity(w);
  CHECK(r > nr);
}

TEST_CASE("melody-level split") {
  std::mt19937_64 rng(6);
  std::vector<Melody> ms;
  for (int i = 0; i < 18; ++i) ms.push_back(random_melody("m" + std::to_string(i), 20, rng));
  const auto a = corpus_from_melodies(ms, 7);
  CHECK(a.manifest.train.size() == 16);
  CHECK(a.manifest.test.size() == 2);
  std::set<std::string> train(a.manifest.train.begin(), a.manifest.train.end());
  for (const auto& id : a.manifest.test) CHECK_FALSE(train.contains(id));

  auto reversed = ms;
  std::reverse(reversed.begin(), reversed.end());
  const auto b = corpus_from_melodies(reversed, 7);
  CHECK(a.manifest.to_json().dump() == b.manifest.to_json().dump());
  CHECK(corpus_from_melodies(ms, 8).manifest.test != a.manifest.test);

  CHECK_THROWS_AS(corpus_from_melodies({}, 7), EmptyCorpus);
}

TEST_CASE("subsets are drawn from test windows") {
  std::mt19937_64 rng(7);
  std::vector<Melody> ms;
  for (int i = 0; i < 90; ++i) ms.push_back(random_melody("m" + std::to_string(i), 32, rng));
  const auto c = corpus_from_melodies(ms, 3);
  const auto test = c.test_windows();
  CHECK(test.size() == 10 * 2);
  CHECK(c.manifest.test_r.size() == 2);
  CHECK(c.manifest.test_nr.size() == 2);
  std::set<std::string> test_ids(c.manifest.test.begin(), c.manifest.test.end());
  for (const auto& w : c.windows_by_key(c.manifest.test_r)) CHECK(test_ids.contains(w.source_id));
  for (const auto& w : c.windows_by_key(c.manifest.test_nr)) CHECK(test_ids.contains(w.source_id));
  CHECK(c.train_windows().size() == 80 * 5);
}

TEST_CASE("corpus files round trip and build deterministically") {
  const auto raw = temp_dir("raw");
  synthetic::write_corpus(raw, 18, 11, {.measures = 20, .tunes_per_file = 10});
  {
    std::ofstream waltz(raw / "waltz.abc");
    waltz << "X:1\nM:3/4\nL:1/8\nK:C\nC2 D2 E2 | F2 G2 A2 |]\n";
    std::ofstream duet(raw / "duet.abc");
    duet << "X:1\nM:4/4\nL:1/8\nK:C\n[CE]2 D2 E2 F2 |]\n";
  }
  const auto a = build_corpus(raw, 7);
  CHECK(a.melodies.size() == 18);
  CHECK(a.manifest.skipped.size() == 2);
  CHECK(a.manifest.train.size() == 16);
  for (const auto& m : a.melodies) CHECK(m.size() == 20);

  const auto out = temp_dir("corpus");
  save_corpus(a, out);
  const auto b = load_corpus(out);
  REQUIRE(b.melodies.size() == a.melodies.size());
  for (std::size_t i = 0; i < a.melodies.size(); ++i) {
    CHECK(b.melodies[i].measures == a.melodies[i].measures);
    CHECK(b.melodies[i].meta.source_id == a.melodies[i].meta.source_id);
  }
  CHECK(b.manifest.to_json() == a.manifest.to_json());
  CHECK(build_corpus(raw, 7).manifest.to_json().dump() == a.manifest.to_json().dump());

  CHECK_THROWS_AS(build_corpus(temp_dir("empty")), EmptyCorpus);
}

TEST_CASE("synthetic tunes vary in repetition") {
  std::mt19937_64 rng(12);
  const auto same = abc::parse(synthetic::make_tune(1, 1.0, rng));
  const auto fresh = abc::parse(synthetic::make_tune(2, 0.0, rng));
  CHECK(same.size() == 32);
  CHECK(fresh.size() == 32);
  for (int i = 0; i < 4; ++i) CHECK(same.measures[static_cast<std::size_t>(4 + i)] == same.measures[static_cast<std::size_t>(i)]);
  const auto ws = make_windows(same, {}, 16);
  const auto wf = make_windows(fresh, {}, 16);
  CHECK(context_similarity(ws[0]) > context_similarity(wf[0]));
  for (const auto& f : fresh.measures) CHECK(is_well_formed(f));
}
