#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "common/generators.hpp"
#include "sketchnet/training.hpp"

using namespace sketchnet;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("sketchnet_train_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.vae_batch_size = 32;
  c.window_batch_size = 8;
  c.max_epochs = 2;
  c.patience = 2;
  c.kl_warmup_epochs = 1;
  c.vae.embed = 8;
  c.vae.encoder_hidden = 12;
  c.vae.pitch_latent = 6;
  c.vae.rhythm_latent = 6;
  c.vae.beat_hidden = 12;
  c.vae.tick_hidden = 12;
  c.inpainter.hidden = 16;
  c.connector.layers = 1;
  c.connector.heads = 2;
  c.connector.d_model = 8;
  c.connector.ffn = 16;
  return c;
}

Corpus tiny_corpus(int melodies, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Melody> ms;
  for (int i = 0; i < melodies; ++i) {
    Melody m;
    m.meta.source_id = "m" + std::to_string(i);
    m.measures = testing::random_measures(rng, 20, 60, 72);
    ms.push_back(std::move(m));
  }
  return corpus_from_melodies(ms, 5);
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("config file parsing") {
  const auto c = parse_config(R"(
learning_rate = 0.001
max_epochs = 7
seed = 42

[vae]
pitch_latent = 16

[connector]
layers = 2
per_half_unmask = true
)");
  CHECK(c.learning_rate == 0.001);
  CHECK(c.max_epochs == 7);
  CHECK(c.seed == 42);
  CHECK(c.vae.pitch_latent == 16);
  CHECK(c.vae.rhythm_latent == 128);
  CHECK(c.connector.layers == 2);
  CHECK(c.connector.per_half_unmask);

  const TrainConfig d;
  CHECK(d.learning_rate == 1e-4);
  CHECK(d.adam_beta1 == 0.9);
  CHECK(d.adam_beta2 == 0.998);
  CHECK(d.vae_batch_size == 64);
  CHECK(d.window_batch_size == 32);
  CHECK(d.clip_norm == 5.0);
  CHECK(d.connector.unmask_rate == 0.3);
  CHECK(d.inpainter.teacher_forcing == 0.5);

  CHECK_THROWS_AS(parse_config("learning_rat = 1"), ValidationError);
  CHECK_THROWS_AS(parse_config("[vae]\nsize = 3"), ValidationError);
  CHECK_THROWS_AS(parse_config("[decoder]\nx = 3"), ValidationError);
  CHECK_THROWS_AS(parse_config("max_epochs = many"), ValidationError);
  CHECK_THROWS_AS(parse_config("patience = 0"), ValidationError);
  CHECK_THROWS_AS(parse_config("[connector]\nper_half_unmask = yes"), ValidationError);
  CHECK_THROWS_AS(parse_config("[vae"), ValidationError);
}

TEST_CASE("validation split is seeded and disjoint") {
  std::vector<std::string> ids;
  for (int i = 0; i < 50; ++i) ids.push_back("t" + std::to_string(i));
  const auto [fit, val] = detail::validation_split(ids, 0.1, 3);
  CHECK(val.size() == 5);
  CHECK(fit.size() == 45);
  std::set<std::string> all(fit.begin(), fit.end());
  for (const auto& v : val) CHECK(all.insert(v).second);
  CHECK(all.size() == 50);

  auto shuffled = ids;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(detail::validation_split(shuffled, 0.1, 3).second == val);
  CHECK(detail::validation_split(ids, 0.1, 4).second != val);
  CHECK(detail::validation_split(ids, 0.0, 3).second.empty());
}

TEST_CASE("VAE fitting restores the best epoch") {
  auto cfg = tiny_config();
  cfg.max_epochs = 6;
  cfg.patience = 2;
  std::mt19937_64 rng(1);
  const auto train = testing::random_measures(rng, 64, 60, 72);
  const auto val = testing::random_measures(rng, 16, 60, 72);
  SketchVae<float> vae(cfg.vae);
  RunLog log;
  const auto s = fit_vae(vae, train, val, cfg, log);

  const auto epochs = log.epochs();
  REQUIRE(epochs.size() == static_cast<std::size_t>(s.epochs_run + 1));
  CHECK(epochs.front()["epoch"] == 0);
  CHECK_FALSE(epochs.front().contains("train_loss"));
  double best = 1e300;
  int best_epoch = -1;
  for (const auto& e : epochs) {
    if (e["val_loss"].get<double>() < best) {
      best = e["val_loss"];
      best_epoch = e["epoch"];
    }
  }
  CHECK(s.best_epoch == best_epoch);
  CHECK(s.best_validation == best);
  CHECK(vae_validation_loss(vae, std::span<const FrameSequence>(val), cfg.vae_batch_size, cfg.kl_weight) ==
        Catch::Approx(best).epsilon(1e-6));
  if (s.stopped_early) CHECK(s.epochs_run - s.best_epoch == cfg.patience);
  CHECK(s.best_epoch > 0);
}

TEST_CASE("zero epochs keeps the initial model") {
  auto cfg = tiny_config();
  cfg.max_epochs = 0;
  std::mt19937_64 rng(2);
  const auto train = testing::random_measures(rng, 8);
  SketchVae<float> vae(cfg.vae);
  const auto before = parameter_hash(vae.params());
  RunLog log;
  const auto s = fit_vae(vae, train, {}, cfg, log);
  CHECK(s.epochs_run == 0);
  CHECK(s.best_epoch == 0);
  CHECK(parameter_hash(vae.params()) == before);
}

TEST_CASE("non-finite loss stops training") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(3);
  const auto train = testing::random_measures(rng, 8);
  SketchVae<float> vae(cfg.vae);
  vae.params().all().front()->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  RunLog log;
  CHECK_THROWS_AS(fit_vae(vae, train, {}, cfg, log), DivergenceError);
  SketchVae<float> other(cfg.vae);
  CHECK_THROWS_AS(fit_vae(other, {}, {}, cfg, log), EmptyCorpus);
}

TEST_CASE("run log is append-only JSONL") {
  const auto dir = temp_dir("log");
  RunLog log(dir / "sub" / "run.jsonl");
  log.append({{"event", "epoch"}, {"epoch", 0}});
  log.append({{"event", "note"}});
  const auto lines = read_jsonl(dir / "sub" / "run.jsonl");
  REQUIRE(lines.size() == 2);
  CHECK(lines[0]["epoch"] == 0);
  CHECK(log.epochs().size() == 1);
}

TEST_CASE("three stages train in order with frozen upstream models") {
  const auto corpus = tiny_corpus(20, 9);
  const auto out = temp_dir("stages");
  const auto cfg = tiny_config();

  CHECK_THROWS_AS(train_stage(Stage::Inpainter, corpus, cfg, out), Error);

  const auto s0 = train_stage(Stage::Vae, corpus, cfg, out);
  CHECK(std::filesystem::exists(out / kVaeFile));
  CHECK(s0.frozen_hashes_before.empty());

  const auto s1 = train_stage(Stage::Inpainter, corpus, cfg, out);
  REQUIRE(s1.frozen_hashes_before.size() == 1);
  CHECK(s1.frozen_hashes_before == s1.frozen_hashes_after);
  CHECK(s1.frozen_hashes_before[0] == parameter_hash(SketchVae<float>::from_checkpoint(load_checkpoint(out / kVaeFile)).params()));

  const auto s2 = train_stage(Stage::Connector, corpus, cfg, out);
  REQUIRE(s2.frozen_hashes_before.size() == 2);
  CHECK(s2.frozen_hashes_before == s2.frozen_hashes_after);

  const auto stack = load_stack<float>(out);
  CHECK(stack.ids.vae == s0.checkpoint_id);
  CHECK(stack.ids.inpainter == s1.checkpoint_id);
  CHECK(stack.ids.connector == s2.checkpoint_id);

  // The connector starts as the identity on inpainter output, so its epoch-0
  // validation loss is the inpainter's best.
  const auto inp_log = read_jsonl(out / "inpainter_runlog.jsonl");
  const auto conn_log = read_jsonl(out / "connector_runlog.jsonl");
  double inp_best = 0, conn_first = -1;
  for (const auto& e : inp_log) {
    if (e["event"] == "best") inp_best = e["val_loss"];
  }
  for (const auto& e : conn_log) {
    if (e["event"] == "epoch" && e["epoch"] == 0) conn_first = e["val_loss"];
  }
  CHECK(conn_first == Catch::Approx(inp_best).epsilon(1e-5));
  CHECK(s2.best_validation <= conn_first);

  bool logged_rate = false;
  for (const auto& e : conn_log) {
    if (e["event"] == "epoch" && e.contains("unmask_rate")) {
      logged_rate = true;
      CHECK(e["unmask_rate"].get<double>() >= 0.0);
      CHECK(e["unmask_rate"].get<double>() <= 1.0);
    }
  }
  CHECK(logged_rate);
  for (const auto* lg : {&inp_log, &conn_log}) {
    for (const auto& e : *lg) {
      if (e["event"] != "epoch") continue;
      CHECK(e["val_acc"].get<double>() >= 0.0);
      CHECK(e["val_acc"].get<double>() <= 1.0);
    }
  }
  CHECK(conn_log.front()["event"] == "config");
  CHECK(conn_log.back()["event"] == "checkpoint");
}
