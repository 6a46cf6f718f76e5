// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "common/generators.hpp"
#include "common/gradcheck.hpp"
#include "common/lcs_oracle.hpp"
#include "sketchnet/sketchnet.hpp"

#ifndef SKETCHNET_DATA_DIR
#define SKETCHNET_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace sketchnet;
using Clock = std::chrono::steady_clock;

namespace tol {
constexpr double kCodecSeconds = 10.0;
constexpr int kCodecMeasures = 10000;
constexpr double kAnalytic = 1e-6;
constexpr double kGradRelError = 1e-3;
constexpr int kGradMinChecked = 50;
constexpr int kOverfitMeasures = 200;
constexpr double kOverfitAccuracy = 0.90;
constexpr int kUnmaskDraws = 10000;
constexpr double kUnmaskRate = 0.30;
constexpr double kUnmaskTolerance = 0.02;
constexpr int kLcsMaxLength = 8;
constexpr int kBootstrapTrials = 1000;
constexpr int kBootstrapPairs = 50;
constexpr double kBootstrapAlpha = 0.05;
constexpr double kBootstrapTolerance = 0.03;
constexpr double kSeparatedP = 0.001;
constexpr int kControlPairs = 200;
constexpr double kControlP = 0.05;
constexpr int kToyTunes = 500;
constexpr int kToyMeasures = 64;
}  // namespace tol

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s  %-26s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

template <class F>
void run(const std::string& name, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(name, false, std::string("threw: ") + e.what());
  }
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("sketchnet_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---- criteria ------------------------------------------------------------------

void codec_round_trip() {
  std::mt19937_64 rng(1);
  const auto t0 = Clock::now();
  int bad = 0;
  for (int i = 0; i < tol::kCodecMeasures; ++i) {
    const auto m = testing::random_measure(rng);
    const auto [p, r] = factorize(m);
    bad += !(recombine(p, r) == m);
  }
  const double s = seconds_since(t0);
  report("codec round trip", bad == 0 && s < tol::kCodecSeconds,
         fmt("%d measures, %d mismatches, %.3f s (limit %.0f s)", tol::kCodecMeasures, bad, s, tol::kCodecSeconds));
}

void analytic_losses() {
  std::mt19937_64 rng(2);
  const auto target = testing::random_measures(rng, 4);
  nn::Tape<double> tape(false);
  const auto logits = tape.constant(Matrix<double>::Zero(4 * kFramesPerMeasure, kFrameVocab));
  const SketchVae<double>::Encoded standard{tape.constant(Matrix<double>::Zero(4, 8)),
                                             tape.constant(Matrix<double>::Zero(4, 8))};
  const auto e = SketchVae<double>::elbo_loss(logits, target, standard, standard, 1.0);
  const double ce = e.reconstruction.value()(0, 0);
  const double kl = e.kl.value()(0, 0);
  const double ce_err = std::abs(ce - std::log(130.0));
  report("analytic losses", ce_err < tol::kAnalytic && std::abs(kl) < tol::kAnalytic,
         fmt("|CE - ln 130| = %.2e, |KL| = %.2e (limit %.0e)", ce_err, std::abs(kl), tol::kAnalytic));
}

void gradient_check() {
  VaeConfig c;
  c.embed = 4;
  c.encoder_hidden = 3;
  c.pitch_latent = 2;
  c.rhythm_latent = 2;
  c.beat_hidden = 3;
  c.tick_hidden = 3;
  c.seed = 9;
  SketchVae<double> vae(c);
  std::mt19937_64 data(3);
  const auto batch = testing::random_measures(data, 2);
  auto loss = [&](nn::Tape<double>& tape) {
    std::mt19937_64 rng(4);
    return vae.forward_train(tape, batch, rng, 0.5).total;
  };
  const auto r = testing::grad_check(vae.params().all(), loss, 12);
  report("gradient check", r.checked >= tol::kGradMinChecked && r.max_rel_error < tol::kGradRelError,
         fmt("%d entries, max relative error %.2e (limit %.0e)", r.checked, r.max_rel_error, tol::kGradRelError));
}

void vae_overfit(const Corpus& corpus, const TrainConfig& toy) {
  std::vector<FrameSequence> subset;
  for (const auto* m : corpus.select(corpus.manifest.train)) {
    for (const auto& f : m->measures) {
      if (subset.size() < static_cast<std::size_t>(tol::kOverfitMeasures)) subset.push_back(f);
    }
  }
  auto cfg = toy;
  cfg.vae_batch_size = 32;
  cfg.max_epochs = 400;
  cfg.patience = 10;
  SketchVae<float> vae(cfg.vae);
  RunLog log;
  const auto t0 = Clock::now();
  const auto s = fit_vae(vae, subset, subset, cfg, log);
  const double acc = reconstruction_accuracy(vae.reconstruct(subset), subset);
  report("VAE overfit", acc >= tol::kOverfitAccuracy,
         fmt("%zu measures, %d epochs (best %d, early stop %s), free-running accuracy %.4f (min %.2f), %.0f s",
             subset.size(), s.epochs_run, s.best_epoch, s.stopped_early ? "yes" : "no", acc, tol::kOverfitAccuracy,
             seconds_since(t0)));
}

void unmask_statistics() {
  const int P = 16, L = 32;
  const Matrix<float> pred = Matrix<float>::Zero(tol::kUnmaskDraws, L);
  const Matrix<float> truth = Matrix<float>::Ones(tol::kUnmaskDraws, L);
  std::mt19937_64 rng(5);
  const auto u = random_unmask<float>(pred, truth, tol::kUnmaskRate, rng, P);
  int rows = 0;
  for (Eigen::Index i = 0; i < u.fused.rows(); ++i) rows += u.fused(i, 0) == 1.0f;
  const double rate = u.record.unmasked_fraction();
  const bool consistent = rows == static_cast<int>(std::lround(rate * tol::kUnmaskDraws));
  report("unmask statistics", consistent && std::abs(rate - tol::kUnmaskRate) <= tol::kUnmaskTolerance,
         fmt("%d draws, rate %.4f (target %.2f +/- %.2f)", tol::kUnmaskDraws, rate, tol::kUnmaskRate,
             tol::kUnmaskTolerance));
}

FrameSequence eighths(const std::vector<int>& symbols) {
  std::vector<MeasureNote> notes;
  for (std::size_t i = 0; i < symbols.size(); ++i) notes.push_back({static_cast<int>(i) * 3, 3, 60 + 2 * symbols[i]});
  return encode_measure(notes);
}

void metric_oracles() {
  const auto t0 = Clock::now();
  const testing::LcsOracle oracle(tol::kLcsMaxLength);
  std::vector<FrameSequence> ms;
  for (std::size_t i = 0; i < oracle.size(); ++i) ms.push_back(eighths(oracle.string(i)));
  std::size_t pairs = 0, mismatches = 0;
  for (std::size_t a = 0; a < oracle.size(); ++a) {
    const auto row = oracle.row(a);
    for (std::size_t b = 0; b < oracle.size(); ++b) {
      const auto got = lcs_pitch_accuracy(std::span(&ms[a], 1), std::span(&ms[b], 1));
      const auto n = oracle.string(b).size();
      const double want = n == 0 ? 1.0 : static_cast<double>(row[b]) / static_cast<double>(n);
      mismatches += got.value != want || got.empty_source != (n == 0);
      ++pairs;
    }
  }

  std::mt19937_64 rng(6);
  int identity_fail = 0, disjoint_fail = 0;
  for (int i = 0; i < 200; ++i) {
    const auto x = testing::random_measures(rng, 4, 40, 90);
    try {
      identity_fail += pitch_accuracy(x, x) != 1.0;
    } catch (const NoOnsets&) {
    }
    identity_fail += rhythm_accuracy(x, x) != 1.0;
    // Disjoint: every truth onset gets a different pitch; every frame a different class.
    auto shifted = x;
    std::vector<FrameSequence> other;
    for (auto& f : shifted) {
      FrameSequence g;
      for (std::size_t t = 0; t < kFramesPerMeasure; ++t) {
        if (is_onset(f[t])) f[t] = f[t] + 1;
        g[t] = is_onset(x[&f - shifted.data()][t]) ? kRest : 60;
      }
      other.push_back(g);
    }
    try {
      disjoint_fail += pitch_accuracy(shifted, x) != 0.0;
    } catch (const NoOnsets&) {
    }
    std::vector<FrameSequence> flipped;
    for (const auto& f : x) {
      FrameSequence g;
      for (std::size_t t = 0; t < kFramesPerMeasure; ++t) g[t] = is_onset(f[t]) ? kRest : 60;
      flipped.push_back(g);
    }
    disjoint_fail += rhythm_accuracy(flipped, x) != 0.0;
  }
  report("metric oracles", mismatches == 0 && identity_fail == 0 && disjoint_fail == 0,
         fmt("LCS exhaustive to length %d: %zu pairs, %zu mismatches; identity failures %d, disjoint failures %d; "
             "%.1f s",
             tol::kLcsMaxLength, pairs, mismatches, identity_fail, disjoint_fail, seconds_since(t0)));
}

void bootstrap_calibration() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int rejections = 0;
  for (int t = 0; t < tol::kBootstrapTrials; ++t) {
    std::vector<double> a(tol::kBootstrapPairs), b(tol::kBootstrapPairs);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = u(rng);
      b[i] = u(rng);
    }
    rejections += bootstrap_test(a, b, rng) < tol::kBootstrapAlpha;
  }
  const double rate = static_cast<double>(rejections) / tol::kBootstrapTrials;
  const std::vector<double> ones(100, 1.0), zeros(100, 0.0);
  const double p = bootstrap_test(ones, zeros, rng);
  report("bootstrap calibration",
         std::abs(rate - tol::kBootstrapAlpha) <= tol::kBootstrapTolerance && p < tol::kSeparatedP &&
             kBootstrapSamples == 10000,
         fmt("null rejection rate %.3f over %d trials (target %.2f +/- %.2f); separated p = %.5f; default samples %d",
             rate, tol::kBootstrapTrials, tol::kBootstrapAlpha, tol::kBootstrapTolerance, p, kBootstrapSamples));
}

// ---- toy pipeline ----------------------------------------------------------------

struct ToyRun {
  fs::path checkpoints;
  Corpus corpus;
  std::vector<StageSummary> stages;
  std::string vae_hash_before_stage1, vae_hash_after_stage2, inp_hash_before_stage2, inp_hash_after_stage2;
};

std::string file_hash_vae(const fs::path& dir) {
  return parameter_hash(SketchVae<float>::from_checkpoint(load_checkpoint(dir / kVaeFile)).params());
}

void stage_checks(const ToyRun& run) {
  const auto stack = load_stack<float>(run.checkpoints);
  const auto inp = evaluate(stack, run.corpus, false);
  const auto full = evaluate(stack, run.corpus, true);
  const std::vector<EvalReport> both{inp, full};
  std::printf("%s", format_table(both).c_str());

  const auto li = inp.summary("Test").loss, lc = full.summary("Test").loss;
  report("stage ordering", lc <= li, fmt("test loss connector %.4f <= inpainter %.4f", lc, li));

  const auto r = full.summary("Test-R").loss, nr = full.summary("Test-NR").loss;
  report("subset ordering", r < nr,
         fmt("Test-R loss %.4f < Test-NR loss %.4f (%zu and %zu windows)", r, nr, full.summary("Test-R").windows,
             full.summary("Test-NR").windows));

  std::mt19937_64 rng(8);
  const auto test = run.corpus.test_windows();
  const auto c = virtual_control_experiment(stack, std::span<const ContextWindow>(test), tol::kControlPairs, rng);
  std::printf("%s", format_control(c).c_str());
  const bool rhythm_ok = c.rhythm_control.rhythm_acc > c.baseline.rhythm_acc && c.rhythm_p < tol::kControlP;
  const bool pitch_ok = c.pitch_control.pitch_acc > c.baseline.pitch_acc && c.pitch_p < tol::kControlP;
  report("control adherence", rhythm_ok && pitch_ok,
         fmt("rhythm acc %.3f vs %.3f (p %.4f); LCS pitch acc %.3f vs %.3f (p %.4f); %d pairs",
             c.rhythm_control.rhythm_acc, c.baseline.rhythm_acc, c.rhythm_p, c.pitch_control.pitch_acc,
             c.baseline.pitch_acc, c.pitch_p, tol::kControlPairs));
}

void freeze_checks(const ToyRun& run) {
  const auto& s1 = run.stages[1];
  const auto& s2 = run.stages[2];
  const bool recorded = !s1.frozen_hashes_before.empty() && s1.frozen_hashes_before == s1.frozen_hashes_after &&
                        s2.frozen_hashes_before.size() == 2 && s2.frozen_hashes_before == s2.frozen_hashes_after;
  const bool on_disk = run.vae_hash_before_stage1 == run.vae_hash_after_stage2 &&
                       run.inp_hash_before_stage2 == run.inp_hash_after_stage2 &&
                       s1.frozen_hashes_before[0] == run.vae_hash_before_stage1 &&
                       s2.frozen_hashes_before[1] == run.inp_hash_before_stage2;
  report("freeze discipline", recorded && on_disk,
         fmt("VAE %s unchanged through stages I and II; inpainter %s unchanged through stage II",
             run.vae_hash_before_stage1.substr(0, 12).c_str(), run.inp_hash_before_stage2.substr(0, 12).c_str()));
}

void end_to_end(const ToyRun& run) {
  const Service service(run.checkpoints);
  httplib::Server server;
  service.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  std::string problems;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok && problems.empty()) problems = what;
  };
  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/health");
  check(health && health->status == 200 && nlohmann::json::parse(health->body)["loaded"] == true, "health");

  const auto w = run.corpus.test_windows().front();
  GenerateRequest plain;
  plain.past = w.past;
  plain.future = w.future;
  plain.seed = 21;
  auto sketched = plain;
  sketched.sketch = pitch_sketch(run.corpus.test_windows().back());
  sketched.sketch.measures.front().rhythm = rhythm_of(run.corpus.test_windows().back().missing[0]);

  int answered = 0;
  for (const auto* req : {&plain, &sketched}) {
    const auto body = to_json(*req).dump();
    const auto a = client.Post("/generate", body, "application/json");
    const auto b = client.Post("/generate", body, "application/json");
    check(a && b && a->status == 200 && b->status == 200, "status");
    if (!(a && b && a->status == 200)) continue;
    check(a->body == b->body, "determinism");
    const auto j = nlohmann::json::parse(a->body);
    check(j["missing"].size() == 4, "measure count");
    for (const auto& m : j["missing"]) {
      try {
        check(is_well_formed(frames_from_json(m)), "well-formed");
      } catch (const std::exception&) {
        check(false, "vocabulary");
      }
    }
    check(j["model"]["connector"] == load_checkpoint(run.checkpoints / kConnectorFile).id, "model ids");
    check(j["adherence"].size() == req->sketch.measures.size(), "adherence");
    ++answered;
  }
  server.stop();
  t.join();
  report("end-to-end smoke", problems.empty() && answered == 2,
         problems.empty() ? fmt("served on port %d; plain and sketched requests answered identically twice", port)
                          : "failed check: " + problems);
}

}  // namespace

int main() {
  std::printf("acceptance run\n");
  run("codec round trip", codec_round_trip);
  run("analytic losses", analytic_losses);
  run("gradient check", gradient_check);
  run("unmask statistics", unmask_statistics);
  run("metric oracles", metric_oracles);
  run("bootstrap calibration", bootstrap_calibration);

  ToyRun toy;
  TrainConfig cfg;
  bool trained = false;
  try {
    cfg = load_config(fs::path(SKETCHNET_DATA_DIR) / "toy.ini");
    const auto root = fresh_dir("toy");
    synthetic::write_corpus(root / "raw", tol::kToyTunes, 1, {.measures = tol::kToyMeasures});
    save_corpus(build_corpus(root / "raw", 7), root / "corpus");
    toy.corpus = load_corpus(root / "corpus");
    toy.checkpoints = root / "checkpoints";
    const auto t0 = Clock::now();
    toy.stages.push_back(train_stage(Stage::Vae, toy.corpus, cfg, toy.checkpoints));
    toy.vae_hash_before_stage1 = file_hash_vae(toy.checkpoints);
    toy.stages.push_back(train_stage(Stage::Inpainter, toy.corpus, cfg, toy.checkpoints));
    toy.inp_hash_before_stage2 = parameter_hash(
        SketchInpainter<float>::from_checkpoint(load_checkpoint(toy.checkpoints / kInpainterFile),
                                                load_checkpoint(toy.checkpoints / kVaeFile).id)
            .params());
    toy.stages.push_back(train_stage(Stage::Connector, toy.corpus, cfg, toy.checkpoints));
    toy.vae_hash_after_stage2 = file_hash_vae(toy.checkpoints);
    toy.inp_hash_after_stage2 = parameter_hash(
        SketchInpainter<float>::from_checkpoint(load_checkpoint(toy.checkpoints / kInpainterFile),
                                                load_checkpoint(toy.checkpoints / kVaeFile).id)
            .params());
    std::printf("toy training: %zu melodies, %zu train windows, %.0f s\n", toy.corpus.melodies.size(),
                toy.corpus.train_windows().size(), seconds_since(t0));
    trained = true;
  } catch (const std::exception& e) {
    report("toy training", false, std::string("threw: ") + e.what());
  }

  if (trained) {
    run("VAE overfit", [&] { vae_overfit(toy.corpus, cfg); });
    run("stage ordering", [&] { stage_checks(toy); });
    run("freeze discipline", [&] { freeze_checks(toy); });
    run("end-to-end smoke", [&] { end_to_end(toy); });
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
