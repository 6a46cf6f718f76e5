// sketchnet command-line tool.
//
// Exit codes: 0 ok, 1 invalid input or arguments, 2 internal failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "sketchnet/sketchnet.hpp"

namespace fs = std::filesystem;
using namespace sketchnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitInternal = 2;

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

fs::path require_checkpoints(const std::string& flag) {
  const auto dir = checkpoint_dir(flag);
  if (!dir) throw ValidationError(std::string("no checkpoint directory: pass --checkpoints or set ") + kCheckpointEnv);
  return *dir;
}

int cmd_preprocess(const std::string& raw, const std::string& out, std::uint64_t seed) {
  const auto corpus = build_corpus(raw, seed);
  save_corpus(corpus, out);
  std::printf("%zu melodies (%zu train, %zu test), %zu skipped\n", corpus.melodies.size(),
              corpus.manifest.train.size(), corpus.manifest.test.size(), corpus.manifest.skipped.size());
  std::printf("%zu train windows, %zu test windows (%zu R, %zu NR)\n", corpus.train_windows().size(),
              corpus.test_windows().size(), corpus.manifest.test_r.size(), corpus.manifest.test_nr.size());
  for (const auto& s : corpus.manifest.skipped) std::fprintf(stderr, "skipped %s: %s\n", s.source.c_str(), s.reason.c_str());
  return kExitOk;
}

int cmd_train(const std::string& stage, const std::string& config, const std::string& data, const std::string& out) {
  const auto cfg = config.empty() ? TrainConfig{} : load_config(config);
  const auto corpus = load_corpus(data);
  std::vector<Stage> stages;
  if (stage == "all") stages = {Stage::Vae, Stage::Inpainter, Stage::Connector};
  else stages = {parse_stage(stage)};
  for (auto s : stages) {
    const auto r = train_stage(s, corpus, cfg, out);
    std::printf("%s: %d epochs, best epoch %d, validation loss %.4f, checkpoint %s\n", to_string(s).c_str(),
                r.epochs_run, r.best_epoch, r.best_validation, r.checkpoint_id.substr(0, 12).c_str());
  }
  return kExitOk;
}

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& out, std::size_t pairs,
             std::uint64_t seed) {
  const auto corpus = load_corpus(data);
  const auto stack = load_stack<float>(require_checkpoints(ckpt));
  const std::vector<EvalReport> reports{evaluate(stack, corpus, false), evaluate(stack, corpus, true)};
  std::printf("%s", format_table(reports).c_str());
  nlohmann::json j{{"reports", {reports[0].to_json(), reports[1].to_json()}}};
  if (pairs > 0) {
    std::mt19937_64 rng(seed);
    const auto test = corpus.test_windows();
    const auto control = virtual_control_experiment(stack, std::span<const ContextWindow>(test), pairs, rng);
    std::printf("\n%s", format_control(control).c_str());
    j["control"] = control.to_json();
  }
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_generate(const std::string& in, const std::string& out, const std::string& ckpt) {
  const auto stack = load_stack<float>(require_checkpoints(ckpt));
  const auto req = parse_generate_request(read_json(in), stack.shape);
  const auto resp = generate(stack, req).to_json(req.debug).dump(2) + "\n";
  if (out.empty()) std::printf("%s", resp.c_str());
  else write_text(out, resp);
  return kExitOk;
}

int cmd_serve(const std::string& host, int port, const std::string& ckpt) {
  const auto dir = checkpoint_dir(ckpt);
  const Service service = dir ? Service(*dir) : Service();
  if (!service.loaded()) {
    std::fprintf(stderr, "warning: model not loaded (%s); /generate will answer 503\n",
                 service.load_error().empty() ? "no checkpoint directory" : service.load_error().c_str());
  }
  httplib::Server server;
  service.mount(server);
  int bound = port;
  if (port == 0) {
    bound = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot listen on " + host + ":" + std::to_string(port));
  std::printf("listening on http://%s:%d\n", host.c_str(), bound);
  std::fflush(stdout);
  server.listen_after_bind();
  return kExitOk;
}

int cmd_export_midi(const std::string& in, const std::string& data, const std::string& id, const std::string& out,
                    double tempo) {
  std::vector<FrameSequence> measures;
  if (!in.empty()) {
    const auto j = read_json(in);
    const char* key = j.contains("missing") ? "missing" : "measures";
    if (!j.is_object() || !j.contains(key) || !j[key].is_array()) {
      throw ValidationError("input needs a 'missing' or 'measures' array");
    }
    for (const auto& m : j[key]) measures.push_back(frames_from_json(m));
  } else {
    const auto corpus = load_corpus(data);
    const auto& m = corpus.find(id);
    measures = m.measures;
    if (tempo <= 0) tempo = m.meta.tempo;
  }
  if (measures.empty()) throw ValidationError("nothing to export");
  const auto bytes = export_midi(measures, tempo > 0 ? tempo : 120.0);
  write_text(out, std::string(bytes.begin(), bytes.end()));
  std::printf("wrote %zu measures to %s\n", measures.size(), out.c_str());
  return kExitOk;
}

int cmd_toy(const std::string& out, int count, std::uint64_t seed, int measures) {
  if (count < 1) throw ValidationError("--count must be positive");
  if (measures < 16 || measures % 4) throw ValidationError("--measures must be a multiple of 4, at least 16");
  const auto files = synthetic::write_corpus(out, count, seed, {.measures = measures});
  std::printf("wrote %d tunes in %zu files to %s\n", count, files.size(), out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sketch-guided melody inpainting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string raw, data, out, in, config, ckpt, stage = "all", host = "127.0.0.1", id;
  std::uint64_t seed = 7;
  int port = 8080, count = 500, measures = 32;
  std::size_t pairs = 3000;
  double tempo = 0;

  auto* pre = app.add_subcommand("preprocess", "Parse raw ABC/MIDI files into a corpus and split manifest");
  pre->add_option("--raw", raw, "Directory of .abc/.mid files")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--out", out, "Output corpus directory")->required();
  pre->add_option("--seed", seed, "Split seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train one stage, or all three in order");
  train->add_option("--stage", stage, "vae, inpainter, connector or all")
      ->check(CLI::IsMember({"vae", "inpainter", "connector", "all"}))
      ->capture_default_str();
  train->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--data", data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "Checkpoint directory")->required();

  auto* eval = app.add_subcommand("eval", "Score the test set, its subsets and the control experiment");
  eval->add_option("--data", data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoints", ckpt, std::string("Checkpoint directory (default $") + kCheckpointEnv + ")");
  eval->add_option("--out", out, "Write the JSON report here");
  eval->add_option("--control-pairs", pairs, "Pairs for the control experiment; 0 skips it")->capture_default_str();
  eval->add_option("--seed", seed, "Seed for pair sampling and the bootstrap")->capture_default_str();

  auto* gen = app.add_subcommand("generate", "Answer one request file");
  gen->add_option("--in", in, "Request JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Response JSON (default stdout)");
  gen->add_option("--checkpoints", ckpt, std::string("Checkpoint directory (default $") + kCheckpointEnv + ")");

  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port, "0 picks a free port")->capture_default_str()->check(CLI::Range(0, 65535));
  serve->add_option("--checkpoints", ckpt, std::string("Checkpoint directory (default $") + kCheckpointEnv + ")");

  auto* midi = app.add_subcommand("export-midi", "Write measures as a MIDI file");
  auto* in_opt = midi->add_option("--in", in, "JSON with 'missing' or 'measures'")->check(CLI::ExistingFile);
  auto* data_opt = midi->add_option("--data", data, "Corpus directory")->check(CLI::ExistingDirectory);
  midi->add_option("--id", id, "Melody id within the corpus")->needs(data_opt);
  midi->add_option("--out", out, "Output .mid")->required();
  midi->add_option("--tempo", tempo, "Quarter notes per minute");
  in_opt->excludes(data_opt);

  auto* toy = app.add_subcommand("make-toy-corpus", "Write a synthetic ABC corpus");
  toy->add_option("--out", out, "Output directory")->required();
  toy->add_option("--count", count, "Number of tunes")->capture_default_str();
  toy->add_option("--measures", measures, "Measures per tune")->capture_default_str();
  toy->add_option("--seed", seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    if (*pre) return cmd_preprocess(raw, out, seed);
    if (*train) return cmd_train(stage, config, data, out);
    if (*eval) return cmd_eval(data, ckpt, out, pairs, seed);
    if (*gen) return cmd_generate(in, out, ckpt);
    if (*serve) return cmd_serve(host, port, ckpt);
    if (*midi) {
      if (in.empty() && id.empty()) throw ValidationError("export-midi needs --in, or --data with --id");
      return cmd_export_midi(in, data, id, out, tempo);
    }
    if (*toy) return cmd_toy(out, count, seed, measures);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInternal;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kExitInternal;
  }
  return kExitInternal;
}
