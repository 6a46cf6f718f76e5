#pragma once

// HTTP inference service: POST /generate, GET /health, GET /model and
// POST /render (MIDI bytes).

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "sketchnet/metrics.hpp"
#include "sketchnet/pipeline.hpp"
#include "sketchnet/score.hpp"

namespace sketchnet {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kCheckpointEnv = "SKETCHNET_CHECKPOINT_DIR";

struct GenerateRequest {
  std::vector<FrameSequence> past;
  std::vector<FrameSequence> future;
  SketchSpec sketch;
  std::optional<std::uint64_t> seed;
  double temperature = 0.0;
  bool debug = false;
};

namespace detail {

inline std::vector<FrameSequence> measures_from_json(const nlohmann::json& j, std::size_t count, const char* what) {
  if (!j.is_array()) throw ValidationError(std::string(what) + " must be an array of measures");
  if (j.size() != count) {
    throw ValidationError(std::string(what) + " must hold " + std::to_string(count) + " measures, got " +
                          std::to_string(j.size()));
  }
  std::vector<FrameSequence> out;
  for (const auto& m : j) out.push_back(frames_from_json(m));
  return out;
}

inline nlohmann::json measures_to_json(std::span<const FrameSequence> ms) {
  auto arr = nlohmann::json::array();
  for (const auto& f : ms) arr.push_back(f.tokens);
  return arr;
}

}  // namespace detail

/// Strict parse; any problem is a ValidationError.
inline GenerateRequest parse_generate_request(const nlohmann::json& j, const WindowShape& shape = {}) {
  if (!j.is_object()) throw ValidationError("request must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (k != "past" && k != "future" && k != "sketch" && k != "seed" && k != "temperature" && k != "debug") {
      throw ValidationError("unknown request field '" + k + "'");
    }
  }
  if (!j.contains("past") || !j.contains("future")) throw ValidationError("request needs 'past' and 'future'");
  GenerateRequest r;
  r.past = detail::measures_from_json(j["past"], static_cast<std::size_t>(shape.past), "past");
  r.future = detail::measures_from_json(j["future"], static_cast<std::size_t>(shape.future), "future");
  if (j.contains("sketch") && !j["sketch"].is_null()) {
    try {
      r.sketch = sketch_from_json(j["sketch"], shape);
    } catch (const SpecError& e) {
      throw ValidationError(std::string("sketch: ") + e.what());
    }
  }
  if (j.contains("seed") && !j["seed"].is_null()) {
    if (!j["seed"].is_number_unsigned()) throw ValidationError("seed must be a non-negative integer");
    r.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("temperature")) {
    if (!j["temperature"].is_number() || j["temperature"].get<double>() < 0) {
      throw ValidationError("temperature must be a non-negative number");
    }
    r.temperature = j["temperature"].get<double>();
  }
  if (j.contains("debug")) {
    if (!j["debug"].is_boolean()) throw ValidationError("debug must be a boolean");
    r.debug = j["debug"].get<bool>();
  }
  return r;
}

inline nlohmann::json to_json(const GenerateRequest& r) {
  nlohmann::json j{{"past", detail::measures_to_json(r.past)},
                   {"future", detail::measures_to_json(r.future)},
                   {"sketch", to_json(r.sketch)}};
  if (r.seed) j["seed"] = *r.seed;
  if (r.temperature != 0.0) j["temperature"] = r.temperature;
  if (r.debug) j["debug"] = true;
  return j;
}

struct Adherence {
  int index = 0;
  std::optional<double> pitch;   // LCS accuracy of the measure's onsets vs the contour
  std::optional<double> rhythm;  // fraction of frames matching the rhythm sketch
};

/// Adherence of raw decoded measures to each sketched measure.
inline std::vector<Adherence> sketch_adherence(std::span<const FrameSequence> missing, const SketchSpec& spec,
                                               const WindowShape& shape = {}) {
  std::vector<Adherence> out;
  for (const auto& m : spec.measures) {
    const auto& gen = missing[static_cast<std::size_t>(m.index - shape.past)];
    Adherence a{m.index, std::nullopt, std::nullopt};
    if (m.pitches) {
      const auto g = onset_pitches(std::span(&gen, 1));
      a.pitch = static_cast<double>(lcs_length(g, *m.pitches)) / static_cast<double>(m.pitches->size());
    }
    if (m.rhythm) {
      const auto r = rhythm_of(gen);
      int same = 0;
      for (std::size_t t = 0; t < kFramesPerMeasure; ++t) same += r[t] == (*m.rhythm)[t];
      a.rhythm = same / static_cast<double>(kFramesPerMeasure);
    }
    out.push_back(a);
  }
  return out;
}

struct GenerateResponse {
  std::vector<FrameSequence> missing;  // repaired for playback
  std::vector<FrameSequence> raw;      // decoder output as produced
  std::vector<std::vector<double>> latents;
  CheckpointIds ids;
  std::uint64_t seed = 0;
  std::vector<Adherence> adherence;

  nlohmann::json to_json(bool debug) const {
    auto adh = nlohmann::json::array();
    for (const auto& a : adherence) {
      nlohmann::json e{{"index", a.index}};
      if (a.pitch) e["pitch"] = *a.pitch;
      if (a.rhythm) e["rhythm"] = *a.rhythm;
      adh.push_back(e);
    }
    nlohmann::json j{{"missing", detail::measures_to_json(missing)},
                     {"model", {{"vae", ids.vae}, {"inpainter", ids.inpainter}, {"connector", ids.connector},
                                {"version", kVersion}}},
                     {"seed", seed},
                     {"adherence", adh}};
    if (debug) {
      j["raw"] = detail::measures_to_json(raw);
      j["latents"] = latents;
    }
    return j;
  }
};

/// encode -> inpaint -> sketch -> connect -> decode for one request.
template <class T>
GenerateResponse generate(const ModelStack<T>& stack, const GenerateRequest& req) {
  if (!stack.inpainter || !stack.connector) throw ModelNotLoaded("all three checkpoints must be loaded");
  const auto& shape = stack.shape;
  if (req.past.size() != static_cast<std::size_t>(shape.past) ||
      req.future.size() != static_cast<std::size_t>(shape.future)) {
    throw ValidationError("context does not match the model's window shape");
  }
  validate(req.sketch, shape);
  ContextWindow w;
  w.past = req.past;
  w.future = req.future;
  w.missing.assign(static_cast<std::size_t>(shape.missing), FrameSequence::rest());
  w.source_id = "request";

  GenerateResponse r;
  r.seed = req.seed ? *req.seed : std::random_device{}();
  std::mt19937_64 rng(r.seed);
  const std::vector<SketchSpec> sketches{req.sketch};
  const auto out = stack.complete(std::span(&w, 1), true, &sketches, req.temperature, &rng);
  r.raw = out.missing[0];
  for (const auto& f : r.raw) r.missing.push_back(repair_for_playback(f));
  for (Eigen::Index i = 0; i < out.latents.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(out.latents.cols()));
    for (Eigen::Index k = 0; k < out.latents.cols(); ++k) row[static_cast<std::size_t>(k)] = out.latents(i, k);
    r.latents.push_back(std::move(row));
  }
  r.ids = stack.ids;
  r.adherence = sketch_adherence(r.raw, req.sketch, shape);
  return r;
}

struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline Reply error_reply(int status, const std::string& type, const std::string& message) {
  return {status, nlohmann::json{{"error", {{"type", type}, {"message", message}}}}.dump()};
}

/// Request handlers over a read-only model stack, usable with or without a
/// listening socket.
class Service {
 public:
  Service() = default;

  /// Loads all three checkpoints; on failure the service stays up and
  /// reports the reason.
  explicit Service(const std::filesystem::path& checkpoint_dir) : dir_(checkpoint_dir) {
    try {
      stack_.emplace(load_stack<float>(checkpoint_dir, true));
    } catch (const std::exception& e) {
      load_error_ = e.what();
    }
  }

  explicit Service(ModelStack<float> stack) : stack_(std::move(stack)) {}

  bool loaded() const { return stack_.has_value(); }
  const std::string& load_error() const { return load_error_; }

  Reply health() const {
    nlohmann::json j{{"status", loaded() ? "ok" : "unavailable"}, {"loaded", loaded()}, {"version", kVersion}};
    if (loaded()) {
      j["checkpoints"] = {{"vae", stack_->ids.vae}, {"inpainter", stack_->ids.inpainter},
                          {"connector", stack_->ids.connector}};
    } else {
      j["checkpoints"] = nullptr;
      j["error"] = load_error_.empty() ? "no checkpoint directory configured" : load_error_;
    }
    return {200, j.dump()};
  }

  Reply model() const {
    if (!loaded()) return error_reply(503, "ModelNotLoaded", "no model loaded");
    const auto& s = *stack_;
    nlohmann::json j{{"version", kVersion},
                     {"checkpoints", {{"vae", s.ids.vae}, {"inpainter", s.ids.inpainter}, {"connector", s.ids.connector}}},
                     {"window", {{"past", s.shape.past}, {"missing", s.shape.missing}, {"future", s.shape.future}}},
                     {"vae", s.vae.config().to_json()},
                     {"inpainter", s.inpainter->config().to_json()},
                     {"connector", s.connector->config().to_json()}};
    return {200, j.dump()};
  }

  Reply generate(const std::string& body) const {
    return guarded([&] {
      const auto shape = stack_ ? stack_->shape : WindowShape{};
      const auto req = parse_generate_request(parse_body(body), shape);
      if (!loaded()) throw ModelNotLoaded("no model loaded");
      return Reply{200, sketchnet::generate(*stack_, req).to_json(req.debug).dump()};
    });
  }

  /// Body: {"measures": [[24 tokens], ...], "tempo": bpm}. Replies with a MIDI file.
  Reply render(const std::string& body) const {
    return guarded([&] {
      const auto j = parse_body(body);
      if (!j.is_object() || !j.contains("measures") || !j["measures"].is_array() || j["measures"].empty()) {
        throw ValidationError("render needs a non-empty 'measures' array");
      }
      std::vector<FrameSequence> ms;
      for (const auto& m : j["measures"]) ms.push_back(frames_from_json(m));
      double tempo = 120.0;
      if (j.contains("tempo")) {
        if (!j["tempo"].is_number() || j["tempo"].get<double>() <= 0) throw ValidationError("tempo must be positive");
        tempo = j["tempo"];
      }
      const auto bytes = export_midi(ms, tempo);
      return Reply{200, std::string(bytes.begin(), bytes.end()), "audio/midi"};
    });
  }

  void mount(httplib::Server& server) const {
    auto send = [](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Get("/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, model()); });
    server.Post("/generate",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, generate(req.body)); });
    server.Post("/render",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, render(req.body)); });
  }

 private:
  static nlohmann::json parse_body(const std::string& body) {
    try {
      return nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(std::string("malformed JSON: ") + e.what());
    }
  }

  template <class F>
  static Reply guarded(F&& f) {
    try {
      return f();
    } catch (const ModelNotLoaded& e) {
      return error_reply(503, "ModelNotLoaded", e.what());
    } catch (const ValidationError& e) {
      return error_reply(400, "ValidationError", e.what());
    } catch (const SpecError& e) {
      return error_reply(400, "ValidationError", e.what());
    } catch (const std::exception& e) {
      return error_reply(500, "InternalError", e.what());
    }
  }

  std::filesystem::path dir_;
  std::optional<ModelStack<float>> stack_;
  std::string load_error_;
};

/// The checkpoint directory: an explicit path wins over the environment.
inline std::optional<std::filesystem::path> checkpoint_dir(const std::string& flag = "") {
  if (!flag.empty()) return std::filesystem::path(flag);
  if (const char* env = std::getenv(kCheckpointEnv); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

}  // namespace sketchnet
