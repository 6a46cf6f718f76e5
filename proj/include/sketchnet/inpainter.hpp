#pragma once

// Latent inpainter: per stream, a forward GRU over the past latents and a
// backward GRU over the future latents seed a generation GRU that unrolls the
// missing latents. The pitch and rhythm streams share nothing.

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/checkpoint.hpp"
#include "sketchnet/vae.hpp"

namespace sketchnet {

struct WindowShape {
  int past = 6;
  int missing = 4;
  int future = 6;
  int total() const { return past + missing + future; }
  bool operator==(const WindowShape&) const = default;
};

struct InpainterConfig {
  int hidden = 512;
  double teacher_forcing = 0.5;
  std::uint64_t seed = 2;

  nlohmann::json to_json() const { return {{"hidden", hidden}, {"teacher_forcing", teacher_forcing}, {"seed", seed}}; }
  static InpainterConfig from_json(const nlohmann::json& j) {
    InpainterConfig c;
    c.hidden = j.at("hidden");
    c.teacher_forcing = j.at("teacher_forcing");
    c.seed = j.at("seed");
    return c;
  }
};

/// Latents for a batch of windows, each block time-major (row m * B + b) with
/// columns [pitch | rhythm].
template <class T>
struct WindowLatents {
  Matrix<T> past;
  Matrix<T> missing;
  Matrix<T> future;
  Eigen::Index batch = 0;
};

template <class T>
class SketchInpainter {
 public:
  /// Per-stream initial states for the generation GRUs.
  struct ContextState {
    Var<T> h_pitch;
    Var<T> h_rhythm;
  };

  /// Predicted missing latents, time-major, [pitch | rhythm].
  struct Prediction {
    Var<T> s_pitch;
    Var<T> s_rhythm;
    Var<T> joint() const { return nn::concat_cols<T>({s_pitch, s_rhythm}); }
  };

  SketchInpainter(InpainterConfig config, int pitch_latent, int rhythm_latent)
      : config_(config), pitch_dims_(pitch_latent), rhythm_dims_(rhythm_latent) {
    std::mt19937_64 rng(config_.seed);
    pitch_ = Stream(params_, "pitch", pitch_latent, config_.hidden, rng);
    rhythm_ = Stream(params_, "rhythm", rhythm_latent, config_.hidden, rng);
  }

  SketchInpainter(const SketchInpainter&) = delete;
  SketchInpainter& operator=(const SketchInpainter&) = delete;
  SketchInpainter(SketchInpainter&&) noexcept = default;

  const InpainterConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  int latent() const { return pitch_dims_ + rhythm_dims_; }

  ContextState encode_context(Tape<T>& tape, const Var<T>& past, const Var<T>& future, Eigen::Index batch) const {
    if (batch <= 0 || past.rows() % batch != 0 || future.rows() % batch != 0 || past.rows() == 0 ||
        future.rows() == 0) {
      throw MaskError("context blocks must hold whole measures for every window");
    }
    if (past.cols() != latent() || future.cols() != latent()) throw ShapeMismatch("context latent width");
    return {pitch_.context(tape, nn::slice_cols(past, 0, pitch_dims_), nn::slice_cols(future, 0, pitch_dims_), batch),
            rhythm_.context(tape, nn::slice_cols(past, pitch_dims_, rhythm_dims_),
                            nn::slice_cols(future, pitch_dims_, rhythm_dims_), batch)};
  }

  /// Unrolls `missing` steps. With a teacher (time-major [pitch | rhythm]),
  /// each step after the first is fed the true previous latent with
  /// probability `teacher_forcing`, drawn once per step from `rng`.
  Prediction predict_missing(Tape<T>& tape, const ContextState& state, int missing, const Var<T>* teacher = nullptr,
                             std::mt19937_64* rng = nullptr) const {
    if (missing < 1) throw MaskError("at least one missing measure is required");
    const auto B = state.h_pitch.rows();
    std::vector<bool> forced(static_cast<std::size_t>(missing), false);
    if (teacher) {
      if (teacher->rows() != missing * B || teacher->cols() != latent()) throw ShapeMismatch("teacher latents");
      std::bernoulli_distribution coin(config_.teacher_forcing);
      for (int m = 1; m < missing; ++m) forced[static_cast<std::size_t>(m)] = rng ? coin(*rng) : true;
    }
    Prediction p;
    p.s_pitch = pitch_.generate(tape, state.h_pitch, missing, teacher ? nn::slice_cols(*teacher, 0, pitch_dims_) : Var<T>{},
                                forced);
    p.s_rhythm = rhythm_.generate(tape, state.h_rhythm, missing,
                                  teacher ? nn::slice_cols(*teacher, pitch_dims_, rhythm_dims_) : Var<T>{}, forced);
    return p;
  }

  /// Free-running prediction from values.
  Matrix<T> predict(const Matrix<T>& past, const Matrix<T>& future, Eigen::Index batch, int missing) const {
    Tape<T> tape(false);
    const auto state = encode_context(tape, tape.constant(past), tape.constant(future), batch);
    return predict_missing(tape, state, missing).joint().value();
  }

  void save(const std::filesystem::path& path, const std::string& vae_id) const { write_file(path, serialize(vae_id)); }

  std::string serialize(const std::string& vae_id) const {
    auto hyper = config_.to_json();
    hyper["pitch_latent"] = pitch_dims_;
    hyper["rhythm_latent"] = rhythm_dims_;
    return serialize_checkpoint("inpainter", {{"hyper", hyper}, {"parents", {{"vae", vae_id}}}}, params_);
  }

  /// Restores a checkpoint, requiring it to have been trained against `vae_id`.
  static SketchInpainter from_checkpoint(const Checkpoint& ck, const std::string& vae_id) {
    if (ck.kind != "inpainter") throw CheckpointMismatch("expected an inpainter checkpoint, got " + ck.kind);
    const auto parent = ck.meta.at("parents").value("vae", std::string{});
    if (parent != vae_id) throw CheckpointMismatch("inpainter was trained against vae " + parent + ", not " + vae_id);
    const auto& h = ck.meta.at("hyper");
    SketchInpainter inp(InpainterConfig::from_json(h), h.at("pitch_latent"), h.at("rhythm_latent"));
    restore_parameters(ck, inp.params_);
    return inp;
  }

 private:
  struct Stream {
    nn::Gru<T> past, future, gen;
    nn::Linear<T> combine, out;
    nn::Parameter<T>* start = nullptr;
    int hidden = 0;

    Stream() = default;
    Stream(nn::ParamStore<T>& store, const std::string& name, int dims, int h, std::mt19937_64& rng) : hidden(h) {
      past = nn::Gru<T>(store, name + ".past_gru", dims, h, rng);
      future = nn::Gru<T>(store, name + ".future_gru", dims, h, rng);
      combine = nn::Linear<T>(store, name + ".combine", 2 * h, h, rng);
      gen = nn::Gru<T>(store, name + ".gen_gru", dims, h, rng);
      out = nn::Linear<T>(store, name + ".out", h, dims, rng);
      start = store.add(name + ".start", 1, dims);
      nn::init_normal(*start, T(0.1), rng);
    }

    Var<T> context(Tape<T>& tape, const Var<T>& p, const Var<T>& f, Eigen::Index B) const {
      const auto h0 = tape.constant(Matrix<T>::Zero(B, hidden));
      const auto hp = past.run(tape, p, B, h0);
      const auto hf = future.run(tape, f, B, h0, true);
      return nn::tanh(combine(tape, nn::concat_cols<T>({hp, hf})));
    }

    Var<T> generate(Tape<T>& tape, Var<T> h, int missing, const Var<T>& teacher, const std::vector<bool>& forced) const {
      const auto B = h.rows();
      auto input = nn::repeat_rows(tape.param(*start), B);
      std::vector<Var<T>> outs;
      for (int m = 0; m < missing; ++m) {
        if (m > 0) input = forced[static_cast<std::size_t>(m)] ? nn::slice_rows(teacher, (m - 1) * B, B) : outs.back();
        h = gen.step(tape, gen.project(tape, input), h);
        outs.push_back(out(tape, h));
      }
      return nn::concat_rows(outs);
    }
  };

  InpainterConfig config_;
  int pitch_dims_;
  int rhythm_dims_;
  nn::ParamStore<T> params_;
  Stream pitch_, rhythm_;
};

/// Mean frame cross-entropy of decoding `latents` (time-major, B windows)
/// through the VAE decoder with teacher frames from `target`
/// (target[b][m] is window b's m-th missing measure).
template <class T>
Var<T> decode_loss(Tape<T>& tape, const SketchVae<T>& vae, const Var<T>& latents,
                   const std::vector<std::vector<FrameSequence>>& target) {
  const auto B = static_cast<Eigen::Index>(target.size());
  if (B == 0 || latents.rows() % B != 0) throw ShapeMismatch("latents do not cover the target windows");
  const auto M = latents.rows() / B;
  std::vector<FrameSequence> frames(static_cast<std::size_t>(latents.rows()));
  for (Eigen::Index b = 0; b < B; ++b) {
    if (static_cast<Eigen::Index>(target[static_cast<std::size_t>(b)].size()) != M) {
      throw ShapeMismatch("target window has the wrong number of missing measures");
    }
    for (Eigen::Index m = 0; m < M; ++m) {
      frames[static_cast<std::size_t>(m * B + b)] = target[static_cast<std::size_t>(b)][static_cast<std::size_t>(m)];
    }
  }
  const auto dec = vae.decode(tape, latents, &frames);
  return nn::cross_entropy(dec.logits, SketchVae<T>::frame_targets(frames));
}

}  // namespace sketchnet
