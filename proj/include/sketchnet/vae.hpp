#pragma once

// Factorized measure VAE: separate bidirectional GRU encoders for the pitch
// contour and the rhythm pattern, and a hierarchical decoder that unrolls
// four beat states from z and six ticks per beat below each of them.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <limits>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/checkpoint.hpp"
#include "sketchnet/codec.hpp"
#include "sketchnet/nn/layers.hpp"

namespace sketchnet {

using nn::Matrix;
using nn::Tape;
using nn::Var;

inline constexpr int kFrameStartToken = kFrameVocab;  // decoder input before frame 0

struct VaeConfig {
  int embed = 128;
  int encoder_hidden = 256;  // per direction
  int pitch_latent = 128;
  int rhythm_latent = 128;
  int beat_hidden = 256;
  int tick_hidden = 256;
  std::uint64_t seed = 1;

  int latent() const { return pitch_latent + rhythm_latent; }

  nlohmann::json to_json() const {
    return {{"embed", embed},
            {"encoder_hidden", encoder_hidden},
            {"pitch_latent", pitch_latent},
            {"rhythm_latent", rhythm_latent},
            {"beat_hidden", beat_hidden},
            {"tick_hidden", tick_hidden},
            {"seed", seed},
            {"frame_vocab", kFrameVocab},
            {"pitch_vocab", kPitchVocab},
            {"rhythm_vocab", kRhythmVocab},
            {"frames_per_measure", kFramesPerMeasure}};
  }

  static VaeConfig from_json(const nlohmann::json& j) {
    if (j.at("frame_vocab") != kFrameVocab || j.at("pitch_vocab") != kPitchVocab ||
        j.at("rhythm_vocab") != kRhythmVocab || j.at("frames_per_measure") != kFramesPerMeasure) {
      throw CheckpointMismatch("checkpoint vocabulary does not match this build");
    }
    VaeConfig c;
    c.embed = j.at("embed");
    c.encoder_hidden = j.at("encoder_hidden");
    c.pitch_latent = j.at("pitch_latent");
    c.rhythm_latent = j.at("rhythm_latent");
    c.beat_hidden = j.at("beat_hidden");
    c.tick_hidden = j.at("tick_hidden");
    c.seed = j.at("seed");
    return c;
  }
};

/// Diagonal Gaussian per batch row.
template <class T>
struct GaussianPosterior {
  Matrix<T> mean;
  Matrix<T> stddev;
};

/// One measure's latent, split into its pitch and rhythm halves.
struct LatentPair {
  std::vector<float> z_pitch;
  std::vector<float> z_rhythm;

  bool finite() const {
    for (float v : z_pitch) if (!std::isfinite(v)) return false;
    for (float v : z_rhythm) if (!std::isfinite(v)) return false;
    return true;
  }

  template <class T>
  static LatentPair from_row(const Matrix<T>& z, Eigen::Index row, int pitch_dims) {
    LatentPair p;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      (c < pitch_dims ? p.z_pitch : p.z_rhythm).push_back(static_cast<float>(z(row, c)));
    }
    return p;
  }
};

/// Time-major token layout: row t * batch + b.
template <class Seq>
std::vector<int> time_major(std::span<const Seq> batch) {
  std::vector<int> ids(batch.size() * kFramesPerMeasure);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t = 0; t < kFramesPerMeasure; ++t) ids[t * batch.size() + b] = batch[b].tokens[t];
  }
  return ids;
}

/// Fraction of frames equal between prediction and target, pooled over the batch.
inline double reconstruction_accuracy(std::span<const FrameSequence> predicted, std::span<const FrameSequence> target) {
  if (predicted.size() != target.size()) throw ShapeMismatch("prediction and target batch sizes differ");
  if (target.empty()) throw EmptyInput("no measures to compare");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    for (std::size_t t = 0; t < kFramesPerMeasure; ++t) hit += predicted[i][t] == target[i][t];
  }
  return static_cast<double>(hit) / static_cast<double>(target.size() * kFramesPerMeasure);
}

struct DecodeOptions {
  double temperature = 0.0;  // 0 = greedy
  std::mt19937_64* rng = nullptr;
};

template <class T>
class SketchVae {
 public:
  struct Encoded {
    Var<T> mean;
    Var<T> logvar;
  };

  struct Decoded {
    Var<T> logits;                       // (24 * B) x 130, time-major
    std::vector<FrameSequence> frames;   // argmax (or sampled) tokens
  };

  struct Elbo {
    Var<T> total;
    Var<T> reconstruction;
    Var<T> kl;
  };

  explicit SketchVae(VaeConfig config) : config_(config) {
    std::mt19937_64 rng(config_.seed);
    const int E = config_.embed, H = config_.encoder_hidden;
    pitch_embed_ = nn::Embedding<T>(params_, "pitch_encoder.embed", kPitchVocab, E, rng);
    pitch_fwd_ = nn::Gru<T>(params_, "pitch_encoder.fwd", E, H, rng);
    pitch_bwd_ = nn::Gru<T>(params_, "pitch_encoder.bwd", E, H, rng);
    pitch_mean_ = nn::Linear<T>(params_, "pitch_encoder.mean", 2 * H, config_.pitch_latent, rng);
    pitch_logvar_ = nn::Linear<T>(params_, "pitch_encoder.logvar", 2 * H, config_.pitch_latent, rng);

    rhythm_embed_ = nn::Embedding<T>(params_, "rhythm_encoder.embed", kRhythmVocab, E, rng);
    rhythm_fwd_ = nn::Gru<T>(params_, "rhythm_encoder.fwd", E, H, rng);
    rhythm_bwd_ = nn::Gru<T>(params_, "rhythm_encoder.bwd", E, H, rng);
    rhythm_mean_ = nn::Linear<T>(params_, "rhythm_encoder.mean", 2 * H, config_.rhythm_latent, rng);
    rhythm_logvar_ = nn::Linear<T>(params_, "rhythm_encoder.logvar", 2 * H, config_.rhythm_latent, rng);

    const int Z = config_.latent(), Hb = config_.beat_hidden, Ht = config_.tick_hidden;
    beat_init_ = nn::Linear<T>(params_, "decoder.beat_init", Z, Hb, rng);
    beat_gru_ = nn::Gru<T>(params_, "decoder.beat_gru", Z, Hb, rng);
    tick_init_ = nn::Linear<T>(params_, "decoder.tick_init", Z, Ht, rng);
    frame_embed_ = nn::Embedding<T>(params_, "decoder.frame_embed", kFrameVocab + 1, E, rng);
    tick_gru_ = nn::Gru<T>(params_, "decoder.tick_gru", E, Ht, rng);
    beat_to_tick_ = nn::Linear<T>(params_, "decoder.beat_to_tick", Hb, 3 * Ht, rng);
    tick_out_ = nn::Linear<T>(params_, "decoder.tick_out", Ht, kFrameVocab, rng);
  }

  SketchVae(const SketchVae&) = delete;
  SketchVae& operator=(const SketchVae&) = delete;
  SketchVae(SketchVae&&) noexcept = default;

  const VaeConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  // ---- tape-level interface ----------------------------------------------

  Encoded encode_pitch(Tape<T>& tape, std::span<const PitchSeq> batch) const {
    for (const auto& p : batch) {
      for (int t : p.tokens) {
        if (t < 0 || t >= kPitchVocab) throw VocabError("pitch token " + std::to_string(t) + " out of range");
      }
    }
    return encode(tape, time_major(batch), batch.size(), pitch_embed_, pitch_fwd_, pitch_bwd_, pitch_mean_,
                  pitch_logvar_);
  }

  Encoded encode_rhythm(Tape<T>& tape, std::span<const RhythmSeq> batch) const {
    for (const auto& r : batch) {
      if (!is_valid(r)) throw VocabError("rhythm token out of range");
    }
    return encode(tape, time_major(batch), batch.size(), rhythm_embed_, rhythm_fwd_, rhythm_bwd_, rhythm_mean_,
                  rhythm_logvar_);
  }

  /// mean + exp(logvar / 2) * eps with eps drawn from `rng`.
  static Var<T> sample(Tape<T>& tape, const Encoded& e, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix<T> eps(e.mean.rows(), e.mean.cols());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(normal(rng));
    return nn::add(e.mean, nn::mul(nn::exp(nn::scale(e.logvar, T(0.5))), tape.constant(std::move(eps))));
  }

  /// Decodes B latents (B x latent). With `teacher`, the previous-frame input
  /// comes from the teacher; otherwise from the model's own output.
  Decoded decode(Tape<T>& tape, const Var<T>& z, const std::vector<FrameSequence>* teacher = nullptr,
                 DecodeOptions options = {}) const {
    if (z.cols() != config_.latent()) throw ShapeMismatch("latent width " + std::to_string(z.cols()));
    const auto B = z.rows();
    if (teacher && static_cast<Eigen::Index>(teacher->size()) != B) throw ShapeMismatch("teacher batch size");

    // Beat level.
    auto beat_h = nn::tanh(beat_init_(tape, z));
    const auto beat_in = beat_gru_.project(tape, z);
    std::vector<Var<T>> beat_to_tick;
    for (int j = 0; j < kBeatsPerMeasure; ++j) {
      beat_h = beat_gru_.step(tape, beat_in, beat_h);
      beat_to_tick.push_back(beat_to_tick_(tape, beat_h));
    }

    // Tick level.
    auto h = nn::tanh(tick_init_(tape, z));
    Decoded out;
    out.frames.assign(static_cast<std::size_t>(B), FrameSequence::rest());
    if (teacher) {
      std::vector<int> prev(static_cast<std::size_t>(B) * kFramesPerMeasure);
      for (Eigen::Index b = 0; b < B; ++b) {
        for (int t = 0; t < kFramesPerMeasure; ++t) {
          const int tok = t == 0 ? kFrameStartToken : (*teacher)[static_cast<std::size_t>(b)][static_cast<std::size_t>(t - 1)];
          if (!in_frame_vocab(tok) && tok != kFrameStartToken) throw VocabError("teacher frame out of range");
          prev[static_cast<std::size_t>(t * B + b)] = tok;
        }
      }
      const auto gx_all = tick_gru_.project(tape, frame_embed_(tape, prev));
      std::vector<Var<T>> states;
      for (int t = 0; t < kFramesPerMeasure; ++t) {
        const auto gx = nn::add(nn::slice_rows(gx_all, t * B, B), beat_to_tick[static_cast<std::size_t>(t / kTicksPerBeat)]);
        h = tick_gru_.step(tape, gx, h);
        states.push_back(h);
      }
      out.logits = tick_out_(tape, nn::concat_rows(states));
      fill_frames(out.logits.value(), B, options, out.frames);
      return out;
    }

    std::vector<int> prev(static_cast<std::size_t>(B), kFrameStartToken);
    std::vector<Var<T>> step_logits;
    for (int t = 0; t < kFramesPerMeasure; ++t) {
      const auto gx = nn::add(tick_gru_.project(tape, frame_embed_(tape, prev)),
                              beat_to_tick[static_cast<std::size_t>(t / kTicksPerBeat)]);
      h = tick_gru_.step(tape, gx, h);
      auto logits = tick_out_(tape, h);
      for (Eigen::Index b = 0; b < B; ++b) {
        const int tok = pick(logits.value().row(b), options);
        out.frames[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] = tok;
        prev[static_cast<std::size_t>(b)] = tok;
      }
      step_logits.push_back(logits);
    }
    out.logits = nn::concat_rows(step_logits);
    return out;
  }

  /// Targets in the decoder's time-major logit layout.
  static std::vector<int> frame_targets(std::span<const FrameSequence> frames) { return time_major(frames); }

  /// Reconstruction cross-entropy plus weighted KL of both posteriors.
  static Elbo elbo_loss(const Var<T>& logits, std::span<const FrameSequence> target, const Encoded& pitch,
                        const Encoded& rhythm, T kl_weight) {
    if (logits.rows() != static_cast<Eigen::Index>(target.size()) * kFramesPerMeasure || logits.cols() != kFrameVocab) {
      throw ShapeMismatch("logits do not match the target batch");
    }
    const auto targets = frame_targets(target);
    Elbo e;
    e.reconstruction = nn::cross_entropy(logits, targets);
    e.kl = nn::add(nn::kl_standard_normal(pitch.mean, pitch.logvar), nn::kl_standard_normal(rhythm.mean, rhythm.logvar));
    e.total = nn::add(e.reconstruction, nn::scale(e.kl, kl_weight));
    return e;
  }

  /// Full training pass on a batch of measures.
  Elbo forward_train(Tape<T>& tape, std::span<const FrameSequence> batch, std::mt19937_64& rng, T kl_weight,
                     bool teacher_forcing = true) const {
    std::vector<PitchSeq> pitch;
    std::vector<RhythmSeq> rhythm;
    for (const auto& f : batch) {
      auto [p, r] = factorize(f);
      pitch.push_back(p);
      rhythm.push_back(r);
    }
    const auto ep = encode_pitch(tape, pitch);
    const auto er = encode_rhythm(tape, rhythm);
    const auto z = nn::concat_cols<T>({sample(tape, ep, rng), sample(tape, er, rng)});
    const std::vector<FrameSequence> teacher(batch.begin(), batch.end());
    const auto dec = decode(tape, z, teacher_forcing ? &teacher : nullptr);
    return elbo_loss(dec.logits, batch, ep, er, kl_weight);
  }

  // ---- value-level interface ---------------------------------------------

  struct EncodeResult {
    GaussianPosterior<T> posterior;
    Matrix<T> sample;
  };

  EncodeResult encode_pitch(std::span<const PitchSeq> batch, std::mt19937_64& rng) const {
    Tape<T> tape(false);
    return finish_encode(tape, encode_pitch(tape, batch), rng);
  }

  EncodeResult encode_rhythm(std::span<const RhythmSeq> batch, std::mt19937_64& rng) const {
    Tape<T> tape(false);
    return finish_encode(tape, encode_rhythm(tape, batch), rng);
  }

  /// Posterior means [pitch | rhythm] for a batch of measures (B x latent).
  Matrix<T> encode_means(std::span<const FrameSequence> batch) const {
    std::vector<PitchSeq> pitch;
    std::vector<RhythmSeq> rhythm;
    for (const auto& f : batch) {
      auto [p, r] = factorize(f);
      pitch.push_back(p);
      rhythm.push_back(r);
    }
    Tape<T> tape(false);
    const auto ep = encode_pitch(tape, pitch);
    const auto er = encode_rhythm(tape, rhythm);
    Matrix<T> z(static_cast<Eigen::Index>(batch.size()), config_.latent());
    z.leftCols(config_.pitch_latent) = ep.mean.value();
    z.rightCols(config_.rhythm_latent) = er.mean.value();
    return z;
  }

  Matrix<T> pitch_means(std::span<const PitchSeq> batch) const {
    Tape<T> tape(false);
    return encode_pitch(tape, batch).mean.value();
  }

  Matrix<T> rhythm_means(std::span<const RhythmSeq> batch) const {
    Tape<T> tape(false);
    return encode_rhythm(tape, batch).mean.value();
  }

  struct DecodeResult {
    std::vector<Matrix<T>> logits;  // per item, 24 x 130
    std::vector<FrameSequence> frames;
  };

  DecodeResult decode(const Matrix<T>& z, const std::vector<FrameSequence>* teacher = nullptr,
                      DecodeOptions options = {}) const {
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      if (!std::isfinite(static_cast<double>(z.data()[i]))) throw ShapeMismatch("latent contains non-finite values");
    }
    Tape<T> tape(false);
    auto dec = decode(tape, tape.constant(z), teacher, options);
    DecodeResult out;
    out.frames = std::move(dec.frames);
    const auto B = z.rows();
    const auto& L = dec.logits.value();
    for (Eigen::Index b = 0; b < B; ++b) {
      Matrix<T> m(kFramesPerMeasure, kFrameVocab);
      for (int t = 0; t < kFramesPerMeasure; ++t) m.row(t) = L.row(t * B + b);
      out.logits.push_back(std::move(m));
    }
    return out;
  }

  /// Free-running reconstruction from posterior means.
  std::vector<FrameSequence> reconstruct(std::span<const FrameSequence> batch) const {
    return decode(encode_means(batch)).frames;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }

  std::string serialize() const {
    return serialize_checkpoint("sketchvae", {{"hyper", config_.to_json()}, {"parents", nlohmann::json::object()}},
                                params_);
  }

  static SketchVae from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "sketchvae") throw CheckpointMismatch("expected a sketchvae checkpoint, got " + ck.kind);
    SketchVae vae(VaeConfig::from_json(ck.meta.at("hyper")));
    restore_parameters(ck, vae.params_);
    return vae;
  }

 private:
  Encoded encode(Tape<T>& tape, const std::vector<int>& ids, std::size_t batch, const nn::Embedding<T>& embed,
                 const nn::Gru<T>& fwd, const nn::Gru<T>& bwd, const nn::Linear<T>& mean,
                 const nn::Linear<T>& logvar) const {
    const auto B = static_cast<Eigen::Index>(batch);
    if (B == 0) throw ShapeMismatch("empty batch");
    const auto x = embed(tape, ids);
    const auto h0 = tape.constant(Matrix<T>::Zero(B, config_.encoder_hidden));
    const auto hf = fwd.run(tape, x, B, h0);
    const auto hb = bwd.run(tape, x, B, h0, true);
    const auto h = nn::concat_cols<T>({hf, hb});
    return {mean(tape, h), logvar(tape, h)};
  }

  EncodeResult finish_encode(Tape<T>& tape, const Encoded& e, std::mt19937_64& rng) const {
    EncodeResult r;
    r.posterior.mean = e.mean.value();
    r.posterior.stddev = (e.logvar.value().array() * T(0.5)).exp().matrix();
    r.sample = sample(tape, e, rng).value();
    return r;
  }

  static int pick(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& row, const DecodeOptions& options) {
    Eigen::Index best = 0;
    if (options.temperature <= 0.0 || options.rng == nullptr) {
      row.maxCoeff(&best);
      return static_cast<int>(best);
    }
    const double m = static_cast<double>(row.maxCoeff());
    std::vector<double> w(static_cast<std::size_t>(row.size()));
    for (Eigen::Index i = 0; i < row.size(); ++i) {
      w[static_cast<std::size_t>(i)] = std::exp((static_cast<double>(row(i)) - m) / options.temperature);
    }
    std::discrete_distribution<int> dist(w.begin(), w.end());
    return dist(*options.rng);
  }

  static void fill_frames(const Matrix<T>& logits, Eigen::Index B, const DecodeOptions& options,
                          std::vector<FrameSequence>& frames) {
    for (int t = 0; t < kFramesPerMeasure; ++t) {
      for (Eigen::Index b = 0; b < B; ++b) {
        frames[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] = pick(logits.row(t * B + b), options);
      }
    }
  }

  VaeConfig config_;
  nn::ParamStore<T> params_;
  nn::Embedding<T> pitch_embed_, rhythm_embed_, frame_embed_;
  nn::Gru<T> pitch_fwd_, pitch_bwd_, rhythm_fwd_, rhythm_bwd_, beat_gru_, tick_gru_;
  nn::Linear<T> pitch_mean_, pitch_logvar_, rhythm_mean_, rhythm_logvar_;
  nn::Linear<T> beat_init_, tick_init_, beat_to_tick_, tick_out_;
};

}  // namespace sketchnet
