#pragma once

// Sketch connector: fuses inpainter predictions with truths (training) or
// user sketches (inference), then refines the whole window with a pre-LN
// transformer encoder. The refined latents at the missing positions are the
// fused latents plus a learned correction whose output map starts at zero.

#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/checkpoint.hpp"
#include "sketchnet/inpainter.hpp"
#include "sketchnet/vae.hpp"

namespace sketchnet {

// ---- sketches --------------------------------------------------------------

struct MeasureSketch {
  int index = 0;  // position in the window, inside the missing block
  std::optional<std::vector<int>> pitches;
  std::optional<RhythmSeq> rhythm;
  bool operator==(const MeasureSketch&) const = default;
};

struct SketchSpec {
  std::vector<MeasureSketch> measures;
  bool empty() const { return measures.empty(); }
  bool operator==(const SketchSpec&) const = default;
};

/// Throws SpecError unless every entry targets a distinct missing position and
/// carries a non-empty in-range contour and/or a 24-step rhythm.
inline void validate(const SketchSpec& spec, const WindowShape& shape = {}) {
  std::set<int> seen;
  for (const auto& m : spec.measures) {
    if (m.index < shape.past || m.index >= shape.past + shape.missing) {
      throw SpecError("sketch index " + std::to_string(m.index) + " is outside the missing measures " +
                      std::to_string(shape.past) + ".." + std::to_string(shape.past + shape.missing - 1));
    }
    if (!seen.insert(m.index).second) throw SpecError("measure " + std::to_string(m.index) + " sketched twice");
    if (m.pitches) {
      if (m.pitches->empty()) throw SpecError("empty pitch contour at measure " + std::to_string(m.index));
      for (int p : *m.pitches) {
        if (p < 0 || p > 127) throw SpecError("contour pitch " + std::to_string(p) + " outside 0..127");
      }
    }
    if (m.rhythm && !is_valid(*m.rhythm)) throw SpecError("rhythm values must be 0, 1 or 2");
  }
}

inline nlohmann::json to_json(const SketchSpec& spec) {
  auto arr = nlohmann::json::array();
  for (const auto& m : spec.measures) {
    nlohmann::json j{{"index", m.index}};
    if (m.pitches) j["pitches"] = *m.pitches;
    if (m.rhythm) j["rhythm"] = m.rhythm->tokens;
    arr.push_back(std::move(j));
  }
  return {{"measures", std::move(arr)}};
}

/// Parses {measures: [{index, pitches?, rhythm?}]}; unknown keys are errors.
inline SketchSpec sketch_from_json(const nlohmann::json& j, const WindowShape& shape = {}) {
  if (!j.is_object()) throw SpecError("sketch must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "measures") throw SpecError("unknown sketch field '" + key + "'");
  }
  SketchSpec spec;
  if (!j.contains("measures")) return spec;
  const auto& ms = j.at("measures");
  if (!ms.is_array()) throw SpecError("sketch.measures must be an array");
  for (const auto& e : ms) {
    if (!e.is_object()) throw SpecError("sketch entries must be objects");
    MeasureSketch m;
    for (const auto& [key, v] : e.items()) {
      if (key == "index") {
        if (!v.is_number_integer()) throw SpecError("sketch index must be an integer");
        m.index = v.get<int>();
      } else if (key == "pitches") {
        if (!v.is_array()) throw SpecError("pitches must be an array");
        std::vector<int> ps;
        for (const auto& p : v) {
          if (!p.is_number_integer()) throw SpecError("pitches must be integers");
          ps.push_back(p.get<int>());
        }
        m.pitches = std::move(ps);
      } else if (key == "rhythm") {
        if (!v.is_array() || v.size() != kFramesPerMeasure) throw SpecError("rhythm must hold 24 values");
        RhythmSeq r;
        for (std::size_t i = 0; i < kFramesPerMeasure; ++i) {
          if (!v[i].is_number_integer()) throw SpecError("rhythm values must be integers");
          r[i] = v[i].get<int>();
        }
        m.rhythm = r;
      } else {
        throw SpecError("unknown sketch entry field '" + key + "'");
      }
    }
    if (!e.contains("index")) throw SpecError("sketch entry lacks an index");
    spec.measures.push_back(std::move(m));
  }
  validate(spec, shape);
  return spec;
}

// ---- random unmasking --------------------------------------------------------

enum class UnmaskFlag { KeptPrediction, UnmaskedPitch, UnmaskedRhythm, UnmaskedBoth };

struct UnmaskRecord {
  std::vector<UnmaskFlag> flags;  // one per row of the fused block

  double unmasked_fraction() const {
    if (flags.empty()) return 0.0;
    std::size_t n = 0;
    for (auto f : flags) n += f != UnmaskFlag::KeptPrediction;
    return static_cast<double>(n) / static_cast<double>(flags.size());
  }
};

template <class T>
struct Unmasked {
  Matrix<T> fused;
  UnmaskRecord record;
};

/// Replaces each row of `predicted` by the matching row of `truth` with
/// probability `rate`. With `per_half`, the pitch and rhythm halves are drawn
/// independently.
template <class T>
Unmasked<T> random_unmask(const Matrix<T>& predicted, const Matrix<T>& truth, double rate, std::mt19937_64& rng,
                          int pitch_dims, bool per_half = false) {
  if (rate < 0.0 || rate > 1.0) throw RangeError("unmask rate must lie in [0, 1]");
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols()) throw ShapeMismatch("unmask shapes");
  std::bernoulli_distribution coin(rate);
  Unmasked<T> out{predicted, {}};
  const auto rhythm_dims = predicted.cols() - pitch_dims;
  for (Eigen::Index i = 0; i < predicted.rows(); ++i) {
    bool p = coin(rng);
    bool r = per_half ? coin(rng) : p;
    if (p) out.fused.row(i).head(pitch_dims) = truth.row(i).head(pitch_dims);
    if (r) out.fused.row(i).tail(rhythm_dims) = truth.row(i).tail(rhythm_dims);
    out.record.flags.push_back(p && r ? UnmaskFlag::UnmaskedBoth
                               : p    ? UnmaskFlag::UnmaskedPitch
                               : r    ? UnmaskFlag::UnmaskedRhythm
                                      : UnmaskFlag::KeptPrediction);
  }
  return out;
}

/// Overwrites sketched halves of one window's missing latents (rows in
/// missing-block order) with encoder posterior means of the sketch.
template <class T>
Matrix<T> apply_sketch(const Matrix<T>& predicted, const SketchSpec& spec, const SketchVae<T>& vae,
                       const WindowShape& shape = {}) {
  validate(spec, shape);
  if (predicted.rows() != shape.missing || predicted.cols() != vae.config().latent()) {
    throw ShapeMismatch("predicted latents do not match the missing block");
  }
  Matrix<T> out = predicted;
  const int P = vae.config().pitch_latent;
  for (const auto& m : spec.measures) {
    const auto row = m.index - shape.past;
    if (m.pitches) {
      const std::vector<PitchSeq> seq{pitch_seq_from_contour(*m.pitches)};
      out.row(row).head(P) = vae.pitch_means(seq).row(0);
    }
    if (m.rhythm) {
      const std::vector<RhythmSeq> seq{*m.rhythm};
      out.row(row).tail(vae.config().rhythm_latent) = vae.rhythm_means(seq).row(0);
    }
  }
  return out;
}

// ---- transformer -------------------------------------------------------------

struct ConnectorConfig {
  int layers = 4;
  int heads = 8;
  int d_model = 256;
  int ffn = 1024;
  double unmask_rate = 0.3;
  bool per_half_unmask = false;
  std::uint64_t seed = 3;

  nlohmann::json to_json() const {
    return {{"layers", layers}, {"heads", heads},         {"d_model", d_model},
            {"ffn", ffn},       {"unmask_rate", unmask_rate}, {"per_half_unmask", per_half_unmask},
            {"seed", seed}};
  }
  static ConnectorConfig from_json(const nlohmann::json& j) {
    ConnectorConfig c;
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.d_model = j.at("d_model");
    c.ffn = j.at("ffn");
    c.unmask_rate = j.at("unmask_rate");
    c.per_half_unmask = j.at("per_half_unmask");
    c.seed = j.at("seed");
    return c;
  }
};

/// Sinusoidal absolute position table, `length` x `dims`.
template <class T>
Matrix<T> sinusoidal_positions(int length, int dims) {
  Matrix<T> pe(length, dims);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dims; ++i) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / dims);
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <class T>
class SketchConnector {
 public:
  SketchConnector(ConnectorConfig config, int latent, WindowShape shape = {})
      : config_(config), latent_(latent), shape_(shape) {
    if (config_.d_model % config_.heads != 0) throw ShapeMismatch("d_model must be divisible by heads");
    std::mt19937_64 rng(config_.seed);
    const int D = config_.d_model;
    if (D != latent_) input_ = nn::Linear<T>(params_, "connector.input", latent_, D, rng);
    for (int l = 0; l < config_.layers; ++l) {
      const auto n = "connector.layer" + std::to_string(l);
      Layer L;
      L.ln1 = nn::LayerNorm<T>(params_, n + ".ln1", D);
      L.q = nn::Linear<T>(params_, n + ".q", D, D, rng);
      L.k = nn::Linear<T>(params_, n + ".k", D, D, rng);
      L.v = nn::Linear<T>(params_, n + ".v", D, D, rng);
      L.o = nn::Linear<T>(params_, n + ".o", D, D, rng);
      L.ln2 = nn::LayerNorm<T>(params_, n + ".ln2", D);
      L.ff1 = nn::Linear<T>(params_, n + ".ff1", D, config_.ffn, rng);
      L.ff2 = nn::Linear<T>(params_, n + ".ff2", config_.ffn, D, rng);
      layers_.push_back(L);
    }
    final_ln_ = nn::LayerNorm<T>(params_, "connector.final_ln", D);
    output_ = nn::Linear<T>(params_, "connector.output", D, latent_, rng);
    output_.zero();
    positions_ = sinusoidal_positions<T>(shape_.total(), D);
  }

  SketchConnector(const SketchConnector&) = delete;
  SketchConnector& operator=(const SketchConnector&) = delete;
  SketchConnector(SketchConnector&&) noexcept = default;

  const ConnectorConfig& config() const { return config_; }
  const WindowShape& shape() const { return shape_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// Past, fused-missing and future blocks are time-major for B windows;
  /// returns refined missing latents in the same layout.
  Var<T> connect(Tape<T>& tape, const Var<T>& past, const Var<T>& fused, const Var<T>& future,
                 Eigen::Index B) const {
    if (past.rows() != shape_.past * B || fused.rows() != shape_.missing * B || future.rows() != shape_.future * B) {
      throw ShapeMismatch("window blocks do not match the connector's window shape");
    }
    if (past.cols() != latent_ || fused.cols() != latent_ || future.cols() != latent_) {
      throw ShapeMismatch("window latent width");
    }
    const int S = shape_.total();
    std::vector<std::pair<int, Eigen::Index>> seq;
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int pos = 0; pos < S; ++pos) {
        if (pos < shape_.past) {
          seq.emplace_back(0, pos * B + b);
        } else if (pos < shape_.past + shape_.missing) {
          seq.emplace_back(1, (pos - shape_.past) * B + b);
        } else {
          seq.emplace_back(2, (pos - shape_.past - shape_.missing) * B + b);
        }
      }
    }
    auto x = nn::gather_rows<T>({past, fused, future}, seq);
    if (input_.weight) x = input_(tape, x);
    Matrix<T> pe(B * S, config_.d_model);
    for (Eigen::Index b = 0; b < B; ++b) pe.middleRows(b * S, S) = positions_;
    x = nn::add(x, tape.constant(std::move(pe)));

    for (const auto& L : layers_) {
      const auto a = L.ln1(tape, x);
      const auto att = nn::multi_head_attention(L.q(tape, a), L.k(tape, a), L.v(tape, a), B, S, config_.heads);
      x = nn::add(x, L.o(tape, att));
      const auto f = L.ln2(tape, x);
      x = nn::add(x, L.ff2(tape, nn::relu(L.ff1(tape, f))));
    }
    const auto delta = output_(tape, final_ln_(tape, x));

    std::vector<std::pair<int, Eigen::Index>> back;
    for (int m = 0; m < shape_.missing; ++m) {
      for (Eigen::Index b = 0; b < B; ++b) back.emplace_back(0, b * S + shape_.past + m);
    }
    return nn::add(fused, nn::gather_rows<T>({delta}, back));
  }

  Matrix<T> connect(const Matrix<T>& past, const Matrix<T>& fused, const Matrix<T>& future, Eigen::Index B) const {
    Tape<T> tape(false);
    return connect(tape, tape.constant(past), tape.constant(fused), tape.constant(future), B).value();
  }

  void save(const std::filesystem::path& path, const std::string& vae_id, const std::string& inpainter_id) const {
    write_file(path, serialize(vae_id, inpainter_id));
  }

  std::string serialize(const std::string& vae_id, const std::string& inpainter_id) const {
    auto hyper = config_.to_json();
    hyper["latent"] = latent_;
    hyper["window"] = {shape_.past, shape_.missing, shape_.future};
    return serialize_checkpoint("connector",
                                {{"hyper", hyper}, {"parents", {{"vae", vae_id}, {"inpainter", inpainter_id}}}},
                                params_);
  }

  static SketchConnector from_checkpoint(const Checkpoint& ck, const std::string& vae_id,
                                         const std::string& inpainter_id) {
    if (ck.kind != "connector") throw CheckpointMismatch("expected a connector checkpoint, got " + ck.kind);
    const auto& parents = ck.meta.at("parents");
    if (parents.value("vae", std::string{}) != vae_id || parents.value("inpainter", std::string{}) != inpainter_id) {
      throw CheckpointMismatch("connector was trained against different upstream checkpoints");
    }
    const auto& h = ck.meta.at("hyper");
    const auto w = h.at("window");
    SketchConnector c(ConnectorConfig::from_json(h), h.at("latent"), {w.at(0), w.at(1), w.at(2)});
    restore_parameters(ck, c.params_);
    return c;
  }

 private:
  struct Layer {
    nn::LayerNorm<T> ln1, ln2;
    nn::Linear<T> q, k, v, o, ff1, ff2;
  };

  ConnectorConfig config_;
  int latent_;
  WindowShape shape_;
  nn::ParamStore<T> params_;
  nn::Linear<T> input_;
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_ln_;
  nn::Linear<T> output_;
  Matrix<T> positions_;
};

}  // namespace sketchnet
