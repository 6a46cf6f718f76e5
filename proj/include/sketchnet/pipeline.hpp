#pragma once

// Window-level plumbing shared by training, evaluation and the service:
// encoding windows into latents, batching them time-major, and running the
// full encode -> inpaint -> sketch -> connect -> decode stack.

#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sketchnet/connector.hpp"
#include "sketchnet/corpus.hpp"
#include "sketchnet/inpainter.hpp"
#include "sketchnet/vae.hpp"

namespace sketchnet {

/// Encoder means for every measure of each window (rows = window positions).
template <class T>
std::vector<Matrix<T>> encode_windows(const SketchVae<T>& vae, std::span<const ContextWindow> windows,
                                      std::size_t chunk = 512) {
  std::vector<FrameSequence> all;
  std::vector<Matrix<T>> out;
  if (windows.empty()) return out;
  const auto S = static_cast<Eigen::Index>(windows.front().shape().total());
  for (const auto& w : windows) {
    if (w.shape().total() != S) throw ShapeMismatch("windows differ in length");
    const auto m = w.all();
    all.insert(all.end(), m.begin(), m.end());
  }
  Matrix<T> z(static_cast<Eigen::Index>(all.size()), vae.config().latent());
  for (std::size_t i = 0; i < all.size(); i += chunk) {
    const auto n = std::min(chunk, all.size() - i);
    z.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) =
        vae.encode_means(std::span(all).subspan(i, n));
  }
  for (std::size_t w = 0; w < windows.size(); ++w) out.push_back(z.middleRows(static_cast<Eigen::Index>(w) * S, S));
  return out;
}

/// Stacks the selected windows into time-major past / missing / future blocks.
template <class T>
WindowLatents<T> batch_latents(std::span<const Matrix<T>> encoded, std::span<const std::size_t> pick,
                               const WindowShape& shape) {
  WindowLatents<T> b;
  const auto B = static_cast<Eigen::Index>(pick.size());
  const auto L = encoded.front().cols();
  b.batch = B;
  b.past.resize(shape.past * B, L);
  b.missing.resize(shape.missing * B, L);
  b.future.resize(shape.future * B, L);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& z = encoded[pick[static_cast<std::size_t>(i)]];
    for (int t = 0; t < shape.past; ++t) b.past.row(t * B + i) = z.row(t);
    for (int t = 0; t < shape.missing; ++t) b.missing.row(t * B + i) = z.row(shape.past + t);
    for (int t = 0; t < shape.future; ++t) b.future.row(t * B + i) = z.row(shape.past + shape.missing + t);
  }
  return b;
}

inline std::vector<std::vector<FrameSequence>> batch_targets(std::span<const ContextWindow> windows,
                                                             std::span<const std::size_t> pick) {
  std::vector<std::vector<FrameSequence>> t;
  for (auto i : pick) t.push_back(windows[i].missing);
  return t;
}

/// Rows of window `b` from a time-major block with `B` windows.
template <class T>
Matrix<T> window_rows(const Matrix<T>& block, Eigen::Index B, Eigen::Index b) {
  const auto steps = block.rows() / B;
  Matrix<T> out(steps, block.cols());
  for (Eigen::Index t = 0; t < steps; ++t) out.row(t) = block.row(t * B + b);
  return out;
}

template <class T>
void set_window_rows(Matrix<T>& block, Eigen::Index B, Eigen::Index b, const Matrix<T>& rows) {
  for (Eigen::Index t = 0; t < rows.rows(); ++t) block.row(t * B + b) = rows.row(t);
}

struct CheckpointIds {
  std::string vae;
  std::string inpainter;
  std::string connector;
};

/// A loaded model stack. The connector is optional so that the stage-I model
/// can be evaluated on its own.
template <class T>
struct ModelStack {
  SketchVae<T> vae;
  std::optional<SketchInpainter<T>> inpainter;
  std::optional<SketchConnector<T>> connector;
  CheckpointIds ids;
  WindowShape shape;

  struct Output {
    std::vector<std::vector<FrameSequence>> missing;  // per window
    std::vector<std::vector<Matrix<T>>> logits;       // per window, per measure (24 x 130)
    Matrix<T> latents;                                // time-major, final missing latents
    Matrix<T> predicted;                              // time-major, inpainter output
  };

  /// Completes a batch of windows. `sketches`, when given, holds one spec per
  /// window. The decoder runs free; `temperature` > 0 samples tokens from
  /// `rng` instead of taking the argmax.
  Output complete(std::span<const ContextWindow> windows, bool use_connector = true,
                  const std::vector<SketchSpec>* sketches = nullptr, double temperature = 0.0,
                  std::mt19937_64* rng = nullptr) const {
    if (!inpainter) throw ModelNotLoaded("no inpainter loaded");
    if (use_connector && !connector) throw ModelNotLoaded("no connector loaded");
    if (windows.empty()) throw EmptyInput("no windows to complete");
    if (sketches && sketches->size() != windows.size()) throw ShapeMismatch("one sketch per window is required");
    for (const auto& w : windows) {
      if (!(w.shape() == shape)) throw ShapeMismatch("window shape does not match the model");
    }
    const auto encoded = encode_windows(vae, windows);
    std::vector<std::size_t> all(windows.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto batch = batch_latents<T>(encoded, all, shape);
    const auto B = batch.batch;

    Output out;
    out.predicted = inpainter->predict(batch.past, batch.future, B, shape.missing);
    Matrix<T> fused = out.predicted;
    if (sketches) {
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto& spec = (*sketches)[static_cast<std::size_t>(b)];
        if (!spec.empty()) set_window_rows(fused, B, b, apply_sketch(window_rows(fused, B, b), spec, vae, shape));
      }
    }
    out.latents = use_connector ? connector->connect(batch.past, fused, batch.future, B) : fused;
    auto dec = vae.decode(out.latents, nullptr, {temperature, rng});
    out.missing.assign(static_cast<std::size_t>(B), {});
    out.logits.assign(static_cast<std::size_t>(B), {});
    for (int m = 0; m < shape.missing; ++m) {
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto row = static_cast<std::size_t>(m * B + b);
        out.missing[static_cast<std::size_t>(b)].push_back(dec.frames[row]);
        out.logits[static_cast<std::size_t>(b)].push_back(std::move(dec.logits[row]));
      }
    }
    return out;
  }
};

inline constexpr const char* kVaeFile = "vae.ckpt";
inline constexpr const char* kInpainterFile = "inpainter.ckpt";
inline constexpr const char* kConnectorFile = "connector.ckpt";

/// Loads vae.ckpt, inpainter.ckpt and (if present or required) connector.ckpt.
template <class T>
ModelStack<T> load_stack(const std::filesystem::path& dir, bool require_connector = true) {
  for (const char* f : {kVaeFile, kInpainterFile}) {
    if (!std::filesystem::exists(dir / f)) throw ModelNotLoaded("missing checkpoint " + (dir / f).string());
  }
  const auto vck = load_checkpoint(dir / kVaeFile);
  const auto ick = load_checkpoint(dir / kInpainterFile);
  ModelStack<T> s{SketchVae<T>::from_checkpoint(vck), std::nullopt, std::nullopt, {vck.id, ick.id, ""}, {}};
  s.inpainter.emplace(SketchInpainter<T>::from_checkpoint(ick, vck.id));
  if (std::filesystem::exists(dir / kConnectorFile)) {
    const auto cck = load_checkpoint(dir / kConnectorFile);
    s.connector.emplace(SketchConnector<T>::from_checkpoint(cck, vck.id, ick.id));
    s.ids.connector = cck.id;
    s.shape = s.connector->shape();
  } else if (require_connector) {
    throw ModelNotLoaded("missing checkpoint " + (dir / kConnectorFile).string());
  }
  s.vae.params().set_frozen(true);
  s.inpainter->params().set_frozen(true);
  if (s.connector) s.connector->params().set_frozen(true);
  return s;
}

}  // namespace sketchnet
