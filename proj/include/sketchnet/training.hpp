#pragma once

// Three-stage training: the measure VAE, then the inpainter against the
// frozen VAE, then the connector against both frozen upstream models.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "sketchnet/corpus.hpp"
#include "sketchnet/nn/optim.hpp"
#include "sketchnet/pipeline.hpp"

namespace sketchnet {

enum class Stage { Vae, Inpainter, Connector };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Vae: return "vae";
    case Stage::Inpainter: return "inpainter";
    case Stage::Connector: return "connector";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "vae") return Stage::Vae;
  if (s == "inpainter") return Stage::Inpainter;
  if (s == "connector") return Stage::Connector;
  throw ValidationError("unknown stage '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.998;
  int vae_batch_size = 64;
  int window_batch_size = 32;
  int max_epochs = 100;
  int patience = 5;
  double kl_weight = 0.1;
  int kl_warmup_epochs = 10;
  double clip_norm = 5.0;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;

  VaeConfig vae;
  InpainterConfig inpainter;
  ConnectorConfig connector;

  void validate() const {
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
    if (patience < 1) throw ValidationError("patience must be at least 1");
    if (vae_batch_size < 1 || window_batch_size < 1) throw ValidationError("batch sizes must be positive");
    if (max_epochs < 0) throw ValidationError("max_epochs must be non-negative");
    if (validation_fraction < 0 || validation_fraction >= 1) throw ValidationError("validation_fraction in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"vae_batch_size", vae_batch_size},
            {"window_batch_size", window_batch_size},
            {"max_epochs", max_epochs},
            {"patience", patience},
            {"kl_weight", kl_weight},
            {"kl_warmup_epochs", kl_warmup_epochs},
            {"clip_norm", clip_norm},
            {"validation_fraction", validation_fraction},
            {"seed", seed},
            {"vae", vae.to_json()},
            {"inpainter", inpainter.to_json()},
            {"connector", connector.to_json()}};
  }

  nn::AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, 1e-8}; }
};

/// Reads a key = value file. Model sizes live in [vae], [inpainter] and
/// [connector] sections; unknown keys are errors.
inline TrainConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  TrainConfig c;
  auto num = [](const pt::ptree& node, const std::string& key, auto& field) {
    using F = std::decay_t<decltype(field)>;
    try {
      if constexpr (std::is_same_v<F, bool>) {
        const auto v = node.get_value<std::string>();
        if (v != "true" && v != "false") throw ValidationError("");
        field = v == "true";
      } else {
        field = node.get_value<F>();
      }
    } catch (const std::exception&) {
      throw ValidationError("config: bad value for '" + key + "'");
    }
  };
  for (const auto& [key, node] : tree) {
    if (!node.empty()) {
      for (const auto& [k, v] : node) {
        const auto full = key + "." + k;
        if (key == "vae") {
          if (k == "embed") num(v, full, c.vae.embed);
          else if (k == "encoder_hidden") num(v, full, c.vae.encoder_hidden);
          else if (k == "pitch_latent") num(v, full, c.vae.pitch_latent);
          else if (k == "rhythm_latent") num(v, full, c.vae.rhythm_latent);
          else if (k == "beat_hidden") num(v, full, c.vae.beat_hidden);
          else if (k == "tick_hidden") num(v, full, c.vae.tick_hidden);
          else if (k == "seed") num(v, full, c.vae.seed);
          else throw ValidationError("config: unknown key '" + full + "'");
        } else if (key == "inpainter") {
          if (k == "hidden") num(v, full, c.inpainter.hidden);
          else if (k == "teacher_forcing") num(v, full, c.inpainter.teacher_forcing);
          else if (k == "seed") num(v, full, c.inpainter.seed);
          else throw ValidationError("config: unknown key '" + full + "'");
        } else if (key == "connector") {
          if (k == "layers") num(v, full, c.connector.layers);
          else if (k == "heads") num(v, full, c.connector.heads);
          else if (k == "d_model") num(v, full, c.connector.d_model);
          else if (k == "ffn") num(v, full, c.connector.ffn);
          else if (k == "unmask_rate") num(v, full, c.connector.unmask_rate);
          else if (k == "per_half_unmask") num(v, full, c.connector.per_half_unmask);
          else if (k == "seed") num(v, full, c.connector.seed);
          else throw ValidationError("config: unknown key '" + full + "'");
        } else {
          throw ValidationError("config: unknown section '" + key + "'");
        }
      }
      continue;
    }
    if (key == "learning_rate") num(node, key, c.learning_rate);
    else if (key == "adam_beta1") num(node, key, c.adam_beta1);
    else if (key == "adam_beta2") num(node, key, c.adam_beta2);
    else if (key == "vae_batch_size") num(node, key, c.vae_batch_size);
    else if (key == "window_batch_size") num(node, key, c.window_batch_size);
    else if (key == "max_epochs") num(node, key, c.max_epochs);
    else if (key == "patience") num(node, key, c.patience);
    else if (key == "kl_weight") num(node, key, c.kl_weight);
    else if (key == "kl_warmup_epochs") num(node, key, c.kl_warmup_epochs);
    else if (key == "clip_norm") num(node, key, c.clip_norm);
    else if (key == "validation_fraction") num(node, key, c.validation_fraction);
    else if (key == "seed") num(node, key, c.seed);
    else throw ValidationError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

/// Append-only JSONL run log; mirrored in memory.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    std::ofstream(*path_, std::ios::trunc);
  }

  void append(nlohmann::json entry) {
    if (path_) {
      std::ofstream out(*path_, std::ios::app);
      out << entry.dump() << '\n';
    }
    entries_.push_back(std::move(entry));
  }

  const std::vector<nlohmann::json>& entries() const { return entries_; }

  std::vector<nlohmann::json> epochs() const {
    std::vector<nlohmann::json> e;
    for (const auto& x : entries_) {
      if (x.value("event", "") == "epoch") e.push_back(x);
    }
    return e;
  }

 private:
  std::optional<std::filesystem::path> path_;
  std::vector<nlohmann::json> entries_;
};

namespace detail {

inline void require_finite(double loss, const std::string& what) {
  if (!std::isfinite(loss)) throw DivergenceError(what + " became non-finite");
}

/// Splits training melody ids into (fit, validation) by seed.
inline std::pair<std::vector<std::string>, std::vector<std::string>> validation_split(std::vector<std::string> ids,
                                                                                      double fraction,
                                                                                      std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(ids.begin(), ids.end(), rng);
  auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ids.size())));
  if (fraction > 0 && n_val == 0 && ids.size() > 1) n_val = 1;
  std::vector<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::string> fit(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(val.begin(), val.end());
  std::sort(fit.begin(), fit.end());
  return {fit, val};
}

template <class T>
std::vector<Matrix<T>> snapshot(const nn::ParamStore<T>& store) {
  std::vector<Matrix<T>> v;
  for (const auto* p : store.all()) v.push_back(p->value);
  return v;
}

template <class T>
void restore(nn::ParamStore<T>& store, const std::vector<Matrix<T>>& v) {
  const auto ps = store.all();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = v[i];
}

/// Epoch loop with early stopping on validation loss; epoch 0 is the
/// untrained model. Restores the best parameters before returning.
template <class T>
struct EarlyStopper {
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  std::vector<Matrix<T>> best_params;

  bool improved(double val, int epoch, const nn::ParamStore<T>& store) {
    if (val < best) {
      best = val;
      best_epoch = epoch;
      best_params = snapshot(store);
      return true;
    }
    return false;
  }
};

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

template <class F>
void for_batches(const std::vector<std::size_t>& order, int batch, F&& f) {
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    const auto n = std::min(static_cast<std::size_t>(batch), order.size() - i);
    f(std::span(order).subspan(i, n));
  }
}

}  // namespace detail

struct StageSummary {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_validation = 0;
  bool stopped_early = false;
  std::string checkpoint_id;
  std::vector<std::string> frozen_hashes_before;
  std::vector<std::string> frozen_hashes_after;
};

// ---- stage 0: VAE -------------------------------------------------------------

template <class T>
double vae_validation_loss(const SketchVae<T>& vae, std::span<const FrameSequence> measures, int batch,
                           double kl_weight) {
  if (measures.empty()) return 0.0;
  double total = 0;
  std::mt19937_64 rng(0);
  for (std::size_t i = 0; i < measures.size(); i += static_cast<std::size_t>(batch)) {
    const auto n = std::min(static_cast<std::size_t>(batch), measures.size() - i);
    Tape<T> tape(false);
    const auto e = vae.forward_train(tape, measures.subspan(i, n), rng, static_cast<T>(kl_weight));
    total += static_cast<double>(e.total.value()(0, 0)) * static_cast<double>(n);
  }
  return total / static_cast<double>(measures.size());
}

/// Fits the VAE on `train` measures, early-stopping on `val`. With an empty
/// `val`, the training measures double as validation data.
template <class T>
StageSummary fit_vae(SketchVae<T>& vae, const std::vector<FrameSequence>& train, std::vector<FrameSequence> val,
                     const TrainConfig& cfg, RunLog& log) {
  if (train.empty()) throw EmptyCorpus("no training measures");
  if (val.empty()) val = train;
  std::mt19937_64 rng(cfg.seed);
  nn::Adam<T> opt(vae.params().all(), cfg.adam());
  detail::EarlyStopper<T> stop;
  StageSummary s;
  auto kl_at = [&](int epoch) {
    if (cfg.kl_warmup_epochs <= 0) return cfg.kl_weight;
    return cfg.kl_weight * std::min(1.0, static_cast<double>(epoch) / cfg.kl_warmup_epochs);
  };
  // Validation uses the full KL weight so the criterion is comparable across epochs.
  const double v0 = vae_validation_loss(vae, val, cfg.vae_batch_size, cfg.kl_weight);
  detail::require_finite(v0, "validation loss");
  stop.improved(v0, 0, vae.params());
  log.append({{"event", "epoch"},
              {"stage", "vae"},
              {"epoch", 0},
              {"val_loss", v0},
              {"val_acc", vae_validation_accuracy(vae, std::span<const FrameSequence>(val), cfg.vae_batch_size)}});
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double klw = kl_at(epoch);
    double sum = 0;
    detail::for_batches(detail::shuffled(train.size(), rng), cfg.vae_batch_size, [&](std::span<const std::size_t> b) {
      std::vector<FrameSequence> batch;
      for (auto i : b) batch.push_back(train[i]);
      opt.zero_grad();
      Tape<T> tape;
      const auto e = vae.forward_train(tape, batch, rng, static_cast<T>(klw));
      const double loss = e.total.value()(0, 0);
      detail::require_finite(loss, "training loss");
      tape.backward(e.total);
      nn::clip_grad_norm(opt.params(), cfg.clip_norm);
      opt.step();
      sum += loss * static_cast<double>(b.size());
    });
    const double v = vae_validation_loss(vae, val, cfg.vae_batch_size, cfg.kl_weight);
    detail::require_finite(v, "validation loss");
    const bool better = stop.improved(v, epoch, vae.params());
    log.append({{"event", "epoch"},
                {"stage", "vae"},
                {"epoch", epoch},
                {"train_loss", sum / static_cast<double>(train.size())},
                {"val_loss", v},
                {"val_acc", vae_validation_accuracy(vae, std::span<const FrameSequence>(val), cfg.vae_batch_size)},
                {"kl_weight", klw}});
    s.epochs_run = epoch;
    if (!better && epoch - stop.best_epoch >= cfg.patience) {
      s.stopped_early = true;
      break;
    }
  }
  detail::restore(vae.params(), stop.best_params);
  s.best_epoch = stop.best_epoch;
  s.best_validation = stop.best;
  log.append({{"event", "best"}, {"stage", "vae"}, {"epoch", s.best_epoch}, {"val_loss", s.best_validation}});
  return s;
}

inline std::vector<FrameSequence> measures_of(const Corpus& corpus, const std::vector<std::string>& ids) {
  std::vector<FrameSequence> out;
  for (const auto* m : corpus.select(ids)) out.insert(out.end(), m->measures.begin(), m->measures.end());
  return out;
}

// ---- stages I and II ------------------------------------------------------------

template <class T>
struct WindowSet {
  std::vector<ContextWindow> windows;
  std::vector<Matrix<T>> latents;  // encoder means per window position
};

template <class T>
WindowSet<T> window_set(const SketchVae<T>& vae, const Corpus& corpus, const std::vector<std::string>& ids, int stride) {
  WindowSet<T> s;
  s.windows = corpus.windows(ids, stride);
  s.latents = encode_windows(vae, s.windows);
  return s;
}

/// Stage-one loss (free-running inpainter, teacher-forced decoder) averaged
/// over windows.
template <class T>
double inpainter_validation_loss(const SketchVae<T>& vae, const SketchInpainter<T>& inp, const WindowSet<T>& set,
                                 const WindowShape& shape, int batch) {
  double total = 0;
  std::vector<std::size_t> order(set.windows.size());
  std::iota(order.begin(), order.end(), 0);
  detail::for_batches(order, batch, [&](std::span<const std::size_t> b) {
    const auto lat = batch_latents<T>(set.latents, b, shape);
    Tape<T> tape(false);
    const auto st = inp.encode_context(tape, tape.constant(lat.past), tape.constant(lat.future), lat.batch);
    const auto loss = decode_loss(tape, vae, inp.predict_missing(tape, st, shape.missing).joint(),
                                  batch_targets(set.windows, b));
    total += static_cast<double>(loss.value()(0, 0)) * static_cast<double>(b.size());
  });
  return total / static_cast<double>(std::max<std::size_t>(1, set.windows.size()));
}

template <class T>
StageSummary fit_inpainter(const SketchVae<T>& vae, SketchInpainter<T>& inp, const WindowSet<T>& train,
                           const WindowSet<T>& val, const WindowShape& shape, const TrainConfig& cfg, RunLog& log) {
  if (train.windows.empty()) throw TooFewWindows("no training windows");
  const auto& vset = val.windows.empty() ? train : val;
  std::mt19937_64 rng(cfg.seed + 1);
  nn::Adam<T> opt(inp.params().all(), cfg.adam());
  detail::EarlyStopper<T> stop;
  StageSummary s;
  const double v0 = inpainter_validation_loss(vae, inp, vset, shape, cfg.window_batch_size);
  detail::require_finite(v0, "validation loss");
  stop.improved(v0, 0, inp.params());
  log.append({{"event", "epoch"},
              {"stage", "inpainter"},
              {"epoch", 0},
              {"val_loss", v0},
              {"val_acc", latent_accuracy(vae, predict_set(inp, vset, shape, cfg.window_batch_size), vset.windows,
                                          cfg.window_batch_size)}});
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double sum = 0;
    detail::for_batches(detail::shuffled(train.windows.size(), rng), cfg.window_batch_size,
                        [&](std::span<const std::size_t> b) {
                          const auto lat = batch_latents<T>(train.latents, b, shape);
                          opt.zero_grad();
                          Tape<T> tape;
                          const auto st = inp.encode_context(tape, tape.constant(lat.past), tape.constant(lat.future),
                                                             lat.batch);
                          const auto teacher = tape.constant(lat.missing);
                          const auto pred = inp.predict_missing(tape, st, shape.missing, &teacher, &rng);
                          const auto loss = decode_loss(tape, vae, pred.joint(), batch_targets(train.windows, b));
                          const double l = loss.value()(0, 0);
                          detail::require_finite(l, "training loss");
                          tape.backward(loss);
                          nn::clip_grad_norm(opt.params(), cfg.clip_norm);
                          opt.step();
                          sum += l * static_cast<double>(b.size());
                        });
    const double v = inpainter_validation_loss(vae, inp, vset, shape, cfg.window_batch_size);
    detail::require_finite(v, "validation loss");
    const bool better = stop.improved(v, epoch, inp.params());
    log.append({{"event", "epoch"},
                {"stage", "inpainter"},
                {"epoch", epoch},
                {"train_loss", sum / static_cast<double>(train.windows.size())},
                {"val_loss", v},
                {"val_acc", latent_accuracy(vae, predict_set(inp, vset, shape, cfg.window_batch_size), vset.windows,
                                            cfg.window_batch_size)}});
    s.epochs_run = epoch;
    if (!better && epoch - stop.best_epoch >= cfg.patience) {
      s.stopped_early = true;
      break;
    }
  }
  detail::restore(inp.params(), stop.best_params);
  s.best_epoch = stop.best_epoch;
  s.best_validation = stop.best;
  log.append({{"event", "best"}, {"stage", "inpainter"}, {"epoch", s.best_epoch}, {"val_loss", s.best_validation}});
  return s;
}

/// Free-running inpainter predictions for every window of a set.
template <class T>
std::vector<Matrix<T>> predict_set(const SketchInpainter<T>& inp, const WindowSet<T>& set, const WindowShape& shape,
                                   int batch) {
  std::vector<Matrix<T>> out(set.windows.size());
  std::vector<std::size_t> order(set.windows.size());
  std::iota(order.begin(), order.end(), 0);
  detail::for_batches(order, batch, [&](std::span<const std::size_t> b) {
    const auto lat = batch_latents<T>(set.latents, b, shape);
    const auto pred = inp.predict(lat.past, lat.future, lat.batch, shape.missing);
    for (Eigen::Index i = 0; i < lat.batch; ++i) out[b[static_cast<std::size_t>(i)]] = window_rows(pred, lat.batch, i);
  });
  return out;
}

template <class T>
Matrix<T> stack_rows(const std::vector<Matrix<T>>& per_window, std::span<const std::size_t> b) {
  const auto B = static_cast<Eigen::Index>(b.size());
  const auto& first = per_window[b[0]];
  Matrix<T> out(first.rows() * B, first.cols());
  for (Eigen::Index i = 0; i < B; ++i) set_window_rows(out, B, i, per_window[b[static_cast<std::size_t>(i)]]);
  return out;
}

/// Free-running reconstruction accuracy of per-window missing latents.
template <class T>
double latent_accuracy(const SketchVae<T>& vae, const std::vector<Matrix<T>>& latents,
                       const std::vector<ContextWindow>& windows, int batch) {
  std::vector<FrameSequence> pred, truth;
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  detail::for_batches(order, batch, [&](std::span<const std::size_t> b) {
    const auto B = static_cast<Eigen::Index>(b.size());
    const auto dec = vae.decode(stack_rows(latents, b), nullptr, {});
    const auto M = static_cast<Eigen::Index>(dec.frames.size()) / B;
    for (Eigen::Index i = 0; i < B; ++i) {
      for (Eigen::Index m = 0; m < M; ++m) {
        pred.push_back(dec.frames[static_cast<std::size_t>(m * B + i)]);
        truth.push_back(windows[b[static_cast<std::size_t>(i)]].missing[static_cast<std::size_t>(m)]);
      }
    }
  });
  return pred.empty() ? 0.0 : reconstruction_accuracy(pred, truth);
}

template <class T>
std::vector<Matrix<T>> connect_set(const SketchConnector<T>& conn, const WindowSet<T>& set,
                                   const std::vector<Matrix<T>>& predicted, int batch) {
  const auto shape = conn.shape();
  std::vector<Matrix<T>> out(set.windows.size());
  std::vector<std::size_t> order(set.windows.size());
  std::iota(order.begin(), order.end(), 0);
  detail::for_batches(order, batch, [&](std::span<const std::size_t> b) {
    const auto lat = batch_latents<T>(set.latents, b, shape);
    const auto z = conn.connect(lat.past, stack_rows(predicted, b), lat.future, lat.batch);
    for (Eigen::Index i = 0; i < lat.batch; ++i) out[b[static_cast<std::size_t>(i)]] = window_rows(z, lat.batch, i);
  });
  return out;
}

template <class T>
double vae_validation_accuracy(const SketchVae<T>& vae, std::span<const FrameSequence> measures, int batch) {
  std::vector<FrameSequence> pred;
  for (std::size_t i = 0; i < measures.size(); i += static_cast<std::size_t>(batch)) {
    const auto r = vae.reconstruct(measures.subspan(i, std::min(static_cast<std::size_t>(batch), measures.size() - i)));
    pred.insert(pred.end(), r.begin(), r.end());
  }
  return measures.empty() ? 0.0 : reconstruction_accuracy(pred, measures);
}

template <class T>
double connector_validation_loss(const SketchVae<T>& vae, const SketchConnector<T>& conn, const WindowSet<T>& set,
                                 const std::vector<Matrix<T>>& predicted, const WindowShape& shape, int batch) {
  double total = 0;
  std::vector<std::size_t> order(set.windows.size());
  std::iota(order.begin(), order.end(), 0);
  detail::for_batches(order, batch, [&](std::span<const std::size_t> b) {
    const auto lat = batch_latents<T>(set.latents, b, shape);
    Tape<T> tape(false);
    const auto z = conn.connect(tape, tape.constant(lat.past), tape.constant(stack_rows(predicted, b)),
                                tape.constant(lat.future), lat.batch);
    const auto loss = decode_loss(tape, vae, z, batch_targets(set.windows, b));
    total += static_cast<double>(loss.value()(0, 0)) * static_cast<double>(b.size());
  });
  return total / static_cast<double>(std::max<std::size_t>(1, set.windows.size()));
}

template <class T>
StageSummary fit_connector(const SketchVae<T>& vae, const SketchInpainter<T>& inp, SketchConnector<T>& conn,
                           const WindowSet<T>& train, const WindowSet<T>& val, const TrainConfig& cfg, RunLog& log) {
  if (train.windows.empty()) throw TooFewWindows("no training windows");
  const auto shape = conn.shape();
  const auto& vset = val.windows.empty() ? train : val;
  const auto train_pred = predict_set(inp, train, shape, cfg.window_batch_size);
  const auto val_pred = predict_set(inp, vset, shape, cfg.window_batch_size);
  const int P = vae.config().pitch_latent;
  std::mt19937_64 rng(cfg.seed + 2);
  nn::Adam<T> opt(conn.params().all(), cfg.adam());
  detail::EarlyStopper<T> stop;
  StageSummary s;
  const double v0 = connector_validation_loss(vae, conn, vset, val_pred, shape, cfg.window_batch_size);
  detail::require_finite(v0, "validation loss");
  stop.improved(v0, 0, conn.params());
  log.append({{"event", "epoch"},
              {"stage", "connector"},
              {"epoch", 0},
              {"val_loss", v0},
              {"val_acc", latent_accuracy(vae, connect_set(conn, vset, val_pred, cfg.window_batch_size), vset.windows,
                                          cfg.window_batch_size)}});
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double sum = 0;
    std::size_t unmasked = 0, positions = 0;
    detail::for_batches(detail::shuffled(train.windows.size(), rng), cfg.window_batch_size,
                        [&](std::span<const std::size_t> b) {
                          const auto lat = batch_latents<T>(train.latents, b, shape);
                          const auto u = random_unmask<T>(stack_rows(train_pred, b), lat.missing,
                                                          cfg.connector.unmask_rate, rng, P,
                                                          cfg.connector.per_half_unmask);
                          for (auto f : u.record.flags) unmasked += f != UnmaskFlag::KeptPrediction;
                          positions += u.record.flags.size();
                          opt.zero_grad();
                          Tape<T> tape;
                          const auto z = conn.connect(tape, tape.constant(lat.past), tape.constant(u.fused),
                                                      tape.constant(lat.future), lat.batch);
                          const auto loss = decode_loss(tape, vae, z, batch_targets(train.windows, b));
                          const double l = loss.value()(0, 0);
                          detail::require_finite(l, "training loss");
                          tape.backward(loss);
                          nn::clip_grad_norm(opt.params(), cfg.clip_norm);
                          opt.step();
                          sum += l * static_cast<double>(b.size());
                        });
    const double v = connector_validation_loss(vae, conn, vset, val_pred, shape, cfg.window_batch_size);
    detail::require_finite(v, "validation loss");
    const bool better = stop.improved(v, epoch, conn.params());
    log.append({{"event", "epoch"},
                {"stage", "connector"},
                {"epoch", epoch},
                {"train_loss", sum / static_cast<double>(train.windows.size())},
                {"val_loss", v},
                {"val_acc", latent_accuracy(vae, connect_set(conn, vset, val_pred, cfg.window_batch_size), vset.windows,
                                            cfg.window_batch_size)},
                {"unmask_rate", static_cast<double>(unmasked) / static_cast<double>(std::max<std::size_t>(1, positions))}});
    s.epochs_run = epoch;
    if (!better && epoch - stop.best_epoch >= cfg.patience) {
      s.stopped_early = true;
      break;
    }
  }
  detail::restore(conn.params(), stop.best_params);
  s.best_epoch = stop.best_epoch;
  s.best_validation = stop.best;
  log.append({{"event", "best"}, {"stage", "connector"}, {"epoch", s.best_epoch}, {"val_loss", s.best_validation}});
  return s;
}

// ---- corpus-level entry points ---------------------------------------------------

/// Trains one stage from a corpus directory's contents and writes its
/// checkpoint and run log into `out_dir`. Earlier stages are read from
/// `out_dir` and must be present.
inline StageSummary train_stage(Stage stage, const Corpus& corpus, const TrainConfig& cfg,
                                const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  RunLog log(out_dir / (to_string(stage) + "_runlog.jsonl"));
  log.append({{"event", "config"}, {"stage", to_string(stage)}, {"config", cfg.to_json()}});
  const auto [fit_ids, val_ids] = detail::validation_split(corpus.manifest.train, cfg.validation_fraction, cfg.seed);
  const auto shape = corpus.manifest.shape;
  const auto stride = corpus.manifest.train_stride;
  StageSummary s;

  if (stage == Stage::Vae) {
    SketchVae<float> vae(cfg.vae);
    s = fit_vae(vae, measures_of(corpus, fit_ids), measures_of(corpus, val_ids), cfg, log);
    vae.save(out_dir / kVaeFile);
    s.checkpoint_id = load_checkpoint(out_dir / kVaeFile).id;
  } else {
    const auto vck = load_checkpoint(out_dir / kVaeFile);
    auto vae = SketchVae<float>::from_checkpoint(vck);
    vae.params().set_frozen(true);
    const auto vae_hash = parameter_hash(vae.params());
    const auto train = window_set(vae, corpus, fit_ids, stride);
    const auto val = window_set(vae, corpus, val_ids, stride);
    log.append({{"event", "data"}, {"train_windows", train.windows.size()}, {"val_windows", val.windows.size()}});
    if (stage == Stage::Inpainter) {
      SketchInpainter<float> inp(cfg.inpainter, vae.config().pitch_latent, vae.config().rhythm_latent);
      s = fit_inpainter(vae, inp, train, val, shape, cfg, log);
      s.frozen_hashes_before = {vae_hash};
      inp.save(out_dir / kInpainterFile, vck.id);
      s.checkpoint_id = load_checkpoint(out_dir / kInpainterFile).id;
      s.frozen_hashes_after.push_back(parameter_hash(vae.params()));
    } else {
      const auto ick = load_checkpoint(out_dir / kInpainterFile);
      auto inp = SketchInpainter<float>::from_checkpoint(ick, vck.id);
      inp.params().set_frozen(true);
      const auto before = std::vector<std::string>{vae_hash, parameter_hash(inp.params())};
      SketchConnector<float> conn(cfg.connector, vae.config().latent(), shape);
      s = fit_connector(vae, inp, conn, train, val, cfg, log);
      s.frozen_hashes_before = before;
      conn.save(out_dir / kConnectorFile, vck.id, ick.id);
      s.checkpoint_id = load_checkpoint(out_dir / kConnectorFile).id;
      s.frozen_hashes_after = {parameter_hash(vae.params()), parameter_hash(inp.params())};
    }
    if (s.frozen_hashes_before != s.frozen_hashes_after) throw Error("frozen parameters changed during training");
  }
  log.append({{"event", "checkpoint"},
              {"stage", to_string(stage)},
              {"id", s.checkpoint_id},
              {"epochs_run", s.epochs_run},
              {"best_epoch", s.best_epoch},
              {"frozen_hashes_before", s.frozen_hashes_before},
              {"frozen_hashes_after", s.frozen_hashes_after}});
  return s;
}

}  // namespace sketchnet
