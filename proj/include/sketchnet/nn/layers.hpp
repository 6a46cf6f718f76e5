#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sketchnet/nn/ops.hpp"

namespace sketchnet::nn {

/// Owns a model's parameters. Addresses are stable for the store's lifetime.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>* add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->value.setZero(rows, cols);
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  std::vector<Parameter<T>*> all() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }

  void set_frozen(bool frozen) {
    for (auto& p : params_) p->frozen = frozen;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <class T>
void init_uniform(Parameter<T>& p, T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

template <class T>
void init_normal(Parameter<T>& p, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

/// y = x W + b
template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
    weight = store.add(name + ".weight", in, out);
    bias = store.add(name + ".bias", 1, out);
    init_uniform(*weight, static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out))), rng);
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return add_row(matmul(x, tape.param(*weight)), tape.param(*bias));
  }

  /// Zero-initialized map, used where a block should start as a no-op.
  void zero() {
    weight->value.setZero();
    bias->value.setZero();
  }
};

template <class T>
struct Embedding {
  Parameter<T>* table = nullptr;

  Embedding() = default;
  Embedding(ParamStore<T>& store, const std::string& name, Eigen::Index vocab, Eigen::Index dim,
            std::mt19937_64& rng) {
    table = store.add(name + ".table", vocab, dim);
    init_normal(*table, T(1), rng);
  }

  Eigen::Index vocab() const { return table->value.rows(); }

  Var<T> operator()(Tape<T>& tape, std::span<const int> ids) const {
    return embedding(tape.param(*table), ids);
  }
};

/// Single-layer GRU with separate input and recurrent projections.
template <class T>
struct Gru {
  Parameter<T>* w_ih = nullptr;
  Parameter<T>* b_ih = nullptr;
  Parameter<T>* w_hh = nullptr;
  Parameter<T>* b_hh = nullptr;

  Gru() = default;
  Gru(ParamStore<T>& store, const std::string& name, Eigen::Index input, Eigen::Index hidden,
      std::mt19937_64& rng) {
    w_ih = store.add(name + ".w_ih", input, 3 * hidden);
    b_ih = store.add(name + ".b_ih", 1, 3 * hidden);
    w_hh = store.add(name + ".w_hh", hidden, 3 * hidden);
    b_hh = store.add(name + ".b_hh", 1, 3 * hidden);
    const T bound = T(1) / static_cast<T>(std::sqrt(static_cast<double>(hidden)));
    for (auto* p : {w_ih, b_ih, w_hh, b_hh}) init_uniform(*p, bound, rng);
  }

  Eigen::Index hidden() const { return w_hh->value.rows(); }
  Eigen::Index input() const { return w_ih->value.rows(); }

  /// Input projection for any number of stacked rows.
  Var<T> project(Tape<T>& tape, const Var<T>& x) const {
    return add_row(matmul(x, tape.param(*w_ih)), tape.param(*b_ih));
  }

  Var<T> step(Tape<T>& tape, const Var<T>& projected_input, const Var<T>& h) const {
    return gru_cell(projected_input, h, tape.param(*w_hh), tape.param(*b_hh));
  }

  /// Runs over a time-major stack (row t * batch + b); returns the final state.
  Var<T> run(Tape<T>& tape, const Var<T>& inputs, Eigen::Index batch, Var<T> h, bool reverse = false) const {
    const auto steps = inputs.rows() / batch;
    const auto gx = project(tape, inputs);
    for (Eigen::Index s = 0; s < steps; ++s) {
      const auto t = reverse ? steps - 1 - s : s;
      h = step(tape, slice_rows(gx, t * batch, batch), h);
    }
    return h;
  }
};

template <class T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, Eigen::Index dim) {
    gain = store.add(name + ".gain", 1, dim);
    bias = store.add(name + ".bias", 1, dim);
    gain->value.setOnes();
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return layer_norm(x, tape.param(*gain), tape.param(*bias));
  }
};

}  // namespace sketchnet::nn
