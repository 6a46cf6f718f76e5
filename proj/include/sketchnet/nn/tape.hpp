#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Parameters live outside
// the tape and receive gradients when the pass is differentiated; frozen
// parameters and constants never do.

#include <Eigen/Dense>

#include <cassert>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sketchnet/errors.hpp"

namespace sketchnet::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix<T>& out_value, const Matrix<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Matrix<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = grad_enabled_ && !p.frozen;
    if (n.needs_grad && (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())) {
      p.zero_grad();
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Records an operation. `backward` runs only if some input needs a gradient.
  Var<T> record(Matrix<T> value, std::initializer_list<int> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (int i : inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(i)].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> record(Matrix<T> value, const std::vector<int>& inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (int i : inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(i)].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Gradient of the last backward pass w.r.t. a recorded value (empty if none).
  const Matrix<T>& grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param ? n.param->grad : n.grad;
  }

  template <class Expr>
  void accumulate(int id, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    Matrix<T>& target = n.param ? n.param->grad : n.grad;
    if (target.size() == 0) {
      target = g;
    } else {
      target += g;
    }
  }

  /// Row-block accumulation without materializing a full-size gradient.
  template <class Expr>
  void accumulate_rows(int id, Eigen::Index row0, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    Matrix<T>& target = n.param ? n.param->grad : n.grad;
    if (target.size() == 0) target.setZero(value(id).rows(), value(id).cols());
    target.middleRows(row0, g.rows()) += g;
  }

  template <class Expr>
  void accumulate_cols(int id, Eigen::Index col0, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    Matrix<T>& target = n.param ? n.param->grad : n.grad;
    if (target.size() == 0) target.setZero(value(id).rows(), value(id).cols());
    target.middleCols(col0, g.cols()) += g;
  }

  /// Back-propagates from a scalar (1x1) root.
  void backward(const Var<T>& root, T seed = T(1)) {
    if (root.rows() != 1 || root.cols() != 1) throw ShapeMismatch("backward root must be 1x1");
    Node& r = nodes_[static_cast<std::size_t>(root.id())];
    if (!r.needs_grad) return;
    r.grad = Matrix<T>::Constant(1, 1, seed);
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.value, n.grad);
      n.grad.resize(0, 0);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace sketchnet::nn
