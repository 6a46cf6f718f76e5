#pragma once

// Differentiable operations on tape variables.

#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "sketchnet/nn/tape.hpp"

namespace sketchnet::nn {

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul inner dimensions differ");
  auto& tape = a.tape();
  Matrix<T> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {ia, ib},
                         [ia, ib](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, g);
                         });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {ia, ib},
                         [ia, ib](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, -g);
                         });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), {ia, ib},
                         [ia, ib](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                           if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                           if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                         });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  const int ia = a.id();
  return a.tape().record(a.value() * s, {ia}, [ia, s](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    t.accumulate(ia, g * s);
  });
}

/// Adds a 1 x n row vector to every row of `a`.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("add_row expects a 1 x cols bias");
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id(), ib = row.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

/// Repeats a 1 x n row `times` times.
template <class T>
Var<T> repeat_rows(const Var<T>& row, Eigen::Index times) {
  if (row.rows() != 1) throw ShapeMismatch("repeat_rows expects a single row");
  Matrix<T> out = row.value().replicate(times, 1);
  const int ir = row.id();
  return row.tape().record(std::move(out), {ir}, [ir](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    t.accumulate(ir, g.colwise().sum());
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Matrix<T> out = a.value().unaryExpr([](T x) { return T(1) / (T(1) + std::exp(-x)); });
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, const Matrix<T>& y, const Matrix<T>& g) {
    t.accumulate(ia, g.cwiseProduct(y.cwiseProduct((T(1) - y.array()).matrix())));
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Matrix<T> out = a.value().array().tanh().matrix();
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, const Matrix<T>& y, const Matrix<T>& g) {
    t.accumulate(ia, (g.array() * (T(1) - y.array().square())).matrix());
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, const Matrix<T>& y, const Matrix<T>& g) {
    t.accumulate(ia, (g.array() * (y.array() > T(0)).template cast<T>()).matrix());
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Matrix<T> out = a.value().array().exp().matrix();
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<T>& t, const Matrix<T>& y, const Matrix<T>& g) {
    t.accumulate(ia, g.cwiseProduct(y));
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols row counts differ");
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix<T> out(rows, cols);
  Eigen::Index c = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape().record(
      std::move(out), ids, [ids, offsets](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
        }
      });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index col0, Eigen::Index n) {
  if (col0 < 0 || col0 + n > a.cols()) throw ShapeMismatch("slice_cols out of range");
  const int ia = a.id();
  return a.tape().record(a.value().middleCols(col0, n), {ia},
                         [ia, col0](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                           t.accumulate_cols(ia, col0, g);
                         });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  const auto cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("concat_rows column counts differ");
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix<T> out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape().record(
      std::move(out), ids, [ids, offsets](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
        }
      });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index row0, Eigen::Index n) {
  if (row0 < 0 || row0 + n > a.rows()) throw ShapeMismatch("slice_rows out of range");
  const int ia = a.id();
  return a.tape().record(a.value().middleRows(row0, n), {ia},
                         [ia, row0](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                           t.accumulate_rows(ia, row0, g);
                         });
}

/// Row i of the result is row `picks[i].second` of `sources[picks[i].first]`.
template <class T>
Var<T> gather_rows(const std::vector<Var<T>>& sources, const std::vector<std::pair<int, Eigen::Index>>& picks) {
  if (sources.empty()) throw ShapeMismatch("gather_rows of nothing");
  const auto cols = sources.front().cols();
  std::vector<int> ids;
  for (const auto& s : sources) {
    if (s.cols() != cols) throw ShapeMismatch("gather_rows column counts differ");
    ids.push_back(s.id());
  }
  Matrix<T> out(static_cast<Eigen::Index>(picks.size()), cols);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& [src, row] = picks[i];
    if (src < 0 || static_cast<std::size_t>(src) >= sources.size() || row < 0 ||
        row >= sources[static_cast<std::size_t>(src)].rows()) {
      throw ShapeMismatch("gather_rows pick out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = sources[static_cast<std::size_t>(src)].value().row(row);
  }
  return sources.front().tape().record(
      std::move(out), ids, [ids, picks](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        for (std::size_t i = 0; i < picks.size(); ++i) {
          const int id = ids[static_cast<std::size_t>(picks[i].first)];
          if (t.requires_grad(id)) t.accumulate_rows(id, picks[i].second, g.row(static_cast<Eigen::Index>(i)));
        }
      });
}

/// Rows of an embedding table selected by token id.
template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw VocabError("token " + std::to_string(ids[i]) + " outside embedding vocabulary of " +
                       std::to_string(table.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  const int it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {it}, [it, idx](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    for (std::size_t i = 0; i < idx.size(); ++i) t.accumulate_rows(it, idx[i], g.row(static_cast<Eigen::Index>(i)));
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> out = Matrix<T>::Constant(1, 1, a.value().sum());
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape().record(std::move(out), {ia}, [ia, r, c](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
    t.accumulate(ia, Matrix<T>::Constant(r, c, g(0, 0)));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Row-wise log-softmax cross-entropy against integer targets, averaged over rows.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  const auto n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw ShapeMismatch("cross_entropy target count");
  const Matrix<T>& z = logits.value();
  Matrix<T> probs(n, z.cols());
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw VocabError("cross_entropy target out of range");
    const T m = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - m).exp().matrix();
    const T s = probs.row(i).sum();
    probs.row(i) /= s;
    total += -(z(i, y) - m - std::log(s));
  }
  Matrix<T> out = Matrix<T>::Constant(1, 1, total / static_cast<T>(n));
  const int il = logits.id();
  std::vector<int> y(targets.begin(), targets.end());
  return logits.tape().record(
      std::move(out), {il}, [il, y, probs = std::move(probs)](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        Matrix<T> d = probs;
        for (std::size_t i = 0; i < y.size(); ++i) d(static_cast<Eigen::Index>(i), y[i]) -= T(1);
        d *= g(0, 0) / static_cast<T>(y.size());
        t.accumulate(il, d);
      });
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions, averaged over rows.
template <class T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar) {
  detail::require_same_shape(mu, logvar, "kl_standard_normal");
  const auto& m = mu.value();
  const auto& lv = logvar.value();
  const T rows = static_cast<T>(m.rows());
  const T kl = T(-0.5) * (T(1) + lv.array() - m.array().square() - lv.array().exp()).sum() / rows;
  const int im = mu.id(), il = logvar.id();
  return mu.tape().record(Matrix<T>::Constant(1, 1, kl), {im, il},
                          [im, il, rows](Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
                            const T s = g(0, 0) / rows;
                            if (t.requires_grad(im)) t.accumulate(im, t.value(im) * s);
                            if (t.requires_grad(il)) {
                              t.accumulate(il, ((t.value(il).array().exp() - T(1)) * (T(0.5) * s)).matrix());
                            }
                          });
}

/// Layer normalization over columns with learned gain and bias rows.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const auto n = x.rows(), d = x.cols();
  if (gain.cols() != d || bias.cols() != d) throw ShapeMismatch("layer_norm parameter width");
  Matrix<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = x.value().row(i).mean();
    const T var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Matrix<T>&,
                                                                          const Matrix<T>& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ix)) {
          const Matrix<T> gx = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
          const T d = static_cast<T>(gx.cols());
          Matrix<T> dx(gx.rows(), gx.cols());
          for (Eigen::Index i = 0; i < gx.rows(); ++i) {
            const T m1 = gx.row(i).sum();
            const T m2 = gx.row(i).dot(xhat.row(i));
            dx.row(i) = (inv_std(i) / d) * (d * gx.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
          }
          t.accumulate(ix, dx);
        }
      });
}

/// One GRU step with gates ordered (reset, update, candidate):
///   r = s(gx_r + gh_r), z = s(gx_z + gh_z), n = tanh(gx_n + r * gh_n),
///   h' = (1 - z) * n + z * h,  where gh = h W_hh + b_hh.
/// `gx` is the already-projected input (B x 3H).
template <class T>
Var<T> gru_cell(const Var<T>& gx, const Var<T>& h, const Var<T>& w_hh, const Var<T>& b_hh) {
  const auto hidden = h.cols();
  const auto batch = h.rows();
  if (gx.cols() != 3 * hidden || gx.rows() != batch || w_hh.rows() != hidden || w_hh.cols() != 3 * hidden) {
    throw ShapeMismatch("gru_cell shapes");
  }
  Matrix<T> gh = h.value() * w_hh.value();
  gh.rowwise() += b_hh.value().row(0);
  const auto& x = gx.value();
  auto sig = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
  Matrix<T> r = (x.leftCols(hidden) + gh.leftCols(hidden)).unaryExpr(sig);
  Matrix<T> z = (x.middleCols(hidden, hidden) + gh.middleCols(hidden, hidden)).unaryExpr(sig);
  Matrix<T> n = (x.rightCols(hidden).array() + r.array() * gh.rightCols(hidden).array()).tanh().matrix();
  Matrix<T> out = ((T(1) - z.array()) * n.array() + z.array() * h.value().array()).matrix();

  const int igx = gx.id(), ih = h.id(), iw = w_hh.id(), ib = b_hh.id();
  return gx.tape().record(
      std::move(out), {igx, ih, iw, ib},
      [igx, ih, iw, ib, hidden, gh = std::move(gh), r = std::move(r), z = std::move(z), n = std::move(n)](
          Tape<T>& t, const Matrix<T>&, const Matrix<T>& g) {
        const auto& hp = t.value(ih);
        const auto dz = (g.array() * (hp.array() - n.array())).eval();
        const auto dn = (g.array() * (T(1) - z.array())).eval();
        const auto dan = (dn * (T(1) - n.array().square())).eval();
        const auto dr = (dan * gh.rightCols(hidden).array()).eval();
        Matrix<T> dgh(g.rows(), 3 * hidden);
        dgh.leftCols(hidden) = (dr * r.array() * (T(1) - r.array())).matrix();
        dgh.middleCols(hidden, hidden) = (dz * z.array() * (T(1) - z.array())).matrix();
        dgh.rightCols(hidden) = (dan * r.array()).matrix();
        if (t.requires_grad(igx)) {
          Matrix<T> dgx = dgh;
          dgx.rightCols(hidden) = dan.matrix();
          t.accumulate(igx, dgx);
        }
        if (t.requires_grad(iw)) t.accumulate(iw, hp.transpose() * dgh);
        if (t.requires_grad(ib)) t.accumulate(ib, dgh.colwise().sum());
        if (t.requires_grad(ih)) {
          t.accumulate(ih, (g.array() * z.array()).matrix() + dgh * t.value(iw).transpose());
        }
      });
}

/// Scaled dot-product attention for `batch` independent sequences of length
/// `seq`, rows laid out batch-major (b * seq + position). Heads split the
/// columns evenly. Returns the concatenated head outputs.
template <class T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Eigen::Index batch,
                            Eigen::Index seq, Eigen::Index heads) {
  const auto width = q.cols();
  if (q.rows() != batch * seq || k.rows() != q.rows() || v.rows() != q.rows() || k.cols() != width ||
      v.cols() != width || width % heads != 0) {
    throw ShapeMismatch("multi_head_attention shapes");
  }
  const auto dh = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> out(q.rows(), width);
  std::vector<Matrix<T>> probs(static_cast<std::size_t>(batch * heads));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * seq, h * dh, seq, dh);
      const auto kb = k.value().block(b * seq, h * dh, seq, dh);
      const auto vb = v.value().block(b * seq, h * dh, seq, dh);
      Matrix<T> s = (qb * kb.transpose()) * scale;
      for (Eigen::Index i = 0; i < seq; ++i) {
        const T m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      out.block(b * seq, h * dh, seq, dh) = s * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, batch, seq, heads, dh, scale, probs = std::move(probs)](Tape<T>& t, const Matrix<T>&,
                                                                            const Matrix<T>& g) {
        const auto rows = batch * seq;
        const auto width = heads * dh;
        Matrix<T> dq = Matrix<T>::Zero(rows, width);
        Matrix<T> dk = Matrix<T>::Zero(rows, width);
        Matrix<T> dv = Matrix<T>::Zero(rows, width);
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const auto& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto qb = t.value(iq).block(b * seq, h * dh, seq, dh);
            const auto kb = t.value(ik).block(b * seq, h * dh, seq, dh);
            const auto vb = t.value(iv).block(b * seq, h * dh, seq, dh);
            const auto go = g.block(b * seq, h * dh, seq, dh);
            dv.block(b * seq, h * dh, seq, dh) = p.transpose() * go;
            const Matrix<T> dp = go * vb.transpose();
            Matrix<T> ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
            ds -= (p.array().colwise() * rs.array()).matrix();
            ds *= scale;
            dq.block(b * seq, h * dh, seq, dh) = ds * kb;
            dk.block(b * seq, h * dh, seq, dh) = ds.transpose() * qb;
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

}  // namespace sketchnet::nn
