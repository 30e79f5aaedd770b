// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "slicemoe/tensor.hpp"

namespace slicemoe::ad {

/// Handle into a Tape. Cheap to copy; valid for the lifetime of the tape
/// that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode tape. One tape per training step, owned by a
/// single thread; it is rebuilt every step because routing changes the
/// recorded graph per batch.
///
/// Nodes are stored in topological (recording) order: parents always precede
/// their consumers. backward() visits nodes exactly once, in reverse
/// recording order, accumulating into parent grads. Repeated backward()
/// calls without zero_grad() accumulate.
class Tape {
 public:
  /// Parameter or input that should receive a gradient.
  Var leaf(Tensor value) { return push(std::move(value), true); }

  /// Data that never receives a gradient (labels, noise draws, masks).
  Var constant(Tensor value) { return push(std::move(value), false); }

  Var push(Tensor value, bool requires_grad) {
    Node n;
    n.grad = Tensor(value.shape());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_backprop(Var v, std::function<void(Tape&)> fn) {
    nodes_.at(idx(v)).backprop = std::move(fn);
  }

  const Tensor& value(Var v) const { return nodes_.at(idx(v)).value; }
  bool requires_grad(Var v) const { return nodes_.at(idx(v)).requires_grad; }

  /// During a sweep these address the scratch buffers of the pass in
  /// flight; outside they address the persistent (accumulated) grads.
  const Tensor& grad(Var v) const {
    return sweep_ ? (*sweep_)[idx(v)] : nodes_.at(idx(v)).grad;
  }
  Tensor& grad_mut(Var v) {
    return sweep_ ? (*sweep_)[idx(v)] : nodes_.at(idx(v)).grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Each call
  /// computes one clean pass and adds it onto the persistent grads, so
  /// repeated calls without zero_grad accumulate.
  void backward(Var loss) {
    Node& ln = nodes_.at(idx(loss));
    if (ln.value.size() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          ln.value.shape_str());
    std::vector<Tensor> pass;
    pass.reserve(nodes_.size());
    for (const Node& n : nodes_) pass.emplace_back(n.value.shape());
    pass[idx(loss)][0] = 1.0;
    sweep_ = &pass;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backprop && n.requires_grad) n.backprop(*this);
    }
    sweep_ = nullptr;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (std::size_t j = 0; j < pass[i].size(); ++j)
        nodes_[i].grad[j] += pass[i][j];
  }

  void zero_grad() {
    for (Node& n : nodes_)
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] = 0.0;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // same shape, zero-initialized
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;  // empty for leaves/constants
  };

  static std::size_t idx(Var v) {
    if (!v.valid()) throw ContractError("use of invalid tape variable");
    return static_cast<std::size_t>(v.id);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor>* sweep_ = nullptr;
};

namespace detail {

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generic differentiable operations. Each computes its value through the
// numerics kernels and registers a closure that accumulates parent grads.

inline Var matmul(Tape& t, Var a, Var b) {
  Tensor c = slicemoe::matmul(t.value(a), t.value(b));
  const std::size_t m = c.dim(0), n = c.dim(1), k = t.value(a).dim(1);
  Var out = t.push(std::move(c), t.requires_grad(a) || t.requires_grad(b));
  t.set_backprop(out, [out, a, b, m, k, n](Tape& tp) {
    const Tensor& d = tp.grad(out);
    if (tp.requires_grad(a)) {
      Tensor da({m, k});
      slicemoe::detail::matmul_nt_into(d.data(), tp.value(b).data(), da.data(),
                                       m, n, k);
      detail::add_into(tp.grad_mut(a), da);
    }
    if (tp.requires_grad(b)) {
      Tensor db({k, n});
      slicemoe::detail::matmul_tn_into(tp.value(a).data(), d.data(), db.data(),
                                       m, k, n);
      detail::add_into(tp.grad_mut(b), db);
    }
  });
  return out;
}

/// a[B x m x k] times shared b[k x n] or per-batch b[B x k x n].
inline Var batched_matmul(Tape& t, Var a, Var b) {
  Tensor c = slicemoe::batched_matmul(t.value(a), t.value(b));
  const std::size_t batch = c.dim(0), m = c.dim(1), n = c.dim(2),
                    k = t.value(a).dim(2);
  const bool shared = t.value(b).rank() == 2;
  Var out = t.push(std::move(c), t.requires_grad(a) || t.requires_grad(b));
  t.set_backprop(out, [out, a, b, batch, m, k, n, shared](Tape& tp) {
    const Tensor& d = tp.grad(out);
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor da({batch, m, k});
      for (std::size_t i = 0; i < batch; ++i) {
        const double* bi = shared ? bv.data() : bv.data() + i * k * n;
        slicemoe::detail::matmul_nt_into(d.data() + i * m * n, bi,
                                         da.data() + i * m * k, m, n, k);
      }
      detail::add_into(tp.grad_mut(a), da);
    }
    if (tp.requires_grad(b)) {
      if (shared) {
        Tensor db({k, n});
        Tensor tmp({k, n});
        for (std::size_t i = 0; i < batch; ++i) {
          slicemoe::detail::matmul_tn_into(av.data() + i * m * k,
                                           d.data() + i * m * n, tmp.data(), m,
                                           k, n);
          detail::add_into(db, tmp);
        }
        detail::add_into(tp.grad_mut(b), db);
      } else {
        Tensor db({batch, k, n});
        for (std::size_t i = 0; i < batch; ++i)
          slicemoe::detail::matmul_tn_into(av.data() + i * m * k,
                                           d.data() + i * m * n,
                                           db.data() + i * k * n, m, k, n);
        detail::add_into(tp.grad_mut(b), db);
      }
    }
  });
  return out;
}

inline Var add(Tape& t, Var a, Var b) {
  Tensor c = slicemoe::add(t.value(a), t.value(b));
  Var out = t.push(std::move(c), t.requires_grad(a) || t.requires_grad(b));
  t.set_backprop(out, [out, a, b](Tape& tp) {
    const Tensor& d = tp.grad(out);
    if (tp.requires_grad(a)) detail::add_into(tp.grad_mut(a), d);
    if (tp.requires_grad(b)) detail::add_into(tp.grad_mut(b), d);
  });
  return out;
}

/// m[r x n] + v[n] broadcast over rows.
inline Var add_rowvec(Tape& t, Var m, Var v) {
  Tensor c = slicemoe::add_rowvec(t.value(m), t.value(v));
  const std::size_t rows = c.dim(0), n = c.dim(1);
  Var out = t.push(std::move(c), t.requires_grad(m) || t.requires_grad(v));
  t.set_backprop(out, [out, m, v, rows, n](Tape& tp) {
    const Tensor& d = tp.grad(out);
    if (tp.requires_grad(m)) detail::add_into(tp.grad_mut(m), d);
    if (tp.requires_grad(v)) {
      Tensor dv({n});
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) dv[j] += d[i * n + j];
      detail::add_into(tp.grad_mut(v), dv);
    }
  });
  return out;
}

inline Var relu(Tape& t, Var x) {
  Tensor y = slicemoe::relu(t.value(x));
  Var out = t.push(std::move(y), t.requires_grad(x));
  t.set_backprop(out, [out, x](Tape& tp) {
    if (!tp.requires_grad(x)) return;
    const Tensor& d = tp.grad(out);
    const Tensor& xv = tp.value(x);
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = xv[i] > 0.0 ? d[i] : 0.0;
    detail::add_into(tp.grad_mut(x), dx);
  });
  return out;
}

inline Var mul(Tape& t, Var a, Var b) {
  Tensor c = slicemoe::mul(t.value(a), t.value(b));
  Var out = t.push(std::move(c), t.requires_grad(a) || t.requires_grad(b));
  t.set_backprop(out, [out, a, b](Tape& tp) {
    const Tensor& d = tp.grad(out);
    if (tp.requires_grad(a)) {
      Tensor da = slicemoe::mul(d, tp.value(b));
      detail::add_into(tp.grad_mut(a), da);
    }
    if (tp.requires_grad(b)) {
      Tensor db = slicemoe::mul(d, tp.value(a));
      detail::add_into(tp.grad_mut(b), db);
    }
  });
  return out;
}

inline Var scale(Tape& t, Var x, double s) {
  Tensor y = slicemoe::scale(t.value(x), s);
  Var out = t.push(std::move(y), t.requires_grad(x));
  t.set_backprop(out, [out, x, s](Tape& tp) {
    if (!tp.requires_grad(x)) return;
    Tensor dx = slicemoe::scale(tp.grad(out), s);
    detail::add_into(tp.grad_mut(x), dx);
  });
  return out;
}

/// Scalar sum of all elements; result has shape [1].
inline Var sum(Tape& t, Var x) {
  Tensor y({1});
  y[0] = slicemoe::sum(t.value(x));
  Var out = t.push(std::move(y), t.requires_grad(x));
  t.set_backprop(out, [out, x](Tape& tp) {
    if (!tp.requires_grad(x)) return;
    const double d = tp.grad(out)[0];
    Tensor& gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d;
  });
  return out;
}

inline Var reshape(Tape& t, Var x, std::vector<std::size_t> shape) {
  Tensor y = t.value(x).reshaped(shape);
  Var out = t.push(std::move(y), t.requires_grad(x));
  t.set_backprop(out, [out, x](Tape& tp) {
    if (!tp.requires_grad(x)) return;
    const Tensor& d = tp.grad(out);
    Tensor& gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d[i];
  });
  return out;
}

/// Row-wise tempered softmax. d(logits) = (p * (d - <d, p>)) / T per row.
inline Var softmax_rows(Tape& t, Var logits, double temperature) {
  Tensor p = slicemoe::softmax_rows(t.value(logits), temperature);
  const std::size_t rows = p.dim(0), n = p.dim(1);
  Var out = t.push(std::move(p), t.requires_grad(logits));
  t.set_backprop(out, [out, logits, rows, n, temperature](Tape& tp) {
    if (!tp.requires_grad(logits)) return;
    const Tensor& pv = tp.value(out);
    const Tensor& d = tp.grad(out);
    Tensor dl({rows, n});
    for (std::size_t i = 0; i < rows; ++i) {
      const double* pi = pv.data() + i * n;
      const double* di = d.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += di[j] * pi[j];
      for (std::size_t j = 0; j < n; ++j)
        dl[i * n + j] = pi[j] * (di[j] - dot) / temperature;
    }
    detail::add_into(tp.grad_mut(logits), dl);
  });
  return out;
}

}  // namespace slicemoe::ad
