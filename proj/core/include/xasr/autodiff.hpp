// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xasr/error.hpp"
#include "xasr/tensor.hpp"

namespace xasr {

/// Handle to a node on a gradient tape.
template <typename T>
struct ValueT {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode gradient tape. Operations append nodes in topological order;
/// gradients() walks the tape backwards once and returns per-parameter
/// gradients keyed by the names passed to param().
///
/// A tape records one training step and is then discarded. Tapes are
/// single-threaded; only immutable tensors may be shared across threads.
template <typename T>
class TapeT {
 public:
  using Tensor = TensorT<T>;
  using Value = ValueT<T>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  Value constant(Tensor v) { return push(std::move(v)); }

  /// Register a named parameter leaf. Names must be unique per tape.
  Value param(const std::string& name, Tensor v) {
    if (param_ids_.count(name)) throw UsageError("duplicate parameter on tape: " + name);
    Value val = push(std::move(v));
    param_ids_.emplace(name, val.id);
    return val;
  }

  const Tensor& value(Value v) const { return nodes_[v.id].value; }

  /// Gradient of a node (zeros if nothing has flowed into it).
  const Tensor& grad(Value v) {
    ensure_grad(v.id);
    return nodes_[v.id].grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns gradients for every
  /// registered parameter; parameters with no path to the loss get exact
  /// zeros. May be called once per tape.
  std::unordered_map<std::string, Tensor> gradients(Value loss) {
    if (nodes_[loss.id].value.size() != 1) {
      throw UsageError("gradients: loss must be a scalar, got shape " +
                       nodes_[loss.id].value.shape_string());
    }
    if (backward_done_) throw UsageError("gradients: tape already consumed");
    backward_done_ = true;
    ensure_grad(loss.id);
    nodes_[loss.id].grad[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad_alloc) n.backward();
    }
    std::unordered_map<std::string, Tensor> out;
    out.reserve(param_ids_.size());
    for (const auto& [name, id] : param_ids_) {
      ensure_grad(id);
      out.emplace(name, nodes_[id].grad);
    }
    return out;
  }

  // --- internals used by the op builders -----------------------------------

  Value push(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, false});
    return Value{nodes_.size() - 1};
  }

  void set_backward(Value v, std::function<void()> fn) {
    nodes_[v.id].backward = std::move(fn);
  }

  Tensor& grad_ref(std::size_t id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void()> backward;
    bool grad_alloc = false;
  };

  void ensure_grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor(n.value.shape());
      n.grad_alloc = true;
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_ids_;
  bool backward_done_ = false;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;
using Value = ValueT<float>;

namespace detail {
template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() +
                         " vs " + b.shape_string());
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> add(TapeT<T>& tape, ValueT<T> a, ValueT<T> b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::check_same_shape(av, bv, "add");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, b, r] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    auto& gb = tape.grad_ref(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
  return r;
}

template <typename T>
ValueT<T> sub(TapeT<T>& tape, ValueT<T> a, ValueT<T> b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::check_same_shape(av, bv, "sub");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, b, r] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    auto& gb = tape.grad_ref(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
  return r;
}

template <typename T>
ValueT<T> mul(TapeT<T>& tape, ValueT<T> a, ValueT<T> b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::check_same_shape(av, bv, "mul");
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, b, r] {
    const auto& g = tape.grad_ref(r.id);
    const auto& av2 = tape.value(a);
    const auto& bv2 = tape.value(b);
    auto& ga = tape.grad_ref(a.id);
    auto& gb = tape.grad_ref(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv2[i];
      gb[i] += g[i] * av2[i];
    }
  });
  return r;
}

template <typename T>
ValueT<T> scale(TapeT<T>& tape, ValueT<T> a, T c) {
  TensorT<T> out = tape.value(a);
  for (auto& v : out.values()) v *= c;
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, r, c] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
  return r;
}

template <typename T>
ValueT<T> tanh_op(TapeT<T>& tape, ValueT<T> a) {
  TensorT<T> out = tape.value(a);
  for (auto& v : out.values()) v = std::tanh(v);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, r] {
    const auto& g = tape.grad_ref(r.id);
    const auto& y = tape.value(r);
    auto& ga = tape.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
  });
  return r;
}

template <typename T>
ValueT<T> sigmoid_op(TapeT<T>& tape, ValueT<T> a) {
  TensorT<T> out = tape.value(a);
  for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, r] {
    const auto& g = tape.grad_ref(r.id);
    const auto& y = tape.value(r);
    auto& ga = tape.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> matmul(TapeT<T>& tape, ValueT<T> a, ValueT<T> b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rank() != 2 || bv.rank() != 2) throw DimensionError("matmul: operands must be 2-D");
  TensorT<T> out({av.rows(), bv.cols()});
  matmul_into(av, bv, out);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, b, r] {
    const auto& g = tape.grad_ref(r.id);
    matmul_bt_into(g, tape.value(b), tape.grad_ref(a.id), /*accumulate=*/true);
    matmul_at_into(tape.value(a), g, tape.grad_ref(b.id), /*accumulate=*/true);
  });
  return r;
}

/// Broadcast-add a bias row vector to every row of a matrix.
template <typename T>
ValueT<T> add_bias_rows(TapeT<T>& tape, ValueT<T> x, ValueT<T> bias) {
  const auto& xv = tape.value(x);
  const auto& bv = tape.value(bias);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.cols()) {
    throw DimensionError("add_bias_rows: bias " + bv.shape_string() +
                         " does not match matrix " + xv.shape_string());
  }
  TensorT<T> out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, bias, r] {
    const auto& g = tape.grad_ref(r.id);
    auto& gx = tape.grad_ref(x.id);
    auto& gb = tape.grad_ref(bias.id);
    const std::size_t rows = g.rows(), n2 = g.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n2; ++j) {
        gx[i * n2 + j] += g[i * n2 + j];
        gb[j] += g[i * n2 + j];
      }
  });
  return r;
}

/// input[B x m] . weight[m x n] + bias[n].
template <typename T>
ValueT<T> affine(TapeT<T>& tape, ValueT<T> x, ValueT<T> w, ValueT<T> b) {
  return add_bias_rows(tape, matmul(tape, x, w), b);
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> reshape(TapeT<T>& tape, ValueT<T> a, std::vector<std::size_t> shape) {
  TensorT<T> out = tape.value(a).reshaped(std::move(shape));
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, r] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return r;
}

template <typename T>
ValueT<T> concat_cols(TapeT<T>& tape, ValueT<T> a, ValueT<T> b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: row counts differ");
  }
  const std::size_t rows = av.rows(), p = av.cols(), q = bv.cols();
  TensorT<T> out({rows, p + q});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(av.data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(bv.data() + i * q, q, out.data() + i * (p + q) + p);
  }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, b, r, rows, p, q] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    auto& gb = tape.grad_ref(b.id);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
      for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
    }
  });
  return r;
}

/// Column slice [N x n] -> [N x width] starting at column `offset`.
template <typename T>
ValueT<T> slice_cols(TapeT<T>& tape, ValueT<T> a, std::size_t offset, std::size_t width) {
  const auto& av = tape.value(a);
  if (av.rank() != 2 || offset + width > av.cols()) {
    throw DimensionError("slice_cols: slice out of range");
  }
  const std::size_t rows = av.rows(), n = av.cols();
  TensorT<T> out({rows, width});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(av.data() + i * n + offset, width, out.data() + i * width);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, a, r, rows, n, offset, width] {
    const auto& g = tape.grad_ref(r.id);
    auto& ga = tape.grad_ref(a.id);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < width; ++j) ga[i * n + offset + j] += g[i * width + j];
  });
  return r;
}

/// Extract time step t from a time-major sequence [Tlen x B x d] -> [B x d].
template <typename T>
ValueT<T> slice_time(TapeT<T>& tape, ValueT<T> seq, std::size_t t) {
  const auto& sv = tape.value(seq);
  if (sv.rank() != 3 || t >= sv.dim(0)) throw DimensionError("slice_time: index out of range");
  const std::size_t block = sv.dim(1) * sv.dim(2);
  TensorT<T> out({sv.dim(1), sv.dim(2)});
  std::copy_n(sv.data() + t * block, block, out.data());
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, seq, r, t, block] {
    const auto& g = tape.grad_ref(r.id);
    auto& gs = tape.grad_ref(seq.id);
    for (std::size_t i = 0; i < block; ++i) gs[t * block + i] += g[i];
  });
  return r;
}

/// Stack per-step [B x d] values into a time-major sequence [Tlen x B x d].
template <typename T>
ValueT<T> stack_time(TapeT<T>& tape, const std::vector<ValueT<T>>& steps) {
  if (steps.empty()) throw UsageError("stack_time: no steps");
  const auto& first = tape.value(steps[0]);
  const std::size_t b = first.rows(), d = first.cols(), block = b * d;
  TensorT<T> out({steps.size(), b, d});
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& sv = tape.value(steps[t]);
    detail::check_same_shape(first, sv, "stack_time");
    std::copy_n(sv.data(), block, out.data() + t * block);
  }
  ValueT<T> r = tape.push(std::move(out));
  std::vector<ValueT<T>> parents = steps;
  tape.set_backward(r, [&tape, parents, r, block] {
    const auto& g = tape.grad_ref(r.id);
    for (std::size_t t = 0; t < parents.size(); ++t) {
      auto& gp = tape.grad_ref(parents[t].id);
      for (std::size_t i = 0; i < block; ++i) gp[i] += g[t * block + i];
    }
  });
  return r;
}

/// Reverse each batch element's valid prefix along time; padding rows stay
/// put. Used to run the backward direction of a BLSTM with a forward cell.
template <typename T>
ValueT<T> reverse_valid(TapeT<T>& tape, ValueT<T> seq, std::vector<std::size_t> lengths) {
  const auto& sv = tape.value(seq);
  if (sv.rank() != 3 || lengths.size() != sv.dim(1)) {
    throw DimensionError("reverse_valid: lengths do not match batch");
  }
  const std::size_t tl = sv.dim(0), b = sv.dim(1), d = sv.dim(2);
  for (std::size_t len : lengths)
    if (len > tl) throw DimensionError("reverse_valid: length exceeds sequence");
  TensorT<T> out(sv.shape());
  for (std::size_t t = 0; t < tl; ++t)
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t src = t < lengths[i] ? lengths[i] - 1 - t : t;
      std::copy_n(sv.data() + (src * b + i) * d, d, out.data() + (t * b + i) * d);
    }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, seq, r, lengths, tl, b, d] {
    const auto& g = tape.grad_ref(r.id);
    auto& gs = tape.grad_ref(seq.id);
    for (std::size_t t = 0; t < tl; ++t)
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t src = t < lengths[i] ? lengths[i] - 1 - t : t;
        for (std::size_t j = 0; j < d; ++j)
          gs[(src * b + i) * d + j] += g[(t * b + i) * d + j];
      }
  });
  return r;
}

/// Zero every time step at or beyond the batch element's valid length.
template <typename T>
ValueT<T> mask_time(TapeT<T>& tape, ValueT<T> seq, std::vector<std::size_t> lengths) {
  const auto& sv = tape.value(seq);
  if (sv.rank() != 3 || lengths.size() != sv.dim(1)) {
    throw DimensionError("mask_time: lengths do not match batch");
  }
  const std::size_t tl = sv.dim(0), b = sv.dim(1), d = sv.dim(2);
  TensorT<T> out = sv;
  for (std::size_t t = 0; t < tl; ++t)
    for (std::size_t i = 0; i < b; ++i)
      if (t >= lengths[i]) std::fill_n(out.data() + (t * b + i) * d, d, T(0));
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, seq, r, lengths, tl, b, d] {
    const auto& g = tape.grad_ref(r.id);
    auto& gs = tape.grad_ref(seq.id);
    for (std::size_t t = 0; t < tl; ++t)
      for (std::size_t i = 0; i < b; ++i)
        if (t < lengths[i])
          for (std::size_t j = 0; j < d; ++j)
            gs[(t * b + i) * d + j] += g[(t * b + i) * d + j];
  });
  return r;
}

/// Row gather: out[i, :] = x[indices[i], :].
template <typename T>
ValueT<T> select_rows(TapeT<T>& tape, ValueT<T> x, std::vector<std::size_t> indices) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2) throw DimensionError("select_rows: expected a matrix");
  const std::size_t d = xv.cols();
  for (std::size_t idx : indices)
    if (idx >= xv.rows()) throw DimensionError("select_rows: index out of range");
  TensorT<T> out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(xv.data() + indices[i] * d, d, out.data() + i * d);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, r, indices, d] {
    const auto& g = tape.grad_ref(r.id);
    auto& gx = tape.grad_ref(x.id);
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gx[indices[i] * d + j] += g[i * d + j];
  });
  return r;
}

/// Embedding lookup: table[V x e], ids[B] -> [B x e].
template <typename T>
ValueT<T> embedding_gather(TapeT<T>& tape, ValueT<T> table, std::vector<std::size_t> ids) {
  const auto& tv = tape.value(table);
  if (tv.rank() != 2) throw DimensionError("embedding_gather: table must be 2-D");
  for (std::size_t id : ids)
    if (id >= tv.rows()) throw DataError("embedding_gather: token index out of range");
  const std::size_t e = tv.cols();
  TensorT<T> out({ids.size(), e});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + ids[i] * e, e, out.data() + i * e);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, table, r, ids, e] {
    const auto& g = tape.grad_ref(r.id);
    auto& gt = tape.grad_ref(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < e; ++j) gt[ids[i] * e + j] += g[i * e + j];
  });
  return r;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Numerically stable in-place softmax over a contiguous range.
template <typename T>
void softmax_span(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  T sum = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

/// Plain (tape-free) softmax of a vector; max-subtraction for stability.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits) {
  if (logits.size() == 0) throw DimensionError("softmax: empty input");
  TensorT<T> out(logits.shape());
  softmax_span(logits.data(), out.data(), logits.size());
  return out;
}

template <typename T>
ValueT<T> softmax_rows(TapeT<T>& tape, ValueT<T> x) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2) throw DimensionError("softmax_rows: expected a matrix");
  const std::size_t rows = xv.rows(), n = xv.cols();
  TensorT<T> out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i)
    softmax_span(xv.data() + i * n, out.data() + i * n, n);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, r, rows, n] {
    const auto& g = tape.grad_ref(r.id);
    const auto& y = tape.value(r);
    auto& gx = tape.grad_ref(x.id);
    for (std::size_t i = 0; i < rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
  return r;
}

/// Row softmax over the valid prefix only; weights at t >= lengths[row] are
/// exactly zero (padded frames get -inf scores).
template <typename T>
ValueT<T> masked_softmax_rows(TapeT<T>& tape, ValueT<T> x, std::vector<std::size_t> lengths) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2 || lengths.size() != xv.rows()) {
    throw DimensionError("masked_softmax_rows: lengths do not match rows");
  }
  const std::size_t rows = xv.rows(), n = xv.cols();
  for (std::size_t len : lengths)
    if (len == 0 || len > n) throw DimensionError("masked_softmax_rows: bad length");
  TensorT<T> out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    softmax_span(xv.data() + i * n, out.data() + i * n, lengths[i]);
    std::fill_n(out.data() + i * n + lengths[i], n - lengths[i], T(0));
  }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, r, lengths, rows, n] {
    const auto& g = tape.grad_ref(r.id);
    const auto& y = tape.value(r);
    auto& gx = tape.grad_ref(x.id);
    for (std::size_t i = 0; i < rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < lengths[i]; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < lengths[i]; ++j)
        gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
  return r;
}

template <typename T>
ValueT<T> log_softmax_rows(TapeT<T>& tape, ValueT<T> x) {
  const auto& xv = tape.value(x);
  if (xv.rank() != 2) throw DimensionError("log_softmax_rows: expected a matrix");
  const std::size_t rows = xv.rows(), n = xv.cols();
  TensorT<T> out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* in = xv.data() + i * n;
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = in[j] - lse;
  }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, r, rows, n] {
    const auto& g = tape.grad_ref(r.id);
    const auto& y = tape.value(r);
    auto& gx = tape.grad_ref(x.id);
    for (std::size_t i = 0; i < rows; ++i) {
      T gsum = T(0);
      for (std::size_t j = 0; j < n; ++j) gsum += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gsum;
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
ValueT<T> sum_all(TapeT<T>& tape, ValueT<T> x) {
  const auto& xv = tape.value(x);
  T s = T(0);
  for (const T& v : xv.values()) s += v;
  ValueT<T> r = tape.push(TensorT<T>::scalar(s));
  tape.set_backward(r, [&tape, x, r] {
    const T g = tape.grad_ref(r.id)[0];
    auto& gx = tape.grad_ref(x.id);
    for (auto& v : gx.values()) v += g;
  });
  return r;
}

template <typename T>
ValueT<T> mean_all(TapeT<T>& tape, ValueT<T> x) {
  const std::size_t n = tape.value(x).size();
  return scale(tape, sum_all(tape, x), T(1) / static_cast<T>(n));
}

/// Token-level cross entropy over masked positions (mask[i] != 0 means the
/// position counts). Returns the mean loss; fills `stats` with the matching
/// argmax/target agreement used for teacher-forced token accuracy.
struct CrossEntropyStats {
  std::size_t positions = 0;
  std::size_t correct = 0;
  double accuracy() const {
    return positions ? static_cast<double>(correct) / static_cast<double>(positions) : 0.0;
  }
};

template <typename T>
ValueT<T> cross_entropy_masked(TapeT<T>& tape, ValueT<T> logits,
                               const std::vector<std::size_t>& targets,
                               const std::vector<std::uint8_t>& mask,
                               CrossEntropyStats* stats = nullptr) {
  const auto& lv = tape.value(logits);
  if (lv.rank() != 2 || targets.size() != lv.rows() || mask.size() != lv.rows()) {
    throw DimensionError("cross_entropy_masked: rows/targets/mask disagree");
  }
  const std::size_t rows = lv.rows(), n = lv.cols();
  std::size_t count = 0, correct = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= n) throw DataError("cross_entropy_masked: target out of range");
    const T* in = lv.data() + i * n;
    T mx = in[0];
    std::size_t arg = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (in[j] > mx) {
        mx = in[j];
        arg = j;
      }
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
    total += static_cast<double>(mx + std::log(sum) - in[targets[i]]);
    ++count;
    if (arg == targets[i]) ++correct;
  }
  if (count == 0) throw UsageError("cross_entropy_masked: no unmasked positions");
  if (stats) {
    stats->positions = count;
    stats->correct = correct;
  }
  ValueT<T> r = tape.push(TensorT<T>::scalar(static_cast<T>(total / count)));
  tape.set_backward(r, [&tape, logits, r, targets, mask, rows, n, count] {
    const T g = tape.grad_ref(r.id)[0] / static_cast<T>(count);
    const auto& lv2 = tape.value(logits);
    auto& gl = tape.grad_ref(logits.id);
    std::vector<T> sm(n);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!mask[i]) continue;
      softmax_span(lv2.data() + i * n, sm.data(), n);
      for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g * sm[j];
      gl[i * n + targets[i]] -= g;
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Convolution (3x3 kernel, stride 2x2, symmetric zero padding of 1)
// ---------------------------------------------------------------------------

/// Output spatial extent of one stride-2 conv layer: ceil(len / 2).
inline std::size_t conv_out_len(std::size_t len) { return (len + 1) / 2; }

/// Sequence length after the encoder's two stacked stride-2 convolutions.
inline std::size_t encoder_out_len(std::size_t t) { return conv_out_len(conv_out_len(t)); }

namespace detail {

/// Forward conv on time-major batched layout [Ti x B x Ci x Wi] ->
/// [To x B x Co x Wo]; kernels [Co x Ci x 3 x 3], bias [Co].
template <typename T>
void conv2d_forward(const TensorT<T>& in, const TensorT<T>& kernels, const TensorT<T>& bias,
                    TensorT<T>& out) {
  const std::size_t ti = in.dim(0), b = in.dim(1), ci = in.dim(2), wi = in.dim(3);
  const std::size_t co = kernels.dim(0), to = conv_out_len(ti), wo = conv_out_len(wi);
  for (std::size_t t = 0; t < to; ++t)
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t oc = 0; oc < co; ++oc) {
        T* orow = out.data() + (((t * b) + bb) * co + oc) * wo;
        for (std::size_t w = 0; w < wo; ++w) {
          T acc = bias.size() ? bias[oc] : T(0);
          for (std::size_t ic = 0; ic < ci; ++ic)
            for (std::size_t dt = 0; dt < 3; ++dt) {
              const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(2 * t + dt) - 1;
              if (it < 0 || it >= static_cast<std::ptrdiff_t>(ti)) continue;
              const T* irow = in.data() + (((static_cast<std::size_t>(it) * b) + bb) * ci + ic) * wi;
              const T* krow = kernels.data() + ((oc * ci + ic) * 3 + dt) * 3;
              for (std::size_t dw = 0; dw < 3; ++dw) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(2 * w + dw) - 1;
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wi)) continue;
                acc += irow[iw] * krow[dw];
              }
            }
          orow[w] = acc;
        }
      }
}

template <typename T>
void conv2d_backward(const TensorT<T>& in, const TensorT<T>& kernels, const TensorT<T>& gout,
                     TensorT<T>& gin, TensorT<T>& gkernels, TensorT<T>& gbias) {
  const std::size_t ti = in.dim(0), b = in.dim(1), ci = in.dim(2), wi = in.dim(3);
  const std::size_t co = kernels.dim(0), to = gout.dim(0), wo = gout.dim(3);
  for (std::size_t t = 0; t < to; ++t)
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t oc = 0; oc < co; ++oc) {
        const T* grow = gout.data() + (((t * b) + bb) * co + oc) * wo;
        for (std::size_t w = 0; w < wo; ++w) {
          const T g = grow[w];
          if (g == T(0)) continue;
          if (gbias.size()) gbias[oc] += g;
          for (std::size_t ic = 0; ic < ci; ++ic)
            for (std::size_t dt = 0; dt < 3; ++dt) {
              const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(2 * t + dt) - 1;
              if (it < 0 || it >= static_cast<std::ptrdiff_t>(ti)) continue;
              const std::size_t ibase = (((static_cast<std::size_t>(it) * b) + bb) * ci + ic) * wi;
              const std::size_t kbase = ((oc * ci + ic) * 3 + dt) * 3;
              for (std::size_t dw = 0; dw < 3; ++dw) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(2 * w + dw) - 1;
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wi)) continue;
                gin[ibase + static_cast<std::size_t>(iw)] += g * kernels[kbase + dw];
                gkernels[kbase + dw] += g * in[ibase + static_cast<std::size_t>(iw)];
              }
            }
        }
      }
}

}  // namespace detail

/// Batched 3x3/stride-2 convolution on [Ti x B x Ci x Wi]. Both output
/// spatial extents follow ceil(len/2).
template <typename T>
ValueT<T> conv2d_s2(TapeT<T>& tape, ValueT<T> x, ValueT<T> kernels, ValueT<T> bias) {
  const auto& xv = tape.value(x);
  const auto& kv = tape.value(kernels);
  const auto& bv = tape.value(bias);
  if (xv.rank() != 4) throw DimensionError("conv2d: input must be [T x B x C x W]");
  if (kv.rank() != 4 || kv.dim(2) != 3 || kv.dim(3) != 3 || kv.dim(1) != xv.dim(2)) {
    throw DimensionError("conv2d: kernels must be [Co x Ci x 3 x 3] with Ci matching input");
  }
  if (bv.rank() != 1 || bv.dim(0) != kv.dim(0)) throw DimensionError("conv2d: bad bias shape");
  TensorT<T> out({conv_out_len(xv.dim(0)), xv.dim(1), kv.dim(0), conv_out_len(xv.dim(3))});
  detail::conv2d_forward(xv, kv, bv, out);
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, x, kernels, bias, r] {
    detail::conv2d_backward(tape.value(x), tape.value(kernels), tape.grad_ref(r.id),
                            tape.grad_ref(x.id), tape.grad_ref(kernels.id),
                            tape.grad_ref(bias.id));
  });
  return r;
}

/// Tape-free single-sample convolution with the spec layout [Ci x H x W].
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernels) {
  if (input.rank() != 3) throw DimensionError("conv2d: input must be [C x H x W]");
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3 ||
      kernels.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernels must be [Co x Ci x 3 x 3]");
  }
  // [C x H x W] == [H=T x B=1 x C x W] after an axis swap; reuse the batched path.
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  TensorT<T> tm({h, 1, c, w});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t hh = 0; hh < h; ++hh)
      std::copy_n(input.data() + (cc * h + hh) * w, w, tm.data() + ((hh * 1 + 0) * c + cc) * w);
  TensorT<T> kb = kernels;
  TensorT<T> bias({kernels.dim(0)});
  TensorT<T> out({conv_out_len(h), 1, kernels.dim(0), conv_out_len(w)});
  detail::conv2d_forward(tm, kb, bias, out);
  // back to [Co x H' x W']
  const std::size_t co = kernels.dim(0), ho = conv_out_len(h), wo = conv_out_len(w);
  TensorT<T> res({co, ho, wo});
  for (std::size_t cc = 0; cc < co; ++cc)
    for (std::size_t hh = 0; hh < ho; ++hh)
      std::copy_n(out.data() + ((hh * 1 + 0) * co + cc) * wo, wo,
                  res.data() + (cc * ho + hh) * wo);
  return res;
}

// ---------------------------------------------------------------------------
// Attention kernels
// ---------------------------------------------------------------------------

/// Additive attention scores: score[b,t] = sum_a v[a]*tanh(ps[t,b,a] + qp[b,a]).
/// `ps` is the projected encoder states [Tc x B x A], `qp` the projected
/// query plus bias [B x A].
template <typename T>
ValueT<T> attention_scores(TapeT<T>& tape, ValueT<T> ps, ValueT<T> qp, ValueT<T> v) {
  const auto& pv = tape.value(ps);
  const auto& qv = tape.value(qp);
  const auto& vv = tape.value(v);
  if (pv.rank() != 3 || qv.rank() != 2 || vv.rank() != 1 || pv.dim(1) != qv.rows() ||
      pv.dim(2) != qv.cols() || vv.dim(0) != qv.cols()) {
    throw DimensionError("attention_scores: inconsistent shapes");
  }
  const std::size_t tc = pv.dim(0), b = pv.dim(1), a = pv.dim(2);
  TensorT<T> out({b, tc});
  for (std::size_t t = 0; t < tc; ++t)
    for (std::size_t bb = 0; bb < b; ++bb) {
      const T* prow = pv.data() + (t * b + bb) * a;
      const T* qrow = qv.data() + bb * a;
      T s = T(0);
      for (std::size_t j = 0; j < a; ++j) s += vv[j] * std::tanh(prow[j] + qrow[j]);
      out[bb * tc + t] = s;
    }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, ps, qp, v, r, tc, b, a] {
    const auto& g = tape.grad_ref(r.id);
    const auto& pv2 = tape.value(ps);
    const auto& qv2 = tape.value(qp);
    const auto& vv2 = tape.value(v);
    auto& gp = tape.grad_ref(ps.id);
    auto& gq = tape.grad_ref(qp.id);
    auto& gv = tape.grad_ref(v.id);
    for (std::size_t t = 0; t < tc; ++t)
      for (std::size_t bb = 0; bb < b; ++bb) {
        const T gs = g[bb * tc + t];
        if (gs == T(0)) continue;
        const std::size_t pbase = (t * b + bb) * a;
        const std::size_t qbase = bb * a;
        for (std::size_t j = 0; j < a; ++j) {
          const T u = std::tanh(pv2[pbase + j] + qv2[qbase + j]);
          const T du = gs * vv2[j] * (T(1) - u * u);
          gp[pbase + j] += du;
          gq[qbase + j] += du;
          gv[j] += gs * u;
        }
      }
  });
  return r;
}

/// Convex combination of encoder states: ctx[b,:] = sum_t w[b,t] * states[t,b,:].
template <typename T>
ValueT<T> attention_context(TapeT<T>& tape, ValueT<T> weights, ValueT<T> states) {
  const auto& wv = tape.value(weights);
  const auto& sv = tape.value(states);
  if (wv.rank() != 2 || sv.rank() != 3 || sv.dim(0) != wv.cols() || sv.dim(1) != wv.rows()) {
    throw DimensionError("attention_context: inconsistent shapes");
  }
  const std::size_t tc = sv.dim(0), b = sv.dim(1), h = sv.dim(2);
  TensorT<T> out({b, h});
  for (std::size_t t = 0; t < tc; ++t)
    for (std::size_t bb = 0; bb < b; ++bb) {
      const T w = wv[bb * tc + t];
      if (w == T(0)) continue;
      const T* srow = sv.data() + (t * b + bb) * h;
      T* orow = out.data() + bb * h;
      for (std::size_t j = 0; j < h; ++j) orow[j] += w * srow[j];
    }
  ValueT<T> r = tape.push(std::move(out));
  tape.set_backward(r, [&tape, weights, states, r, tc, b, h] {
    const auto& g = tape.grad_ref(r.id);
    const auto& wv2 = tape.value(weights);
    const auto& sv2 = tape.value(states);
    auto& gw = tape.grad_ref(weights.id);
    auto& gs = tape.grad_ref(states.id);
    for (std::size_t t = 0; t < tc; ++t)
      for (std::size_t bb = 0; bb < b; ++bb) {
        const T* srow = sv2.data() + (t * b + bb) * h;
        const T* grow = g.data() + bb * h;
        T dot = T(0);
        const T w = wv2[bb * tc + t];
        T* gsrow = gs.data() + (t * b + bb) * h;
        for (std::size_t j = 0; j < h; ++j) {
          dot += srow[j] * grow[j];
          gsrow[j] += w * grow[j];
        }
        gw[bb * tc + t] += dot;
      }
  });
  return r;
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// Gate-packed LSTM weights: wx [in x 4k], wh [k x 4k], b [4k].
/// Gate order along the packed axis is input, forget, candidate, output.
template <typename T>
struct LstmWeights {
  ValueT<T> wx, wh, b;
};

/// One LSTM cell step on a batch: x [B x in], h,c [B x k] -> (h', c').
template <typename T>
std::pair<ValueT<T>, ValueT<T>> lstm_step(TapeT<T>& tape, ValueT<T> x, ValueT<T> h,
                                          ValueT<T> c, const LstmWeights<T>& w) {
  const std::size_t k4 = tape.value(w.wx).cols();
  if (k4 % 4 != 0 || tape.value(w.wh).cols() != k4 || tape.value(w.b).dim(0) != k4) {
    throw DimensionError("lstm_step: inconsistent gate widths");
  }
  const std::size_t k = k4 / 4;
  if (tape.value(h).cols() != k || tape.value(c).cols() != k) {
    throw DimensionError("lstm_step: state width does not match weights");
  }
  ValueT<T> gates =
      add_bias_rows(tape, add(tape, matmul(tape, x, w.wx), matmul(tape, h, w.wh)), w.b);
  ValueT<T> gi = sigmoid_op(tape, slice_cols(tape, gates, 0, k));
  ValueT<T> gf = sigmoid_op(tape, slice_cols(tape, gates, k, k));
  ValueT<T> gg = tanh_op(tape, slice_cols(tape, gates, 2 * k, k));
  ValueT<T> go = sigmoid_op(tape, slice_cols(tape, gates, 3 * k, k));
  ValueT<T> c_next = add(tape, mul(tape, gf, c), mul(tape, gi, gg));
  ValueT<T> h_next = mul(tape, go, tanh_op(tape, c_next));
  return {h_next, c_next};
}

}  // namespace xasr
