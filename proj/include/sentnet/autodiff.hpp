#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sentnet/random.hpp"
#include "sentnet/tensor.hpp"

namespace sentnet {

template <class T>
class TapeT;

/// Handle to a node on a recording tape. Valid only while the tape lives.
template <class T = double>
struct VariableT {
  TapeT<T>* tape = nullptr;
  std::size_t id = 0;
  bool requires_grad = false;

  const TensorT<T>& value() const { return tape->value_of(id); }
  const TensorT<T>& grad() const { return tape->grad_of(id); }
};

/// Records forward values and backward closures in creation order; backward()
/// replays the closures in exact reverse order. A tape is consumed by one
/// backward pass.
template <class T = double>
class TapeT {
 public:
  using Var = VariableT<T>;
  using BackwardFn = std::function<void(TapeT&, std::size_t)>;

  Var leaf(TensorT<T> value, bool requires_grad = false) {
    return emit(std::move(value), requires_grad, nullptr);
  }

  Var emit(TensorT<T> value, bool requires_grad, BackwardFn backward) {
    if (consumed_) {
      throw ContractError("tape already consumed by backward; record on a fresh tape");
    }
    Node node;
    node.grad = TensorT<T>(value.shape());
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1, requires_grad};
  }

  const TensorT<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  TensorT<T>& grad_of(std::size_t id) { return nodes_[id].grad; }
  const TensorT<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void run_backward(std::size_t loss_id) {
    if (consumed_) throw TapeReuseError("tape already consumed by a backward pass");
    const TensorT<T>& loss = nodes_[loss_id].value;
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    consumed_ = true;
    nodes_[loss_id].grad[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

using Variable = VariableT<double>;
using Tape = TapeT<double>;

template <class T>
void backward(VariableT<T> loss) {
  loss.tape->run_backward(loss.id);
}

namespace detail {

template <class T>
TapeT<T>& same_tape(const VariableT<T>& a, const VariableT<T>& b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

// C += A * B, row-major, ikj order for contiguous inner loops.
template <class T>
void matmul_acc(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA += G * B^T
template <class T>
void matmul_gbt_acc(const TensorT<T>& g, const TensorT<T>& b, TensorT<T>& da) {
  const std::size_t m = g.rows(), n = g.cols(), k = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g.row(i);
    T* darow = da.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b.row(p);
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

// dB += A^T * G
template <class T>
void matmul_atg_acc(const TensorT<T>& a, const TensorT<T>& g, TensorT<T>& db) {
  const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.row(i);
    const T* grow = g.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* dbrow = db.row(p);
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

template <class T>
VariableT<T> matmul(VariableT<T> a, VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(a, b);
  const TensorT<T>& av = tape.value_of(a.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  }
  TensorT<T> out({av.rows(), bv.cols()});
  detail::matmul_acc(av, bv, out);
  const bool rg = a.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [aid = a.id, bid = b.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      detail::matmul_gbt_acc(g, t.value_of(bid), t.grad_of(aid));
      detail::matmul_atg_acc(t.value_of(aid), g, t.grad_of(bid));
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

template <class T>
VariableT<T> add(VariableT<T> a, VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(a, b);
  const TensorT<T>& av = tape.value_of(a.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (!av.same_shape(bv)) {
    throw ShapeError("add: shapes differ: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const bool rg = a.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [aid = a.id, bid = b.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      t.grad_of(aid) += g;
      t.grad_of(bid) += g;
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

template <class T>
VariableT<T> mul(VariableT<T> a, VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(a, b);
  const TensorT<T>& av = tape.value_of(a.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (!av.same_shape(bv)) {
    throw ShapeError("mul: shapes differ: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const bool rg = a.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [aid = a.id, bid = b.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      const TensorT<T>& av2 = t.value_of(aid);
      const TensorT<T>& bv2 = t.value_of(bid);
      TensorT<T>& ga = t.grad_of(aid);
      TensorT<T>& gb = t.grad_of(bid);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga[i] += g[i] * bv2[i];
        gb[i] += g[i] * av2[i];
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

template <class T>
VariableT<T> scale(VariableT<T> x, T c) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, c](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * c;
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// Adds a length-n bias vector over the last axis of x.
template <class T>
VariableT<T> add_bias(VariableT<T> x, VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(x, b);
  const TensorT<T>& xv = tape.value_of(x.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (bv.rank() != 1 || xv.rank() < 1 || xv.shape().back() != bv.extent(0)) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) +
                     " does not broadcast over last axis of " + shape_str(xv.shape()));
  }
  const std::size_t n = bv.extent(0);
  const std::size_t lead = xv.numel() / n;
  TensorT<T> out = xv;
  for (std::size_t r = 0; r < lead; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  const bool rg = x.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [xid = x.id, bid = b.id, n, lead](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      TensorT<T>& gb = t.grad_of(bid);
      gx += g;
      for (std::size_t r = 0; r < lead; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

template <class T>
VariableT<T> tanh(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id);
  for (T& v : out.buffer()) v = std::tanh(v);
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& y = t.value_of(self);
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> sigmoid(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id);
  for (T& v : out.buffer()) {
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& y = t.value_of(self);
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> relu(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id);
  for (T& v : out.buffer()) v = v > T(0) ? v : T(0);
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      const TensorT<T>& xv = t.value_of(xid);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> exp(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id);
  for (T& v : out.buffer()) v = std::exp(v);
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& y = t.value_of(self);
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i];
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// Row-wise softmax with max-subtraction. -inf entries are mask sentinels and
/// map to exactly 0; NaN or +inf input is a numeric error, as is a fully
/// masked row.
template <class T>
VariableT<T> softmax_rows(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  if (xv.rank() != 2) {
    throw ShapeError("softmax_rows: expected rank-2 input, got " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.rows(), n = xv.cols();
  TensorT<T> out({m, n});
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    const T* xin = xv.row(i);
    T* po = out.row(i);
    T mx = neg_inf;
    for (std::size_t j = 0; j < n; ++j) {
      const T v = xin[j];
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      if (v == std::numeric_limits<T>::infinity())
        throw NumericError("softmax_rows: +inf in row " + std::to_string(i));
      mx = std::max(mx, v);
    }
    if (mx == neg_inf) {
      throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T e = xin[j] == neg_inf ? T(0) : std::exp(xin[j] - mx);
      po[j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) po[j] /= sum;
  }
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, m, n](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& y = t.value_of(self);
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < m; ++i) {
        const T* yr = y.row(i);
        const T* gr = g.row(i);
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        T* gxr = gx.row(i);
        for (std::size_t j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

namespace detail {

inline void check_axis(std::size_t axis, std::size_t rank) {
  if (axis >= rank) {
    throw ShapeError("reduce: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace detail

template <class T>
VariableT<T> reduce_sum(VariableT<T> x, std::size_t axis) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  detail::check_axis(axis, xv.rank());
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ext = s[axis];
  TensorT<T> out(detail::drop_axis(s, axis));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < ext; ++k)
      for (std::size_t j = 0; j < inner; ++j)
        out[o * inner + j] += xv[(o * ext + k) * inner + j];
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, outer, inner, ext](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < ext; ++k)
          for (std::size_t j = 0; j < inner; ++j)
            gx[(o * ext + k) * inner + j] += g[o * inner + j];
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> reduce_mean(VariableT<T> x, std::size_t axis) {
  const TensorT<T>& xv = x.tape->value_of(x.id);
  detail::check_axis(axis, xv.rank());
  return scale(reduce_sum(x, axis), T(1) / T(xv.extent(axis)));
}

/// Max over an axis; gradient is routed to the argmax position only, first
/// occurrence on ties.
template <class T>
VariableT<T> reduce_max(VariableT<T> x, std::size_t axis) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  detail::check_axis(axis, xv.rank());
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ext = s[axis];
  TensorT<T> out(detail::drop_axis(s, axis));
  std::vector<std::size_t> argmax(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      T best = xv[(o * ext) * inner + j];
      std::size_t bestk = 0;
      for (std::size_t k = 1; k < ext; ++k) {
        const T v = xv[(o * ext + k) * inner + j];
        if (v > best) {
          best = v;
          bestk = k;
        }
      }
      out[o * inner + j] = best;
      argmax[o * inner + j] = bestk;
    }
  }
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, outer, inner, ext, argmax = std::move(argmax)](TapeT<T>& t,
                                                                     std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t k = argmax[o * inner + j];
          gx[(o * ext + k) * inner + j] += g[o * inner + j];
        }
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> sum_all(VariableT<T> x) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  T acc = T(0);
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const T g = t.grad_of(self)[0];
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    };
  }
  return tape.emit(TensorT<T>::scalar(acc), x.requires_grad, std::move(bw));
}

template <class T>
VariableT<T> mean_all(VariableT<T> x) {
  const std::size_t n = x.tape->value_of(x.id).numel();
  return scale(sum_all(x), T(1) / T(n));
}

template <class T>
VariableT<T> reshape(VariableT<T> x, Shape new_shape) {
  TapeT<T>& tape = *x.tape;
  TensorT<T> out = tape.value_of(x.id).reshaped(std::move(new_shape));
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// [m x p] ++ [m x q] -> [m x (p+q)]
template <class T>
VariableT<T> concat_cols(VariableT<T> a, VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(a, b);
  const TensorT<T>& av = tape.value_of(a.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), p = av.cols(), q = bv.cols();
  TensorT<T> out({m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(av.row(i), av.row(i) + p, out.row(i));
    std::copy(bv.row(i), bv.row(i) + q, out.row(i) + p);
  }
  const bool rg = a.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [aid = a.id, bid = b.id, m, p, q](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& ga = t.grad_of(aid);
      TensorT<T>& gb = t.grad_of(bid);
      for (std::size_t i = 0; i < m; ++i) {
        const T* gr = g.row(i);
        for (std::size_t j = 0; j < p; ++j) ga(i, j) += gr[j];
        for (std::size_t j = 0; j < q; ++j) gb(i, j) += gr[p + j];
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// [B x L x D] -> timestep t as [B x D]
template <class T>
VariableT<T> slice_time(VariableT<T> x, std::size_t t) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  if (xv.rank() != 3) throw ShapeError("slice_time: expected rank-3, got " + shape_str(xv.shape()));
  const std::size_t b = xv.extent(0), l = xv.extent(1), d = xv.extent(2);
  if (t >= l) throw IndexError("slice_time: t=" + std::to_string(t) + " >= L=" + std::to_string(l));
  TensorT<T> out({b, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = xv(i, t, j);
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, t, b, l, d](TapeT<T>& tp, std::size_t self) {
      const TensorT<T>& g = tp.grad_of(self);
      TensorT<T>& gx = tp.grad_of(xid);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[(i * l + t) * d + j] += g(i, j);
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// L tensors of [B x D] -> [B x L x D]
template <class T>
VariableT<T> stack_time(const std::vector<VariableT<T>>& steps) {
  if (steps.empty()) throw ShapeError("stack_time: empty input");
  TapeT<T>& tape = *steps.front().tape;
  const TensorT<T>& first = tape.value_of(steps.front().id);
  if (first.rank() != 2) throw ShapeError("stack_time: steps must be rank-2");
  const std::size_t b = first.rows(), d = first.cols(), l = steps.size();
  TensorT<T> out({b, l, d});
  bool rg = false;
  std::vector<std::size_t> ids(l);
  for (std::size_t t = 0; t < l; ++t) {
    const TensorT<T>& sv = tape.value_of(steps[t].id);
    if (!sv.same_shape(first)) throw ShapeError("stack_time: step shapes differ");
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, t, j) = sv(i, j);
    rg = rg || steps[t].requires_grad;
    ids[t] = steps[t].id;
  }
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [ids = std::move(ids), b, d](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      for (std::size_t step = 0; step < ids.size(); ++step) {
        TensorT<T>& gs = t.grad_of(ids[step]);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < d; ++j) gs(i, j) += g(i, step, j);
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// [B x L] -> column j as [B]
template <class T>
VariableT<T> column(VariableT<T> x, std::size_t j) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  if (xv.rank() != 2) throw ShapeError("column: expected rank-2, got " + shape_str(xv.shape()));
  if (j >= xv.cols()) throw IndexError("column: index out of range");
  const std::size_t m = xv.rows();
  TensorT<T> out({m});
  for (std::size_t i = 0; i < m; ++i) out[i] = xv(i, j);
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, j, m](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < m; ++i) gx(i, j) += g[i];
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// L column vectors of [B] -> [B x L]
template <class T>
VariableT<T> stack_cols(const std::vector<VariableT<T>>& cols) {
  if (cols.empty()) throw ShapeError("stack_cols: empty input");
  TapeT<T>& tape = *cols.front().tape;
  const std::size_t m = tape.value_of(cols.front().id).numel();
  const std::size_t l = cols.size();
  TensorT<T> out({m, l});
  bool rg = false;
  std::vector<std::size_t> ids(l);
  for (std::size_t j = 0; j < l; ++j) {
    const TensorT<T>& cv = tape.value_of(cols[j].id);
    if (cv.rank() != 1 || cv.numel() != m) throw ShapeError("stack_cols: column shapes differ");
    for (std::size_t i = 0; i < m; ++i) out(i, j) = cv[i];
    rg = rg || cols[j].requires_grad;
    ids[j] = cols[j].id;
  }
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [ids = std::move(ids), m](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      for (std::size_t j = 0; j < ids.size(); ++j) {
        TensorT<T>& gc = t.grad_of(ids[j]);
        for (std::size_t i = 0; i < m; ++i) gc[i] += g(i, j);
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// Scales row i of x by s[i].
template <class T>
VariableT<T> row_scale(VariableT<T> x, VariableT<T> s) {
  TapeT<T>& tape = detail::same_tape(x, s);
  const TensorT<T>& xv = tape.value_of(x.id);
  const TensorT<T>& sv = tape.value_of(s.id);
  if (xv.rank() != 2 || sv.rank() != 1 || sv.numel() != xv.rows()) {
    throw ShapeError("row_scale: incompatible shapes " + shape_str(xv.shape()) +
                     " and " + shape_str(sv.shape()));
  }
  const std::size_t m = xv.rows(), n = xv.cols();
  TensorT<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) * sv[i];
  const bool rg = x.requires_grad || s.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [xid = x.id, sid = s.id, m, n](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      const TensorT<T>& xv2 = t.value_of(xid);
      const TensorT<T>& sv2 = t.value_of(sid);
      TensorT<T>& gx = t.grad_of(xid);
      TensorT<T>& gs = t.grad_of(sid);
      for (std::size_t i = 0; i < m; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          gx(i, j) += g(i, j) * sv2[i];
          acc += g(i, j) * xv2(i, j);
        }
        gs[i] += acc;
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// Per-row select: row i of the result is a's row where select[i] != 0, else
/// b's row. The selector is a constant; gradients are routed accordingly.
template <class T>
VariableT<T> where_rows(const std::vector<std::uint8_t>& select, VariableT<T> a,
                        VariableT<T> b) {
  TapeT<T>& tape = detail::same_tape(a, b);
  const TensorT<T>& av = tape.value_of(a.id);
  const TensorT<T>& bv = tape.value_of(b.id);
  if (!av.same_shape(bv) || av.rank() != 2 || select.size() != av.rows()) {
    throw ShapeError("where_rows: incompatible shapes " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols();
  TensorT<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* src = select[i] ? av.row(i) : bv.row(i);
    std::copy(src, src + n, out.row(i));
  }
  const bool rg = a.requires_grad || b.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [aid = a.id, bid = b.id, select, m, n](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& ga = t.grad_of(aid);
      TensorT<T>& gb = t.grad_of(bid);
      for (std::size_t i = 0; i < m; ++i) {
        TensorT<T>& dst = select[i] ? ga : gb;
        for (std::size_t j = 0; j < n; ++j) dst(i, j) += g(i, j);
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// Replaces padded entries of a [B x L] score matrix with `fill` (typically
/// -inf ahead of softmax_rows). Gradients flow only through real positions.
template <class T>
VariableT<T> mask_fill(VariableT<T> x, const Mask& mask, T fill) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  if (xv.rank() != 2 || xv.rows() != mask.rows || xv.cols() != mask.cols) {
    throw ShapeError("mask_fill: mask " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " does not match " + shape_str(xv.shape()));
  }
  const std::size_t m = xv.rows(), n = xv.cols();
  TensorT<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = mask.at(i, j) ? xv(i, j) : fill;
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, mask, m, n](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (mask.at(i, j)) gx(i, j) += g(i, j);
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

/// Mean over real timesteps: [B x L x D] with mask -> [B x D].
template <class T>
VariableT<T> masked_mean_time(VariableT<T> x, const Mask& mask) {
  TapeT<T>& tape = *x.tape;
  const TensorT<T>& xv = tape.value_of(x.id);
  if (xv.rank() != 3 || xv.extent(0) != mask.rows || xv.extent(1) != mask.cols) {
    throw ShapeError("masked_mean_time: mask " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " does not match " + shape_str(xv.shape()));
  }
  const std::size_t b = xv.extent(0), l = xv.extent(1), d = xv.extent(2);
  std::vector<T> inv_len(b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t cnt = mask.real_count(i);
    if (cnt == 0) {
      throw ContractError("masked_mean_time: sentence " + std::to_string(i) +
                          " has no real tokens");
    }
    inv_len[i] = T(1) / T(cnt);
  }
  TensorT<T> out({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < l; ++t) {
      if (!mask.at(i, t)) continue;
      for (std::size_t j = 0; j < d; ++j) out(i, j) += xv(i, t, j) * inv_len[i];
    }
  }
  typename TapeT<T>::BackwardFn bw;
  if (x.requires_grad) {
    bw = [xid = x.id, mask, inv_len = std::move(inv_len), b, l, d](TapeT<T>& t,
                                                                   std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      TensorT<T>& gx = t.grad_of(xid);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t step = 0; step < l; ++step) {
          if (!mask.at(i, step)) continue;
          for (std::size_t j = 0; j < d; ++j) gx(i, step, j) += g(i, j) * inv_len[i];
        }
    };
  }
  return tape.emit(std::move(out), x.requires_grad, std::move(bw));
}

enum class Padding { kSameZero, kValid };

/// 1-D convolution over time (cross-correlation, no kernel flip).
/// x: [B x L x C], w: [K x C x F] -> [B x L' x F].
template <class T>
VariableT<T> conv1d(VariableT<T> x, VariableT<T> w, Padding padding) {
  TapeT<T>& tape = detail::same_tape(x, w);
  const TensorT<T>& xv = tape.value_of(x.id);
  const TensorT<T>& wv = tape.value_of(w.id);
  if (xv.rank() != 3 || wv.rank() != 3 || xv.extent(2) != wv.extent(1)) {
    throw ShapeError("conv1d: incompatible shapes " + shape_str(xv.shape()) + " and " +
                     shape_str(wv.shape()));
  }
  const std::size_t b = xv.extent(0), l = xv.extent(1), c = xv.extent(2);
  const std::size_t k = wv.extent(0), f = wv.extent(2);
  std::size_t lout;
  std::ptrdiff_t pad;
  if (padding == Padding::kValid) {
    if (l < k) {
      throw ShapeError("conv1d: sequence length " + std::to_string(l) +
                       " shorter than kernel width " + std::to_string(k));
    }
    lout = l - k + 1;
    pad = 0;
  } else {
    lout = l;
    pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  }
  TensorT<T> out({b, lout, f});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < lout; ++i) {
      T* orow = &out(bi, i, 0);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + kk) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(l)) continue;
        const T* xrow = &xv(bi, static_cast<std::size_t>(src), 0);
        for (std::size_t ci = 0; ci < c; ++ci) {
          const T xval = xrow[ci];
          if (xval == T(0)) continue;
          const T* wrow = &wv(kk, ci, 0);
          for (std::size_t fi = 0; fi < f; ++fi) orow[fi] += xval * wrow[fi];
        }
      }
    }
  }
  const bool rg = x.requires_grad || w.requires_grad;
  typename TapeT<T>::BackwardFn bw;
  if (rg) {
    bw = [xid = x.id, wid = w.id, b, l, c, k, f, lout, pad](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& g = t.grad_of(self);
      const TensorT<T>& xv2 = t.value_of(xid);
      const TensorT<T>& wv2 = t.value_of(wid);
      TensorT<T>& gx = t.grad_of(xid);
      TensorT<T>& gw = t.grad_of(wid);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t i = 0; i < lout; ++i) {
          const T* grow = &g(bi, i, 0);
          for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + kk) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(l)) continue;
            const std::size_t si = static_cast<std::size_t>(src);
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T xval = xv2(bi, si, ci);
              const T* wrow = &wv2(kk, ci, 0);
              T* gwrow = &gw(kk, ci, 0);
              T gxacc = T(0);
              for (std::size_t fi = 0; fi < f; ++fi) {
                gxacc += grow[fi] * wrow[fi];
                gwrow[fi] += grow[fi] * xval;
              }
              gx(bi, si, ci) += gxacc;
            }
          }
        }
      }
    };
  }
  return tape.emit(std::move(out), rg, std::move(bw));
}

/// Mean over the batch of -ln(p[true class]), p clamped at 1e-12.
template <class T>
VariableT<T> cross_entropy(VariableT<T> probs, const std::vector<int>& labels) {
  TapeT<T>& tape = *probs.tape;
  const TensorT<T>& pv = tape.value_of(probs.id);
  if (pv.rank() != 2 || pv.rows() != labels.size()) {
    throw ShapeError("cross_entropy: probs " + shape_str(pv.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = pv.rows();
  const std::size_t classes = pv.cols();
  const T clamp = T(1e-12);
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " out of range for " + std::to_string(classes) + " classes");
    }
    loss += -std::log(std::max(pv(i, static_cast<std::size_t>(y)), clamp));
  }
  loss /= T(n);
  typename TapeT<T>::BackwardFn bw;
  if (probs.requires_grad) {
    bw = [pid = probs.id, labels, n, clamp](TapeT<T>& t, std::size_t self) {
      const T g = t.grad_of(self)[0];
      const TensorT<T>& pv2 = t.value_of(pid);
      TensorT<T>& gp = t.grad_of(pid);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        const T p = pv2(i, y);
        if (p > clamp) gp(i, y) += g * (-T(1) / (T(n) * p));
      }
    };
  }
  return tape.emit(TensorT<T>::scalar(loss), probs.requires_grad, std::move(bw));
}

enum class Mode { kTrain, kInfer };

/// A named, trained tensor plus its accumulated gradient buffer.
template <class T = double>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

using Parameter = ParameterT<double>;

/// One forward/backward episode: a tape plus the parameters bound onto it.
/// Binding is memoized so a parameter joins the tape once per episode.
template <class T = double>
class GraphT {
 public:
  TapeT<T> tape;
  Mode mode = Mode::kInfer;
  Rng* rng = nullptr;  // consulted by dropout in train mode

  VariableT<T> param(ParameterT<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    VariableT<T> v = tape.leaf(p.value, true);
    bound_.emplace(&p, v);
    order_.push_back(&p);
    return v;
  }

  VariableT<T> constant(TensorT<T> v) { return tape.leaf(std::move(v), false); }

  /// Adds each bound parameter's tape gradient into its grad buffer.
  void collect_grads() {
    for (ParameterT<T>* p : order_) p->grad += tape.grad_of(bound_.at(p).id);
  }

 private:
  std::unordered_map<const ParameterT<T>*, VariableT<T>> bound_;
  std::vector<ParameterT<T>*> order_;
};

using Graph = GraphT<double>;

/// Compares analytic gradients against central finite differences.
/// build_loss must rebuild the scalar loss from the parameters' current
/// values on the given fresh graph. Returns the max relative error
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8); reports, never throws on
/// mismatch.
template <class T, class BuildLoss>
T grad_check(BuildLoss&& build_loss, const std::vector<ParameterT<T>*>& params,
             T h = T(1e-5)) {
  for (ParameterT<T>* p : params) p->zero_grad();
  {
    GraphT<T> g;
    VariableT<T> loss = build_loss(g);
    backward(loss);
    g.collect_grads();
  }
  const auto eval = [&]() -> T {
    GraphT<T> g;
    return build_loss(g).value()[0];
  };
  T max_rel = T(0);
  for (ParameterT<T>* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const T orig = p->value[i];
      p->value[i] = orig + h;
      const T fp = eval();
      p->value[i] = orig - h;
      const T fm = eval();
      p->value[i] = orig;
      const T fd = (fp - fm) / (T(2) * h);
      const T an = p->grad[i];
      const T denom = std::max({std::abs(an), std::abs(fd), T(1e-8)});
      max_rel = std::max(max_rel, std::abs(an - fd) / denom);
    }
  }
  return max_rel;
}

}  // namespace sentnet
