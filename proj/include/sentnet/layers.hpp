#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sentnet/autodiff.hpp"
#include "sentnet/random.hpp"
#include "sentnet/tensor.hpp"

namespace sentnet {

enum class Activation { kNone, kTanh, kRelu, kSigmoid };

template <class T>
VariableT<T> apply_activation(Activation act, VariableT<T> x) {
  switch (act) {
    case Activation::kNone:
      return x;
    case Activation::kTanh:
      return tanh(x);
    case Activation::kRelu:
      return relu(x);
    case Activation::kSigmoid:
      return sigmoid(x);
  }
  throw ConfigError("unknown activation");
}

template <class T>
TensorT<T> uniform_init(Shape shape, Rng& rng, T limit) {
  TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(-static_cast<double>(limit), static_cast<double>(limit)));
  return t;
}

template <class T>
TensorT<T> glorot_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  return uniform_init<T>(std::move(shape), rng, limit);
}

/// activation(x W + b)
template <class T = double>
struct DenseLayerT {
  ParameterT<T> weight;  // [in x out]
  ParameterT<T> bias;    // [out]
  Activation activation = Activation::kNone;

  static DenseLayerT init(const std::string& name, std::size_t in, std::size_t out,
                          Activation act, Rng& rng) {
    DenseLayerT layer;
    layer.weight = ParameterT<T>(name + ".weight", glorot_init<T>({in, out}, in, out, rng));
    layer.bias = ParameterT<T>(name + ".bias", TensorT<T>({out}));
    layer.activation = act;
    return layer;
  }

  std::size_t in_size() const { return weight.value.extent(0); }
  std::size_t out_size() const { return weight.value.extent(1); }

  VariableT<T> forward(GraphT<T>& g, VariableT<T> x) {
    return apply_activation(activation, add_bias(matmul(x, g.param(weight)), g.param(bias)));
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Token-id -> vector lookup. Row 0 is the OOV/pad row: exactly zero and
/// never updated, even when the table is trainable.
template <class T = double>
class EmbeddingLayerT {
 public:
  static constexpr std::size_t kOovRow = 0;

  EmbeddingLayerT() = default;

  EmbeddingLayerT(TensorT<T> table, bool trainable)
      : table_("embedding.table", std::move(table)), trainable_(trainable) {
    if (table_.value.rank() != 2) {
      throw ShapeError("embedding table must be rank-2, got " +
                       shape_str(table_.value.shape()));
    }
    for (std::size_t j = 0; j < dim(); ++j) table_.value(kOovRow, j) = T(0);
  }

  std::size_t vocab_size() const { return table_.value.extent(0); }
  std::size_t dim() const { return table_.value.extent(1); }
  bool trainable() const { return trainable_; }

  /// [B x L] ids -> [B x L x dim]
  VariableT<T> forward(GraphT<T>& g, const IntMatrix& ids) {
    const std::size_t b = ids.rows, l = ids.cols, d = dim();
    for (std::int32_t id : ids.data) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
        throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                         std::to_string(vocab_size()));
      }
    }
    TensorT<T> out({b, l, d});
    const TensorT<T>& tab = table_.value;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t t = 0; t < l; ++t) {
        const auto id = static_cast<std::size_t>(ids.at(i, t));
        for (std::size_t j = 0; j < d; ++j) out(i, t, j) = tab(id, j);
      }
    if (!trainable_) return g.constant(std::move(out));

    VariableT<T> bound = g.param(table_);
    auto bw = [tid = bound.id, ids, b, l, d](TapeT<T>& t, std::size_t self) {
      const TensorT<T>& gr = t.grad_of(self);
      TensorT<T>& gt = t.grad_of(tid);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t step = 0; step < l; ++step) {
          const auto id = static_cast<std::size_t>(ids.at(i, step));
          if (id == kOovRow) continue;  // OOV/pad row stays zero
          for (std::size_t j = 0; j < d; ++j) gt(id, j) += gr(i, step, j);
        }
    };
    return g.tape.emit(std::move(out), true, std::move(bw));
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    if (trainable_) out.push_back(&table_);
  }

  ParameterT<T>& table() { return table_; }
  const ParameterT<T>& table() const { return table_; }

 private:
  ParameterT<T> table_;
  bool trainable_ = false;
};

/// Inverted dropout: identity at inference, survivors scaled by 1/(1-rate)
/// in training so no rescaling is needed at inference.
template <class T = double>
struct DropoutLayerT {
  T rate = T(0.5);

  DropoutLayerT() = default;
  explicit DropoutLayerT(T r) : rate(r) {
    if (!(rate >= T(0) && rate < T(1))) {
      throw ConfigError("dropout rate must lie in [0, 1)");
    }
  }

  VariableT<T> forward(GraphT<T>& g, VariableT<T> x) const {
    if (g.mode == Mode::kInfer || rate == T(0)) return x;
    if (g.rng == nullptr) {
      throw ContractError("dropout in train mode requires a graph rng");
    }
    const T keep_scale = T(1) / (T(1) - rate);
    TensorT<T> mask(x.value().shape());
    for (std::size_t i = 0; i < mask.numel(); ++i)
      mask[i] = g.rng->bernoulli(1.0 - static_cast<double>(rate)) ? keep_scale : T(0);
    return mul(x, g.constant(std::move(mask)));
  }
};

/// 1-D convolution over the token axis plus bias and activation.
template <class T = double>
struct Conv1DLayerT {
  ParameterT<T> weight;  // [kernel x in_channels x filters]
  ParameterT<T> bias;    // [filters]
  Padding padding = Padding::kValid;
  Activation activation = Activation::kNone;

  static Conv1DLayerT init(const std::string& name, std::size_t kernel_width,
                           std::size_t in_channels, std::size_t filters, Padding padding,
                           Activation act, Rng& rng) {
    Conv1DLayerT layer;
    layer.weight = ParameterT<T>(
        name + ".weight", glorot_init<T>({kernel_width, in_channels, filters},
                                         kernel_width * in_channels, kernel_width * filters, rng));
    // Zero-padded windows would otherwise sit exactly on the relu kink.
    layer.bias = ParameterT<T>(name + ".bias", TensorT<T>::full({filters}, T(0.01)));
    layer.padding = padding;
    layer.activation = act;
    return layer;
  }

  std::size_t kernel_width() const { return weight.value.extent(0); }
  std::size_t in_channels() const { return weight.value.extent(1); }
  std::size_t filters() const { return weight.value.extent(2); }

  VariableT<T> forward(GraphT<T>& g, VariableT<T> x) {
    auto out = conv1d(x, g.param(weight), padding);
    return apply_activation(activation, add_bias(out, g.param(bias)));
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Global max over the token axis: [B x L x C] -> [B x C].
template <class T>
VariableT<T> maxpool1d(VariableT<T> x) {
  if (x.value().rank() != 3) {
    throw ShapeError("maxpool1d: expected [batch x L x channels], got " +
                     shape_str(x.value().shape()));
  }
  return reduce_max(x, 1);
}

/// Standard LSTM cell over the concatenated [x; h] input.
template <class T = double>
struct LSTMCellT {
  ParameterT<T> w_input, w_forget, w_output, w_cell;  // [(in+hidden) x hidden]
  ParameterT<T> b_input, b_forget, b_output, b_cell;  // [hidden]
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;

  static LSTMCellT init(const std::string& name, std::size_t input, std::size_t hidden,
                        Rng& rng) {
    LSTMCellT cell;
    cell.input_size = input;
    cell.hidden_size = hidden;
    const Shape wshape{input + hidden, hidden};
    const T r = T(0.08);
    cell.w_input = ParameterT<T>(name + ".w_input", uniform_init<T>(wshape, rng, r));
    cell.w_forget = ParameterT<T>(name + ".w_forget", uniform_init<T>(wshape, rng, r));
    cell.w_output = ParameterT<T>(name + ".w_output", uniform_init<T>(wshape, rng, r));
    cell.w_cell = ParameterT<T>(name + ".w_cell", uniform_init<T>(wshape, rng, r));
    cell.b_input = ParameterT<T>(name + ".b_input", TensorT<T>({hidden}));
    // Forget gate starts open so early gradients can flow through time.
    cell.b_forget = ParameterT<T>(name + ".b_forget", TensorT<T>::full({hidden}, T(1)));
    cell.b_output = ParameterT<T>(name + ".b_output", TensorT<T>({hidden}));
    cell.b_cell = ParameterT<T>(name + ".b_cell", TensorT<T>({hidden}));
    return cell;
  }

  struct State {
    VariableT<T> h;
    VariableT<T> c;
  };

  State initial_state(GraphT<T>& g, std::size_t batch) const {
    return State{g.constant(TensorT<T>({batch, hidden_size})),
                 g.constant(TensorT<T>({batch, hidden_size}))};
  }

  State step(GraphT<T>& g, VariableT<T> x_t, const State& s) {
    auto xh = concat_cols(x_t, s.h);
    auto gate_in = sigmoid(add_bias(matmul(xh, g.param(w_input)), g.param(b_input)));
    auto gate_forget = sigmoid(add_bias(matmul(xh, g.param(w_forget)), g.param(b_forget)));
    auto gate_out = sigmoid(add_bias(matmul(xh, g.param(w_output)), g.param(b_output)));
    auto candidate = tanh(add_bias(matmul(xh, g.param(w_cell)), g.param(b_cell)));
    auto c_next = add(mul(gate_forget, s.c), mul(gate_in, candidate));
    auto h_next = mul(gate_out, tanh(c_next));
    return State{h_next, c_next};
  }

  State masked_step(GraphT<T>& g, VariableT<T> x_t, const State& s,
                    const std::vector<std::uint8_t>& real) {
    State next = step(g, x_t, s);
    return State{where_rows(real, next.h, s.h), where_rows(real, next.c, s.c)};
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    out.insert(out.end(), {&w_input, &w_forget, &w_output, &w_cell, &b_input, &b_forget,
                           &b_output, &b_cell});
  }
};

/// GRU cell; selectable in place of the LSTM for the recurrent encoders.
template <class T = double>
struct GRUCellT {
  ParameterT<T> w_update, w_reset, w_candidate;  // [(in+hidden) x hidden]
  ParameterT<T> b_update, b_reset, b_candidate;  // [hidden]
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;

  static GRUCellT init(const std::string& name, std::size_t input, std::size_t hidden,
                       Rng& rng) {
    GRUCellT cell;
    cell.input_size = input;
    cell.hidden_size = hidden;
    const Shape wshape{input + hidden, hidden};
    const T r = T(0.08);
    cell.w_update = ParameterT<T>(name + ".w_update", uniform_init<T>(wshape, rng, r));
    cell.w_reset = ParameterT<T>(name + ".w_reset", uniform_init<T>(wshape, rng, r));
    cell.w_candidate = ParameterT<T>(name + ".w_candidate", uniform_init<T>(wshape, rng, r));
    cell.b_update = ParameterT<T>(name + ".b_update", TensorT<T>({hidden}));
    cell.b_reset = ParameterT<T>(name + ".b_reset", TensorT<T>({hidden}));
    cell.b_candidate = ParameterT<T>(name + ".b_candidate", TensorT<T>({hidden}));
    return cell;
  }

  struct State {
    VariableT<T> h;
  };

  State initial_state(GraphT<T>& g, std::size_t batch) const {
    return State{g.constant(TensorT<T>({batch, hidden_size}))};
  }

  State step(GraphT<T>& g, VariableT<T> x_t, const State& s) {
    auto xh = concat_cols(x_t, s.h);
    auto update = sigmoid(add_bias(matmul(xh, g.param(w_update)), g.param(b_update)));
    auto reset = sigmoid(add_bias(matmul(xh, g.param(w_reset)), g.param(b_reset)));
    auto xrh = concat_cols(x_t, mul(reset, s.h));
    auto candidate = tanh(add_bias(matmul(xrh, g.param(w_candidate)), g.param(b_candidate)));
    // h' = h + z * (candidate - h)
    auto h_next = add(s.h, mul(update, add(candidate, scale(s.h, T(-1)))));
    return State{h_next};
  }

  State masked_step(GraphT<T>& g, VariableT<T> x_t, const State& s,
                    const std::vector<std::uint8_t>& real) {
    State next = step(g, x_t, s);
    return State{where_rows(real, next.h, s.h)};
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    out.insert(out.end(), {&w_update, &w_reset, &w_candidate, &b_update, &b_reset,
                           &b_candidate});
  }
};

template <class T = double>
struct SequenceEncodingT {
  VariableT<T> outputs;         // [B x L x H]; H doubles when bidirectional
  VariableT<T> final_forward;   // state at the last real token
  VariableT<T> final_backward;  // state at the first token (bidirectional only)
  bool bidirectional = false;
};

/// Runs the cell over [B x L x in]. Padded positions carry state through
/// unchanged; the backward pass of a bidirectional encoder consumes the
/// reversed sequence, so its final state has seen the real prefix in full.
template <class T, class Cell>
SequenceEncodingT<T> encode_sequence(GraphT<T>& g, Cell& forward_cell, Cell* backward_cell,
                                     VariableT<T> x, const Mask& mask) {
  const TensorT<T>& xv = x.value();
  if (xv.rank() != 3) {
    throw ShapeError("encode_sequence: expected [batch x L x in], got " +
                     shape_str(xv.shape()));
  }
  const std::size_t b = xv.extent(0), l = xv.extent(1);
  if (mask.rows != b || mask.cols != l) {
    throw ShapeError("encode_sequence: mask " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " does not match input " +
                     shape_str(xv.shape()));
  }
  if (xv.extent(2) != forward_cell.input_size) {
    throw ShapeError("encode_sequence: input width " + std::to_string(xv.extent(2)) +
                     " != cell input size " + std::to_string(forward_cell.input_size));
  }

  std::vector<VariableT<T>> inputs(l);
  std::vector<std::vector<std::uint8_t>> real(l, std::vector<std::uint8_t>(b));
  for (std::size_t t = 0; t < l; ++t) {
    inputs[t] = slice_time(x, t);
    for (std::size_t i = 0; i < b; ++i) real[t][i] = mask.at(i, t) ? 1 : 0;
  }

  SequenceEncodingT<T> enc;
  std::vector<VariableT<T>> fwd_states(l);
  {
    auto state = forward_cell.initial_state(g, b);
    for (std::size_t t = 0; t < l; ++t) {
      state = forward_cell.masked_step(g, inputs[t], state, real[t]);
      fwd_states[t] = state.h;
    }
    enc.final_forward = state.h;
  }
  if (backward_cell == nullptr) {
    enc.outputs = stack_time(fwd_states);
    return enc;
  }

  enc.bidirectional = true;
  std::vector<VariableT<T>> bwd_states(l);
  {
    auto state = backward_cell->initial_state(g, b);
    for (std::size_t t = l; t-- > 0;) {
      state = backward_cell->masked_step(g, inputs[t], state, real[t]);
      bwd_states[t] = state.h;
    }
    enc.final_backward = state.h;
  }
  std::vector<VariableT<T>> joined(l);
  for (std::size_t t = 0; t < l; ++t) joined[t] = concat_cols(fwd_states[t], bwd_states[t]);
  enc.outputs = stack_time(joined);
  return enc;
}

template <class T, class Cell>
SequenceEncodingT<T> encode_sequence(GraphT<T>& g, Cell& cell, VariableT<T> x,
                                     const Mask& mask) {
  return encode_sequence<T, Cell>(g, cell, static_cast<Cell*>(nullptr), x, mask);
}

template <class T, class Cell>
SequenceEncodingT<T> encode_bidirectional(GraphT<T>& g, Cell& forward_cell,
                                          Cell& backward_cell, VariableT<T> x,
                                          const Mask& mask) {
  return encode_sequence<T, Cell>(g, forward_cell, &backward_cell, x, mask);
}

/// Word-level attention pooling: projects each hidden state, scores it
/// against a learned context vector, masks padded positions to -inf, and
/// returns the softmax-weighted sum of the hidden states.
template <class T = double>
struct AttentionPoolingT {
  ParameterT<T> proj_w;   // [enc x attn]
  ParameterT<T> proj_b;   // [attn]
  ParameterT<T> context;  // [attn]

  static AttentionPoolingT init(const std::string& name, std::size_t enc_size,
                                std::size_t attn_size, Rng& rng) {
    AttentionPoolingT attn;
    attn.proj_w = ParameterT<T>(name + ".proj_w",
                                glorot_init<T>({enc_size, attn_size}, enc_size, attn_size, rng));
    attn.proj_b = ParameterT<T>(name + ".proj_b", TensorT<T>({attn_size}));
    attn.context = ParameterT<T>(name + ".context",
                                 uniform_init<T>({attn_size}, rng, T(0.1)));
    return attn;
  }

  std::size_t enc_size() const { return proj_w.value.extent(0); }
  std::size_t attn_size() const { return proj_w.value.extent(1); }

  struct Pooled {
    VariableT<T> sentence;  // [B x enc]
    VariableT<T> weights;   // [B x L]; exactly 0 at padded positions
  };

  Pooled forward(GraphT<T>& g, VariableT<T> states, const Mask& mask) {
    const TensorT<T>& sv = states.value();
    if (sv.rank() != 3 || sv.extent(2) != enc_size()) {
      throw ShapeError("attention: expected [batch x L x " + std::to_string(enc_size()) +
                       "], got " + shape_str(sv.shape()));
    }
    const std::size_t b = sv.extent(0), l = sv.extent(1);
    if (mask.rows != b || mask.cols != l) {
      throw ShapeError("attention: mask does not match states " + shape_str(sv.shape()));
    }
    for (std::size_t i = 0; i < b; ++i) {
      if (mask.real_count(i) == 0) {
        throw ContractError("attention: sentence " + std::to_string(i) +
                            " has all positions masked");
      }
    }
    auto ctx = reshape(g.param(context), Shape{attn_size(), 1});
    std::vector<VariableT<T>> hidden(l), score_cols(l);
    for (std::size_t t = 0; t < l; ++t) {
      hidden[t] = slice_time(states, t);
      auto projected = tanh(add_bias(matmul(hidden[t], g.param(proj_w)), g.param(proj_b)));
      score_cols[t] = reshape(matmul(projected, ctx), Shape{b});
    }
    auto scores = mask_fill(stack_cols(score_cols), mask,
                            -std::numeric_limits<T>::infinity());
    auto alpha = softmax_rows(scores);
    VariableT<T> pooled;
    for (std::size_t t = 0; t < l; ++t) {
      auto weighted = row_scale(hidden[t], column(alpha, t));
      pooled = t == 0 ? weighted : add(pooled, weighted);
    }
    return Pooled{pooled, alpha};
  }

  void collect(std::vector<ParameterT<T>*>& out) {
    out.insert(out.end(), {&proj_w, &proj_b, &context});
  }
};

}  // namespace sentnet
