#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "sentnet/models.hpp"

namespace sentnet {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
  double seconds = 0.0;
};

/// Moves every parameter to a generic random point. Freshly initialized
/// nets make poor gradient-check fixtures: near-identical hidden states
/// cancel softmax score shifts and leave true gradients under the
/// relative-error floor, where finite-difference noise dominates.
template <class T>
void randomize_parameters(ClassifierModelT<T>& model, Rng& rng, T lo, T hi) {
  for (ParameterT<T>* p : model.parameters())
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      p->value[i] = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
}

namespace detail {

template <class F>
GradCheckResult timed_check(const std::string& name, double tolerance, F&& run) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckResult result;
  result.name = name;
  result.max_rel_error = run();
  result.pass = result.max_rel_error < tolerance;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline Tensor gc_random(Shape shape, Rng& rng, double lo = -0.8, double hi = 0.8) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace detail

/// Layer-level checks at 64-bit with h = 1e-5.
inline std::vector<GradCheckResult> gradcheck_layers(double tolerance = 1e-4) {
  std::vector<GradCheckResult> results;

  results.push_back(detail::timed_check("layer/dense", tolerance, [&] {
    Rng rng(301);
    auto layer = DenseLayerT<double>::init("d", 4, 3, Activation::kTanh, rng);
    Parameter x("x", detail::gc_random({5, 4}, rng));
    std::vector<Parameter*> params{&x};
    layer.collect(params);
    return grad_check<double>(
        [&](Graph& g) { return sum_all(mul(layer.forward(g, g.param(x)),
                                           layer.forward(g, g.param(x)))); },
        params);
  }));

  results.push_back(detail::timed_check("layer/embedding", tolerance, [&] {
    Rng rng(302);
    EmbeddingLayerT<double> emb(detail::gc_random({6, 4}, rng), true);
    IntMatrix ids(2, 3);
    for (std::size_t i = 0; i < 6; ++i) ids.data[i] = static_cast<std::int32_t>(i % 6);
    std::vector<Parameter*> params;
    emb.collect(params);
    return grad_check<double>(
        [&](Graph& g) {
          auto e = emb.forward(g, ids);
          return sum_all(mul(e, e));
        },
        params);
  }));

  results.push_back(detail::timed_check("layer/dropout", tolerance, [&] {
    DropoutLayerT<double> drop(0.5);
    Rng init(303);
    Parameter x("x", detail::gc_random({3, 8}, init));
    return grad_check<double>(
        [&](Graph& g) {
          Rng rng(304);  // identical mask on every evaluation
          g.mode = Mode::kTrain;
          g.rng = &rng;
          return sum_all(drop.forward(g, g.param(x)));
        },
        {&x});
  }));

  for (Padding pad : {Padding::kSameZero, Padding::kValid}) {
    const std::string name =
        pad == Padding::kSameZero ? "layer/conv1d_same_zero" : "layer/conv1d_valid";
    results.push_back(detail::timed_check(name, tolerance, [&] {
      Rng rng(305);
      auto layer = Conv1DLayerT<double>::init("c", 3, 3, 4, pad, Activation::kTanh, rng);
      Parameter x("x", detail::gc_random({2, 6, 3}, rng));
      std::vector<Parameter*> params{&x};
      layer.collect(params);
      return grad_check<double>(
          [&](Graph& g) { return sum_all(layer.forward(g, g.param(x))); }, params);
    }));
  }

  results.push_back(detail::timed_check("layer/maxpool1d", tolerance, [&] {
    Rng rng(306);
    Parameter x("x", detail::gc_random({3, 5, 4}, rng));
    return grad_check<double>(
        [&](Graph& g) {
          auto pooled = maxpool1d(g.param(x));
          return sum_all(mul(pooled, pooled));
        },
        {&x});
  }));

  results.push_back(detail::timed_check("layer/lstm_unroll", tolerance, [&] {
    Rng rng(307);
    auto cell = LSTMCellT<double>::init("lstm", 3, 3, rng);
    Parameter x("x", detail::gc_random({2, 5, 3}, rng));
    Mask mask(2, 5);
    for (std::size_t t = 0; t < 5; ++t) mask.at(0, t) = 1;
    for (std::size_t t = 0; t < 3; ++t) mask.at(1, t) = 1;
    std::vector<Parameter*> params{&x};
    cell.collect(params);
    return grad_check<double>(
        [&](Graph& g) {
          auto enc = encode_sequence(g, cell, g.param(x), mask);
          return sum_all(mul(enc.outputs, enc.outputs));
        },
        params);
  }));

  results.push_back(detail::timed_check("layer/gru_unroll", tolerance, [&] {
    Rng rng(308);
    auto cell = GRUCellT<double>::init("gru", 3, 3, rng);
    Parameter x("x", detail::gc_random({2, 4, 3}, rng));
    Mask mask = Mask::all_real(2, 4);
    std::vector<Parameter*> params{&x};
    cell.collect(params);
    return grad_check<double>(
        [&](Graph& g) {
          auto enc = encode_sequence(g, cell, g.param(x), mask);
          return sum_all(mul(enc.outputs, enc.outputs));
        },
        params);
  }));

  results.push_back(detail::timed_check("layer/attention_pool", tolerance, [&] {
    Rng rng(309);
    auto attn = AttentionPoolingT<double>::init("a", 3, 3, rng);
    Parameter h("h", detail::gc_random({2, 4, 3}, rng));
    Mask mask(2, 4);
    for (std::size_t t = 0; t < 4; ++t) mask.at(0, t) = 1;
    for (std::size_t t = 0; t < 2; ++t) mask.at(1, t) = 1;
    std::vector<Parameter*> params{&h};
    attn.collect(params);
    return grad_check<double>(
        [&](Graph& g) {
          auto pooled = attn.forward(g, g.param(h), mask);
          return sum_all(mul(pooled.sentence, pooled.sentence));
        },
        params);
  }));

  results.push_back(detail::timed_check("layer/softmax_cross_entropy", tolerance, [&] {
    Rng rng(310);
    Parameter logits("logits", detail::gc_random({4, 3}, rng, -2.0, 2.0));
    const std::vector<int> labels{0, 1, 2, 1};
    return grad_check<double>(
        [&](Graph& g) { return cross_entropy(softmax_rows(g.param(logits)), labels); },
        {&logits});
  }));

  return results;
}

/// End-to-end checks for the five architectures on a small mixed-length
/// batch, at a generic parameter point.
inline std::vector<GradCheckResult> gradcheck_architectures(double tolerance = 1e-4) {
  IntMatrix ids(6, 4);
  Mask mask(6, 4);
  Rng ir(99);
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t len = 2 + ir.below(3);
    for (std::size_t t = 0; t < 4; ++t) {
      if (t < len) {
        ids.at(i, t) = static_cast<std::int32_t>(1 + ir.below(8));
        mask.at(i, t) = 1;
      }
    }
  }
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  Rng er(13);
  Tensor table = detail::gc_random({9, 6}, er);

  std::vector<GradCheckResult> results;
  for (const std::string& name : all_model_names()) {
    results.push_back(detail::timed_check("model/" + name, tolerance, [&] {
      ModelSpec spec;
      spec.kind = parse_model_kind(name);
      spec.embedding_dim = 6;
      spec.dnn_dims = {7, 5, 4};
      spec.lstm_hidden = 4;
      spec.conv_filters = 5;
      spec.kernel_width = 3;
      spec.max_len = 4;
      auto model = build_model(spec, table, 23);
      Rng pr(101);
      randomize_parameters(model, pr, -0.7, 0.7);
      return grad_check<double>(
          [&](Graph& g) { return cross_entropy(model.forward(g, ids, mask), labels); },
          model.parameters());
    }));
  }
  return results;
}

inline std::vector<GradCheckResult> gradcheck_suite(double tolerance = 1e-4) {
  std::vector<GradCheckResult> results = gradcheck_layers(tolerance);
  auto archs = gradcheck_architectures(tolerance);
  results.insert(results.end(), archs.begin(), archs.end());
  return results;
}

}  // namespace sentnet
