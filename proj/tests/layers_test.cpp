#include "sentnet/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace sentnet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -0.8, double hi = 0.8) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Dense, IdentityLayerPassesInputThrough) {
  Rng rng(1);
  auto layer = DenseLayerT<double>::init("d", 2, 2, Activation::kNone, rng);
  layer.weight.value = Tensor::matrix({{1, 0}, {0, 1}});
  layer.bias.value = Tensor({2});
  Graph g;
  Tensor x = Tensor::matrix({{3.5, -1.25}, {0.5, 2.0}});
  auto y = layer.forward(g, g.constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.value()[i], x[i]);
}

TEST(Dense, HandComputedAffine) {
  Rng rng(2);
  auto layer = DenseLayerT<double>::init("d", 2, 1, Activation::kNone, rng);
  layer.weight.value = Tensor::matrix({{1}, {1}});
  layer.bias.value = Tensor::row_vector({-2});
  Graph g;
  auto y = layer.forward(g, g.constant(Tensor::matrix({{1, 1}})));
  EXPECT_DOUBLE_EQ(y.value()(0, 0), 0.0);
}

TEST(Dense, WidthMismatchIsShapeError) {
  Rng rng(3);
  auto layer = DenseLayerT<double>::init("d", 2, 4, Activation::kNone, rng);
  Graph g;
  EXPECT_THROW(layer.forward(g, g.constant(Tensor({1, 3}))), ShapeError);
}

TEST(Dense, GradCheck) {
  Rng rng(4);
  auto layer = DenseLayerT<double>::init("d", 3, 2, Activation::kTanh, rng);
  Parameter x("x", random_tensor({4, 3}, rng));
  std::vector<Parameter*> params{&x};
  layer.collect(params);
  double err = grad_check<double>(
      [&](Graph& g) { return sum_all(layer.forward(g, g.param(x))); }, params);
  EXPECT_LT(err, 1e-6);
}

TEST(Embedding, OovMapsToZeroRow) {
  Tensor table = Tensor::matrix({{9, 9, 9}, {1, 2, 3}});  // row 0 forced to zero
  EmbeddingLayerT<double> emb(table, false);
  IntMatrix ids(1, 2);
  ids.at(0, 0) = 0;
  ids.at(0, 1) = 1;
  Graph g;
  auto out = emb.forward(g, ids);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out.value()(0, 0, j), 0.0);
  EXPECT_EQ(out.value()(0, 1, 0), 1.0);
  EXPECT_EQ(out.value()(0, 1, 2), 3.0);
}

TEST(Embedding, LookupIsVerbatimAndDeterministic) {
  Tensor table({3, 4});
  for (std::size_t i = 0; i < table.numel(); ++i) table[i] = 0.25 * double(i);
  EmbeddingLayerT<double> emb(table, false);
  IntMatrix ids(2, 1);
  ids.at(0, 0) = 2;
  ids.at(1, 0) = 2;
  Graph g;
  auto out = emb.forward(g, ids);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(out.value()(0, 0, j), emb.table().value(2, j));
    EXPECT_EQ(out.value()(1, 0, j), out.value()(0, 0, j));
  }
}

TEST(Embedding, OutOfRangeIdIsIndexError) {
  EmbeddingLayerT<double> emb(Tensor({2, 3}), false);
  IntMatrix ids(1, 1);
  ids.at(0, 0) = 5;
  Graph g;
  EXPECT_THROW(emb.forward(g, ids), IndexError);
}

TEST(Embedding, TrainableScatterSkipsOovRow) {
  Tensor table({3, 2});
  table(1, 0) = 0.5;
  table(2, 1) = -0.5;
  EmbeddingLayerT<double> emb(table, true);
  IntMatrix ids(1, 3);
  ids.at(0, 0) = 0;
  ids.at(0, 1) = 1;
  ids.at(0, 2) = 1;
  Graph g;
  backward(sum_all(emb.forward(g, ids)));
  g.collect_grads();
  const Tensor& gt = emb.table().grad;
  EXPECT_EQ(gt(0, 0), 0.0);  // OOV row never updated
  EXPECT_EQ(gt(0, 1), 0.0);
  EXPECT_EQ(gt(1, 0), 2.0);  // two lookups accumulate
  EXPECT_EQ(gt(2, 0), 0.0);
}

TEST(Dropout, RateZeroIsIdentityInBothModes) {
  DropoutLayerT<double> drop(0.0);
  Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    Graph g;
    Rng rng(5);
    g.mode = mode;
    g.rng = &rng;
    auto y = drop.forward(g, g.constant(x));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.value()[i], x[i]);
  }
}

TEST(Dropout, InferModeIsBitIdentical) {
  DropoutLayerT<double> drop(0.5);
  Graph g;
  Tensor x = Tensor::matrix({{0.1, -2.7, 3.14}});
  auto in = g.constant(x);
  auto y = drop.forward(g, in);
  EXPECT_EQ(y.id, in.id);  // literally the same node
}

TEST(Dropout, TrainModeSampleMeanNearOne) {
  DropoutLayerT<double> drop(0.5);
  Graph g;
  Rng rng(42);
  g.mode = Mode::kTrain;
  g.rng = &rng;
  auto y = drop.forward(g, g.constant(Tensor::full({1, 10000}, 1.0)));
  double mean = 0;
  for (std::size_t i = 0; i < 10000; ++i) mean += y.value()[i];
  mean /= 10000.0;
  EXPECT_NEAR(mean, 1.0, 0.05);
}

TEST(Dropout, RateOneIsConfigError) {
  EXPECT_THROW(DropoutLayerT<double>(1.0), ConfigError);
  EXPECT_THROW(DropoutLayerT<double>(1.5), ConfigError);
}

TEST(Dropout, TrainModeGradCheckWithFixedMask) {
  DropoutLayerT<double> drop(0.5);
  Rng init(6);
  Parameter x("x", random_tensor({2, 6}, init));
  double err = grad_check<double>(
      [&](Graph& g) {
        Rng rng(77);  // same mask on every evaluation
        g.mode = Mode::kTrain;
        g.rng = &rng;
        return sum_all(drop.forward(g, g.param(x)));
      },
      {&x});
  EXPECT_LT(err, 1e-7);
}

TEST(Conv1D, WidthOneIdentityKernel) {
  Rng rng(7);
  auto layer = Conv1DLayerT<double>::init("c", 1, 2, 2, Padding::kValid,
                                          Activation::kNone, rng);
  layer.weight.value.fill(0.0);
  layer.weight.value(0, 0, 0) = 1.0;
  layer.weight.value(0, 1, 1) = 1.0;
  layer.bias.value.fill(0.0);
  Graph g;
  Rng data(8);
  Tensor x = random_tensor({2, 4, 2}, data);
  auto y = layer.forward(g, g.constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-15);
}

TEST(Conv1D, LengthArithmetic) {
  Rng rng(9);
  auto valid = Conv1DLayerT<double>::init("v", 3, 2, 4, Padding::kValid,
                                          Activation::kNone, rng);
  auto same = Conv1DLayerT<double>::init("s", 3, 2, 4, Padding::kSameZero,
                                         Activation::kNone, rng);
  Graph g;
  auto x = g.constant(Tensor({1, 5, 2}));
  EXPECT_EQ(valid.forward(g, x).value().extent(1), 3u);
  EXPECT_EQ(same.forward(g, x).value().extent(1), 5u);
}

TEST(Conv1D, ImpulseResponseFollowsCrossCorrelation) {
  // No kernel flip: an impulse at position p reads the kernel back reversed,
  // out[i] = sum_k x[i+k] w[k] = w[p-i].
  Rng rng(90);
  auto layer = Conv1DLayerT<double>::init("c", 3, 1, 1, Padding::kValid,
                                          Activation::kNone, rng);
  layer.weight.value(0, 0, 0) = 1.0;
  layer.weight.value(1, 0, 0) = 2.0;
  layer.weight.value(2, 0, 0) = 3.0;
  layer.bias.value.fill(0.0);
  Tensor x({1, 5, 1});
  x(0, 2, 0) = 1.0;
  Graph g;
  auto y = layer.forward(g, g.constant(x));
  EXPECT_DOUBLE_EQ(y.value()(0, 0, 0), 3.0);
  EXPECT_DOUBLE_EQ(y.value()(0, 1, 0), 2.0);
  EXPECT_DOUBLE_EQ(y.value()(0, 2, 0), 1.0);
}

TEST(Conv1D, SameZeroPreservesLengthForTestedKernels) {
  Rng rng(10);
  for (std::size_t k : {1u, 3u, 5u}) {
    auto layer = Conv1DLayerT<double>::init("c", k, 3, 2, Padding::kSameZero,
                                            Activation::kNone, rng);
    Graph g;
    auto y = layer.forward(g, g.constant(random_tensor({2, 7, 3}, rng)));
    EXPECT_EQ(y.value().extent(1), 7u) << "kernel " << k;
  }
}

TEST(MaxPool, SingleTimestepAndHandMax) {
  Graph g;
  Tensor single({1, 1, 3});
  single(0, 0, 0) = 4;
  single(0, 0, 1) = -1;
  single(0, 0, 2) = 0.5;
  auto y1 = maxpool1d(g.constant(single));
  EXPECT_EQ(y1.value()(0, 0), 4.0);
  EXPECT_EQ(y1.value()(0, 1), -1.0);

  Tensor chan({1, 3, 1});
  chan(0, 0, 0) = 1;
  chan(0, 1, 0) = 5;
  chan(0, 2, 0) = 2;
  EXPECT_EQ(maxpool1d(g.constant(chan)).value()(0, 0), 5.0);
}

TEST(MaxPool, TieRoutesGradientToFirstOccurrence) {
  Graph g;
  Parameter x("x", Tensor({1, 2, 1}, {3.0, 3.0}));
  backward(sum_all(maxpool1d(g.param(x))));
  g.collect_grads();
  EXPECT_EQ(x.grad[0], 1.0);
  EXPECT_EQ(x.grad[1], 0.0);
}

TEST(LstmStep, AllZeroWeightsGiveZeroState) {
  Rng rng(11);
  auto cell = LSTMCellT<double>::init("lstm", 2, 3, rng);
  for (auto* p : {&cell.w_input, &cell.w_forget, &cell.w_output, &cell.w_cell})
    p->value.fill(0.0);
  for (auto* p : {&cell.b_input, &cell.b_forget, &cell.b_output, &cell.b_cell})
    p->value.fill(0.0);
  Graph g;
  auto s0 = cell.initial_state(g, 1);
  auto s1 = cell.step(g, g.constant(Tensor::matrix({{0.7, -0.3}})), s0);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(s1.h.value()(0, j), 0.0);
    EXPECT_EQ(s1.c.value()(0, j), 0.0);
  }
}

TEST(LstmStep, MatchesHandEvaluatedGateEquations) {
  Rng rng(12);
  auto cell = LSTMCellT<double>::init("lstm", 1, 1, rng);
  cell.w_input.value = Tensor::matrix({{0.5}, {0.25}});
  cell.b_input.value = Tensor::row_vector({0.1});
  cell.w_forget.value = Tensor::matrix({{-0.3}, {0.2}});
  cell.b_forget.value = Tensor::row_vector({0.4});
  cell.w_output.value = Tensor::matrix({{0.7}, {-0.1}});
  cell.b_output.value = Tensor::row_vector({-0.2});
  cell.w_cell.value = Tensor::matrix({{1.0}, {0.5}});
  cell.b_cell.value = Tensor::row_vector({0.05});

  const double x = 0.3, h0 = 0.2, c0 = -0.1;
  Graph g;
  typename LSTMCellT<double>::State s0{g.constant(Tensor::matrix({{h0}})),
                                       g.constant(Tensor::matrix({{c0}}))};
  auto s1 = cell.step(g, g.constant(Tensor::matrix({{x}})), s0);

  const double gate_i = sigmoid_ref(x * 0.5 + h0 * 0.25 + 0.1);
  const double gate_f = sigmoid_ref(x * -0.3 + h0 * 0.2 + 0.4);
  const double gate_o = sigmoid_ref(x * 0.7 + h0 * -0.1 - 0.2);
  const double cand = std::tanh(x * 1.0 + h0 * 0.5 + 0.05);
  const double c1 = gate_f * c0 + gate_i * cand;
  const double h1 = gate_o * std::tanh(c1);
  EXPECT_NEAR(s1.c.value()(0, 0), c1, 1e-12);
  EXPECT_NEAR(s1.h.value()(0, 0), h1, 1e-12);
}

TEST(LstmStep, GateActivationsLieInUnitInterval) {
  Rng rng(13);
  auto cell = LSTMCellT<double>::init("lstm", 2, 4, rng);
  Graph g;
  auto s = cell.initial_state(g, 3);
  auto x = g.constant(random_tensor({3, 2}, rng, -2.0, 2.0));
  for (int t = 0; t < 3; ++t) s = cell.step(g, x, s);
  // h = o * tanh(c), both factors bounded by 1 in magnitude
  for (std::size_t i = 0; i < s.h.value().numel(); ++i)
    EXPECT_LT(std::abs(s.h.value()[i]), 1.0);
}

TEST(LstmStep, GradCheckThroughFiveUnrolledSteps) {
  Rng rng(14);
  auto cell = LSTMCellT<double>::init("lstm", 2, 3, rng);
  Parameter x("x", random_tensor({2, 5, 2}, rng));
  std::vector<Parameter*> params{&x};
  cell.collect(params);
  Mask mask = Mask::all_real(2, 5);
  double err = grad_check<double>(
      [&](Graph& g) {
        auto enc = encode_sequence<double>(g, cell, g.param(x), mask);
        return sum_all(enc.outputs);
      },
      params);
  EXPECT_LT(err, 1e-4);
}

TEST(GruStep, GradCheckAndShapes) {
  Rng rng(15);
  auto cell = GRUCellT<double>::init("gru", 2, 3, rng);
  Parameter x("x", random_tensor({2, 4, 2}, rng));
  std::vector<Parameter*> params{&x};
  cell.collect(params);
  Mask mask = Mask::all_real(2, 4);
  double err = grad_check<double>(
      [&](Graph& g) {
        auto enc = encode_sequence<double>(g, cell, g.param(x), mask);
        return sum_all(enc.outputs);
      },
      params);
  EXPECT_LT(err, 1e-4);
}

TEST(EncodeSequence, SingleStepBidirectionalIsConcatOfCells) {
  Rng rng(16);
  auto fwd = LSTMCellT<double>::init("f", 2, 3, rng);
  auto bwd = LSTMCellT<double>::init("b", 2, 3, rng);
  Tensor x({1, 1, 2});
  x(0, 0, 0) = 0.4;
  x(0, 0, 1) = -0.6;
  Mask mask = Mask::all_real(1, 1);
  Graph g;
  auto enc = encode_bidirectional<double>(g, fwd, bwd, g.constant(x), mask);
  ASSERT_EQ(enc.outputs.value().extent(2), 6u);

  Graph g2;
  auto sf = fwd.step(g2, g2.constant(x.reshaped({1, 2})), fwd.initial_state(g2, 1));
  auto sb = bwd.step(g2, g2.constant(x.reshaped({1, 2})), bwd.initial_state(g2, 1));
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(enc.outputs.value()(0, 0, j), sf.h.value()(0, j), 1e-15);
    EXPECT_NEAR(enc.outputs.value()(0, 0, j + 3), sb.h.value()(0, j), 1e-15);
  }
}

TEST(EncodeSequence, PalindromeWithTiedWeightsIsSymmetric) {
  Rng rng(17);
  auto cell = LSTMCellT<double>::init("tied", 2, 3, rng);
  const std::size_t len = 5;
  Tensor x({1, len, 2});
  for (std::size_t t = 0; t < len; ++t) {
    const std::size_t mirror = len - 1 - t;
    const std::size_t canon = std::min(t, mirror);
    x(0, t, 0) = 0.3 * double(canon + 1);
    x(0, t, 1) = -0.2 * double(canon + 1);
  }
  Mask mask = Mask::all_real(1, len);
  Graph g;
  auto enc = encode_bidirectional<double>(g, cell, cell, g.constant(x), mask);
  const auto& out = enc.outputs.value();
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(out(0, t, j), out(0, len - 1 - t, j + 3), 1e-14);
}

TEST(EncodeSequence, PaddedSuffixCarriesStateUnchanged) {
  Rng rng(18);
  auto cell = LSTMCellT<double>::init("lstm", 2, 3, rng);
  Tensor x({1, 6, 2});
  for (std::size_t t = 0; t < 6; ++t) {
    x(0, t, 0) = 0.5;
    x(0, t, 1) = -0.5;
  }
  Mask mask(1, 6);
  mask.at(0, 0) = mask.at(0, 1) = mask.at(0, 2) = 1;  // 3 real, 3 padded
  Graph g;
  auto enc = encode_sequence<double>(g, cell, g.constant(x), mask);
  const auto& out = enc.outputs.value();
  for (std::size_t t = 3; t < 6; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out(0, t, j), out(0, 2, j));
  // final forward state is the state at the last real token
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_EQ(enc.final_forward.value()(0, j), out(0, 2, j));
}

TEST(EncodeSequence, MaskMismatchIsShapeError) {
  Rng rng(19);
  auto cell = LSTMCellT<double>::init("lstm", 2, 3, rng);
  Graph g;
  auto x = g.constant(Tensor({1, 4, 2}));
  Mask wrong = Mask::all_real(1, 3);
  EXPECT_THROW(encode_sequence<double>(g, cell, x, wrong), ShapeError);
}

TEST(Attention, SingleRealPositionTakesItAll) {
  Rng rng(20);
  auto attn = AttentionPoolingT<double>::init("a", 3, 3, rng);
  Tensor h({1, 1, 3});
  h(0, 0, 0) = 0.2;
  h(0, 0, 1) = -0.4;
  h(0, 0, 2) = 0.9;
  Graph g;
  auto pooled = attn.forward(g, g.constant(h), Mask::all_real(1, 1));
  EXPECT_DOUBLE_EQ(pooled.weights.value()(0, 0), 1.0);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(pooled.sentence.value()(0, j), h(0, 0, j), 1e-15);
}

TEST(Attention, IdenticalStatesShareWeightEqually) {
  Rng rng(21);
  auto attn = AttentionPoolingT<double>::init("a", 2, 2, rng);
  Tensor h({1, 2, 2});
  for (std::size_t t = 0; t < 2; ++t) {
    h(0, t, 0) = 0.3;
    h(0, t, 1) = -0.7;
  }
  Graph g;
  auto pooled = attn.forward(g, g.constant(h), Mask::all_real(1, 2));
  EXPECT_NEAR(pooled.weights.value()(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(pooled.weights.value()(0, 1), 0.5, 1e-12);
}

TEST(Attention, PaddedPositionGetsExactlyZero) {
  Rng rng(22);
  auto attn = AttentionPoolingT<double>::init("a", 2, 2, rng);
  Graph g;
  auto h = g.constant(random_tensor({1, 3, 2}, rng));
  Mask mask(1, 3);
  mask.at(0, 0) = mask.at(0, 2) = 1;  // middle position padded
  auto pooled = attn.forward(g, h, mask);
  EXPECT_EQ(pooled.weights.value()(0, 1), 0.0);
  EXPECT_NEAR(pooled.weights.value()(0, 0) + pooled.weights.value()(0, 2), 1.0, 1e-9);
}

TEST(Attention, AllMaskedIsContractError) {
  Rng rng(23);
  auto attn = AttentionPoolingT<double>::init("a", 2, 2, rng);
  Graph g;
  auto h = g.constant(Tensor({1, 2, 2}));
  EXPECT_THROW(attn.forward(g, h, Mask(1, 2)), ContractError);
}

TEST(Attention, WeightsFormConvexCombination) {
  Rng rng(24);
  auto attn = AttentionPoolingT<double>::init("a", 3, 4, rng);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t b = 1 + rng.below(3), l = 1 + rng.below(5);
    Tensor h = random_tensor({b, l, 3}, rng, -2.0, 2.0);
    Mask mask(b, l);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t real = 1 + rng.below(l);
      for (std::size_t t = 0; t < real; ++t) mask.at(i, t) = 1;
    }
    Graph g;
    auto pooled = attn.forward(g, g.constant(h), mask);
    for (std::size_t i = 0; i < b; ++i) {
      double sum = 0;
      for (std::size_t t = 0; t < l; ++t) {
        const double a = pooled.weights.value()(i, t);
        EXPECT_GE(a, 0.0);
        if (!mask.at(i, t)) {
          EXPECT_EQ(a, 0.0);
        }
        sum += a;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
      for (std::size_t j = 0; j < 3; ++j) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t t = 0; t < l; ++t) {
          if (!mask.at(i, t)) continue;
          lo = std::min(lo, h(i, t, j));
          hi = std::max(hi, h(i, t, j));
        }
        const double s = pooled.sentence.value()(i, j);
        EXPECT_GE(s, lo - 1e-9);
        EXPECT_LE(s, hi + 1e-9);
      }
    }
  }
}

TEST(Attention, InvariantUnderPermutingPaddedPositions) {
  Rng rng(25);
  auto attn = AttentionPoolingT<double>::init("a", 2, 3, rng);
  Tensor h = random_tensor({1, 4, 2}, rng);
  Mask mask(1, 4);
  mask.at(0, 0) = mask.at(0, 1) = 1;  // positions 2 and 3 padded
  Tensor h_swapped = h;
  for (std::size_t j = 0; j < 2; ++j)
    std::swap(h_swapped(0, 2, j), h_swapped(0, 3, j));
  Graph g;
  auto p1 = attn.forward(g, g.constant(h), mask);
  auto p2 = attn.forward(g, g.constant(h_swapped), mask);
  for (std::size_t j = 0; j < 2; ++j)
    EXPECT_EQ(p1.sentence.value()(0, j), p2.sentence.value()(0, j));
}

TEST(Attention, GradCheckThroughPooling) {
  Rng rng(26);
  auto attn = AttentionPoolingT<double>::init("a", 3, 3, rng);
  Parameter h("h", random_tensor({2, 4, 3}, rng));
  Mask mask(2, 4);
  for (std::size_t t = 0; t < 3; ++t) mask.at(0, t) = 1;
  for (std::size_t t = 0; t < 4; ++t) mask.at(1, t) = 1;
  std::vector<Parameter*> params{&h};
  attn.collect(params);
  double err = grad_check<double>(
      [&](Graph& g) {
        auto pooled = attn.forward(g, g.param(h), mask);
        return sum_all(mul(pooled.sentence, pooled.sentence));
      },
      params);
  EXPECT_LT(err, 1e-4);
}
