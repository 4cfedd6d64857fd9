#include "sentnet/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "synthetic.hpp"

using namespace sentnet;

namespace {

ModelSpec tiny_spec(ModelKind kind, std::size_t dim = 8) {
  ModelSpec spec;
  spec.kind = kind;
  spec.embedding_dim = dim;
  spec.dnn_dims = {10, 6};
  spec.lstm_hidden = 8;
  spec.conv_filters = 8;
  spec.kernel_width = 3;
  spec.max_len = 12;
  return spec;
}

}  // namespace

TEST(Optimizer, SgdHandStep) {
  Parameter p("p", Tensor::row_vector({1.0}));
  p.grad[0] = 2.0;
  std::vector<Parameter*> params{&p};
  OptimizerState opt(OptimizerKind::kSgd, 0.1, params);
  opt.step(params);
  EXPECT_DOUBLE_EQ(p.value[0], 0.8);
}

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
    Parameter p("p", Tensor::row_vector({1.5, -2.5}));
    std::vector<Parameter*> params{&p};
    OptimizerStateT<double> opt(kind, 0.05, params);
    opt.step(params);
    EXPECT_EQ(p.value[0], 1.5);
    EXPECT_EQ(p.value[1], -2.5);
  }
}

TEST(Optimizer, AdamFirstStepMagnitudeIsLearningRate) {
  for (double gscale : {1.0, 100.0, 1e-3}) {
    Parameter p("p", Tensor::row_vector({0.0, 0.0, 0.0}));
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = gscale;
    std::vector<Parameter*> params{&p};
    OptimizerState opt(OptimizerKind::kAdam, 0.01, params);
    opt.step(params);
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_NEAR(std::abs(p.value[i]), 0.01, 1e-6) << "gscale " << gscale;
  }
}

TEST(Optimizer, NanGradientNamesParameter) {
  Parameter p("body.fwd.w_input", Tensor::row_vector({1.0}));
  p.grad[0] = std::nan("");
  std::vector<Parameter*> params{&p};
  OptimizerState opt(OptimizerKind::kSgd, 0.1, params);
  try {
    opt.step(params);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("body.fwd.w_input"), std::string::npos);
  }
}

TEST(Optimizer, SgdStepReducesConvexQuadratic) {
  Parameter p("p", Tensor::row_vector({0.7, -1.3, 2.1}));
  std::vector<Parameter*> params{&p};
  auto loss_value = [&]() {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += p.value[i] * p.value[i];
    return s;
  };
  const double before = loss_value();
  p.zero_grad();
  {
    Graph g;
    auto v = g.param(p);
    backward(sum_all(mul(v, v)));
    g.collect_grads();
  }
  OptimizerState opt(OptimizerKind::kSgd, 1e-3, params);
  opt.step(params);
  EXPECT_LT(loss_value(), before);
}

TEST(Optimizer, ClipGlobalNormScalesDown) {
  Parameter a("a", Tensor::row_vector({3.0}));
  Parameter b("b", Tensor::row_vector({4.0}));
  a.grad[0] = 3.0;
  b.grad[0] = 4.0;  // global norm 5
  std::vector<Parameter*> params{&a, &b};
  clip_global_norm(params, 5.0);
  EXPECT_DOUBLE_EQ(a.grad[0], 3.0);  // exactly at the bound: untouched
  a.grad[0] = 30.0;
  b.grad[0] = 40.0;  // norm 50 -> scaled by 0.1
  clip_global_norm(params, 5.0);
  EXPECT_NEAR(a.grad[0], 3.0, 1e-12);
  EXPECT_NEAR(b.grad[0], 4.0, 1e-12);
}

TEST(Loss, FreshModelLossIsNearLogThree) {
  auto corpus = synth::separable(96, 8, 5);
  const TokenBatch batch = vectorize(corpus.examples, corpus.vocab, 12);
  for (const std::string& name : all_model_names()) {
    auto model = build_model(tiny_spec(parse_model_kind(name)), corpus.table.matrix, 77);
    Graph g;
    auto loss = cross_entropy(model.forward(g, batch.ids, batch.mask), batch.labels);
    EXPECT_NEAR(loss.value()[0], std::log(3.0), 0.2) << name;
  }
}

TEST(Loss, SoftmaxCrossEntropyGradientIdentity) {
  Rng rng(55);
  Parameter logits("logits", Tensor({4, 3}));
  for (std::size_t i = 0; i < logits.value.numel(); ++i)
    logits.value[i] = rng.uniform(-2.0, 2.0);
  const std::vector<int> labels{2, 0, 1, 2};
  Graph g;
  auto probs = softmax_rows(g.param(logits));
  backward(cross_entropy(probs, labels));
  const Tensor p = probs.value();
  g.collect_grads();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double onehot = labels[i] == static_cast<int>(c) ? 1.0 : 0.0;
      EXPECT_NEAR(logits.grad(i, c), (p(i, c) - onehot) / 4.0, 1e-9);
    }
  }
}

TEST(Fit, ProducesOneReportPerEpoch) {
  auto corpus = synth::separable(50, 8, 6);
  DatasetSplit split = split_train_valid(corpus.examples, 3);
  auto model = build_model(tiny_spec(ModelKind::kDnn), corpus.table.matrix, 9);
  TrainConfig config;
  config.epochs = 10;
  config.batch_size = 16;
  config.seed = 9;
  auto reports = fit(model, split, corpus.vocab, config);
  ASSERT_EQ(reports.size(), 10u);
  for (std::size_t e = 0; e < 10; ++e) {
    EXPECT_EQ(reports[e].epoch, e + 1);
    EXPECT_TRUE(std::isfinite(reports[e].train_loss));
  }
}

TEST(Fit, DeterministicForFixedSeed) {
  auto corpus = synth::separable(40, 8, 7);
  DatasetSplit split = split_train_valid(corpus.examples, 4);
  TrainConfig config;
  config.epochs = 3;
  config.batch_size = 8;
  config.seed = 21;
  auto run = [&]() {
    auto model = build_model(tiny_spec(ModelKind::kLstm), corpus.table.matrix, config.seed);
    return fit(model, split, corpus.vocab, config);
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
    EXPECT_EQ(a[i].val_macro_f1, b[i].val_macro_f1);
    EXPECT_EQ(a[i].val_accuracy, b[i].val_accuracy);
  }
}

TEST(Fit, NeverMutatesTestSplit) {
  auto corpus = synth::separable(40, 8, 8);
  DatasetSplit split = split_train_valid(corpus.examples, 5);
  split.test = synth::separable(15, 8, 9).examples;
  const std::vector<Example> test_before = split.test;
  auto model = build_model(tiny_spec(ModelKind::kDnn), corpus.table.matrix, 11);
  TrainConfig config;
  config.epochs = 2;
  config.seed = 11;
  fit(model, split, corpus.vocab, config);
  ASSERT_EQ(split.test.size(), test_before.size());
  for (std::size_t i = 0; i < test_before.size(); ++i) {
    EXPECT_EQ(split.test[i].id, test_before[i].id);
    EXPECT_EQ(split.test[i].tokens, test_before[i].tokens);
  }
}

TEST(Fit, DivergenceIsTrainingErrorWithCoordinates) {
  auto corpus = synth::separable(30, 8, 10);
  DatasetSplit split = split_train_valid(corpus.examples, 6);
  auto model = build_model(tiny_spec(ModelKind::kDnn), corpus.table.matrix, 13);
  // Poison the head bias; the first forward pass hits NaN at the softmax.
  model.parameters().back()->value[0] = std::nan("");
  TrainConfig config;
  config.epochs = 5;
  config.seed = 13;
  try {
    fit(model, split, corpus.vocab, config);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos);
    EXPECT_NE(msg.find("batch 1"), std::string::npos);
  }
}

TEST(Fit, RestoresBestValidationEpoch) {
  auto corpus = synth::separable(60, 8, 11);
  DatasetSplit split = split_train_valid(corpus.examples, 7);
  auto model = build_model(tiny_spec(ModelKind::kDnn), corpus.table.matrix, 15);
  TrainConfig config;
  config.epochs = 12;
  config.seed = 15;
  auto reports = fit(model, split, corpus.vocab, config);
  double best = -1;
  for (const EpochReport& r : reports) best = std::max(best, r.val_macro_f1);
  const EvalReport final_eval = evaluate_model(model, split.validation, corpus.vocab);
  EXPECT_DOUBLE_EQ(final_eval.macro_f1, best);
}

TEST(Fit, OverfitsSeparableSetQuickly) {
  auto corpus = synth::separable(60, 16, 12);
  DatasetSplit split;
  split.train = corpus.examples;
  split.validation = corpus.examples;  // train accuracy read off the reports
  ModelSpec spec = tiny_spec(ModelKind::kDnn, 16);
  auto model = build_model(spec, corpus.table.matrix, 17);
  TrainConfig config;
  config.epochs = 150;
  config.batch_size = 8;
  config.seed = 17;
  auto reports = fit(model, split, corpus.vocab, config);
  double best_acc = 0;
  for (const EpochReport& r : reports) best_acc = std::max(best_acc, r.val_accuracy);
  EXPECT_GE(best_acc, 99.0);
}

TEST(Replicates, SingleReplicateEqualsFitPlusEvaluate) {
  auto corpus = synth::separable(45, 8, 13);
  DatasetSplit split = split_train_valid(corpus.examples, 8);
  split.test = synth::separable(21, 8, 14).examples;
  TrainConfig config;
  config.epochs = 3;
  config.replicates = 1;
  config.seed = 19;
  ModelSpec spec = tiny_spec(ModelKind::kDnn);
  EmbeddingTable table;
  table.matrix = corpus.table.matrix;
  ReplicateOutcome outcome = run_replicates(spec, table, corpus.vocab, split, config);
  ASSERT_EQ(outcome.per_replicate.size(), 1u);
  EXPECT_TRUE(outcome.failures.empty());

  auto model = build_model(spec, corpus.table.matrix, config.seed);
  fit(model, split, corpus.vocab, config);
  const EvalReport direct = evaluate_model(model, split.test, corpus.vocab);
  EXPECT_EQ(outcome.averaged.macro_f1, direct.macro_f1);
  EXPECT_EQ(outcome.averaged.accuracy, direct.accuracy);
}

TEST(Replicates, IdenticalSeedsGiveZeroVariance) {
  auto corpus = synth::separable(45, 8, 15);
  DatasetSplit split = split_train_valid(corpus.examples, 9);
  split.test = synth::separable(18, 8, 16).examples;
  TrainConfig config;
  config.epochs = 2;
  config.seed = 23;
  std::vector<EvalReport> runs;
  for (int k = 0; k < 3; ++k) {
    auto model = build_model(tiny_spec(ModelKind::kLstm), corpus.table.matrix, config.seed);
    fit(model, split, corpus.vocab, config);
    runs.push_back(evaluate_model(model, split.test, corpus.vocab));
  }
  EXPECT_EQ(runs[0].macro_f1, runs[1].macro_f1);
  EXPECT_EQ(runs[1].macro_f1, runs[2].macro_f1);
  EXPECT_EQ(runs[0].accuracy, runs[2].accuracy);
}

TEST(Replicates, ParallelMatchesSequential) {
  auto corpus = synth::separable(45, 8, 17);
  DatasetSplit split = split_train_valid(corpus.examples, 10);
  split.test = synth::separable(18, 8, 18).examples;
  TrainConfig config;
  config.epochs = 2;
  config.replicates = 2;
  config.seed = 29;
  ModelSpec spec = tiny_spec(ModelKind::kDnn);
  EmbeddingTable table;
  table.matrix = corpus.table.matrix;
  ReplicateOutcome seq = run_replicates(spec, table, corpus.vocab, split, config, 1);
  ReplicateOutcome par = run_replicates(spec, table, corpus.vocab, split, config, 2);
  ASSERT_EQ(seq.per_replicate.size(), par.per_replicate.size());
  EXPECT_EQ(seq.averaged.macro_f1, par.averaged.macro_f1);
  for (std::size_t r = 0; r < seq.per_replicate.size(); ++r)
    EXPECT_EQ(seq.per_replicate[r].macro_f1, par.per_replicate[r].macro_f1);
}

TEST(Replicates, EmptyTestSetIsContractError) {
  auto corpus = synth::separable(45, 8, 19);
  DatasetSplit split = split_train_valid(corpus.examples, 11);
  TrainConfig config;
  ModelSpec spec = tiny_spec(ModelKind::kDnn);
  EmbeddingTable table;
  table.matrix = corpus.table.matrix;
  EXPECT_THROW(run_replicates(spec, table, corpus.vocab, split, config), ContractError);
}

TEST(EpochReportJson, HasStableKeys) {
  EpochReport r{3, 0.75, 61.25, 66.0};
  auto j = epoch_report_json(r);
  EXPECT_EQ(j["epoch"], 3);
  EXPECT_DOUBLE_EQ(j["loss"].get<double>(), 0.75);
  EXPECT_DOUBLE_EQ(j["val_macro_f1"].get<double>(), 61.25);
  EXPECT_DOUBLE_EQ(j["val_accuracy"].get<double>(), 66.0);
}

TEST(TrainConfig, ValidationErrors) {
  TrainConfig config;
  config.epochs = 0;
  EXPECT_THROW(config.validate(), ConfigError);
  config = TrainConfig{};
  config.learning_rate = 0.0;
  EXPECT_THROW(config.validate(), ConfigError);
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
  EXPECT_DOUBLE_EQ(default_learning_rate(OptimizerKind::kSgd), 0.1);
  EXPECT_DOUBLE_EQ(default_learning_rate(OptimizerKind::kAdam), 1e-3);
}
