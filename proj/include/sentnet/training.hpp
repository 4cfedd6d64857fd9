#pragma once

#include <atomic>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sentnet/data.hpp"
#include "sentnet/metrics.hpp"
#include "sentnet/models.hpp"

namespace sentnet {

enum class OptimizerKind { kAdam, kSgd };

inline std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

inline OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + name + "'; expected adam|sgd");
}

inline double default_learning_rate(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? 0.1 : 1e-3;
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = default_learning_rate(OptimizerKind::kAdam);
  std::uint64_t seed = 42;
  std::size_t replicates = 3;
  double clip_norm = 5.0;  // recurrent models only; 0 disables

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (replicates < 1) throw ConfigError("replicates must be >= 1");
  }
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
  double val_accuracy = 0.0;
};

inline nlohmann::ordered_json epoch_report_json(const EpochReport& r) {
  return {{"epoch", r.epoch},
          {"loss", r.train_loss},
          {"val_macro_f1", r.val_macro_f1},
          {"val_accuracy", r.val_accuracy}};
}

/// SGD or bias-corrected Adam over a fixed parameter list.
template <class T = double>
class OptimizerStateT {
 public:
  OptimizerStateT(OptimizerKind kind, T learning_rate,
                  const std::vector<ParameterT<T>*>& params)
      : kind_(kind), lr_(learning_rate) {
    if (kind_ == OptimizerKind::kAdam) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const ParameterT<T>* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
  }

  std::size_t step_count() const { return step_count_; }

  /// Applies one update from each parameter's grad buffer.
  void step(const std::vector<ParameterT<T>*>& params) {
    if (kind_ == OptimizerKind::kAdam && params.size() != m_.size()) {
      throw ContractError("optimizer state does not match parameter list");
    }
    ++step_count_;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      ParameterT<T>& p = *params[pi];
      for (std::size_t i = 0; i < p.grad.numel(); ++i) {
        if (std::isnan(static_cast<double>(p.grad[i]))) {
          throw NumericError("NaN gradient in parameter '" + p.name + "'");
        }
      }
      if (kind_ == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] -= lr_ * p.grad[i];
        continue;
      }
      constexpr T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
      const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count_));
      const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count_));
      TensorT<T>& m = m_[pi];
      TensorT<T>& v = v_[pi];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const T g = p.grad[i];
        m[i] = beta1 * m[i] + (T(1) - beta1) * g;
        v[i] = beta2 * v[i] + (T(1) - beta2) * g * g;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  OptimizerKind kind_;
  T lr_;
  std::size_t step_count_ = 0;
  std::vector<TensorT<T>> m_, v_;
};

using OptimizerState = OptimizerStateT<double>;

template <class T>
void clip_global_norm(const std::vector<ParameterT<T>*>& params, T max_norm) {
  T sq = T(0);
  for (const ParameterT<T>* p : params)
    for (std::size_t i = 0; i < p->grad.numel(); ++i) sq += p->grad[i] * p->grad[i];
  const T norm = std::sqrt(sq);
  if (norm <= max_norm || norm == T(0)) return;
  const T factor = max_norm / norm;
  for (ParameterT<T>* p : params)
    for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= factor;
}

template <class T>
std::vector<TensorT<T>> snapshot_parameters(const std::vector<ParameterT<T>*>& params) {
  std::vector<TensorT<T>> snap;
  snap.reserve(params.size());
  for (const ParameterT<T>* p : params) snap.push_back(p->value);
  return snap;
}

template <class T>
void restore_parameters(const std::vector<ParameterT<T>*>& params,
                        const std::vector<TensorT<T>>& snapshot) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
}

/// Inference over a vectorized batch in chunks, accumulating a confusion
/// matrix against the batch labels.
template <class T>
EvalReport evaluate_model(ClassifierModelT<T>& model, const TokenBatch& batch,
                          std::size_t chunk_rows = 64) {
  ConfusionMatrix cm;
  const std::size_t n = batch.size();
  for (std::size_t start = 0; start < n; start += chunk_rows) {
    const std::size_t count = std::min(chunk_rows, n - start);
    IntMatrix ids(count, batch.ids.cols);
    Mask mask(count, batch.mask.cols);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t t = 0; t < batch.ids.cols; ++t) {
        ids.at(i, t) = batch.ids.at(start + i, t);
        mask.at(i, t) = batch.mask.at(start + i, t) ? 1 : 0;
      }
    const std::vector<int> preds = model.predict(ids, mask);
    for (std::size_t i = 0; i < count; ++i)
      cm.accumulate(batch.labels[start + i], preds[i]);
  }
  return evaluate_confusion(cm);
}

template <class T>
EvalReport evaluate_model(ClassifierModelT<T>& model, const std::vector<Example>& examples,
                          const Vocabulary& vocab) {
  return evaluate_model(model, vectorize(examples, vocab, model.spec().max_len));
}

/// Seeded mini-batch training with dropout. After every epoch the validation
/// macro-F1 is computed; the parameter snapshot with the best validation
/// macro-F1 is restored before returning (earliest epoch wins ties). Returns
/// one report per epoch.
template <class T = double>
std::vector<EpochReport> fit(ClassifierModelT<T>& model, const DatasetSplit& split,
                             const Vocabulary& vocab, const TrainConfig& config) {
  config.validate();
  if (split.train.empty()) throw ContractError("fit: training set is empty");
  const std::size_t max_len = model.spec().max_len;
  const auto params = model.parameters();
  OptimizerStateT<T> optimizer(config.optimizer, static_cast<T>(config.learning_rate), params);
  Rng shuffle_rng(derive_seed(config.seed, 1));
  Rng dropout_rng(derive_seed(config.seed, 2));

  const TokenBatch val_batch = split.validation.empty()
                                   ? TokenBatch{}
                                   : vectorize(split.validation, vocab, max_len);

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochReport> reports;
  std::vector<TensorT<T>> best_snapshot;
  double best_f1 = -1.0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() +
                                              static_cast<std::ptrdiff_t>(start + count));
      const TokenBatch batch = vectorize(split.train, rows, vocab, max_len);
      for (ParameterT<T>* p : params) p->zero_grad();
      double loss_value = 0.0;
      try {
        GraphT<T> g;
        g.mode = Mode::kTrain;
        g.rng = &dropout_rng;
        auto loss = cross_entropy(model.forward(g, batch.ids, batch.mask), batch.labels);
        loss_value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
        backward(loss);
        g.collect_grads();
        if (model.is_recurrent() && config.clip_norm > 0.0) {
          clip_global_norm(params, static_cast<T>(config.clip_norm));
        }
        optimizer.step(params);
      } catch (const NumericError& e) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1) +
                            ", batch " + std::to_string(batches + 1) + ": " + e.what());
      }
      loss_sum += loss_value;
      ++batches;
    }
    EpochReport report;
    report.epoch = epoch + 1;
    report.train_loss = loss_sum / static_cast<double>(batches);
    if (val_batch.size() > 0) {
      const EvalReport er = evaluate_model(model, val_batch, config.batch_size);
      report.val_macro_f1 = er.macro_f1;
      report.val_accuracy = er.accuracy;
      if (report.val_macro_f1 > best_f1) {
        best_f1 = report.val_macro_f1;
        best_snapshot = snapshot_parameters(params);
      }
    }
    reports.push_back(report);
  }
  if (!best_snapshot.empty()) restore_parameters(params, best_snapshot);
  return reports;
}

struct ReplicateOutcome {
  EvalReport averaged;
  std::vector<EvalReport> per_replicate;  // successful replicates, in order
  std::vector<EpochReport> first_replicate_epochs;
  std::vector<std::string> failures;
};

/// Trains config.replicates independent models with seeds seed, seed+1, ...
/// and arithmetically averages their test-set reports. Failed replicates are
/// reported but do not discard the finished ones.
template <class T = double>
ReplicateOutcome run_replicates(const ModelSpec& spec, const EmbeddingTableT<T>& table,
                                const Vocabulary& vocab, const DatasetSplit& split,
                                const TrainConfig& config, std::size_t max_threads = 1) {
  config.validate();
  if (split.test.empty()) throw ContractError("run_replicates: test set is empty");
  const std::size_t n = config.replicates;
  std::vector<std::optional<EvalReport>> results(n);
  std::vector<std::vector<EpochReport>> epochs(n);
  std::vector<std::string> errors(n);

  auto run_one = [&](std::size_t r) {
    try {
      TrainConfig rep_config = config;
      rep_config.seed = config.seed + r;
      auto model = build_model(spec, table.matrix, rep_config.seed);
      epochs[r] = fit(model, split, vocab, rep_config);
      results[r] = evaluate_model(model, split.test, vocab);
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(max_threads, n));
  if (workers == 1) {
    for (std::size_t r = 0; r < n; ++r) run_one(r);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          const std::size_t r = next.fetch_add(1);
          if (r >= n) return;
          run_one(r);
        }
      });
    }
    for (std::thread& t : pool) t.join();
  }

  ReplicateOutcome outcome;
  for (std::size_t r = 0; r < n; ++r) {
    if (results[r]) {
      outcome.per_replicate.push_back(*results[r]);
      if (outcome.first_replicate_epochs.empty()) outcome.first_replicate_epochs = epochs[r];
    } else {
      outcome.failures.push_back("replicate " + std::to_string(r) + ": " + errors[r]);
    }
  }
  if (outcome.per_replicate.empty()) {
    std::string all;
    for (const std::string& f : outcome.failures) all += f + "; ";
    throw TrainingError("all replicates failed: " + all);
  }
  outcome.averaged = average_reports(outcome.per_replicate);
  return outcome;
}

}  // namespace sentnet
