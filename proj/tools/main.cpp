// Command-line front end: prepare / train / evaluate / predict / gradcheck /
// experiment over the sentnet toolkit. Configuration comes from an optional
// key=value file plus flags; flags win. Exit codes: 0 success, 1 usage or
// config, 2 data, 3 numeric or training failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sentnet/checkpoint.hpp"
#include "sentnet/data.hpp"
#include "sentnet/gradcheck.hpp"
#include "sentnet/metrics.hpp"
#include "sentnet/models.hpp"
#include "sentnet/training.hpp"

namespace fs = std::filesystem;
using namespace sentnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

const std::vector<std::string> kConfigKeys{
    "model",        "train",        "test",        "embeddings",  "out",
    "epochs",       "batch_size",   "lr",          "optimizer",   "seed",
    "replicates",   "max_len",      "embedding_dim", "dropout",   "dnn_dims",
    "lstm_hidden",  "conv_filters", "kernel_width", "cell",       "train_embeddings",
    "clip_norm",    "threads",      "models"};

/// Effective run configuration: defaults, overlaid by the config file,
/// overlaid by flags. Echoed verbatim into the run log.
class RunConfig {
 public:
  void set(const std::string& key, const std::string& value) {
    if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (...) {
      throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return get_size(key, fallback);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("config key '" + key + "' is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "' is not a bool: " + it->second);
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": expected key = value");
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  /// Stable key order so two runs of the same config echo identical logs.
  std::string echo() const {
    std::ostringstream os;
    for (const std::string& key : kConfigKeys) {
      auto it = values_.find(key);
      if (it != values_.end()) os << key << " = " << it->second << '\n';
    }
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

ModelSpec spec_from_config(const RunConfig& config) {
  ModelSpec spec;
  spec.kind = parse_model_kind(config.get("model", "bilstm"));
  spec.embedding_dim = config.get_size("embedding_dim", spec.embedding_dim);
  spec.dropout = config.get_double("dropout", spec.dropout);
  spec.lstm_hidden = config.get_size("lstm_hidden", spec.lstm_hidden);
  spec.conv_filters = config.get_size("conv_filters", spec.conv_filters);
  spec.kernel_width = config.get_size("kernel_width", spec.kernel_width);
  spec.max_len = config.get_size("max_len", spec.max_len);
  spec.train_embeddings = config.get_bool("train_embeddings", spec.train_embeddings);
  if (config.has("cell")) {
    const std::string cell = config.get("cell");
    if (cell == "gru") {
      spec.cell = RecurrentCell::kGru;
    } else if (cell == "lstm") {
      spec.cell = RecurrentCell::kLstm;
    } else {
      throw ConfigError("unknown cell '" + cell + "'; expected lstm|gru");
    }
  }
  if (config.has("dnn_dims")) {
    spec.dnn_dims.clear();
    std::istringstream in(config.get("dnn_dims"));
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) spec.dnn_dims.push_back(std::stoul(item));
    }
    if (spec.dnn_dims.empty()) throw ConfigError("dnn_dims is empty");
  }
  spec.validate();
  return spec;
}

TrainConfig train_config_from(const RunConfig& config) {
  TrainConfig tc;
  tc.epochs = config.get_size("epochs", tc.epochs);
  tc.batch_size = config.get_size("batch_size", tc.batch_size);
  tc.optimizer = parse_optimizer(config.get("optimizer", "adam"));
  tc.learning_rate = config.get_double("lr", default_learning_rate(tc.optimizer));
  tc.seed = config.get_u64("seed", tc.seed);
  tc.replicates = config.get_size("replicates", tc.replicates);
  tc.clip_norm = config.get_double("clip_norm", tc.clip_norm);
  tc.validate();
  return tc;
}

/// Writes every resolved value back into the config so the echoed log pins
/// the run completely, defaults included.
RunConfig materialize(RunConfig config, const ModelSpec* spec, const TrainConfig& tc) {
  if (spec != nullptr) {
    config.set("model", to_string(spec->kind));
    config.set("embedding_dim", std::to_string(spec->embedding_dim));
    config.set("dropout", std::to_string(spec->dropout));
    std::string dims;
    for (std::size_t d : spec->dnn_dims) dims += (dims.empty() ? "" : ",") + std::to_string(d);
    config.set("dnn_dims", dims);
    config.set("lstm_hidden", std::to_string(spec->lstm_hidden));
    config.set("conv_filters", std::to_string(spec->conv_filters));
    config.set("kernel_width", std::to_string(spec->kernel_width));
    config.set("max_len", std::to_string(spec->max_len));
    config.set("cell", spec->cell == RecurrentCell::kGru ? "gru" : "lstm");
    config.set("train_embeddings", spec->train_embeddings ? "true" : "false");
  }
  config.set("epochs", std::to_string(tc.epochs));
  config.set("batch_size", std::to_string(tc.batch_size));
  config.set("optimizer", to_string(tc.optimizer));
  std::ostringstream lr;
  lr << tc.learning_rate;
  config.set("lr", lr.str());
  config.set("seed", std::to_string(tc.seed));
  config.set("replicates", std::to_string(tc.replicates));
  std::ostringstream clip;
  clip << tc.clip_norm;
  config.set("clip_norm", clip.str());
  return config;
}

void require_file(const RunConfig& config, const std::string& key) {
  if (!config.has(key)) throw ConfigError("missing required option --" + key);
  const std::string path = config.get(key);
  if (!fs::exists(path)) {
    throw ConfigError("path for --" + key + " does not exist: " + path);
  }
}

fs::path ensure_out_dir(const RunConfig& config) {
  if (!config.has("out")) throw ConfigError("missing required option --out");
  const fs::path dir(config.get("out"));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
}

std::size_t thread_cap(const RunConfig& config, std::size_t cells) {
  std::size_t threads = config.get_size("threads", std::thread::hardware_concurrency());
  if (const char* env = std::getenv("IMPLICIT_SENT_THREADS")) {
    try {
      threads = std::min<std::size_t>(threads, std::stoull(env));
    } catch (...) {
      throw ConfigError("IMPLICIT_SENT_THREADS is not an integer");
    }
  }
  return std::max<std::size_t>(1, std::min(threads, cells));
}

std::vector<Example> load_corpus_strict(const std::string& path) {
  CorpusLoad load = load_corpus(path);
  if (!load.errors.empty()) {
    std::ostringstream os;
    os << path << ": " << load.errors.size() << " malformed line(s):";
    for (const LineError& err : load.errors)
      os << "\n  line " << err.line_no << ": " << err.message;
    throw ParseError(os.str());
  }
  return std::move(load.examples);
}

std::string format_tsv(const Example& ex) {
  std::ostringstream os;
  os << ex.id << '\t' << class_name(ex.label) << '\t';
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (i) os << ' ';
    os << ex.tokens[i];
  }
  if (!ex.context.empty()) {
    os << '\t';
    for (std::size_t i = 0; i < ex.context.size(); ++i) {
      if (i) os << ' ';
      os << ex.context[i];
    }
  }
  return os.str();
}

int cmd_prepare(const RunConfig& config) {
  require_file(config, "train");
  require_file(config, "test");
  const fs::path out_dir = ensure_out_dir(config);

  const CorpusLoad train_load = load_corpus(config.get("train"));
  const CorpusLoad test_load = load_corpus(config.get("test"));
  const std::size_t parse_errors = train_load.errors.size() + test_load.errors.size();
  for (const auto& [file, load] :
       {std::pair{config.get("train"), &train_load}, {config.get("test"), &test_load}}) {
    for (const LineError& err : load->errors)
      std::cerr << file << ":" << err.line_no << ": " << err.message << '\n';
  }

  DedupeResult dedupe = dedupe_overlap(train_load.examples, test_load.examples);
  std::ostringstream cleaned;
  for (const Example& ex : dedupe.test) cleaned << format_tsv(ex) << '\n';
  write_text(out_dir / "test_deduped.tsv", cleaned.str());

  nlohmann::ordered_json report;
  report["train_examples"] = train_load.examples.size();
  report["test_examples_in"] = test_load.examples.size();
  report["test_examples_out"] = dedupe.test.size();
  report["removed_count"] = dedupe.removed_ids.size();
  report["removed_ids"] = dedupe.removed_ids;
  report["parse_errors"] = parse_errors;
  write_text(out_dir / "prepare_report.json", report.dump(2) + "\n");

  std::cout << "removed " << dedupe.removed_ids.size() << " overlapping sentence(s); "
            << dedupe.test.size() << " test example(s) kept\n";
  return parse_errors == 0 ? kExitOk : kExitData;
}

int cmd_train(const RunConfig& config) {
  require_file(config, "train");
  require_file(config, "embeddings");
  const fs::path out_dir = ensure_out_dir(config);
  const ModelSpec spec = spec_from_config(config);
  const TrainConfig tc = train_config_from(config);

  const std::string echo = materialize(config, &spec, tc).echo();
  write_text(out_dir / "run_config.txt", echo);
  std::cout << echo;

  auto [vocab, table] =
      load_embeddings<double>(config.get("embeddings"), spec.embedding_dim);
  const std::vector<Example> examples = load_corpus_strict(config.get("train"));
  DatasetSplit split = split_train_valid(examples, tc.seed);

  auto model = build_model(spec, table.matrix, tc.seed);
  const std::vector<EpochReport> reports = fit(model, split, vocab, tc);

  std::ostringstream log;
  for (const EpochReport& r : reports) log << epoch_report_json(r).dump() << '\n';
  write_text(out_dir / "epochs.jsonl", log.str());
  save_checkpoint((out_dir / "checkpoint.ckpt").string(), model, vocab.hash_hex());

  std::cout << "trained " << to_string(spec.kind) << " for " << reports.size()
            << " epoch(s); best val macro-F1 ";
  double best = 0;
  for (const EpochReport& r : reports) best = std::max(best, r.val_macro_f1);
  std::cout << best << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& config) {
  require_file(config, "test");
  require_file(config, "embeddings");
  if (!config.has("model")) throw ConfigError("missing required option --checkpoint");
  require_file(config, "model");  // checkpoint path stored under "model"

  const CheckpointInfo info = read_checkpoint_info(config.get("model"));
  auto [vocab, table] = load_embeddings<double>(
      config.get("embeddings"), config.get_size("embedding_dim", info.spec.embedding_dim));
  if (info.vocab_hash != vocab.hash_hex()) {
    throw ContractError("checkpoint was trained against a different vocabulary (hash " +
                        info.vocab_hash + " != " + vocab.hash_hex() + ")");
  }
  auto loaded = load_checkpoint<double>(config.get("model"), table.matrix);
  const std::vector<Example> test = load_corpus_strict(config.get("test"));
  const EvalReport report = evaluate_model(loaded.model, test, vocab);
  std::cout << comparison_table({{to_string(loaded.model.spec().kind), report}});
  if (config.has("out")) {
    const fs::path out_dir = ensure_out_dir(config);
    write_text(out_dir / "eval_report.json", report_to_json(report).dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_predict(const RunConfig& config) {
  require_file(config, "model");
  require_file(config, "test");  // input file
  require_file(config, "embeddings");

  const CheckpointInfo info = read_checkpoint_info(config.get("model"));
  auto [vocab, table] = load_embeddings<double>(
      config.get("embeddings"), config.get_size("embedding_dim", info.spec.embedding_dim));
  if (info.vocab_hash != vocab.hash_hex()) {
    throw ContractError("refusing to predict: checkpoint vocabulary hash " +
                        info.vocab_hash + " does not match embeddings vocabulary " +
                        vocab.hash_hex());
  }
  auto loaded = load_checkpoint<double>(config.get("model"), table.matrix);

  // Inputs may be labeled corpus TSV or bare `id<TAB>tokens` lines.
  std::ifstream in(config.get("test"), std::ios::binary);
  if (!in) throw IoError("cannot open input: " + config.get("test"));
  std::vector<Example> inputs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    Example ex;
    ex.id = fields[0];
    if (fields.size() >= 3) {
      ex.tokens = split_tokens(fields[2]);
    } else if (fields.size() == 2) {
      ex.tokens = split_tokens(fields[1]);
    }
    if (ex.tokens.empty()) {
      throw ParseError(config.get("test") + ": line " + std::to_string(line_no) +
                       ": no tokens");
    }
    inputs.push_back(std::move(ex));
  }

  std::ostringstream out;
  if (!inputs.empty()) {
    const TokenBatch batch = vectorize(inputs, vocab, loaded.model.spec().max_len);
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < inputs.size(); start += chunk) {
      const std::size_t count = std::min(chunk, inputs.size() - start);
      IntMatrix ids(count, batch.ids.cols);
      Mask mask(count, batch.mask.cols);
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t t = 0; t < batch.ids.cols; ++t) {
          ids.at(i, t) = batch.ids.at(start + i, t);
          mask.at(i, t) = batch.mask.at(start + i, t) ? 1 : 0;
        }
      const std::vector<int> labels = loaded.model.predict(ids, mask);
      for (std::size_t i = 0; i < count; ++i)
        out << inputs[start + i].id << '\t' << class_name(labels[i]) << '\n';
    }
  }
  if (config.has("out")) {
    write_text(fs::path(config.get("out")), out.str());
  } else {
    std::cout << out.str();
  }
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& config, double tolerance) {
  const auto results = gradcheck_suite(tolerance);
  bool all_pass = true;
  const GradCheckResult* worst = nullptr;
  for (const GradCheckResult& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  max rel error "
              << r.max_rel_error << "  (" << r.seconds << " s)\n";
    all_pass = all_pass && r.pass;
    if (worst == nullptr || r.max_rel_error > worst->max_rel_error) worst = &r;
  }
  if (worst != nullptr) {
    std::cout << "worst: " << worst->name << " at " << worst->max_rel_error << "\n";
  }
  (void)config;
  return all_pass ? kExitOk : kExitNumeric;
}

int cmd_experiment(const RunConfig& config, const std::vector<std::string>& model_names) {
  require_file(config, "train");
  require_file(config, "test");
  require_file(config, "embeddings");
  const fs::path out_dir = ensure_out_dir(config);
  const TrainConfig tc = train_config_from(config);

  const std::vector<std::string> names =
      model_names.empty() ? all_model_names() : model_names;
  for (const std::string& name : names) parse_model_kind(name);  // validate early

  RunConfig echoed = materialize(config, nullptr, tc);
  std::string joined;
  for (const std::string& name : names) joined += (joined.empty() ? "" : ",") + name;
  echoed.set("models", joined);
  const std::string echo = echoed.echo();
  write_text(out_dir / "run_config.txt", echo);
  std::cout << echo;

  const std::size_t base_dim = spec_from_config(config).embedding_dim;
  auto [vocab, table] = load_embeddings<double>(config.get("embeddings"), base_dim);
  const std::vector<Example> train_examples = load_corpus_strict(config.get("train"));
  DatasetSplit split = split_train_valid(train_examples, tc.seed);
  const std::vector<Example> test_raw = load_corpus_strict(config.get("test"));
  DedupeResult dedupe = dedupe_overlap(split.train, test_raw);
  split.test = std::move(dedupe.test);

  const std::size_t threads = thread_cap(config, tc.replicates);
  std::vector<std::pair<std::string, EvalReport>> rows;
  nlohmann::ordered_json out_json;
  out_json["removed_overlaps"] = dedupe.removed_ids.size();
  bool any_failed = false;
  for (const std::string& name : names) {
    RunConfig model_config = config;
    model_config.set("model", name);
    try {
      const ModelSpec spec = spec_from_config(model_config);
      EmbeddingTableT<double> shared;
      shared.matrix = table.matrix;
      const ReplicateOutcome outcome =
          run_replicates(spec, shared, vocab, split, tc, threads);
      rows.emplace_back(name, outcome.averaged);
      out_json["models"][name] = report_to_json(outcome.averaged);
      nlohmann::ordered_json reps = nlohmann::ordered_json::array();
      for (const EvalReport& r : outcome.per_replicate)
        reps.push_back(report_to_json(r));
      out_json["models"][name]["replicates"] = std::move(reps);
      for (const std::string& failure : outcome.failures) {
        any_failed = true;
        std::cerr << name << ": " << failure << '\n';
      }
    } catch (const std::exception& e) {
      any_failed = true;
      std::cerr << name << ": failed: " << e.what() << '\n';
      out_json["errors"][name] = e.what();
    }
  }
  const std::string table_text = comparison_table(rows);
  std::cout << table_text;
  write_text(out_dir / "experiment_table.txt", table_text);
  write_text(out_dir / "experiment.json", out_json.dump(2) + "\n");
  if (rows.empty()) throw TrainingError("no model finished the experiment");
  return any_failed ? kExitNumeric : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural ternary sentiment classification toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> flag_values;
  std::vector<std::string> experiment_models;
  double tolerance = 1e-4;

  const auto add_common = [&](CLI::App* sub, const std::vector<std::string>& keys) {
    sub->add_option("--config", config_path, "key = value config file");
    for (const std::string& key : keys) {
      std::string flag = "--" + key;
      for (char& c : flag)
        if (c == '_') c = '-';
      sub->add_option_function<std::string>(
          flag, [&flag_values, key](const std::string& v) { flag_values[key] = v; });
    }
  };

  CLI::App* prepare = app.add_subcommand("prepare", "remove test sentences that occur in train");
  add_common(prepare, {"train", "test", "out"});

  CLI::App* train = app.add_subcommand("train", "train one model and write a checkpoint");
  add_common(train, {"model", "train", "embeddings", "out", "epochs", "batch_size", "lr",
                     "optimizer", "seed", "max_len", "embedding_dim", "dropout", "dnn_dims",
                     "lstm_hidden", "conv_filters", "kernel_width", "cell",
                     "train_embeddings", "clip_norm"});

  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a test file");
  add_common(evaluate, {"test", "embeddings", "out", "embedding_dim"});
  std::string eval_checkpoint;
  evaluate->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();

  CLI::App* predict = app.add_subcommand("predict", "label sentences with a checkpoint");
  std::string predict_checkpoint, predict_input;
  predict->add_option("--checkpoint", predict_checkpoint, "checkpoint file")->required();
  predict->add_option("--input", predict_input, "input TSV (id,tokens or corpus format)")
      ->required();
  add_common(predict, {"embeddings", "out", "embedding_dim"});

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--tolerance", tolerance, "max relative error to pass");

  CLI::App* experiment =
      app.add_subcommand("experiment", "replicated comparison across architectures");
  experiment->add_option("--models", experiment_models, "subset of architectures")
      ->delimiter(',');
  add_common(experiment, {"train", "test", "embeddings", "out", "epochs", "batch_size",
                          "lr", "optimizer", "seed", "replicates", "max_len",
                          "embedding_dim", "dropout", "dnn_dims", "lstm_hidden",
                          "conv_filters", "kernel_width", "cell", "train_embeddings",
                          "clip_norm", "threads"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig config;
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& [key, value] : flag_values) config.set(key, value);

    if (prepare->parsed()) return cmd_prepare(config);
    if (train->parsed()) return cmd_train(config);
    if (evaluate->parsed()) {
      config.set("model", eval_checkpoint);
      return cmd_evaluate(config);
    }
    if (predict->parsed()) {
      config.set("model", predict_checkpoint);
      config.set("test", predict_input);
      return cmd_predict(config);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(config, tolerance);
    if (experiment->parsed()) return cmd_experiment(config, experiment_models);
    std::cerr << "no subcommand given\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
}
