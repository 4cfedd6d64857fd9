#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentnet/layers.hpp"

namespace sentnet {

enum class ModelKind { kDnn, kCnn, kLstm, kBilstm, kBilstmAttention };
enum class RecurrentCell { kLstm, kGru };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kDnn: return "dnn";
    case ModelKind::kCnn: return "cnn";
    case ModelKind::kLstm: return "lstm";
    case ModelKind::kBilstm: return "bilstm";
    case ModelKind::kBilstmAttention: return "bilstm_attention";
  }
  throw ConfigError("unknown model kind");
}

inline ModelKind parse_model_kind(const std::string& name) {
  if (name == "dnn") return ModelKind::kDnn;
  if (name == "cnn") return ModelKind::kCnn;
  if (name == "lstm") return ModelKind::kLstm;
  if (name == "bilstm") return ModelKind::kBilstm;
  if (name == "bilstm_attention") return ModelKind::kBilstmAttention;
  throw ConfigError("unknown model kind '" + name +
                    "'; expected dnn|cnn|lstm|bilstm|bilstm_attention");
}

inline const std::vector<std::string>& all_model_names() {
  static const std::vector<std::string> names{"dnn", "cnn", "lstm", "bilstm",
                                              "bilstm_attention"};
  return names;
}

/// Declarative architecture choice plus hyperparameters.
struct ModelSpec {
  ModelKind kind = ModelKind::kBilstm;
  std::size_t embedding_dim = 300;
  double dropout = 0.5;
  std::vector<std::size_t> dnn_dims{128, 64, 32};
  std::size_t lstm_hidden = 64;
  std::size_t conv_filters = 300;
  std::size_t kernel_width = 3;
  std::size_t max_len = 64;
  std::size_t classes = 3;
  RecurrentCell cell = RecurrentCell::kLstm;
  bool train_embeddings = false;

  void validate() const {
    if (classes != 3) throw ConfigError("class count must be 3");
    if (embedding_dim == 0 || lstm_hidden == 0 || conv_filters == 0 || kernel_width == 0 ||
        max_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (dnn_dims.empty()) throw ConfigError("dnn_dims must be non-empty");
    for (std::size_t d : dnn_dims)
      if (d == 0) throw ConfigError("dnn_dims must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
    if (kind == ModelKind::kCnn && max_len < kernel_width) {
      throw ConfigError("max_len must be >= kernel_width for the cnn model");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["kind"] = to_string(kind);
    j["embedding_dim"] = embedding_dim;
    j["dropout"] = dropout;
    j["dnn_dims"] = dnn_dims;
    j["lstm_hidden"] = lstm_hidden;
    j["conv_filters"] = conv_filters;
    j["kernel_width"] = kernel_width;
    j["max_len"] = max_len;
    j["classes"] = classes;
    j["cell"] = cell == RecurrentCell::kGru ? "gru" : "lstm";
    j["train_embeddings"] = train_embeddings;
    return j;
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.kind = parse_model_kind(j.at("kind").get<std::string>());
    spec.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    spec.dropout = j.at("dropout").get<double>();
    spec.dnn_dims = j.at("dnn_dims").get<std::vector<std::size_t>>();
    spec.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    spec.conv_filters = j.at("conv_filters").get<std::size_t>();
    spec.kernel_width = j.at("kernel_width").get<std::size_t>();
    spec.max_len = j.at("max_len").get<std::size_t>();
    spec.classes = j.at("classes").get<std::size_t>();
    const std::string cell = j.at("cell").get<std::string>();
    if (cell == "gru") {
      spec.cell = RecurrentCell::kGru;
    } else if (cell == "lstm") {
      spec.cell = RecurrentCell::kLstm;
    } else {
      throw ConfigError("unknown recurrent cell '" + cell + "'");
    }
    spec.train_embeddings = j.at("train_embeddings").get<bool>();
    return spec;
  }
};

/// Embedding bottom, architecture-specific body, dropout, softmax head.
template <class T = double>
class ClassifierModelT {
 public:
  ClassifierModelT(ModelSpec spec, TensorT<T> embedding_matrix, std::uint64_t init_seed)
      : spec_(std::move(spec)), init_seed_(init_seed) {
    spec_.validate();
    if (embedding_matrix.rank() != 2 || embedding_matrix.extent(1) != spec_.embedding_dim) {
      throw ConfigError("embedding table dim " +
                        std::to_string(embedding_matrix.rank() == 2
                                           ? embedding_matrix.extent(1)
                                           : 0) +
                        " != spec embedding_dim " + std::to_string(spec_.embedding_dim));
    }
    embedding_ = EmbeddingLayerT<T>(std::move(embedding_matrix), spec_.train_embeddings);
    dropout_ = DropoutLayerT<T>(static_cast<T>(spec_.dropout));

    Rng rng(derive_seed(init_seed, 0xB0D1));
    std::size_t body_out = 0;
    switch (spec_.kind) {
      case ModelKind::kDnn: {
        std::size_t in = spec_.embedding_dim;
        for (std::size_t i = 0; i < spec_.dnn_dims.size(); ++i) {
          dnn_stack_.push_back(DenseLayerT<T>::init("body.dense" + std::to_string(i + 1), in,
                                                    spec_.dnn_dims[i], Activation::kRelu,
                                                    rng));
          in = spec_.dnn_dims[i];
        }
        body_out = in;
        break;
      }
      case ModelKind::kCnn: {
        conv1_ = Conv1DLayerT<T>::init("body.conv1", spec_.kernel_width, spec_.embedding_dim,
                                       spec_.conv_filters, Padding::kSameZero,
                                       Activation::kRelu, rng);
        conv2_ = Conv1DLayerT<T>::init("body.conv2", spec_.kernel_width, spec_.conv_filters,
                                       spec_.conv_filters, Padding::kValid, Activation::kRelu,
                                       rng);
        body_out = spec_.conv_filters;
        break;
      }
      case ModelKind::kLstm: {
        init_cells(rng, false);
        body_out = spec_.lstm_hidden;
        break;
      }
      case ModelKind::kBilstm: {
        init_cells(rng, true);
        body_out = 2 * spec_.lstm_hidden;
        break;
      }
      case ModelKind::kBilstmAttention: {
        init_cells(rng, true);
        const std::size_t enc = 2 * spec_.lstm_hidden;
        attention_ = AttentionPoolingT<T>::init("body.attention", enc, enc, rng);
        synthesis_ = DenseLayerT<T>::init("body.synthesis", enc, enc, Activation::kTanh, rng);
        body_out = enc;
        break;
      }
    }
    head_ = DenseLayerT<T>::init("head", body_out, spec_.classes, Activation::kNone, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t init_seed() const { return init_seed_; }

  bool is_recurrent() const {
    return spec_.kind == ModelKind::kLstm || spec_.kind == ModelKind::kBilstm ||
           spec_.kind == ModelKind::kBilstmAttention;
  }

  /// Class probabilities [B x 3]; rows sum to 1. Mode and dropout rng come
  /// from the graph.
  VariableT<T> forward(GraphT<T>& g, const IntMatrix& ids, const Mask& mask) {
    if (ids.cols > spec_.max_len) {
      throw ShapeError("sequence length " + std::to_string(ids.cols) +
                       " exceeds max_len " + std::to_string(spec_.max_len));
    }
    if (mask.rows != ids.rows || mask.cols != ids.cols) {
      throw ShapeError("mask dims do not match token ids");
    }
    auto emb = embedding_.forward(g, ids);
    VariableT<T> body;
    switch (spec_.kind) {
      case ModelKind::kDnn: {
        body = masked_mean_time(emb, mask);
        for (auto& layer : dnn_stack_) body = layer.forward(g, body);
        break;
      }
      case ModelKind::kCnn: {
        body = maxpool1d(conv2_->forward(g, conv1_->forward(g, emb)));
        break;
      }
      case ModelKind::kLstm: {
        body = encode(g, emb, mask, false).final_forward;
        break;
      }
      case ModelKind::kBilstm: {
        auto enc = encode(g, emb, mask, true);
        body = concat_cols(enc.final_forward, enc.final_backward);
        break;
      }
      case ModelKind::kBilstmAttention: {
        auto enc = encode(g, emb, mask, true);
        auto pooled = attention_->forward(g, enc.outputs, mask);
        body = synthesis_->forward(g, pooled.sentence);
        break;
      }
    }
    auto dropped = dropout_.forward(g, body);
    return softmax_rows(head_.forward(g, dropped));
  }

  /// Deterministic inference on a fresh graph.
  TensorT<T> infer_probs(const IntMatrix& ids, const Mask& mask) {
    GraphT<T> g;
    g.mode = Mode::kInfer;
    return forward(g, ids, mask).value();
  }

  /// Argmax class per sentence; ties break toward the lowest class index.
  std::vector<int> predict(const IntMatrix& ids, const Mask& mask) {
    const TensorT<T> probs = infer_probs(ids, mask);
    std::vector<int> labels(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < probs.cols(); ++c)
        if (probs(i, c) > probs(i, best)) best = c;
      labels[i] = static_cast<int>(best);
    }
    return labels;
  }

  /// Trainable parameters in checkpoint order.
  std::vector<ParameterT<T>*> parameters() {
    std::vector<ParameterT<T>*> params;
    embedding_.collect(params);
    for (auto& layer : dnn_stack_) layer.collect(params);
    if (conv1_) conv1_->collect(params);
    if (conv2_) conv2_->collect(params);
    if (lstm_fwd_) lstm_fwd_->collect(params);
    if (lstm_bwd_) lstm_bwd_->collect(params);
    if (gru_fwd_) gru_fwd_->collect(params);
    if (gru_bwd_) gru_bwd_->collect(params);
    if (attention_) attention_->collect(params);
    if (synthesis_) synthesis_->collect(params);
    head_.collect(params);
    return params;
  }

  EmbeddingLayerT<T>& embedding() { return embedding_; }

 private:
  void init_cells(Rng& rng, bool bidirectional) {
    const std::size_t in = spec_.embedding_dim, hidden = spec_.lstm_hidden;
    if (spec_.cell == RecurrentCell::kGru) {
      gru_fwd_ = GRUCellT<T>::init("body.fwd", in, hidden, rng);
      if (bidirectional) gru_bwd_ = GRUCellT<T>::init("body.bwd", in, hidden, rng);
    } else {
      lstm_fwd_ = LSTMCellT<T>::init("body.fwd", in, hidden, rng);
      if (bidirectional) lstm_bwd_ = LSTMCellT<T>::init("body.bwd", in, hidden, rng);
    }
  }

  SequenceEncodingT<T> encode(GraphT<T>& g, VariableT<T> emb, const Mask& mask,
                              bool bidirectional) {
    if (spec_.cell == RecurrentCell::kGru) {
      return bidirectional ? encode_bidirectional(g, *gru_fwd_, *gru_bwd_, emb, mask)
                           : encode_sequence(g, *gru_fwd_, emb, mask);
    }
    return bidirectional ? encode_bidirectional(g, *lstm_fwd_, *lstm_bwd_, emb, mask)
                         : encode_sequence(g, *lstm_fwd_, emb, mask);
  }

  ModelSpec spec_;
  std::uint64_t init_seed_ = 0;
  EmbeddingLayerT<T> embedding_;
  std::vector<DenseLayerT<T>> dnn_stack_;
  std::optional<Conv1DLayerT<T>> conv1_, conv2_;
  std::optional<LSTMCellT<T>> lstm_fwd_, lstm_bwd_;
  std::optional<GRUCellT<T>> gru_fwd_, gru_bwd_;
  std::optional<AttentionPoolingT<T>> attention_;
  std::optional<DenseLayerT<T>> synthesis_;
  DropoutLayerT<T> dropout_;
  DenseLayerT<T> head_;
};

using ClassifierModel = ClassifierModelT<double>;

template <class T = double>
ClassifierModelT<T> build_model(ModelSpec spec, TensorT<T> embedding_matrix,
                                std::uint64_t init_seed) {
  return ClassifierModelT<T>(std::move(spec), std::move(embedding_matrix), init_seed);
}

}  // namespace sentnet
