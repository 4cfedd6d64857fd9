#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sentnet/random.hpp"
#include "sentnet/tensor.hpp"

namespace sentnet {

/// One labeled, pre-segmented sentence. Context tokens (fourth TSV field)
/// are parsed but not consumed by any model.
struct Example {
  std::string id;
  int label = 0;  // neutral=0, positive=1, negative=2
  std::vector<std::string> tokens;
  std::vector<std::string> context;
};

struct LineError {
  std::size_t line_no = 0;
  std::string message;
};

struct CorpusLoad {
  std::vector<Example> examples;
  std::vector<LineError> errors;
};

inline int parse_label(std::string text) {
  std::transform(text.begin(), text.end(), text.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (text == "neutral" || text == "0") return 0;
  if (text == "positive" || text == "1") return 1;
  if (text == "negative" || text == "2") return 2;
  throw ParseError("unknown label '" + text + "'");
}

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

}  // namespace detail

/// Corpus TSV: `id<TAB>label<TAB>space-separated tokens[<TAB>context]`,
/// UTF-8, `#` lines ignored. Malformed lines land in the error report;
/// valid lines are retained.
inline CorpusLoad load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  CorpusLoad out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = detail::split_fields(line);
    if (fields.size() < 3) {
      out.errors.push_back({line_no, "expected at least 3 tab-separated fields"});
      continue;
    }
    Example ex;
    ex.id = fields[0];
    try {
      ex.label = parse_label(fields[1]);
    } catch (const ParseError& e) {
      out.errors.push_back({line_no, e.what()});
      continue;
    }
    ex.tokens = split_tokens(fields[2]);
    if (ex.tokens.empty()) {
      out.errors.push_back({line_no, "empty token field"});
      continue;
    }
    if (fields.size() > 3) ex.context = split_tokens(fields[3]);
    out.examples.push_back(std::move(ex));
  }
  return out;
}

/// word -> id map with id 0 reserved for the OOV/pad token.
class Vocabulary {
 public:
  Vocabulary() : words_{"<oov>"} { }

  std::size_t size() const { return words_.size(); }

  /// Id of a known word; 0 (OOV) when absent.
  std::int32_t id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? 0 : it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  std::int32_t add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  const std::string& word(std::size_t id) const { return words_.at(id); }

  /// FNV-1a over the word list in id order; identifies the vocabulary in
  /// checkpoint headers.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const char* data, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
      }
    };
    for (const std::string& w : words_) {
      mix(w.data(), w.size());
      mix("\n", 1);
    }
    return h;
  }

  std::string hash_hex() const {
    std::ostringstream os;
    os << std::hex << hash();
    return os.str();
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

template <class T = double>
struct EmbeddingTableT {
  TensorT<T> matrix;  // [vocab x dim], row 0 all-zero

  std::size_t dim() const { return matrix.extent(1); }
  std::size_t vocab_size() const { return matrix.extent(0); }
};

using EmbeddingTable = EmbeddingTableT<double>;

/// word2vec text format: header `count dim`, then `word v1 ... v_dim` lines.
/// The OOV/pad row of zeros is prepended at id 0.
template <class T = double>
std::pair<Vocabulary, EmbeddingTableT<T>> load_embeddings(const std::string& path,
                                                          std::size_t expected_dim = 300) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embeddings file: " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError("embeddings file is empty: " + path);
  std::istringstream hs(header);
  long long count = 0, dim = 0;
  if (!(hs >> count >> dim) || count < 0 || dim <= 0) {
    throw ParseError("malformed embeddings header '" + header + "'");
  }
  if (static_cast<std::size_t>(dim) != expected_dim) {
    throw ConfigError("embedding dimension " + std::to_string(dim) + " != expected " +
                      std::to_string(expected_dim));
  }
  Vocabulary vocab;
  EmbeddingTableT<T> table;
  table.matrix = TensorT<T>({static_cast<std::size_t>(count) + 1,
                             static_cast<std::size_t>(dim)});
  std::string line;
  std::size_t line_no = 1;
  for (long long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) {
      throw ParseError("embeddings file ends at line " + std::to_string(line_no) +
                       "; expected " + std::to_string(count) + " vectors");
    }
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) {
      throw ParseError("line " + std::to_string(line_no) + ": missing word");
    }
    if (vocab.contains(word)) {
      throw ParseError("line " + std::to_string(line_no) + ": duplicate word '" + word + "'");
    }
    const std::int32_t id = vocab.add(word);
    for (long long j = 0; j < dim; ++j) {
      double v;
      if (!(ls >> v)) {
        throw ParseError("line " + std::to_string(line_no) + ": expected " +
                         std::to_string(dim) + " values for '" + word + "'");
      }
      table.matrix(static_cast<std::size_t>(id), static_cast<std::size_t>(j)) =
          static_cast<T>(v);
    }
    double extra;
    if (ls >> extra) {
      throw ParseError("line " + std::to_string(line_no) + ": too many values for '" +
                       word + "'");
    }
  }
  return {std::move(vocab), std::move(table)};
}

struct TokenBatch {
  IntMatrix ids;
  Mask mask;
  std::vector<int> labels;

  std::size_t size() const { return ids.rows; }
};

/// Right-pads with id 0 / mask 0; truncation keeps the first max_len tokens.
inline TokenBatch vectorize(const std::vector<Example>& examples,
                            const std::vector<std::size_t>& rows, const Vocabulary& vocab,
                            std::size_t max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  TokenBatch batch;
  batch.ids = IntMatrix(rows.size(), max_len);
  batch.mask = Mask(rows.size(), max_len);
  batch.labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Example& ex = examples.at(rows[r]);
    const std::size_t n = std::min(ex.tokens.size(), max_len);
    for (std::size_t t = 0; t < n; ++t) {
      batch.ids.at(r, t) = vocab.id_of(ex.tokens[t]);
      batch.mask.at(r, t) = 1;
    }
    batch.labels.push_back(ex.label);
  }
  return batch;
}

inline TokenBatch vectorize(const std::vector<Example>& examples, const Vocabulary& vocab,
                            std::size_t max_len) {
  std::vector<std::size_t> rows(examples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return vectorize(examples, rows, vocab, max_len);
}

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
  std::uint64_t seed = 0;
};

/// Seeded uniform shuffle, then the first floor(0.8 N) examples to train and
/// the rest to validation.
inline DatasetSplit split_train_valid(std::vector<Example> examples, std::uint64_t seed) {
  if (examples.size() < 5) {
    throw ContractError("split_train_valid: need at least 5 examples, got " +
                        std::to_string(examples.size()));
  }
  Rng rng(seed);
  rng.shuffle(examples);
  const std::size_t n_train = examples.size() * 4 / 5;
  DatasetSplit split;
  split.seed = seed;
  split.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train),
                          examples.end());
  return split;
}

/// Overlap key: token sequence joined by single spaces.
inline std::string sentence_key(const Example& ex) {
  std::string key;
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (i) key += ' ';
    key += ex.tokens[i];
  }
  return key;
}

struct DedupeResult {
  std::vector<Example> test;
  std::vector<std::string> removed_ids;
};

/// Removes test sentences whose tag-sentence text also occurs in train.
inline DedupeResult dedupe_overlap(const std::vector<Example>& train,
                                   std::vector<Example> test) {
  std::unordered_set<std::string> train_keys;
  train_keys.reserve(train.size());
  for (const Example& ex : train) train_keys.insert(sentence_key(ex));
  DedupeResult result;
  result.test.reserve(test.size());
  for (Example& ex : test) {
    if (train_keys.count(sentence_key(ex))) {
      result.removed_ids.push_back(ex.id);
    } else {
      result.test.push_back(std::move(ex));
    }
  }
  return result;
}

}  // namespace sentnet
