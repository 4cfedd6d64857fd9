#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentnet/models.hpp"

namespace sentnet {

namespace detail {

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

inline std::uint32_t read_u32_le(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw IoError("checkpoint truncated while reading header length");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t swapped = 0;
    for (int i = 0; i < 8; ++i)
      swapped |= ((bits >> (8 * i)) & 0xFF) << (8 * (7 - i));
    bits = swapped;
  }
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

inline double read_f64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw IoError("checkpoint truncated while reading tensor data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

/// Checkpoint layout: 4-byte little-endian header length, a JSON header
/// (spec, vocab hash, seed, parameter names + shapes), then each parameter's
/// values as little-endian 64-bit floats in header order.
template <class T>
void save_checkpoint(const std::string& path, ClassifierModelT<T>& model,
                     const std::string& vocab_hash) {
  nlohmann::ordered_json header;
  header["format"] = "sentnet.checkpoint";
  header["version"] = 1;
  header["spec"] = model.spec().to_json();
  header["vocab_hash"] = vocab_hash;
  header["seed"] = model.init_seed();
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (ParameterT<T>* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  }
  header["params"] = std::move(params);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string header_text = header.dump();
  detail::write_u32_le(out, static_cast<std::uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (ParameterT<T>* p : model.parameters()) {
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      detail::write_f64_le(out, static_cast<double>(p->value[i]));
  }
  if (!out) throw IoError("failed while writing checkpoint: " + path);
}

template <class T = double>
struct LoadedCheckpoint {
  ClassifierModelT<T> model;
  std::string vocab_hash;
  std::uint64_t seed = 0;
};

namespace detail {

inline nlohmann::json read_header(std::istream& in, const std::string& path) {
  const std::uint32_t header_len = read_u32_le(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw IoError("checkpoint truncated while reading header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "sentnet.checkpoint") {
    throw ParseError("not a sentnet checkpoint: " + path);
  }
  return header;
}

}  // namespace detail

struct CheckpointInfo {
  ModelSpec spec;
  std::string vocab_hash;
  std::uint64_t seed = 0;
};

/// Header only: spec, vocabulary hash and seed, without touching tensors.
inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  const nlohmann::json header = detail::read_header(in, path);
  return CheckpointInfo{ModelSpec::from_json(header.at("spec")),
                        header.at("vocab_hash").get<std::string>(),
                        header.at("seed").get<std::uint64_t>()};
}

/// Rebuilds the model from the stored spec and validates every stored
/// parameter's name and shape against it before loading values.
template <class T = double>
LoadedCheckpoint<T> load_checkpoint(const std::string& path, TensorT<T> embedding_matrix) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  const nlohmann::json header = detail::read_header(in, path);
  const ModelSpec spec = ModelSpec::from_json(header.at("spec"));
  LoadedCheckpoint<T> loaded{
      ClassifierModelT<T>(spec, std::move(embedding_matrix),
                          header.at("seed").get<std::uint64_t>()),
      header.at("vocab_hash").get<std::string>(), header.at("seed").get<std::uint64_t>()};

  const auto params = loaded.model.parameters();
  const auto& stored = header.at("params");
  if (stored.size() != params.size()) {
    throw ShapeError("checkpoint stores " + std::to_string(stored.size()) +
                     " parameters; model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = stored[i].at("name").get<std::string>();
    const Shape shape = stored[i].at("shape").get<Shape>();
    if (name != params[i]->name) {
      throw ShapeError("checkpoint parameter '" + name + "' does not match model '" +
                       params[i]->name + "'");
    }
    if (shape != params[i]->value.shape()) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                       "; model expects " + shape_str(params[i]->value.shape()));
    }
  }
  for (ParameterT<T>* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      p->value[i] = static_cast<T>(detail::read_f64_le(in));
  }
  return loaded;
}

}  // namespace sentnet
