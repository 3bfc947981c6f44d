#pragma once

// Crystal and text encoders mapping into a shared unit-norm embedding space.
//
// Crystal: one-hot atoms -> linear -> n gated graph convolutions
//   v_i <- v_i + sum_j sigmoid(W_f z_ij + b_f) * softplus(W_s z_ij + b_s),
//   z_ij = [v_i | v_j | e_ij]
// -> mean over atoms -> linear projection -> L2 normalize.
//
// Text: hashed token embeddings -> mean over tokens -> 3-layer MLP (ReLU) -> L2 normalize.

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crystalign/checkpoint.hpp"
#include "crystalign/graph.hpp"
#include "crystalign/random.hpp"
#include "crystalign/tensor.hpp"
#include "crystalign/tokenizer.hpp"

namespace crystalign {

struct CrystalEncoderConfig {
  std::size_t atom_features = kNumElements;
  std::size_t edge_features = 41;
  std::size_t hidden = 128;
  std::size_t conv_layers = 3;
  std::size_t embed_dim = 768;
};

struct TextEncoderConfig {
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t hidden = 256;
  std::size_t embed_dim = 768;
};

struct ModelConfig {
  GraphConfig graph;
  CrystalEncoderConfig crystal;
  TextEncoderConfig text;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Graphs packed into one disjoint union for batched message passing.
struct GraphBatch {
  std::size_t num_graphs = 0;
  std::size_t num_nodes = 0;
  std::size_t atom_features = 0;
  std::size_t edge_features = 0;
  std::vector<float> node_features;
  std::vector<float> edge_feature_values;
  std::vector<std::uint32_t> src;
  std::vector<std::uint32_t> dst;
  std::vector<std::uint32_t> node_graph;
};

GraphBatch make_graph_batch(std::span<const CrystalGraph* const> graphs);
GraphBatch make_graph_batch(const CrystalGraph& graph);

/// Caption token lists packed for batched mean pooling.
struct TokenBatch {
  std::size_t num_texts = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> segment;
};

/// Throws Errc::EmptyText if any caption has no tokens.
TokenBatch make_token_batch(std::span<const std::vector<std::uint32_t>> captions);

namespace init {

template <class T>
tensor::Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> w(fan_in * fan_out);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
  return tensor::Tensor<T>({fan_in, fan_out}, std::move(w), true);
}

template <class T>
tensor::Tensor<T> zeros_param(std::size_t n) {
  return tensor::Tensor<T>::zeros({n}, true);
}

template <class T, class U>
tensor::Tensor<T> constant(tensor::Shape shape, const std::vector<U>& values) {
  return tensor::Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()), false);
}

}  // namespace init

template <class T>
using NamedParams = std::vector<std::pair<std::string, tensor::Tensor<T>>>;

template <class T>
struct GatedConv {
  tensor::Tensor<T> filter_w, filter_b;  // sigmoid gate
  tensor::Tensor<T> core_w, core_b;      // softplus message
};

template <class T>
class CrystalEncoder {
 public:
  CrystalEncoder() = default;

  CrystalEncoder(const CrystalEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.conv_layers < 1) throw Error(Errc::InvalidConfig, "crystal encoder needs at least one conv layer");
    atom_w = init::glorot<T>(cfg.atom_features, cfg.hidden, rng);
    atom_b = init::zeros_param<T>(cfg.hidden);
    const std::size_t z_width = 2 * cfg.hidden + cfg.edge_features;
    for (std::size_t l = 0; l < cfg.conv_layers; ++l) {
      GatedConv<T> conv;
      conv.filter_w = init::glorot<T>(z_width, cfg.hidden, rng);
      conv.filter_b = init::zeros_param<T>(cfg.hidden);
      conv.core_w = init::glorot<T>(z_width, cfg.hidden, rng);
      conv.core_b = init::zeros_param<T>(cfg.hidden);
      convs.push_back(std::move(conv));
    }
    proj_w = init::glorot<T>(cfg.hidden, cfg.embed_dim, rng);
    proj_b = init::zeros_param<T>(cfg.embed_dim);
  }

  const CrystalEncoderConfig& config() const { return cfg_; }

  /// Unit-norm embeddings, one row per graph in the batch.
  tensor::Tensor<T> forward(const GraphBatch& batch) const {
    using namespace tensor;
    if (batch.atom_features != cfg_.atom_features) {
      shape_error("crystal encoder atom features", Shape{batch.atom_features}, Shape{cfg_.atom_features});
    }
    if (batch.num_nodes > 0 && batch.src.size() > 0 && batch.edge_features != cfg_.edge_features) {
      shape_error("crystal encoder edge features", Shape{batch.edge_features}, Shape{cfg_.edge_features});
    }
    const auto x = init::constant<T>({batch.num_nodes, batch.atom_features}, batch.node_features);
    const auto e = init::constant<T>({batch.src.size(), cfg_.edge_features}, batch.edge_feature_values);
    Tensor<T> v = add(matmul(x, atom_w), atom_b);
    for (const auto& conv : convs) {
      const Tensor<T> z = concat_cols<T>({gather_rows(v, batch.src), gather_rows(v, batch.dst), e});
      const Tensor<T> gate = sigmoid(add(matmul(z, conv.filter_w), conv.filter_b));
      const Tensor<T> core = softplus(add(matmul(z, conv.core_w), conv.core_b));
      v = add(v, segment_sum(mul(gate, core), batch.src, batch.num_nodes));
    }
    const Tensor<T> pooled = segment_mean(v, batch.node_graph, batch.num_graphs);
    return l2_normalize(add(matmul(pooled, proj_w), proj_b));
  }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out{{"atom_in/weight", atom_w}, {"atom_in/bias", atom_b}};
    for (std::size_t l = 0; l < convs.size(); ++l) {
      const std::string p = "conv" + std::to_string(l) + "/";
      out.emplace_back(p + "filter/weight", convs[l].filter_w);
      out.emplace_back(p + "filter/bias", convs[l].filter_b);
      out.emplace_back(p + "core/weight", convs[l].core_w);
      out.emplace_back(p + "core/bias", convs[l].core_b);
    }
    out.emplace_back("projection/weight", proj_w);
    out.emplace_back("projection/bias", proj_b);
    return out;
  }

  tensor::Tensor<T> atom_w, atom_b;
  std::vector<GatedConv<T>> convs;
  tensor::Tensor<T> proj_w, proj_b;

 private:
  CrystalEncoderConfig cfg_;
};

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;

  TextEncoder(const TextEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    std::vector<T> table(cfg.vocab_size * cfg.hidden);
    for (auto& v : table) v = static_cast<T>(rng.normal());
    embedding = tensor::Tensor<T>({cfg.vocab_size, cfg.hidden}, std::move(table), true);
    mlp_w[0] = init::glorot<T>(cfg.hidden, cfg.hidden, rng);
    mlp_w[1] = init::glorot<T>(cfg.hidden, cfg.hidden, rng);
    mlp_w[2] = init::glorot<T>(cfg.hidden, cfg.embed_dim, rng);
    mlp_b[0] = init::zeros_param<T>(cfg.hidden);
    mlp_b[1] = init::zeros_param<T>(cfg.hidden);
    mlp_b[2] = init::zeros_param<T>(cfg.embed_dim);
  }

  const TextEncoderConfig& config() const { return cfg_; }

  tensor::Tensor<T> forward(const TokenBatch& batch) const {
    using namespace tensor;
    for (auto id : batch.ids) {
      if (id >= cfg_.vocab_size) throw Error(Errc::ShapeMismatch, "token id beyond vocabulary");
    }
    const Tensor<T> pooled = segment_mean(gather_rows(embedding, batch.ids), batch.segment, batch.num_texts);
    const Tensor<T> h1 = relu(add(matmul(pooled, mlp_w[0]), mlp_b[0]));
    const Tensor<T> h2 = relu(add(matmul(h1, mlp_w[1]), mlp_b[1]));
    return l2_normalize(add(matmul(h2, mlp_w[2]), mlp_b[2]));
  }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out{{"embedding", embedding}};
    for (int l = 0; l < 3; ++l) {
      const std::string p = "mlp" + std::to_string(l) + "/";
      out.emplace_back(p + "weight", mlp_w[l]);
      out.emplace_back(p + "bias", mlp_b[l]);
    }
    return out;
  }

  tensor::Tensor<T> embedding;
  tensor::Tensor<T> mlp_w[3], mlp_b[3];

 private:
  TextEncoderConfig cfg_;
};

/// Free-text to embedding, the seam where a different text backbone can plug in.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  /// Unit-norm embedding; throws Errc::EmptyText when the text has no tokens.
  virtual std::vector<float> embed(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
};

template <class T>
class DualEncoder {
 public:
  DualEncoder() = default;

  DualEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng crystal_rng(derive_seed(seed, 1));
    Rng text_rng(derive_seed(seed, 2));
    crystal = CrystalEncoder<T>(cfg.crystal, crystal_rng);
    text = TextEncoder<T>(cfg.text, text_rng);
  }

  const ModelConfig& config() const { return cfg_; }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out;
    for (auto& [name, t] : crystal.named_parameters()) out.emplace_back("crystal/" + name, t);
    for (auto& [name, t] : text.named_parameters()) out.emplace_back("text/" + name, t);
    return out;
  }

  std::vector<tensor::Tensor<T>> parameters() const {
    std::vector<tensor::Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  tensor::Tensor<T> encode_text_batch(std::span<const std::vector<std::uint32_t>> captions) const {
    return text.forward(make_token_batch(captions));
  }

  std::vector<float> encode_text(std::string_view caption) const {
    tensor::NoGradGuard guard;
    const std::vector<std::vector<std::uint32_t>> one{tokenize(caption, cfg_.text.vocab_size)};
    const auto out = encode_text_batch(one);
    return {out.data().begin(), out.data().end()};
  }

  std::vector<float> encode_crystal(const CrystalGraph& graph) const {
    tensor::NoGradGuard guard;
    const auto out = crystal.forward(make_graph_batch(graph));
    return {out.data().begin(), out.data().end()};
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    for (const auto& [name, t] : named_parameters()) ckpt.put(name, t);
    ckpt.metadata()["model"] = to_json(cfg_);
    return ckpt;
  }

  static DualEncoder from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.metadata().contains("model")) throw Error(Errc::Checkpoint, "checkpoint has no model config");
    DualEncoder model(model_config_from_json(ckpt.metadata()["model"]), 0);
    model.load_weights(ckpt);
    return model;
  }

  void load_weights(const Checkpoint& ckpt) {
    for (auto& [name, t] : named_parameters()) ckpt.get_into(name, t);
  }

  CrystalEncoder<T> crystal;
  TextEncoder<T> text;

 private:
  ModelConfig cfg_;
};

class ModelTextEmbedder final : public TextEmbedder {
 public:
  explicit ModelTextEmbedder(std::shared_ptr<const DualEncoder<float>> model) : model_(std::move(model)) {}
  std::vector<float> embed(std::string_view text) const override { return model_->encode_text(text); }
  std::size_t dim() const override { return model_->config().text.embed_dim; }

 private:
  std::shared_ptr<const DualEncoder<float>> model_;
};

/// Embeds graphs in chunks without recording gradients; rows follow input order.
std::vector<std::vector<float>> embed_graphs(const DualEncoder<float>& model,
                                             std::span<const CrystalGraph> graphs,
                                             std::size_t chunk = 64);

}  // namespace crystalign
