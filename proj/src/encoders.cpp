#include "crystalign/encoders.hpp"

namespace crystalign {

void ModelConfig::validate() const {
  graph.validate();
  if (crystal.edge_features != graph.num_gaussians()) {
    throw Error(Errc::InvalidConfig, "crystal.edge_features (" + std::to_string(crystal.edge_features) +
                                         ") must equal the Gaussian grid size (" +
                                         std::to_string(graph.num_gaussians()) + ")");
  }
  if (crystal.embed_dim != text.embed_dim) {
    throw Error(Errc::InvalidConfig, "crystal and text embedding dimensions differ");
  }
  if (crystal.hidden == 0 || text.hidden == 0 || text.vocab_size == 0 || crystal.embed_dim == 0) {
    throw Error(Errc::InvalidConfig, "encoder widths must be positive");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"graph",
           {{"cutoff", c.graph.cutoff},
            {"max_neighbors", c.graph.max_neighbors},
            {"gauss_min", c.graph.gauss_min},
            {"gauss_max", c.graph.gauss_max},
            {"gauss_step", c.graph.gauss_step},
            {"gauss_sigma", c.graph.gauss_sigma}}},
          {"crystal",
           {{"atom_features", c.crystal.atom_features},
            {"edge_features", c.crystal.edge_features},
            {"hidden", c.crystal.hidden},
            {"conv_layers", c.crystal.conv_layers},
            {"embed_dim", c.crystal.embed_dim}}},
          {"text", {{"vocab_size", c.text.vocab_size}, {"hidden", c.text.hidden}, {"embed_dim", c.text.embed_dim}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto& g = j.at("graph");
  c.graph.cutoff = g.at("cutoff");
  c.graph.max_neighbors = g.at("max_neighbors");
  c.graph.gauss_min = g.at("gauss_min");
  c.graph.gauss_max = g.at("gauss_max");
  c.graph.gauss_step = g.at("gauss_step");
  c.graph.gauss_sigma = g.at("gauss_sigma");
  const auto& cr = j.at("crystal");
  c.crystal.atom_features = cr.at("atom_features");
  c.crystal.edge_features = cr.at("edge_features");
  c.crystal.hidden = cr.at("hidden");
  c.crystal.conv_layers = cr.at("conv_layers");
  c.crystal.embed_dim = cr.at("embed_dim");
  const auto& t = j.at("text");
  c.text.vocab_size = t.at("vocab_size");
  c.text.hidden = t.at("hidden");
  c.text.embed_dim = t.at("embed_dim");
  c.validate();
  return c;
}

GraphBatch make_graph_batch(std::span<const CrystalGraph* const> graphs) {
  GraphBatch b;
  b.num_graphs = graphs.size();
  if (!graphs.empty()) {
    b.atom_features = graphs.front()->num_atom_features;
    b.edge_features = graphs.front()->num_edge_features;
  }
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const CrystalGraph& graph = *graphs[g];
    if (graph.num_atom_features != b.atom_features || graph.num_edge_features != b.edge_features) {
      throw Error(Errc::ShapeMismatch, "graph " + graph.id + " has different feature widths than the batch");
    }
    const auto offset = static_cast<std::uint32_t>(b.num_nodes);
    b.node_features.insert(b.node_features.end(), graph.node_features.begin(), graph.node_features.end());
    b.edge_feature_values.insert(b.edge_feature_values.end(), graph.edge_features.begin(), graph.edge_features.end());
    for (const auto& e : graph.edges) {
      b.src.push_back(offset + e.src);
      b.dst.push_back(offset + e.dst);
    }
    b.node_graph.insert(b.node_graph.end(), graph.num_nodes(), static_cast<std::uint32_t>(g));
    b.num_nodes += graph.num_nodes();
  }
  return b;
}

GraphBatch make_graph_batch(const CrystalGraph& graph) {
  const CrystalGraph* one[] = {&graph};
  return make_graph_batch(one);
}

TokenBatch make_token_batch(std::span<const std::vector<std::uint32_t>> captions) {
  TokenBatch b;
  b.num_texts = captions.size();
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (captions[i].empty()) throw Error(Errc::EmptyText, "caption " + std::to_string(i) + " has no tokens");
    b.ids.insert(b.ids.end(), captions[i].begin(), captions[i].end());
    b.segment.insert(b.segment.end(), captions[i].size(), static_cast<std::uint32_t>(i));
  }
  return b;
}

std::vector<std::vector<float>> embed_graphs(const DualEncoder<float>& model, std::span<const CrystalGraph> graphs,
                                             std::size_t chunk) {
  tensor::NoGradGuard guard;
  std::vector<std::vector<float>> out;
  out.reserve(graphs.size());
  const std::size_t d = model.config().crystal.embed_dim;
  for (std::size_t start = 0; start < graphs.size(); start += chunk) {
    std::vector<const CrystalGraph*> ptrs;
    for (std::size_t i = start; i < std::min(graphs.size(), start + chunk); ++i) ptrs.push_back(&graphs[i]);
    const auto emb = model.crystal.forward(make_graph_batch(ptrs));
    for (std::size_t r = 0; r < ptrs.size(); ++r) {
      out.emplace_back(emb.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                       emb.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  return out;
}

}  // namespace crystalign
