#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "crystalign/encoders.hpp"
#include "crystalign/error.hpp"
#include "gradcheck.hpp"

using namespace crystalign;
using namespace crystalign::tensor;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.crystal.hidden = 16;
  cfg.crystal.conv_layers = 2;
  cfg.crystal.embed_dim = 24;
  cfg.text.vocab_size = 512;
  cfg.text.hidden = 16;
  cfg.text.embed_dim = 24;
  return cfg;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

CrystalGraph permuted(const CrystalGraph& g, const std::vector<std::uint32_t>& perm) {
  // perm[old] = new
  CrystalGraph p = g;
  const std::size_t f = g.num_atom_features;
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    p.atomic_numbers[perm[i]] = g.atomic_numbers[i];
    std::copy_n(g.node_features.begin() + i * f, f, p.node_features.begin() + perm[i] * f);
  }
  for (auto& e : p.edges) {
    e.src = perm[e.src];
    e.dst = perm[e.dst];
  }
  return p;
}

}  // namespace

TEST(Tokenizer, Examples) {
  EXPECT_EQ(split_words("Narrow Bandgap"), (std::vector<std::string>{"narrow", "bandgap"}));
  EXPECT_EQ(split_words("metal-organic frameworks"), (std::vector<std::string>{"metal", "organic", "frameworks"}));
  EXPECT_TRUE(split_words("").empty());
  EXPECT_TRUE(split_words("!!! ,,").empty());
  EXPECT_EQ(tokenize("Narrow Bandgap"), tokenize("narrow bandgap"));
}

TEST(Tokenizer, StableFnvHash) {
  // published FNV-1a 64 test vectors
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(tokenize("foobar", 1000)[0], 0x85944171f73967e8ULL % 1000);
}

TEST(EncodeText, UnitNormDeterministicAndOrderFree) {
  const DualEncoder<float> model(small_config(), 5);
  const auto a = model.encode_text("layered ferroelectric oxide");
  const auto b = model.encode_text("layered ferroelectric oxide");
  const auto c = model.encode_text("oxide ferroelectric layered");
  EXPECT_EQ(a, b);
  EXPECT_LT(max_abs_diff(a, c), 1e-6);
  EXPECT_NEAR(norm(a), 1.0, 1e-5);
  EXPECT_EQ(a.size(), 24u);
}

TEST(EncodeText, EmptyTextRejected) {
  const DualEncoder<float> model(small_config(), 5);
  for (const char* text : {"", "  ", "--!"}) {
    try {
      model.encode_text(text);
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::EmptyText);
    }
  }
}

TEST(EncodeCrystal, UnitNormAndSameDimensionAsText) {
  const DualEncoder<float> model(small_config(), 5);
  const auto e = model.encode_crystal(build_graph(gradcheck::toy_three_atom()));
  EXPECT_EQ(e.size(), model.encode_text("x").size());
  EXPECT_NEAR(norm(e), 1.0, 1e-5);
}

TEST(EncodeCrystal, ResidualPathWhenMessagesVanish) {
  auto cfg = small_config();
  cfg.crystal.conv_layers = 1;
  DualEncoder<float> model(cfg, 9);
  // softplus(-1e4) underflows to 0, so every message is gate * 0
  for (auto& v : model.crystal.convs[0].core_b.data()) v = -1e4f;
  for (auto& v : model.crystal.convs[0].core_w.data()) v = 0.0f;
  const auto g = build_graph(gradcheck::toy_three_atom());
  const auto got = model.encode_crystal(g);

  const std::size_t h = cfg.crystal.hidden, d = cfg.crystal.embed_dim, f = g.num_atom_features;
  std::vector<double> pooled(h, 0.0);
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    for (std::size_t k = 0; k < h; ++k) {
      double v = model.crystal.atom_b[k];
      for (std::size_t a = 0; a < f; ++a) v += g.node_features[i * f + a] * model.crystal.atom_w.at(a, k);
      pooled[k] += v / static_cast<double>(g.num_nodes());
    }
  }
  std::vector<double> out(d);
  double sq = 0;
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = model.crystal.proj_b[j];
    for (std::size_t k = 0; k < h; ++k) out[j] += pooled[k] * model.crystal.proj_w.at(k, j);
    sq += out[j] * out[j];
  }
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(got[j], out[j] / std::sqrt(sq), 1e-5);
}

TEST(EncodeCrystal, NodePermutationInvariant) {
  const DualEncoder<float> model(small_config(), 5);
  const auto g = build_graph(gradcheck::toy_three_atom());
  const auto p = permuted(g, {2, 0, 1});
  EXPECT_LT(max_abs_diff(model.encode_crystal(g), model.encode_crystal(p)), 1e-5);
}

TEST(EncodeCrystal, TranslationInvariant) {
  const DualEncoder<float> model(small_config(), 5);
  auto s = gradcheck::toy_three_atom();
  const auto a = model.encode_crystal(build_graph(s));
  for (auto& site : s.sites) {
    site.frac = {wrap_unit(site.frac[0] + 0.31), wrap_unit(site.frac[1] + 0.77), wrap_unit(site.frac[2] + 0.05)};
  }
  EXPECT_LT(max_abs_diff(a, model.encode_crystal(build_graph(s))), 1e-5);
}

TEST(EncodeCrystal, SupercellOfOneAtomCrystal) {
  const DualEncoder<float> model(small_config(), 5);
  CrystalStructure s;
  s.id = "cu";
  s.lattice = LatticeParams::cubic(3.6);
  s.sites = {{"Cu", {0, 0, 0}, 1.0}};
  CrystalStructure super = s;
  super.lattice.a = 7.2;
  super.sites = {{"Cu", {0, 0, 0}, 1.0}, {"Cu", {0.5, 0, 0}, 1.0}};
  EXPECT_LT(max_abs_diff(model.encode_crystal(build_graph(s)), model.encode_crystal(build_graph(super))), 1e-4);
}

TEST(EncodeCrystal, BatchMatchesSingle) {
  const DualEncoder<float> model(small_config(), 5);
  Rng rng(2);
  std::vector<CrystalGraph> graphs;
  for (int i = 0; i < 4; ++i) graphs.push_back(build_graph(oracle::random_structure(rng)));
  const auto rows = embed_graphs(model, graphs, 3);
  for (std::size_t i = 0; i < graphs.size(); ++i) EXPECT_LT(max_abs_diff(rows[i], model.encode_crystal(graphs[i])), 1e-5);
}

TEST(EncoderGradient, CrystalPipelineMatchesDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) EXPECT_LT(gradcheck::check_crystal_pipeline(seed), 1e-4) << seed;
}

TEST(EncoderGradient, TextPipelineMatchesDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) EXPECT_LT(gradcheck::check_text_pipeline(seed), 1e-4) << seed;
}

TEST(DualEncoder, CheckpointRoundTrip) {
  const DualEncoder<float> model(small_config(), 11);
  const auto ck = model.to_checkpoint();
  const auto back = DualEncoder<float>::from_checkpoint(Checkpoint::deserialize(ck.serialize()));
  EXPECT_EQ(back.to_checkpoint().serialize(), ck.serialize());
  EXPECT_EQ(back.encode_text("superconductor"), model.encode_text("superconductor"));
  for (const auto& [name, t] : model.named_parameters()) {
    EXPECT_TRUE(name.starts_with("crystal/") || name.starts_with("text/")) << name;
  }
}

TEST(DualEncoder, TextMlpHasThreeLayers) {
  const DualEncoder<float> model(small_config(), 1);
  int layers = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (name.starts_with("text/mlp") && name.ends_with("/weight")) ++layers;
  }
  EXPECT_EQ(layers, 3);
}

TEST(DualEncoder, RejectsMismatchedEdgeWidth) {
  auto cfg = small_config();
  cfg.crystal.edge_features = 40;
  EXPECT_THROW(DualEncoder<float>(cfg, 0), Error);
}
