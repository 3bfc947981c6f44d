#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "crystalign/error.hpp"
#include "crystalign/retrieval.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace crystalign;

namespace {

std::vector<float> unit(std::vector<double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  std::vector<float> out;
  for (double x : v) out.push_back(static_cast<float>(x / std::sqrt(s)));
  return out;
}

EmbeddingIndex random_index(Rng& rng, std::size_t n, std::size_t d, const std::vector<std::string>& titles = {}) {
  EmbeddingIndex index(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = oracle::random_unit_rows(rng, 1, d);
    char id[16];
    std::snprintf(id, sizeof id, "id%03zu", i);
    index.add(id, unit(row), {i < titles.size() ? titles[i] : "title " + std::to_string(i), "X", ""});
  }
  return index;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::Io;
}

// Deterministic embeddings for a fixed set of strings.
class TableEmbedder final : public TextEmbedder {
 public:
  TableEmbedder(std::map<std::string, std::vector<float>> table, std::size_t d) : table_(std::move(table)), d_(d) {}
  std::vector<float> embed(std::string_view text) const override { return table_.at(std::string(text)); }
  std::size_t dim() const override { return d_; }

 private:
  std::map<std::string, std::vector<float>> table_;
  std::size_t d_;
};

}  // namespace

TEST(Query, ExactRowRanksFirst) {
  Rng rng(1);
  const auto index = random_index(rng, 20, 16);
  const auto row = index.row(7);
  const auto hits = query(index, std::span<const float>(row.data(), row.size()), 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, "id007");
  EXPECT_NEAR(hits[0].score, 1.0, 1e-6);
}

TEST(Query, OrthogonalQueryFallsBackToIdOrder) {
  EmbeddingIndex index(3);
  for (const char* id : {"c", "a", "b"}) index.add(id, unit({1, 0, 0}));
  index.add("d", unit({0, 1, 0}));
  const std::vector<double> q = {0, 0, 1};
  const auto hits = query(index, q, 4);
  std::vector<std::string> ids;
  for (const auto& h : hits) {
    ids.push_back(h.id);
    EXPECT_EQ(h.score, 0.0);
  }
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(Query, MatchesBruteForceSort) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto index = random_index(rng, 10, 32);
    const auto q = oracle::random_unit_rows(rng, 1, 32);
    std::vector<std::pair<double, std::string>> want;
    for (std::size_t i = 0; i < index.size(); ++i) {
      double dot = 0;
      for (std::size_t k = 0; k < 32; ++k) dot += index.row(i)[k] * q[k];
      want.emplace_back(-dot, index.id(i));
    }
    std::sort(want.begin(), want.end());
    const auto hits = query(index, q, 10);
    for (std::size_t i = 0; i < 10; ++i) {
      EXPECT_EQ(hits[i].id, want[i].second);
      EXPECT_NEAR(hits[i].score, -want[i].first, 1e-6);
      EXPECT_GE(hits[i].score, -1.0);
      EXPECT_LE(hits[i].score, 1.0);
    }
  }
}

TEST(Query, InvariantToRowOrder) {
  Rng rng(3);
  const auto a = random_index(rng, 30, 8);
  EmbeddingIndex b(8);
  for (std::size_t i = a.size(); i-- > 0;) b.add(a.id(i), a.row(i), a.metadata(i));
  const auto q = oracle::random_unit_rows(rng, 1, 8);
  const auto ha = query(a, q, 30), hb = query(b, q, 30);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(ha[i].id, hb[i].id);
}

TEST(Query, Errors) {
  const EmbeddingIndex empty(4);
  const std::vector<double> q = {1, 0, 0, 0};
  EXPECT_EQ(code_of([&] { query(empty, q, 1); }), Errc::EmptyIndex);
  EmbeddingIndex index(4);
  index.add("a", unit({1, 0, 0, 0}));
  EXPECT_THROW(query(index, q, 2), Error);
  EXPECT_THROW(query(index, q, 0), Error);
  EXPECT_EQ(code_of([&] { index.add("a", unit({0, 1, 0, 0})); }), Errc::DuplicateId);
  EXPECT_EQ(code_of([&] { index.add("z", std::vector<float>{1, 1, 0, 0}); }), Errc::NonUnitRows);
  EXPECT_EQ(code_of([&] { index.add("y", std::vector<float>{1, 0}); }), Errc::ShapeMismatch);
}

TEST(EmbeddingIndexIo, SaveLoadRoundTrip) {
  testutil::TempDir dir("index");
  Rng rng(4);
  auto index = random_index(rng, 12, 8, {"Title, with \"quotes\""});
  index.save(dir / "index.ckpt");
  EXPECT_TRUE(std::filesystem::exists(EmbeddingIndex::sidecar_path(dir / "index.ckpt")));
  const auto back = EmbeddingIndex::load(dir / "index.ckpt");
  ASSERT_EQ(back.size(), index.size());
  EXPECT_EQ(back.ids(), index.ids());
  EXPECT_EQ(back.metadata(0).title, "Title, with \"quotes\"");
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_TRUE(std::equal(back.row(i).begin(), back.row(i).end(), index.row(i).begin()));
  }
}

TEST(LabelOracle, Examples) {
  const auto sc = LabelRule::for_keyword("superconductor");
  EXPECT_TRUE(label_oracle("Pressure-induced superconductivity in X", sc));
  EXPECT_TRUE(label_oracle("A superconductive phase", sc));
  EXPECT_FALSE(label_oracle("A novel semiconductor device", sc));
  EXPECT_TRUE(label_oracle("Thermoelectrics of Zintl phases", LabelRule::for_keyword("thermoelectric")));
  EXPECT_TRUE(label_oracle("Ferromagnetism in thin films", LabelRule::for_keyword("ferromagnetic")));
  EXPECT_TRUE(label_oracle("Bright electroluminescent devices", LabelRule::for_keyword("electroluminescence")));
}

TEST(LabelOracle, GenericAndMultiWordRules) {
  const auto mof = LabelRule::for_keyword("metal-organic framework");
  EXPECT_TRUE(label_oracle("Porous metal-organic frameworks for storage", mof));
  EXPECT_FALSE(label_oracle("Organic metal framework", mof));
  const auto cat = LabelRule::for_keyword("catalysts");
  EXPECT_EQ(cat.stems, (std::vector<std::string>{"catalyst"}));
  EXPECT_TRUE(label_oracle("New catalyst", cat));
  LabelRule r;
  r.keyword = "x";
  r.stems = {"zzz"};
  r.extra_variants = {"high pressure"};
  EXPECT_TRUE(label_oracle("Behavior at high pressure", r));
  EXPECT_FALSE(label_oracle("Behavior at higher pressures", r));
}

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(std::vector<double>{0.9, 0.8, 0.1}, std::vector<std::uint8_t>{1, 1, 0}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<std::uint8_t>{1, 0, 1, 0}), 0.5);
  EXPECT_EQ(roc_auc(std::vector<double>{0.9, 0.2, 0.5, 0.4}, std::vector<std::uint8_t>{1, 0, 0, 1}), 0.75);
  EXPECT_EQ(code_of([] { roc_auc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}); }),
            Errc::DegenerateLabels);
}

TEST(RocAuc, MatchesPairwiseOracle) {
  Rng rng(5);
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (int t = 0; t < 1000; ++t) {
    oracle::random_ranking(rng, s, y);
    EXPECT_NEAR(roc_auc(s, y), oracle::roc_auc(s, y), 1e-12);
  }
}

TEST(RocAuc, InvariantUnderIncreasingTransform) {
  Rng rng(6);
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (int t = 0; t < 200; ++t) {
    oracle::random_ranking(rng, s, y);
    std::vector<double> u;
    for (double v : s) u.push_back(std::exp(3 * v) + 7);
    EXPECT_NEAR(roc_auc(s, y), roc_auc(u, y), 1e-12);
  }
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(average_precision(std::vector<double>{4, 3, 2, 1}, std::vector<std::uint8_t>{1, 1, 0, 0}), 1.0);
  EXPECT_NEAR(average_precision(std::vector<double>{4, 3, 2, 1}, std::vector<std::uint8_t>{1, 0, 1, 0}), 5.0 / 6.0,
              1e-15);
  EXPECT_EQ(average_precision(std::vector<double>{2, 1}, std::vector<std::uint8_t>{0, 1}), 0.5);
  EXPECT_EQ(code_of([] { average_precision(std::vector<double>{1}, std::vector<std::uint8_t>{0}); }),
            Errc::DegenerateLabels);
}

TEST(AveragePrecision, MatchesPrecisionOracle) {
  Rng rng(7);
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (int t = 0; t < 1000; ++t) {
    oracle::random_ranking(rng, s, y);
    EXPECT_NEAR(average_precision(s, y), oracle::average_precision(s, y), 1e-12);
  }
}

TEST(RocCurve, EndpointsAndMonotone) {
  const std::vector<double> s = {0.9, 0.2, 0.5, 0.4, 0.5};
  const std::vector<std::uint8_t> y = {1, 0, 0, 1, 1};
  const auto c = roc_curve(s, y);
  EXPECT_EQ(c.front().fpr, 0.0);
  EXPECT_EQ(c.front().tpr, 0.0);
  EXPECT_EQ(c.back().fpr, 1.0);
  EXPECT_EQ(c.back().tpr, 1.0);
  for (std::size_t i = 1; i < c.size(); ++i) {
    EXPECT_GE(c[i].fpr, c[i - 1].fpr);
    EXPECT_GE(c[i].tpr, c[i - 1].tpr);
  }
}

TEST(BalancedAp, SubsetSizeAndDeterminism) {
  Rng rng(8);
  std::vector<std::string> titles;
  for (int i = 0; i < 105; ++i) titles.push_back(i < 5 ? "superconducting film" : "plain oxide");
  const auto index = random_index(rng, 105, 8, titles);
  const auto q = oracle::random_unit_rows(rng, 1, 8);
  const auto rule = LabelRule::for_keyword("superconductor");
  const auto a = balanced_ap(index, q, rule, 42), b = balanced_ap(index, q, rule, 42);
  EXPECT_EQ(a.ids.size(), 10u);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.ap, b.ap);
  const auto c = balanced_ap(index, q, rule, 43);
  EXPECT_EQ(c.ids.size(), 10u);
}

TEST(BalancedAp, PerfectSeparationGivesOne) {
  EmbeddingIndex index(2);
  for (int i = 0; i < 30; ++i) {
    const bool pos = i % 6 == 0;
    index.add("r" + std::to_string(i), pos ? unit({1, 0.01 * i}) : unit({0.01 * i, 1}),
              {pos ? "thermoelectric alloy" : "oxide", "", ""});
  }
  const std::vector<double> q = {1, 0};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_EQ(balanced_ap(index, q, LabelRule::for_keyword("thermoelectric"), seed).ap, 1.0);
  }
}

TEST(ConceptCentroid, Cases) {
  EmbeddingIndex index(3);
  index.add("a", unit({1, 2, 3}), {"ferroelectric one", "", ""});
  index.add("b", unit({0, 1, 0}), {"other", "", ""});
  const auto rule = LabelRule::for_keyword("ferroelectric");
  const auto one = concept_centroid(index, rule);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(one[k], index.row(0)[k], 1e-7);

  EmbeddingIndex anti(2);
  anti.add("a", unit({1, 0}), {"ferroelectric", "", ""});
  anti.add("b", unit({-1, 0}), {"ferroelectric", "", ""});
  EXPECT_EQ(code_of([&] { concept_centroid(anti, rule); }), Errc::NumericalWarning);
  EXPECT_EQ(code_of([&] { concept_centroid(index, LabelRule::for_keyword("thermoelectric")); }), Errc::NoMatches);
}

TEST(ConceptCentroid, MatchesMeanAndNormalize) {
  Rng rng(9);
  const auto index = random_index(rng, 6, 5, {"ferroelectric a", "x", "ferroelectric b", "y", "ferroelectrics", "z"});
  const auto got = concept_centroid(index, LabelRule::for_keyword("ferroelectric"));
  std::vector<double> mean(5, 0.0);
  for (std::size_t r : {0u, 2u, 4u}) {
    for (std::size_t k = 0; k < 5; ++k) mean[k] += index.row(r)[k] / 3.0;
  }
  double n = 0;
  for (double v : mean) n += v * v;
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(got[k], mean[k] / std::sqrt(n), 1e-9);
}

TEST(EvaluateKeywords, TableAndNaRows) {
  EmbeddingIndex index(2);
  for (int i = 0; i < 20; ++i) {
    const bool pos = i < 8;
    index.add("r" + std::to_string(i), pos ? unit({1, 0.02 * i}) : unit({0.02 * i, 1}),
              {pos ? "superconducting wire" : "layered oxide", "", ""});
  }
  const TableEmbedder emb({{"superconductor", unit({1, 0})}, {"thermoelectric", unit({0, 1})}}, 2);
  const std::vector<LabelRule> rules = {LabelRule::for_keyword("superconductor"),
                                        LabelRule::for_keyword("thermoelectric")};
  const auto e1 = evaluate_keywords(index, rules, emb, 1);
  ASSERT_EQ(e1.rows.size(), 2u);
  EXPECT_EQ(e1.rows[0].n_pos, 8u);
  EXPECT_EQ(*e1.rows[0].roc_auc, 1.0);
  EXPECT_EQ(*e1.rows[0].balanced_ap, 1.0);
  EXPECT_FALSE(e1.rows[1].roc_auc.has_value());
  EXPECT_EQ(*e1.mean_roc_auc, 1.0);

  const auto e2 = evaluate_keywords(index, rules, emb, 1);
  EXPECT_EQ(e2.rows[0].roc_auc, e1.rows[0].roc_auc);
  EXPECT_EQ(e2.rows[0].balanced_ap, e1.rows[0].balanced_ap);

  testutil::TempDir dir("metrics");
  write_metrics_csv(dir / "metrics.csv", e1);
  std::ifstream in(dir / "metrics.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("keyword,n_pos,roc_auc,balanced_ap"), std::string::npos);
  EXPECT_NE(text.find("thermoelectric,0,n/a,n/a"), std::string::npos);
  EXPECT_NE(text.find("mean,"), std::string::npos);
}
