#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "crystalign/atlas.hpp"
#include "crystalign/error.hpp"
#include "crystalign/random.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace crystalign;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::Io;
}

// `per` points around each of the given centers, unit spread.
PointSet blobs(Rng& rng, const PointSet& centers, std::size_t per, std::vector<int>* labels = nullptr) {
  PointSet pts;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      std::vector<double> p = centers[c];
      for (auto& v : p) v += 0.5 * rng.normal();
      pts.push_back(std::move(p));
      if (labels) labels->push_back(static_cast<int>(c));
    }
  }
  return pts;
}

double jsd_oracle(const TermWeights& p, const TermWeights& q) {
  std::map<std::string, double> m;
  for (const auto& [t, v] : p) m[t] += 0.5 * v;
  for (const auto& [t, v] : q) m[t] += 0.5 * v;
  double out = 0;
  for (const auto& [t, v] : p) out += 0.5 * v * std::log2(v / m[t]);
  for (const auto& [t, v] : q) out += 0.5 * v * std::log2(v / m[t]);
  return out;
}

std::vector<float> unitf(std::vector<double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  std::vector<float> out;
  for (double x : v) out.push_back(static_cast<float>(x / std::sqrt(s)));
  return out;
}

}  // namespace

TEST(Kmeans, SingleClusterIsTheMean) {
  const PointSet pts = {{0, 0}, {2, 0}, {4, 6}};
  const auto m = kmeanspp(pts, 1, 0);
  EXPECT_NEAR(m.centroids[0][0], 2.0, 1e-12);
  EXPECT_NEAR(m.centroids[0][1], 2.0, 1e-12);
  EXPECT_NEAR(m.inertia, 4 + 4 + 4 + 4 + 0 + 16, 1e-9);
}

TEST(Kmeans, KEqualsNHasZeroInertia) {
  Rng rng(1);
  PointSet pts;
  for (int i = 0; i < 12; ++i) pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  const auto m = kmeanspp(pts, 12, 4);
  EXPECT_NEAR(m.inertia, 0.0, 1e-20);
  std::vector<std::uint32_t> a = m.assignments;
  std::sort(a.begin(), a.end());
  EXPECT_EQ(std::unique(a.begin(), a.end()), a.end());
}

TEST(Kmeans, SeparatedBlobsRecovered) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<int> labels;
    const auto pts = blobs(rng, {{0, 0}, {10, 10}}, 25, &labels);
    const auto m = kmeanspp(pts, 2, seed);
    EXPECT_EQ(majority_agreement(m.assignments, labels), 1.0) << seed;
  }
}

TEST(Kmeans, InertiaNeverIncreases) {
  Rng rng(3);
  const auto pts = blobs(rng, {{0, 0, 0}, {3, 0, 1}, {0, 4, 0}, {2, 2, 2}}, 30);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = kmeanspp(pts, 5, seed);
    for (std::size_t i = 1; i < m.inertia_history.size(); ++i) {
      EXPECT_LE(m.inertia_history[i], m.inertia_history[i - 1] + 1e-9);
    }
    EXPECT_LE(m.iterations, kKmeansMaxIterations);
  }
}

TEST(Kmeans, DeterministicAndErrors) {
  Rng rng(4);
  const auto pts = blobs(rng, {{0, 0}, {5, 5}, {0, 5}}, 10);
  const auto a = kmeanspp(pts, 3, 9), b = kmeanspp(pts, 3, 9);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.inertia, b.inertia);
  EXPECT_EQ(code_of([&] { kmeanspp(pts, 31, 0); }), Errc::TooFewPoints);
  EXPECT_EQ(code_of([&] { kmeanspp(pts, 0, 0); }), Errc::TooFewPoints);
}

TEST(Kmeans, DuplicatePointsStillFillEveryCluster) {
  PointSet pts(10, std::vector<double>{1.0, 1.0});
  pts.push_back({5, 5});
  pts.push_back({6, 5});
  const auto m = kmeanspp(pts, 3, 0);
  std::vector<int> sizes(3, 0);
  for (auto c : m.assignments) ++sizes[c];
  for (int s : sizes) EXPECT_GT(s, 0);
}

TEST(MajorityAgreement, Example) {
  const std::vector<std::uint32_t> c = {0, 0, 0, 1, 1};
  const std::vector<int> y = {7, 7, 8, 9, 9};
  EXPECT_NEAR(majority_agreement(c, y), 0.8, 1e-15);
}

TEST(Tsne, RowEntropyMatchesPerplexity) {
  Rng rng(5);
  const auto pts = blobs(rng, {{0, 0, 0}, {4, 0, 0}}, 30);
  for (double perp : {5.0, 15.0, 30.0}) {
    const auto p = conditional_affinities(pts, perp);
    const std::size_t n = pts.size();
    for (std::size_t i = 0; i < n; ++i) {
      double h = 0, total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = p[i * n + j];
        if (i == j) EXPECT_EQ(v, 0.0);
        total += v;
        if (v > 0) h -= v * std::log2(v);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_NEAR(h, std::log2(perp), 1e-4) << perp << " row " << i;
    }
  }
}

TEST(Tsne, JointAffinitiesSymmetric) {
  Rng rng(6);
  const auto pts = blobs(rng, {{0, 0}}, 20);
  const auto p = joint_affinities(pts, 5.0);
  double total = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 20; ++j) {
      EXPECT_NEAR(p[i * 20 + j], p[j * 20 + i], 1e-15);
      total += p[i * 20 + j];
    }
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Tsne, GradientMatchesDifferences) {
  Rng rng(7);
  const auto pts = blobs(rng, {{0, 0, 0}, {3, 3, 0}}, 8);
  const std::size_t n = pts.size();
  const auto p = joint_affinities(pts, 4.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> y(2 * n);
    for (auto& v : y) v = rng.normal();
    const auto g = tsne_gradient(p, y, n);
    const auto f = [&](const std::vector<double>& x) { return tsne_kl(p, x, n); };
    EXPECT_LT(oracle::max_rel_error(f, y, g), 1e-4);
  }
}

TEST(Tsne, KlDropsAndBlobsSeparate) {
  Rng rng(8);
  std::vector<int> labels;
  const auto pts = blobs(rng, {{0, 0, 0, 0}, {8, 0, 0, 0}, {0, 8, 0, 0}}, 20, &labels);
  TsneConfig cfg;
  cfg.perplexity = 10;
  cfg.iterations = 500;
  const auto r = tsne(pts, cfg, 1);
  EXPECT_LT(r.final_kl, r.initial_kl);
  PointSet coords;
  for (const auto& c : r.coords) coords.push_back({c[0], c[1]});
  EXPECT_EQ(majority_agreement(kmeanspp(coords, 3, 0).assignments, labels), 1.0);

  const auto again = tsne(pts, cfg, 1);
  EXPECT_EQ(again.coords, r.coords);
}

TEST(Tsne, InputErrors) {
  EXPECT_EQ(code_of([] { conditional_affinities({{0.0}, {1.0}, {2.0}}, 1.0); }), Errc::TooFewPoints);
  EXPECT_EQ(code_of([] { conditional_affinities({{0.0}, {1.0}, {2.0}, {3.0}, {4.0}}, 30.0); }),
            Errc::PerplexityTooHigh);
  TsneConfig bad;
  bad.learning_rate = -1.0;
  EXPECT_EQ(code_of([&] { tsne({{0.0}, {1.0}, {2.0}, {3.0}, {4.0}}, bad, 0); }), Errc::InvalidConfig);
}

TEST(Tfidf, Example) {
  const auto m = tfidf({"a a b"});
  ASSERT_EQ(m.vectors.size(), 1u);
  EXPECT_NEAR(m.vectors[0].at("a"), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.vectors[0].at("b"), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(code_of([] { tfidf({}); }), Errc::EmptyCorpus);
}

TEST(Tfidf, IdfFormulaAndNormalization) {
  const std::vector<std::string> titles = {"Layered oxide superconductor", "oxide film", "oxide thermoelectric film",
                                           "!!!", "Hydride superconductor under pressure"};
  const auto m = tfidf(titles);
  const double n = 5;
  EXPECT_NEAR(m.idf.at("oxide"), std::log((1 + n) / (1 + 3)) + 1, 1e-12);
  EXPECT_NEAR(m.idf.at("hydride"), std::log((1 + n) / (1 + 1)) + 1, 1e-12);
  EXPECT_GT(m.idf.at("hydride"), m.idf.at("film"));
  EXPECT_GT(m.idf.at("film"), m.idf.at("oxide"));
  EXPECT_TRUE(m.vectors[3].empty());
  for (const auto& v : m.vectors) {
    if (v.empty()) continue;
    double s = 0;
    for (const auto& [t, w] : v) s += w;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Jsd, Examples) {
  const TermWeights p = {{"a", 1.0}};
  const TermWeights q = {{"a", 0.5}, {"b", 0.5}};
  EXPECT_EQ(jsd(p, p), 0.0);
  EXPECT_NEAR(jsd({{"a", 1.0}}, {{"b", 1.0}}), 1.0, 1e-15);
  EXPECT_NEAR(jsd(p, q), 0.311278, 1e-6);
  EXPECT_EQ(code_of([] { jsd({{"a", 0.5}}, {{"a", 1.0}}); }), Errc::NotNormalized);
}

TEST(Jsd, MatchesOracleBoundedAndSymmetric) {
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    TermWeights p, q;
    double sp = 0, sq = 0;
    for (int k = 0; k < 6; ++k) {
      if (rng.below(3)) sp += p["t" + std::to_string(k)] = rng.uniform(0.01, 1);
      if (rng.below(3)) sq += q["t" + std::to_string(k)] = rng.uniform(0.01, 1);
    }
    if (p.empty()) sp += p["t0"] = 1;
    if (q.empty()) sq += q["t5"] = 1;
    for (auto& [k, v] : p) v /= sp;
    for (auto& [k, v] : q) v /= sq;
    const double d = jsd(p, q);
    EXPECT_NEAR(d, jsd_oracle(p, q), 1e-12);
    EXPECT_NEAR(d, jsd(q, p), 1e-15);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0 + 1e-12);
  }
}

TEST(JsdMatrix, DisjointClustersAndDiagonal) {
  const auto m = tfidf({"alpha beta", "alpha", "gamma delta", "gamma", "epsilon"});
  const std::vector<std::uint32_t> a = {0, 0, 1, 1, 2};
  const auto r = jsd_matrix(a, 3, m.vectors);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.sjs[i][i], r.js[i][i], 1e-15);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(r.sjs[i][j], r.sjs[j][i], 1e-15);
      if (i != j) {
        EXPECT_NEAR(r.js[i][j], 1.0, 1e-12);
        EXPECT_LT(r.sjs[i][i], r.sjs[i][j]);
      }
    }
  }
  EXPECT_NEAR(r.js[2][2], 0.0, 1e-12);
  const auto one = jsd_matrix(std::vector<std::uint32_t>(5, 0), 1, m.vectors);
  EXPECT_EQ(one.js.size(), 1u);
  EXPECT_GT(one.js[0][0], 0.0);
}

TEST(JsdMatrix, ClusterWithoutTokensRejected) {
  const auto m = tfidf({"alpha", "!!!"});
  const std::vector<std::uint32_t> a = {0, 1};
  EXPECT_EQ(code_of([&] { jsd_matrix(a, 2, m.vectors); }), Errc::EmptyCluster);
}

TEST(ClusterLabel, HeaviestTermsWithTies) {
  const TermWeights c = {{"zeta", 0.3}, {"alpha", 0.3}, {"beta", 0.1}, {"gamma", 0.2}, {"delta", 0.1}};
  EXPECT_EQ(cluster_label(c), "alpha, zeta, gamma");
}

TEST(Heatmap, CosinesInRange) {
  Rng rng(10);
  EmbeddingIndex index(4);
  for (int i = 0; i < 10; ++i) index.add("r" + std::to_string(i), unitf(oracle::random_unit_rows(rng, 1, 4)));
  const auto q = unitf(oracle::random_unit_rows(rng, 1, 4));
  const auto h = heatmap_overlay(index, q);
  ASSERT_EQ(h.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    double dot = 0;
    for (int k = 0; k < 4; ++k) dot += double(index.row(i)[k]) * q[k];
    EXPECT_NEAR(h[i], dot, 1e-6);
    EXPECT_GE(h[i], -1.0);
    EXPECT_LE(h[i], 1.0);
  }
  EXPECT_EQ(code_of([&] { heatmap_overlay(EmbeddingIndex(4), q); }), Errc::EmptyIndex);
}

TEST(BuildAtlas, DeterministicAndRoundTrips) {
  Rng rng(11);
  EmbeddingIndex index(6);
  const char* words[3] = {"superconducting hydride", "thermoelectric telluride", "porous framework"};
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 12; ++i) {
      std::vector<double> v(6, 0.0);
      v[2 * c] = 1.0;
      for (auto& x : v) x += 0.1 * rng.normal();
      index.add("m" + std::to_string(c) + "-" + std::to_string(i), unitf(v),
                {std::string(words[c]) + " sample " + std::to_string(i), "", ""});
    }
  }
  AtlasConfig cfg;
  cfg.k = 3;
  cfg.tsne.perplexity = 8;
  cfg.tsne.iterations = 300;
  cfg.seed = 2;
  const auto a = build_atlas(index, cfg), b = build_atlas(index, cfg);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  ASSERT_EQ(a.coords.size(), 36u);
  ASSERT_EQ(a.cluster_info.size(), 3u);
  ASSERT_EQ(a.jsd.size(), 3u);
  std::size_t total = 0;
  for (const auto& c : a.cluster_info) total += c.size;
  EXPECT_EQ(total, 36u);
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c) labels.insert(labels.end(), 12, c);
  EXPECT_EQ(majority_agreement(a.clusters, labels), 1.0);

  testutil::TempDir dir("atlas");
  save_atlas(dir / "atlas.json", a);
  EXPECT_EQ(to_json(load_atlas(dir / "atlas.json")).dump(), to_json(a).dump());
}

TEST(PropertyOverlay, AlignsById) {
  testutil::TempDir dir("overlay");
  {
    std::ofstream out(dir / "p.csv");
    out << "id,band_gap\nb,1.5\na,0.25\nzz,9\n";
  }
  const auto v = load_property_overlay(dir / "p.csv", {"a", "b", "c"});
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0], 0.25);
  EXPECT_EQ(v[1], 1.5);
  EXPECT_FALSE(v[2].has_value());
}
