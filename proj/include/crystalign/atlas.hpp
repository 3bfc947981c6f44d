#pragma once

// Materials-space map: k-means++ clusters, exact t-SNE coordinates, TF-IDF title
// distributions and the Jensen-Shannon cluster-coherence matrices.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crystalign/retrieval.hpp"

namespace crystalign {

using PointSet = std::vector<std::vector<double>>;

struct ClusterModel {
  std::size_t k = 0;
  std::vector<std::uint32_t> assignments;
  PointSet centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
  std::vector<double> inertia_history;  // after each assignment step
};

inline constexpr std::size_t kKmeansMaxIterations = 300;

/// k-means++ seeding then Lloyd iterations until the assignment is a fixed point
/// (or max_iterations). Empty clusters are re-seeded with the point farthest from
/// its centroid. Throws Errc::TooFewPoints unless n >= k >= 1.
ClusterModel kmeanspp(const PointSet& points, std::size_t k, std::uint64_t seed,
                      std::size_t max_iterations = kKmeansMaxIterations);

/// Fraction of points whose cluster's majority label equals their own label.
double majority_agreement(std::span<const std::uint32_t> clusters, std::span<const int> labels);

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 0.0;  // 0 = max(n / early_exaggeration / 4, 50)
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double init_sigma = 1e-4;
};

inline constexpr double kPerplexityTolerance = 1e-5;  // bits
inline constexpr int kPerplexityMaxSteps = 50;

/// Row-stochastic p(j|i) (n*n, zero diagonal) with each row's entropy matched to
/// log2(perplexity). Throws Errc::TooFewPoints (n < 4) or Errc::PerplexityTooHigh.
std::vector<double> conditional_affinities(const PointSet& points, double perplexity);

/// (P_cond + P_condᵀ) / 2n, floored at 1e-12.
std::vector<double> joint_affinities(const PointSet& points, double perplexity);

/// KL(P || Q) for 2-D coordinates y (n*2, row-major) under the Student-t kernel.
double tsne_kl(std::span<const double> p, std::span<const double> y, std::size_t n);

/// d KL / d y (n*2).
std::vector<double> tsne_gradient(std::span<const double> p, std::span<const double> y, std::size_t n);

struct TsneResult {
  std::vector<std::array<double, 2>> coords;
  double initial_kl = 0.0;
  double final_kl = 0.0;
};

TsneResult tsne(const PointSet& points, const TsneConfig& cfg, std::uint64_t seed);

using TermWeights = std::map<std::string, double>;

struct TfidfModel {
  std::vector<TermWeights> vectors;  // empty map for titles without tokens
  std::map<std::string, double> idf;
};

/// tf = count in title, idf = ln((1 + n) / (1 + df)) + 1, then L1-normalized.
/// Throws Errc::EmptyCorpus for no titles.
TfidfModel tfidf(const std::vector<std::string>& titles);

inline constexpr double kNormalizationTolerance = 1e-6;

/// Jensen-Shannon divergence in bits. Throws Errc::NotNormalized.
double jsd(const TermWeights& p, const TermWeights& q);

struct JsdMatrices {
  std::vector<std::vector<double>> js;   // centroid of i vs members of j
  std::vector<std::vector<double>> sjs;  // (js + jsᵀ) / 2
  std::vector<TermWeights> centroids;
};

/// Members with an empty TF-IDF vector are left out of the averages.
/// Throws Errc::EmptyCluster if a cluster has no usable member.
JsdMatrices jsd_matrix(std::span<const std::uint32_t> assignments, std::size_t k,
                       const std::vector<TermWeights>& vectors);

/// The three heaviest terms, ties by term, joined with ", ".
std::string cluster_label(const TermWeights& centroid, std::size_t terms = 3);

/// cos(row_i, q) for every row. Throws Errc::EmptyIndex.
std::vector<double> heatmap_overlay(const EmbeddingIndex& index, std::span<const float> q);

struct ClusterInfo {
  std::uint32_t id = 0;
  std::string label;
  std::size_t size = 0;
};

struct Atlas {
  std::vector<std::string> ids;
  std::vector<std::array<double, 2>> coords;
  std::vector<std::uint32_t> clusters;
  std::vector<ClusterInfo> cluster_info;
  std::vector<std::vector<double>> jsd;  // symmetrized
};

struct AtlasConfig {
  std::size_t k = 20;
  TsneConfig tsne;
  std::uint64_t seed = 0;
};

/// Clusters and projects the index rows; TF-IDF over the index titles.
Atlas build_atlas(const EmbeddingIndex& index, const AtlasConfig& cfg);

/// {points: [{id, x, y, cluster}], clusters: [{id, label, size}], jsd: k x k}
nlohmann::json to_json(const Atlas& atlas);
Atlas atlas_from_json(const nlohmann::json& j);
void save_atlas(const std::filesystem::path& path, const Atlas& atlas);
Atlas load_atlas(const std::filesystem::path& path);

/// CSV id,value (header optional) aligned to `ids`; ids without a value stay empty.
std::vector<std::optional<double>> load_property_overlay(const std::filesystem::path& path,
                                                         const std::vector<std::string>& ids);

}  // namespace crystalign
