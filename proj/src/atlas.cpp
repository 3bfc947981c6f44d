#include "crystalign/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "crystalign/corpus.hpp"
#include "crystalign/error.hpp"
#include "crystalign/random.hpp"
#include "crystalign/tokenizer.hpp"

namespace crystalign {
namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t check_points(const PointSet& points) {
  if (points.empty()) throw Error(Errc::TooFewPoints, "no points");
  const std::size_t d = points[0].size();
  for (const auto& p : points) {
    if (p.size() != d) throw Error(Errc::ShapeMismatch, "points have different dimensions");
  }
  return d;
}

// nearest centroid, ties to the lowest index
std::pair<std::uint32_t, double> nearest(const std::vector<double>& p, const PointSet& centroids) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return {best, best_d};
}

}  // namespace

ClusterModel kmeanspp(const PointSet& points, std::size_t k, std::uint64_t seed, std::size_t max_iterations) {
  if (k == 0) throw Error(Errc::TooFewPoints, "k must be at least 1");
  if (points.size() < k) {
    throw Error(Errc::TooFewPoints, "k-means needs n >= k (n=" + std::to_string(points.size()) +
                                        ", k=" + std::to_string(k) + ")");
  }
  const std::size_t dim = check_points(points);
  const std::size_t n = points.size();
  Rng rng(seed);

  ClusterModel model;
  model.k = k;
  std::vector<bool> chosen(n, false);
  std::size_t first = rng.below(n);
  model.centroids.push_back(points[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], model.centroids[0]);
  while (model.centroids.size() < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > u) break;
      }
    }
    if (pick == n) {  // every point coincides with a center
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
    }
    chosen[pick] = true;
    model.centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], model.centroids.back()));
  }

  std::vector<std::uint32_t> assign(n, 0);
  std::vector<double> dist(n, 0.0);
  bool have_previous = false;
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    std::vector<std::uint32_t> next(n);
    for (std::size_t i = 0; i < n; ++i) std::tie(next[i], dist[i]) = nearest(points[i], model.centroids);

    // empty clusters take the point farthest from its centroid
    std::vector<std::size_t> counts(k, 0);
    for (auto c : next) ++counts[c];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[next[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      }
      if (far == n) break;
      --counts[next[far]];
      next[far] = static_cast<std::uint32_t>(c);
      counts[c] = 1;
      model.centroids[c] = points[far];
      dist[far] = 0.0;
    }

    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += dist[i];
    model.inertia_history.push_back(inertia);
    model.iterations = iter + 1;
    const bool converged = have_previous && next == assign;
    assign = std::move(next);
    have_previous = true;
    if (converged) break;

    PointSet sums(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[assign[i]];
      for (std::size_t j = 0; j < dim; ++j) s[j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < dim; ++j) model.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  model.assignments = std::move(assign);
  model.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) model.inertia += sq_dist(points[i], model.centroids[model.assignments[i]]);
  return model;
}

double majority_agreement(std::span<const std::uint32_t> clusters, std::span<const int> labels) {
  if (clusters.size() != labels.size()) throw Error(Errc::ShapeMismatch, "clusters and labels differ in length");
  if (clusters.empty()) return 0.0;
  std::map<std::uint32_t, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][labels[i]];
  std::size_t agree = 0;
  for (const auto& [c, row] : table) {
    std::size_t best = 0;
    for (const auto& [label, count] : row) best = std::max(best, count);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(clusters.size());
}

std::vector<double> conditional_affinities(const PointSet& points, double perplexity) {
  const std::size_t n = points.size();
  if (n < 4) throw Error(Errc::TooFewPoints, "t-SNE needs at least 4 points");
  check_points(points);
  if (!(perplexity > 1.0) || perplexity > static_cast<double>(n - 1)) {
    throw Error(Errc::PerplexityTooHigh, "perplexity must be in (1, n-1]; n=" + std::to_string(n));
  }
  const double target = std::log2(perplexity);
  std::vector<double> p(n * n, 0.0);
  std::vector<double> d(n);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      d[j] = j == i ? 0.0 : sq_dist(points[i], points[j]);
      if (j != i) dmin = std::min(dmin, d[j]);
    }
    for (std::size_t j = 0; j < n; ++j) d[j] -= dmin;

    // entropy falls monotonically with beta; bisect on ln(beta)
    auto entropy_bits = [&](double beta) {
      double sum = 0.0, wd = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        w[j] = j == i ? 0.0 : std::exp(-beta * d[j]);
        sum += w[j];
        wd += w[j] * d[j];
      }
      return (std::log(sum) + beta * wd / sum) / std::numbers::ln2;
    };
    double lo = -50.0, hi = 50.0, log_beta = 0.0;
    for (int step = 0; step < kPerplexityMaxSteps; ++step) {
      const double h = entropy_bits(std::exp(log_beta));
      if (std::abs(h - target) < kPerplexityTolerance) break;
      if (h > target) {
        lo = log_beta;
      } else {
        hi = log_beta;
      }
      log_beta = 0.5 * (lo + hi);
    }
    entropy_bits(std::exp(log_beta));
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] = w[j] / sum;
  }
  return p;
}

std::vector<double> joint_affinities(const PointSet& points, double perplexity) {
  const std::size_t n = points.size();
  auto cond = conditional_affinities(points, perplexity);
  std::vector<double> p(n * n, 0.0);
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) p[i * n + j] = std::max((cond[i * n + j] + cond[j * n + i]) / denom, 1e-12);
    }
  }
  return p;
}

namespace {

// Student-t kernel values (zero diagonal) and their sum
double student_kernel(std::span<const double> y, std::size_t n, std::vector<double>& num) {
  num.assign(n * n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num[i * n + j] = v;
      num[j * n + i] = v;
      z += 2.0 * v;
    }
  }
  return z;
}

void check_tsne_inputs(std::span<const double> p, std::span<const double> y, std::size_t n) {
  if (p.size() != n * n || y.size() != 2 * n) throw Error(Errc::ShapeMismatch, "t-SNE P must be n*n and Y n*2");
}

void gradient_into(std::span<const double> p, std::span<const double> y, std::size_t n, double exaggeration,
                   std::vector<double>& num, std::vector<double>& grad) {
  const double z = student_kernel(y, n, num);
  grad.assign(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double gx = 0.0, gy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double v = num[i * n + j];
      const double m = (exaggeration * p[i * n + j] - v / z) * v;
      gx += m * (y[2 * i] - y[2 * j]);
      gy += m * (y[2 * i + 1] - y[2 * j + 1]);
    }
    grad[2 * i] = 4.0 * gx;
    grad[2 * i + 1] = 4.0 * gy;
  }
}

}  // namespace

double tsne_kl(std::span<const double> p, std::span<const double> y, std::size_t n) {
  check_tsne_inputs(p, y, n);
  std::vector<double> num;
  const double z = student_kernel(y, n, num);
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double pij = p[i * n + j];
      if (i == j || pij <= 0.0) continue;
      const double q = std::max(num[i * n + j] / z, 1e-300);
      kl += pij * std::log(pij / q);
    }
  }
  return kl;
}

std::vector<double> tsne_gradient(std::span<const double> p, std::span<const double> y, std::size_t n) {
  check_tsne_inputs(p, y, n);
  std::vector<double> num, grad;
  gradient_into(p, y, n, 1.0, num, grad);
  return grad;
}

TsneResult tsne(const PointSet& points, const TsneConfig& cfg, std::uint64_t seed) {
  if (!(cfg.learning_rate >= 0.0) || cfg.iterations == 0) throw Error(Errc::InvalidConfig, "bad t-SNE settings");
  const std::size_t n = points.size();
  // a fixed 200 overshoots on a few hundred points and strands outliers
  const double eta = cfg.learning_rate > 0.0
                         ? cfg.learning_rate
                         : std::max(static_cast<double>(n) / std::max(cfg.early_exaggeration, 1.0) / 4.0, 50.0);
  const auto p = joint_affinities(points, cfg.perplexity);

  Rng rng(seed);
  std::vector<double> y(2 * n);
  for (auto& v : y) v = cfg.init_sigma * rng.normal();
  std::vector<double> update(2 * n, 0.0), gains(2 * n, 1.0), num, grad;

  TsneResult result;
  result.initial_kl = tsne_kl(p, y, n);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double exaggeration = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    const double momentum = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;
    gradient_into(p, y, n, exaggeration, num, grad);
    for (std::size_t k = 0; k < 2 * n; ++k) {
      const bool same_sign = (grad[k] > 0.0) == (update[k] > 0.0);
      gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
      update[k] = momentum * update[k] - eta * gains[k] * grad[k];
      y[k] += update[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  result.final_kl = tsne_kl(p, y, n);
  result.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.coords[i] = {y[2 * i], y[2 * i + 1]};
  return result;
}

TfidfModel tfidf(const std::vector<std::string>& titles) {
  if (titles.empty()) throw Error(Errc::EmptyCorpus, "no titles for TF-IDF");
  const double n = static_cast<double>(titles.size());
  std::vector<std::map<std::string, double>> counts(titles.size());
  std::map<std::string, std::size_t> df;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    for (auto& w : split_words(titles[i])) counts[i][std::move(w)] += 1.0;
    for (const auto& [term, c] : counts[i]) ++df[term];
  }
  TfidfModel model;
  for (const auto& [term, d] : df) model.idf[term] = std::log((1.0 + n) / (1.0 + static_cast<double>(d))) + 1.0;
  model.vectors.resize(titles.size());
  std::size_t empty = 0;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    if (counts[i].empty()) {
      ++empty;
      continue;
    }
    double total = 0.0;
    for (const auto& [term, c] : counts[i]) total += c * model.idf[term];
    for (const auto& [term, c] : counts[i]) model.vectors[i][term] = c * model.idf[term] / total;
  }
  if (empty > 0) spdlog::warn("tfidf: {} title(s) without tokens get zero weight", empty);
  return model;
}

namespace {

double checked_mass(const TermWeights& p, const char* name) {
  double s = 0.0;
  for (const auto& [term, v] : p) {
    if (!(v >= 0.0)) throw Error(Errc::NotNormalized, std::string(name) + " has a negative or NaN weight");
    s += v;
  }
  if (std::abs(s - 1.0) > kNormalizationTolerance) {
    throw Error(Errc::NotNormalized, std::string(name) + " sums to " + std::to_string(s));
  }
  return s;
}

}  // namespace

double jsd(const TermWeights& p, const TermWeights& q) {
  const double sp = checked_mass(p, "p");
  const double sq = checked_mass(q, "q");
  // mass on one side only contributes half its weight in bits. Summed in map
  // order, like the totals, so disjoint supports come out as exactly 1.
  double p_only = 0.0, shared = 0.0;
  for (const auto& [term, v] : p) {
    auto it = q.find(term);
    if (it == q.end()) {
      p_only += v;
      continue;
    }
    const double a = v / sp;
    const double b = it->second / sq;
    const double m = 0.5 * (a + b);
    double t = 0.0;
    if (a > 0.0) t += 0.5 * a * std::log2(a / m);
    if (b > 0.0) t += 0.5 * b * std::log2(b / m);
    shared += t;
  }
  double q_only = 0.0;
  for (const auto& [term, v] : q) {
    if (!p.contains(term)) q_only += v;
  }
  return std::clamp((0.5 * (p_only / sp) + 0.5 * (q_only / sq)) + shared, 0.0, 1.0);
}

JsdMatrices jsd_matrix(std::span<const std::uint32_t> assignments, std::size_t k,
                       const std::vector<TermWeights>& vectors) {
  if (assignments.size() != vectors.size()) throw Error(Errc::ShapeMismatch, "assignments and vectors differ");
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= k) throw Error(Errc::ShapeMismatch, "cluster id out of range");
    if (!vectors[i].empty()) members[assignments[i]].push_back(i);
  }
  JsdMatrices out;
  out.centroids.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (members[c].empty()) throw Error(Errc::EmptyCluster, "cluster " + std::to_string(c) + " has no usable titles");
    auto& mu = out.centroids[c];
    for (auto i : members[c]) {
      for (const auto& [term, v] : vectors[i]) mu[term] += v;
    }
    const double m = static_cast<double>(members[c].size());
    for (auto& [term, v] : mu) v /= m;
  }
  out.js.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (auto idx : members[j]) s += jsd(out.centroids[i], vectors[idx]);
      out.js[i][j] = s / static_cast<double>(members[j].size());
    }
  }
  out.sjs.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.sjs[i][j] = 0.5 * (out.js[i][j] + out.js[j][i]);
  }
  return out;
}

std::string cluster_label(const TermWeights& centroid, std::size_t terms) {
  std::vector<std::pair<std::string, double>> items(centroid.begin(), centroid.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string label;
  for (std::size_t i = 0; i < std::min(terms, items.size()); ++i) {
    if (i) label += ", ";
    label += items[i].first;
  }
  return label;
}

std::vector<double> heatmap_overlay(const EmbeddingIndex& index, std::span<const float> q) {
  return index.similarities(q);
}

Atlas build_atlas(const EmbeddingIndex& index, const AtlasConfig& cfg) {
  if (index.empty()) throw Error(Errc::EmptyIndex, "atlas needs a nonempty index");
  const std::size_t n = index.size();
  PointSet points(n);
  std::vector<std::string> titles(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = index.row(i);
    points[i].assign(row.begin(), row.end());
    titles[i] = index.metadata(i).title;
  }
  const auto clusters = kmeanspp(points, cfg.k, derive_seed(cfg.seed, 11));
  const auto proj = tsne(points, cfg.tsne, derive_seed(cfg.seed, 12));
  const auto model = tfidf(titles);
  const auto mats = jsd_matrix(clusters.assignments, cfg.k, model.vectors);

  Atlas atlas;
  atlas.ids = index.ids();
  atlas.coords = proj.coords;
  atlas.clusters = clusters.assignments;
  atlas.jsd = mats.sjs;
  std::vector<std::size_t> sizes(cfg.k, 0);
  for (auto c : clusters.assignments) ++sizes[c];
  for (std::size_t c = 0; c < cfg.k; ++c) {
    atlas.cluster_info.push_back({static_cast<std::uint32_t>(c), cluster_label(mats.centroids[c]), sizes[c]});
  }
  spdlog::info("atlas: {} points, k={}, KL {:.4f} -> {:.4f}", n, cfg.k, proj.initial_kl, proj.final_kl);
  return atlas;
}

nlohmann::json to_json(const Atlas& atlas) {
  nlohmann::json points = nlohmann::json::array();
  for (std::size_t i = 0; i < atlas.ids.size(); ++i) {
    points.push_back({{"id", atlas.ids[i]}, {"x", atlas.coords[i][0]}, {"y", atlas.coords[i][1]},
                      {"cluster", atlas.clusters[i]}});
  }
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : atlas.cluster_info) clusters.push_back({{"id", c.id}, {"label", c.label}, {"size", c.size}});
  return {{"points", points}, {"clusters", clusters}, {"jsd", atlas.jsd}};
}

Atlas atlas_from_json(const nlohmann::json& j) {
  Atlas atlas;
  try {
    for (const auto& p : j.at("points")) {
      atlas.ids.push_back(p.at("id").get<std::string>());
      atlas.coords.push_back({p.at("x").get<double>(), p.at("y").get<double>()});
      atlas.clusters.push_back(p.at("cluster").get<std::uint32_t>());
    }
    for (const auto& c : j.at("clusters")) {
      atlas.cluster_info.push_back(
          {c.at("id").get<std::uint32_t>(), c.at("label").get<std::string>(), c.at("size").get<std::size_t>()});
    }
    atlas.jsd = j.at("jsd").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("atlas json: ") + e.what());
  }
  return atlas;
}

void save_atlas(const std::filesystem::path& path, const Atlas& atlas) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << to_json(atlas).dump() << "\n";
}

Atlas load_atlas(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
  return atlas_from_json(j);
}

std::vector<std::optional<double>> load_property_overlay(const std::filesystem::path& path,
                                                         const std::vector<std::string>& ids) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::map<std::string, double> values;
  for (const auto& row : parse_csv(ss.str())) {
    if (row.size() < 2 || row[0].empty()) continue;
    char* end = nullptr;
    const double v = std::strtod(row[1].c_str(), &end);
    if (end == row[1].c_str() || *end != '\0') continue;  // header or non-numeric
    values[row[0]] = v;
  }
  std::vector<std::optional<double>> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (auto it = values.find(ids[i]); it != values.end()) out[i] = it->second;
  }
  return out;
}

}  // namespace crystalign
