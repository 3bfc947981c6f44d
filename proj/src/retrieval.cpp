#include "crystalign/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "crystalign/checkpoint.hpp"
#include "crystalign/random.hpp"
#include "crystalign/tokenizer.hpp"

namespace crystalign {
namespace {

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

void require_both_classes(std::span<const double> scores, std::span<const std::uint8_t> labels, std::size_t& pos,
                          std::size_t& neg) {
  if (scores.size() != labels.size()) throw Error(Errc::ShapeMismatch, "scores and labels differ in length");
  pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  neg = labels.size() - pos;
}

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Index

void EmbeddingIndex::add(std::string id, std::span<const float> embedding, IndexMetadata meta) {
  if (embedding.size() != dim_) {
    throw Error(Errc::ShapeMismatch, "embedding of width " + std::to_string(embedding.size()) + " for index of width " +
                                         std::to_string(dim_));
  }
  double sq = 0.0;
  for (float v : embedding) sq += static_cast<double>(v) * v;
  if (std::fabs(std::sqrt(sq) - 1.0) > 1e-5) {
    throw Error(Errc::NonUnitRows, "row '" + id + "' has norm " + std::to_string(std::sqrt(sq)));
  }
  if (lookup_.count(id)) throw Error(Errc::DuplicateId, id);
  lookup_.emplace(id, ids_.size());
  ids_.push_back(std::move(id));
  matrix_.insert(matrix_.end(), embedding.begin(), embedding.end());
  meta_.push_back(std::move(meta));
}

std::optional<std::size_t> EmbeddingIndex::find(std::string_view id) const {
  const auto it = lookup_.find(std::string(id));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::vector<double> EmbeddingIndex::similarities(std::span<const double> q) const {
  if (empty()) throw Error(Errc::EmptyIndex, "index has no rows");
  if (q.size() != dim_) throw Error(Errc::ShapeMismatch, "query width differs from index width");
  double qq = 0.0;
  for (double v : q) qq += v * v;
  std::vector<double> out(size());
  for (std::size_t i = 0; i < size(); ++i) {
    const auto r = row(i);
    double dot = 0.0, rr = 0.0;
    for (std::size_t k = 0; k < dim_; ++k) {
      dot += r[k] * q[k];
      rr += static_cast<double>(r[k]) * r[k];
    }
    const double denom = std::sqrt(rr * qq);
    out[i] = denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
  }
  return out;
}

std::vector<double> EmbeddingIndex::similarities(std::span<const float> q) const { return similarities(widen(q)); }

std::filesystem::path EmbeddingIndex::sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".jsonl");
  return p;
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.put("embeddings", tensor::Tensor<float>({size(), dim_}, matrix_));
  ckpt.metadata()["kind"] = "embedding_index";
  ckpt.save(path);
  std::ofstream side(sidecar_path(path));
  if (!side) throw Error(Errc::Io, "cannot write " + sidecar_path(path).string());
  for (std::size_t i = 0; i < size(); ++i) {
    const nlohmann::json line = {
        {"id", ids_[i]}, {"title", meta_[i].title}, {"formula", meta_[i].formula}, {"cif_path", meta_[i].cif_path}};
    side << line.dump() << '\n';
  }
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const auto matrix = ckpt.get<float>("embeddings");
  if (matrix.rank() != 2) throw Error(Errc::Checkpoint, "index embeddings must be a matrix");
  EmbeddingIndex index(matrix.shape()[1]);
  std::ifstream side(sidecar_path(path));
  if (!side) throw Error(Errc::Io, "cannot open " + sidecar_path(path).string());
  std::string line;
  std::size_t i = 0;
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    if (i >= matrix.shape()[0]) throw Error(Errc::Checkpoint, "sidecar has more rows than the index");
    const auto j = nlohmann::json::parse(line);
    IndexMetadata meta{j.value("title", ""), j.value("formula", ""), j.value("cif_path", "")};
    index.add(j.at("id").get<std::string>(), matrix.data().subspan(i * index.dim_, index.dim_), std::move(meta));
    ++i;
  }
  if (i != matrix.shape()[0]) throw Error(Errc::Checkpoint, "sidecar has fewer rows than the index");
  return index;
}

// ---------------------------------------------------------------------------
// Query

std::vector<Hit> query(const EmbeddingIndex& index, std::span<const double> q, std::size_t k) {
  if (index.empty()) throw Error(Errc::EmptyIndex, "index has no rows");
  if (k < 1 || k > index.size()) {
    throw Error(Errc::InvalidConfig, "k must lie in [1, " + std::to_string(index.size()) + "]");
  }
  const auto scores = index.similarities(q);
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return index.id(a) < index.id(b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<Hit> hits;
  hits.reserve(k);
  for (std::size_t r = 0; r < k; ++r) hits.push_back({index.id(order[r]), scores[order[r]], order[r]});
  return hits;
}

std::vector<Hit> query(const EmbeddingIndex& index, std::span<const float> q, std::size_t k) {
  return query(index, std::span<const double>(widen(q)), k);
}

// ---------------------------------------------------------------------------
// Labels

LabelRule LabelRule::for_keyword(std::string_view keyword) {
  struct Builtin {
    std::string_view keyword;
    std::string_view stem;
  };
  static constexpr Builtin kBuiltins[] = {
      {"ferromagnetic", "ferromagnet"},   {"ferroelectric", "ferroelectric"},
      {"semiconductor", "semiconduct"},   {"superconductor", "superconduct"},
      {"electroluminescence", "electroluminescen"}, {"thermoelectric", "thermoelectric"},
  };
  LabelRule rule;
  rule.keyword = std::string(keyword);
  const auto words = split_words(keyword);
  if (words.size() == 1) {
    for (const auto& b : kBuiltins) {
      if (b.keyword == words.front()) {
        rule.stems = {std::string(b.stem)};
        return rule;
      }
    }
  }
  for (auto w : words) {
    if (w.size() > 3 && w.back() == 's' && w[w.size() - 2] != 's') w.pop_back();
    rule.stems.push_back(std::move(w));
  }
  return rule;
}

bool label_oracle(std::string_view title, const LabelRule& rule) {
  const auto words = split_words(title);
  if (!rule.stems.empty() && words.size() >= rule.stems.size()) {
    for (std::size_t p = 0; p + rule.stems.size() <= words.size(); ++p) {
      bool match = true;
      for (std::size_t k = 0; k < rule.stems.size() && match; ++k) {
        match = words[p + k].starts_with(rule.stems[k]);
      }
      if (match) return true;
    }
  }
  for (const auto& variant : rule.extra_variants) {
    const auto vw = split_words(variant);
    if (vw.empty() || vw.size() > words.size()) continue;
    for (std::size_t p = 0; p + vw.size() <= words.size(); ++p) {
      if (std::equal(vw.begin(), vw.end(), words.begin() + static_cast<std::ptrdiff_t>(p))) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Metrics

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos = 0, neg = 0;
  require_both_classes(scores, labels, pos, neg);
  if (pos == 0 || neg == 0) throw Error(Errc::DegenerateLabels, "ROC-AUC needs both positives and negatives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // sum of (1-based, tie-averaged) ranks of the positives
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) rank_sum += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos = 0, neg = 0;
  require_both_classes(scores, labels, pos, neg);
  if (pos == 0) throw Error(Errc::DegenerateLabels, "average precision needs at least one positive");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]]) {
      ++hits;
      total += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return total / static_cast<double>(pos);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos = 0, neg = 0;
  require_both_classes(scores, labels, pos, neg);
  if (pos == 0 || neg == 0) throw Error(Errc::DegenerateLabels, "ROC curve needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      (labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    curve.push_back({threshold, static_cast<double>(fp) / static_cast<double>(neg),
                     static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return curve;
}

BalancedAp balanced_ap(const EmbeddingIndex& index, std::span<const double> q, const LabelRule& rule,
                       std::uint64_t seed) {
  if (index.empty()) throw Error(Errc::EmptyIndex, "index has no rows");
  std::vector<std::size_t> positives, negatives;
  for (std::size_t i = 0; i < index.size(); ++i) {
    (label_oracle(index.metadata(i).title, rule) ? positives : negatives).push_back(i);
  }
  if (positives.empty()) throw Error(Errc::DegenerateLabels, "no positives for '" + rule.keyword + "'");
  // partial Fisher-Yates: the first n_draw entries become the sample
  Rng rng(seed);
  const std::size_t n_draw = std::min(positives.size(), negatives.size());
  for (std::size_t i = 0; i < n_draw; ++i) {
    const std::size_t j = i + rng.below(negatives.size() - i);
    std::swap(negatives[i], negatives[j]);
  }
  std::vector<std::size_t> subset = positives;
  subset.insert(subset.end(), negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(n_draw));
  std::sort(subset.begin(), subset.end());
  const auto all_scores = index.similarities(q);
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  BalancedAp out;
  for (auto r : subset) {
    scores.push_back(all_scores[r]);
    labels.push_back(label_oracle(index.metadata(r).title, rule) ? 1 : 0);
    out.ids.push_back(index.id(r));
  }
  out.ap = average_precision(scores, labels);
  return out;
}

std::vector<double> concept_centroid(const EmbeddingIndex& index, const LabelRule& rule) {
  std::vector<double> mean(index.dim(), 0.0);
  std::size_t matches = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!label_oracle(index.metadata(i).title, rule)) continue;
    const auto r = index.row(i);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += r[k];
    ++matches;
  }
  if (matches == 0) throw Error(Errc::NoMatches, "no reference titles match '" + rule.keyword + "'");
  double sq = 0.0;
  for (auto& v : mean) {
    v /= static_cast<double>(matches);
    sq += v * v;
  }
  const double nrm = std::sqrt(sq);
  if (nrm < 1e-12) {
    spdlog::warn("concept centroid for '{}' has vanishing norm", rule.keyword);
    throw Error(Errc::NumericalWarning, "concept centroid for '" + rule.keyword + "' is the zero vector");
  }
  for (auto& v : mean) v /= nrm;
  return mean;
}

KeywordEvaluation evaluate_keywords(const EmbeddingIndex& index, std::span<const LabelRule> rules,
                                    const TextEmbedder& encoder, std::uint64_t seed) {
  if (rules.empty()) throw Error(Errc::InvalidConfig, "no keywords to evaluate");
  KeywordEvaluation eval;
  double auc_sum = 0.0, ap_sum = 0.0;
  std::size_t n_ok = 0;
  for (std::size_t r = 0; r < rules.size(); ++r) {
    const LabelRule& rule = rules[r];
    KeywordMetrics m;
    m.keyword = rule.keyword;
    std::vector<std::uint8_t> labels(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) labels[i] = label_oracle(index.metadata(i).title, rule) ? 1 : 0;
    m.n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (m.n_pos == 0 || m.n_pos == index.size()) {
      m.note = m.n_pos == 0 ? "no positives" : "no negatives";
      eval.rows.push_back(std::move(m));
      continue;
    }
    const auto q32 = encoder.embed(rule.keyword);
    const std::vector<double> q(q32.begin(), q32.end());
    const auto scores = index.similarities(q);
    m.roc_auc = roc_auc(scores, labels);
    m.curve = roc_curve(scores, labels);
    m.balanced_ap = balanced_ap(index, q, rule, derive_seed(seed, r)).ap;
    auc_sum += *m.roc_auc;
    ap_sum += *m.balanced_ap;
    ++n_ok;
    eval.rows.push_back(std::move(m));
  }
  if (n_ok > 0) {
    eval.mean_roc_auc = auc_sum / static_cast<double>(n_ok);
    eval.mean_balanced_ap = ap_sum / static_cast<double>(n_ok);
  }
  return eval;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const KeywordEvaluation& eval) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << "keyword,n_pos,roc_auc,balanced_ap\n";
  for (const auto& row : eval.rows) {
    out << csv_field(row.keyword) << ',' << row.n_pos << ',' << format_metric(row.roc_auc) << ','
        << format_metric(row.balanced_ap) << '\n';
  }
  out << "mean,," << format_metric(eval.mean_roc_auc) << ',' << format_metric(eval.mean_balanced_ap) << '\n';
}

void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << "threshold,fpr,tpr\n";
  out.precision(9);
  for (const auto& p : curve) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
}

}  // namespace crystalign
