#pragma once

// Zero-shot text -> structure screening: a dense cosine index, the title-based
// label rule, ROC-AUC / average precision, balanced-subset AP and the
// concept-centroid proxy query.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crystalign/encoders.hpp"

namespace crystalign {

struct IndexMetadata {
  std::string title;
  std::string formula;
  std::string cif_path;
};

/// n unit-norm rows with unique ids. Immutable once built; safe for concurrent readers.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  explicit EmbeddingIndex(std::size_t dim) : dim_(dim) {}

  /// Throws Errc::DuplicateId, Errc::ShapeMismatch, or Errc::NonUnitRows (tolerance 1e-5).
  void add(std::string id, std::span<const float> embedding, IndexMetadata meta = {});

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return ids_.empty(); }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  const std::vector<std::string>& ids() const { return ids_; }
  const IndexMetadata& metadata(std::size_t i) const { return meta_[i]; }
  std::span<const float> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }
  std::optional<std::size_t> find(std::string_view id) const;

  /// Cosine of every row with q, clamped to [-1, 1]. Throws Errc::EmptyIndex.
  std::vector<double> similarities(std::span<const double> q) const;
  std::vector<double> similarities(std::span<const float> q) const;

  /// Writes <path> (tensor "embeddings" in checkpoint format) and the
  /// <path stem>.jsonl sidecar with {id, title, formula, cif_path} per row.
  void save(const std::filesystem::path& path) const;
  static EmbeddingIndex load(const std::filesystem::path& path);
  static std::filesystem::path sidecar_path(const std::filesystem::path& path);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> matrix_;
  std::vector<IndexMetadata> meta_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

struct Hit {
  std::string id;
  double score = 0.0;
  std::size_t row = 0;
};

/// Top-k rows by cosine, descending; ties broken by id ascending. 1 <= k <= n.
std::vector<Hit> query(const EmbeddingIndex& index, std::span<const double> q, std::size_t k);
std::vector<Hit> query(const EmbeddingIndex& index, std::span<const float> q, std::size_t k);

/// A title counts as positive for a keyword when consecutive lowercase title
/// words start with the rule's stems (one stem for single-word keywords), or a
/// word sequence equals one of the explicit variants.
struct LabelRule {
  std::string keyword;
  std::vector<std::string> stems;
  std::vector<std::string> extra_variants;

  /// Built-in stems for the standard functional keywords; otherwise each word of
  /// the lowercased keyword with a trailing "s" removed.
  static LabelRule for_keyword(std::string_view keyword);
};

bool label_oracle(std::string_view title, const LabelRule& rule);

/// Mann-Whitney ROC-AUC; ties count 1/2. Throws Errc::DegenerateLabels if a class is absent.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Mean precision at the ranks of the positives, ordering by score descending
/// with ties kept in input order. Throws Errc::DegenerateLabels without positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct BalancedAp {
  double ap = 0.0;
  std::vector<std::string> ids;  // evaluated subset, index order
};

/// AP over all positives plus an equal number of negatives drawn without replacement.
BalancedAp balanced_ap(const EmbeddingIndex& index, std::span<const double> q, const LabelRule& rule,
                       std::uint64_t seed);

/// Normalized mean of the rows whose titles match the rule. Errc::NoMatches if
/// none match, Errc::NumericalWarning if the mean vanishes.
std::vector<double> concept_centroid(const EmbeddingIndex& index, const LabelRule& rule);

struct KeywordMetrics {
  std::string keyword;
  std::size_t n_pos = 0;
  std::optional<double> roc_auc;
  std::optional<double> balanced_ap;
  std::vector<RocPoint> curve;
  std::string note;
};

struct KeywordEvaluation {
  std::vector<KeywordMetrics> rows;
  std::optional<double> mean_roc_auc;
  std::optional<double> mean_balanced_ap;
};

/// Scores every row against each embedded keyword; rows with one label class
/// missing come back without metrics instead of failing the run.
KeywordEvaluation evaluate_keywords(const EmbeddingIndex& index, std::span<const LabelRule> rules,
                                    const TextEmbedder& encoder, std::uint64_t seed = 0);

/// keyword,n_pos,roc_auc,balanced_ap rows plus a final "mean" row; "n/a" for missing values.
void write_metrics_csv(const std::filesystem::path& path, const KeywordEvaluation& eval);
void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve);

}  // namespace crystalign
