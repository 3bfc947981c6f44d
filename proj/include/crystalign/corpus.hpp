#pragma once

// Captioned-structure dataset: manifest ingestion, splitting, abstract fetching,
// LLM keyword generation with a phrase blocklist, and the synthetic toy corpus.

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crystalign/clients.hpp"

namespace crystalign {

enum class Split { None, Train, Val, Test };

std::string_view split_name(Split split);
/// "train" | "val" | "test"; throws Errc::InvalidConfig otherwise.
Split parse_split(std::string_view name);

struct CorpusRecord {
  std::string id;
  std::string cif_path;
  std::string title;
  std::optional<std::string> doi;
  std::optional<std::string> abstract;
  std::optional<std::vector<std::string>> keywords;
  Split split = Split::None;
  /// Set once a DOI lookup finished (with or without an abstract) so reruns skip it.
  bool abstract_fetched = false;
};

nlohmann::json to_json(const CorpusRecord& record);
CorpusRecord record_from_json(const nlohmann::json& j);

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<CorpusRecord>& records);

/// Relative cif paths are taken relative to the directory holding the corpus file.
std::filesystem::path resolve_cif_path(const CorpusRecord& record, const std::filesystem::path& corpus_dir);

/// Records of one split, in corpus order.
std::vector<CorpusRecord> select_split(const std::vector<CorpusRecord>& records, Split split);

struct Exclusion {
  std::size_t row = 0;  // 1-based data row
  std::string id;
  std::string reason;
};

struct IngestResult {
  std::vector<CorpusRecord> records;
  std::vector<Exclusion> exclusions;
};

/// CSV (header with id, cif_path, title and optionally doi) or JSONL manifest.
/// Relative cif paths resolve against the manifest directory. Rows with missing
/// fields, unreadable CIFs or more than max_sites sites are excluded and logged.
/// Throws Errc::DuplicateId, or Errc::EmptyCorpus when nothing survives.
IngestResult ingest(const std::filesystem::path& manifest, std::size_t max_sites = 500);

/// Manifest ids only (CSV or JSONL), no CIF access.
std::vector<std::string> read_manifest_ids(const std::filesystem::path& manifest);

/// Minimal RFC 4180 reader: quoted fields, doubled quotes, embedded newlines.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// floor(n * r_train / sum) and floor(n * r_val / sum); test takes the rest.
SplitCounts split_counts(std::size_t n, const std::array<double, 3>& ratios = {8, 1, 1});

/// Seeded permutation of [0, n) followed by contiguous train/val/test assignment.
std::vector<Split> assign_splits(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed);
void split_records(std::vector<CorpusRecord>& records, const std::array<double, 3>& ratios, std::uint64_t seed);

struct KeywordFilter {
  std::vector<std::string> blocklist = {"crystal structure", "x-ray diffraction", "neutron diffraction",
                                        "powder diffraction", "single-crystal x-ray diffraction"};

  void validate() const;
  /// Removes keywords whose lowercased, trimmed text equals a blocklisted phrase.
  /// Original casing of the survivors is kept.
  std::vector<std::string> apply(const std::vector<std::string>& keywords) const;
};

inline constexpr std::size_t kMaxKeywords = 10;

struct FetchOptions {
  std::size_t max_in_flight = 4;
  int attempts = 3;
  std::chrono::milliseconds backoff{500};  // doubles after each failed attempt
  double requests_per_second = 0.0;        // 0 = unlimited
};

struct FetchStats {
  std::size_t attempted = 0;
  std::size_t abstracts = 0;
  std::size_t missing = 0;
  std::size_t failed = 0;
};

/// Looks up records with a DOI that were not fetched before. 404 leaves the abstract
/// empty; transport errors and 5xx are retried, then the record is skipped (and
/// retried on the next run).
FetchStats fetch_abstracts(std::vector<CorpusRecord>& records, DoiClient& client, const FetchOptions& opts = {});

std::string_view keyword_prompt_template();
std::string keyword_prompt(std::string_view material_id, std::string_view title, std::string_view abstract);

/// Keywords for `material_id` from a reply in the prompt's JSON schema, truncated
/// to kMaxKeywords. Tolerates code fences and text around the array. nullopt when
/// the reply cannot be parsed.
std::optional<std::vector<std::string>> parse_keyword_reply(std::string_view reply, std::string_view material_id);

struct KeywordStats {
  std::size_t requested = 0;
  std::size_t kept = 0;
  std::size_t dropped_empty = 0;
  std::size_t parse_failures = 0;
};

/// Fills keywords for records with an abstract (others are skipped silently).
/// A reply that does not parse is retried once, then the record is skipped.
/// Records whose filtered list is empty get no keywords.
KeywordStats generate_keywords(std::vector<CorpusRecord>& records, LlmClient& client, const KeywordFilter& filter,
                               const FetchOptions& opts = {});

/// Records with a nonempty keyword list, split tags unchanged.
std::vector<CorpusRecord> keyword_corpus(const std::vector<CorpusRecord>& records);

struct SynthOutput {
  std::vector<CorpusRecord> records;
  std::filesystem::path manifest;
  std::filesystem::path corpus;
  std::filesystem::path abstracts_fixture;
  std::filesystem::path keywords_fixture;
};

/// Family keyword per synthetic family, index 0..3 = A..D.
inline constexpr std::array<std::string_view, 4> kSynthFamilyKeywords = {"superconductor", "thermoelectric",
                                                                         "metal-organic framework", "ferroelectric"};

/// Family index (0..3) encoded in a synthetic record id, or -1.
int synth_family(std::string_view id);

/// Writes cif/*.cif, manifest.csv, corpus.jsonl (8:1:1 split under the seed),
/// abstracts.json and keywords.json (stub fixtures) under out_dir.
SynthOutput synth_toy_corpus(std::uint64_t seed, std::size_t n_per_class, const std::filesystem::path& out_dir);

}  // namespace crystalign
