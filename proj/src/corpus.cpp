#include "crystalign/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "crystalign/cif.hpp"
#include "crystalign/error.hpp"
#include "crystalign/random.hpp"

namespace crystalign {
namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_jsonl(const std::filesystem::path& path) {
  const auto ext = lower(path.extension().string());
  return ext == ".jsonl" || ext == ".json" || ext == ".ndjson";
}

struct ManifestRow {
  std::size_t row = 0;
  std::string id;
  std::string cif_path;
  std::string title;
  std::optional<std::string> doi;
  std::string problem;  // nonempty when the row is unusable
};

std::optional<std::string> json_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (j[key].is_string()) return j[key].get<std::string>();
  return j[key].dump();
}

std::vector<ManifestRow> read_manifest_rows(const std::filesystem::path& manifest) {
  const std::string text = read_text(manifest);
  std::vector<ManifestRow> rows;
  if (is_jsonl(manifest)) {
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      ManifestRow row;
      row.row = ++n;
      try {
        const auto j = nlohmann::json::parse(line);
        row.id = json_string(j, "id").value_or("");
        row.cif_path = json_string(j, "cif_path").value_or("");
        row.title = json_string(j, "title").value_or("");
        row.doi = json_string(j, "doi");
      } catch (const nlohmann::json::exception& e) {
        row.problem = std::string("invalid JSON: ") + e.what();
      }
      rows.push_back(std::move(row));
    }
    return rows;
  }
  const auto table = parse_csv(text);
  if (table.empty()) return rows;
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < table[0].size(); ++i) col[lower(trim(table[0][i]))] = i;
  if (!col.count("id")) throw Error(Errc::ManifestError, manifest.string() + ": header has no id column");
  auto field = [&](const std::vector<std::string>& r, const char* name) -> std::optional<std::string> {
    const auto it = col.find(name);
    if (it == col.end() || it->second >= r.size()) return std::nullopt;
    return trim(r[it->second]);
  };
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& r = table[i];
    if (r.size() == 1 && trim(r[0]).empty()) continue;
    ManifestRow row;
    row.row = i;
    if (r.size() != table[0].size()) {
      row.problem = "expected " + std::to_string(table[0].size()) + " fields, got " + std::to_string(r.size());
    }
    row.id = field(r, "id").value_or("");
    row.cif_path = field(r, "cif_path").value_or("");
    row.title = field(r, "title").value_or("");
    if (auto d = field(r, "doi"); d && !d->empty()) row.doi = *d;
    rows.push_back(std::move(row));
  }
  return rows;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

bool retryable(int status) { return status == 0 || status >= 500; }

void sleep_backoff(const FetchOptions& opts, int attempt) {
  if (opts.backoff.count() <= 0) return;
  std::this_thread::sleep_for(opts.backoff * (1LL << attempt));
}

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::None: break;
  }
  return "none";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw Error(Errc::InvalidConfig, "unknown split '" + std::string(name) + "'");
}

nlohmann::json to_json(const CorpusRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["cif_path"] = r.cif_path;
  j["title"] = r.title;
  j["doi"] = r.doi ? nlohmann::json(*r.doi) : nlohmann::json(nullptr);
  j["abstract"] = r.abstract ? nlohmann::json(*r.abstract) : nlohmann::json(nullptr);
  j["keywords"] = r.keywords ? nlohmann::json(*r.keywords) : nlohmann::json(nullptr);
  j["split"] = r.split == Split::None ? nlohmann::json(nullptr) : nlohmann::json(split_name(r.split));
  j["abstract_fetched"] = r.abstract_fetched;
  return j;
}

CorpusRecord record_from_json(const nlohmann::json& j) {
  CorpusRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.cif_path = j.value("cif_path", "");
    r.title = j.at("title").get<std::string>();
    r.doi = json_string(j, "doi");
    r.abstract = json_string(j, "abstract");
    if (j.contains("keywords") && j["keywords"].is_array()) r.keywords = j["keywords"].get<std::vector<std::string>>();
    if (j.contains("split") && j["split"].is_string()) r.split = parse_split(j["split"].get<std::string>());
    r.abstract_fetched = j.value("abstract_fetched", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("corpus record: ") + e.what());
  }
  if (r.title.empty()) throw Error(Errc::EmptyTitle, "record " + r.id + " has an empty title");
  return r;
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ParseError, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw Error(Errc::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::filesystem::path resolve_cif_path(const CorpusRecord& record, const std::filesystem::path& corpus_dir) {
  const std::filesystem::path p = record.cif_path;
  return p.is_relative() ? corpus_dir / p : p;
}

std::vector<CorpusRecord> select_split(const std::vector<CorpusRecord>& records, Split split) {
  std::vector<CorpusRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw Error(Errc::ManifestError, "unterminated quoted CSV field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

IngestResult ingest(const std::filesystem::path& manifest, std::size_t max_sites) {
  const auto rows = read_manifest_rows(manifest);
  const auto base = manifest.parent_path();
  IngestResult result;
  std::set<std::string> seen;
  for (const auto& row : rows) {
    auto exclude = [&](std::string reason) {
      spdlog::warn("ingest: excluding row {} ({}): {}", row.row, row.id.empty() ? "?" : row.id, reason);
      result.exclusions.push_back({row.row, row.id, std::move(reason)});
    };
    if (!row.problem.empty()) {
      exclude(Error(Errc::ManifestError, row.problem).what());
      continue;
    }
    if (row.id.empty() || row.cif_path.empty() || row.title.empty()) {
      exclude(Error(Errc::ManifestError, "row needs id, cif_path and title").what());
      continue;
    }
    if (!seen.insert(row.id).second) throw Error(Errc::DuplicateId, "duplicate id '" + row.id + "' in manifest");
    std::filesystem::path cif = row.cif_path;
    if (cif.is_relative()) cif = base / cif;
    try {
      const auto text = read_text(cif);
      (void)structure_from_cif(text, row.id, max_sites);
    } catch (const Error& e) {
      exclude(e.what());
      continue;
    }
    CorpusRecord rec;
    rec.id = row.id;
    rec.cif_path = std::filesystem::absolute(cif).lexically_normal().string();
    rec.title = row.title;
    rec.doi = row.doi;
    result.records.push_back(std::move(rec));
  }
  if (result.records.empty()) {
    throw Error(Errc::EmptyCorpus, "no usable records in " + manifest.string() + " (" +
                                       std::to_string(result.exclusions.size()) + " excluded)");
  }
  spdlog::info("ingest: {} records, {} excluded", result.records.size(), result.exclusions.size());
  return result;
}

std::vector<std::string> read_manifest_ids(const std::filesystem::path& manifest) {
  std::vector<std::string> ids;
  for (const auto& row : read_manifest_rows(manifest)) {
    if (row.id.empty()) throw Error(Errc::ManifestError, "row " + std::to_string(row.row) + " has no id");
    ids.push_back(row.id);
  }
  return ids;
}

SplitCounts split_counts(std::size_t n, const std::array<double, 3>& ratios) {
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw Error(Errc::InvalidConfig, "split ratios must be positive");
  }
  const double total = ratios[0] + ratios[1] + ratios[2];
  SplitCounts c;
  // products of integers and small ratios are exact in double, so floor is safe
  c.train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[0] / total));
  c.val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[1] / total));
  c.test = n - c.train - c.val;
  return c;
}

std::vector<Split> assign_splits(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (n == 0) throw Error(Errc::EmptyCorpus, "cannot split an empty corpus");
  const auto counts = split_counts(n, ratios);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<Split> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[order[k]] = k < counts.train ? Split::Train : k < counts.train + counts.val ? Split::Val : Split::Test;
  }
  return out;
}

void split_records(std::vector<CorpusRecord>& records, const std::array<double, 3>& ratios, std::uint64_t seed) {
  const auto tags = assign_splits(records.size(), ratios, seed);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].split = tags[i];
}

void KeywordFilter::validate() const {
  for (const auto& p : blocklist) {
    if (p.empty() || p != lower(p)) throw Error(Errc::InvalidConfig, "blocklist phrases must be nonempty lowercase");
  }
}

std::vector<std::string> KeywordFilter::apply(const std::vector<std::string>& keywords) const {
  std::vector<std::string> out;
  for (const auto& k : keywords) {
    const std::string key = lower(trim(k));
    if (key.empty()) continue;
    if (std::find(blocklist.begin(), blocklist.end(), key) != blocklist.end()) continue;
    out.push_back(k);
  }
  return out;
}

FetchStats fetch_abstracts(std::vector<CorpusRecord>& records, DoiClient& client, const FetchOptions& opts) {
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].doi && !records[i].abstract_fetched) todo.push_back(i);
  }
  struct Outcome {
    bool done = false;
    std::optional<std::string> abstract;
    int status = 0;
  };
  std::vector<Outcome> outcomes(todo.size());
  RateLimiter limiter(opts.requests_per_second);
  parallel_for(todo.size(), opts.max_in_flight, [&](std::size_t k) {
    const std::string& doi = *records[todo[k]].doi;
    for (int attempt = 0; attempt < std::max(1, opts.attempts); ++attempt) {
      if (attempt > 0) sleep_backoff(opts, attempt - 1);
      limiter.acquire();
      const DoiLookup res = client.lookup(doi);
      outcomes[k].status = res.status;
      if (res.status == 200) {
        outcomes[k] = {true, res.abstract ? std::optional(strip_markup(*res.abstract)) : std::nullopt, 200};
        return;
      }
      if (res.status == 404 || !retryable(res.status)) {
        outcomes[k].done = true;
        return;
      }
    }
  });

  // single writer
  FetchStats stats;
  stats.attempted = todo.size();
  for (std::size_t k = 0; k < todo.size(); ++k) {
    CorpusRecord& rec = records[todo[k]];
    const Outcome& o = outcomes[k];
    if (!o.done) {
      ++stats.failed;
      spdlog::warn("fetch-abstracts: {} ({}) failed after {} attempts, last status {}", rec.id, *rec.doi,
                   opts.attempts, o.status);
      continue;
    }
    rec.abstract_fetched = true;
    if (o.abstract && !o.abstract->empty()) {
      rec.abstract = o.abstract;
      ++stats.abstracts;
    } else {
      ++stats.missing;
    }
  }
  return stats;
}

std::optional<std::vector<std::string>> parse_keyword_reply(std::string_view reply, std::string_view material_id) {
  const auto open = reply.find('[');
  const auto close = reply.rfind(']');
  std::optional<nlohmann::json> parsed;
  if (open != std::string_view::npos && close != std::string_view::npos && close > open) {
    try {
      parsed = nlohmann::json::parse(reply.substr(open, close - open + 1));
    } catch (const nlohmann::json::exception&) {
    }
  }
  if (!parsed) {
    // a bare object without the surrounding array
    const auto ob = reply.find('{');
    const auto cb = reply.rfind('}');
    if (ob == std::string_view::npos || cb == std::string_view::npos || cb < ob) return std::nullopt;
    try {
      parsed = nlohmann::json::array({nlohmann::json::parse(reply.substr(ob, cb - ob + 1))});
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  }
  if (!parsed->is_array()) return std::nullopt;
  const nlohmann::json* entry = nullptr;
  std::size_t objects = 0;
  const nlohmann::json* only = nullptr;
  for (const auto& e : *parsed) {
    if (!e.is_object() || !e.contains("Keywords")) continue;
    ++objects;
    only = &e;
    if (e.contains("ID")) {
      const auto& id = e["ID"];
      const std::string s = id.is_string() ? id.get<std::string>() : id.dump();
      if (s == material_id) {
        entry = &e;
        break;
      }
    }
  }
  if (!entry && objects == 1) entry = only;
  if (!entry || !(*entry)["Keywords"].is_array()) return std::nullopt;
  std::vector<std::string> out;
  for (const auto& k : (*entry)["Keywords"]) {
    if (!k.is_string()) continue;
    std::string s = trim(k.get<std::string>());
    if (s.empty()) continue;
    out.push_back(std::move(s));
    if (out.size() == kMaxKeywords) break;
  }
  return out;
}

KeywordStats generate_keywords(std::vector<CorpusRecord>& records, LlmClient& client, const KeywordFilter& filter,
                               const FetchOptions& opts) {
  filter.validate();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].abstract && !records[i].abstract->empty() && !records[i].keywords) todo.push_back(i);
  }
  struct Outcome {
    std::optional<std::vector<std::string>> keywords;
    std::string failure;
  };
  std::vector<Outcome> outcomes(todo.size());
  RateLimiter limiter(opts.requests_per_second);
  parallel_for(todo.size(), opts.max_in_flight, [&](std::size_t k) {
    const CorpusRecord& rec = records[todo[k]];
    const std::string prompt = keyword_prompt(rec.id, rec.title, *rec.abstract);
    int network_failures = 0;
    int parse_failures = 0;
    while (true) {
      limiter.acquire();
      const LlmReply reply = client.complete(prompt);
      if (retryable(reply.status)) {
        if (++network_failures >= std::max(1, opts.attempts)) {
          outcomes[k].failure = "status " + std::to_string(reply.status);
          return;
        }
        sleep_backoff(opts, network_failures - 1);
        continue;
      }
      if (reply.status != 200) {
        outcomes[k].failure = "status " + std::to_string(reply.status);
        return;
      }
      auto parsed = parse_keyword_reply(reply.text, rec.id);
      if (parsed) {
        outcomes[k].keywords = std::move(parsed);
        return;
      }
      if (++parse_failures >= 2) {
        outcomes[k].failure = "unparseable reply";
        return;
      }
    }
  });

  KeywordStats stats;
  stats.requested = todo.size();
  for (std::size_t k = 0; k < todo.size(); ++k) {
    CorpusRecord& rec = records[todo[k]];
    const Outcome& o = outcomes[k];
    if (!o.keywords) {
      ++stats.parse_failures;
      spdlog::warn("gen-keywords: skipping {}: {}", rec.id, o.failure);
      continue;
    }
    auto kept = filter.apply(*o.keywords);
    if (kept.empty()) {
      ++stats.dropped_empty;
      spdlog::info("gen-keywords: {} has no keywords left after filtering", rec.id);
      continue;
    }
    rec.keywords = std::move(kept);
    ++stats.kept;
  }
  return stats;
}

std::vector<CorpusRecord> keyword_corpus(const std::vector<CorpusRecord>& records) {
  std::vector<CorpusRecord> out;
  for (const auto& r : records) {
    if (r.keywords && !r.keywords->empty()) out.push_back(r);
  }
  return out;
}

}  // namespace crystalign
