// crystalign: command-line driver for the corpus, training, retrieval, atlas and
// service stages. Exit codes: 0 ok, 1 domain error, 2 usage error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "crystalign/atlas.hpp"
#include "crystalign/checkpoint.hpp"
#include "crystalign/clients.hpp"
#include "crystalign/corpus.hpp"
#include "crystalign/error.hpp"
#include "crystalign/retrieval.hpp"
#include "crystalign/service.hpp"
#include "crystalign/trainer.hpp"

namespace fs = std::filesystem;
using namespace crystalign;

namespace {

struct Shared {
  std::uint64_t seed = 0;
  bool offline = false;
  fs::path out_dir = ".";
  std::size_t threads = 0;  // 0 = hardware concurrency
};

struct RunLog {
  std::map<std::string, std::string> inputs;   // path -> checksum
  std::vector<std::string> outputs;

  void input(const fs::path& p) {
    if (!p.empty() && fs::is_regular_file(p)) inputs[p.string()] = file_checksum(p);
  }
  void output(const fs::path& p) { outputs.push_back(p.filename().string()); }
};

std::size_t worker_count(const Shared& s) {
  if (s.threads > 0) return s.threads;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

fs::path corpus_dir_of(const fs::path& corpus) { return fs::absolute(corpus).parent_path(); }

// Relative cif paths only stay valid when the corpus is rewritten in place.
void rebase_cif_paths(std::vector<CorpusRecord>& records, const fs::path& from_dir, const fs::path& to_dir) {
  std::error_code ec;
  if (fs::equivalent(from_dir, to_dir, ec)) return;
  for (auto& r : records) r.cif_path = fs::absolute(resolve_cif_path(r, from_dir)).lexically_normal().string();
}

bool all_synthetic(const std::vector<CorpusRecord>& records) {
  if (records.empty()) return false;
  for (const auto& r : records) {
    if (synth_family(r.id) < 0) return false;
  }
  return true;
}

// The synthetic corpus is scored on its family keywords, anything else on the built-ins.
std::vector<std::string> resolve_keywords(const std::vector<std::string>& given, const std::vector<CorpusRecord>& records) {
  if (!given.empty()) return given;
  if (all_synthetic(records)) return {kSynthFamilyKeywords.begin(), kSynthFamilyKeywords.end()};
  return default_validation_keywords();
}

std::vector<CorpusRecord> records_for_split(const std::vector<CorpusRecord>& records, const std::string& split) {
  if (split == "all") return records;
  return select_split(records, parse_split(split));
}

DualEncoder<float> load_model(const fs::path& checkpoint) {
  return DualEncoder<float>::from_checkpoint(Checkpoint::load(checkpoint));
}

ModelConfig model_config_from_file(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot read " + path);
  try {
    return model_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

nlohmann::json resolved_options(const CLI::App& app) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      j[name] = res.size() == 1 ? nlohmann::json(res[0]) : nlohmann::json(res);
    } else if (!opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    } else {
      j[name] = nullptr;
    }
  }
  return j;
}

void write_run_manifest(const CLI::App& app, const CLI::App& sub, const Shared& shared, const RunLog& log) {
  nlohmann::json j;
  j["command"] = sub.get_name();
  j["seed"] = shared.seed;
  j["offline"] = shared.offline;
  j["config"] = resolved_options(app);
  j["config"][sub.get_name()] = resolved_options(sub);
  j["inputs"] = log.inputs;
  j["outputs"] = log.outputs;
  write_json(shared.out_dir / "run-manifest.json", j);
}

TrainConfig make_train_config(Stage stage, bool full_scale, const CLI::App& sub, std::size_t epochs,
                              std::size_t batch, double lr, double wd, double margin, double scale,
                              std::size_t eval_every, std::uint64_t seed) {
  TrainConfig cfg = full_scale ? TrainConfig::full_scale(stage) : TrainConfig::defaults(stage);
  if (sub.count("--epochs")) cfg.epochs = epochs;
  if (sub.count("--batch-size")) cfg.batch_size = batch;
  if (sub.count("--lr")) cfg.lr = lr;
  if (sub.count("--weight-decay")) cfg.weight_decay = wd;
  if (sub.count("--margin")) cfg.loss.margin = margin;
  if (sub.count("--scale")) cfg.loss.scale = scale;
  if (sub.count("--eval-every")) cfg.eval_every = eval_every;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crystalign: crystal-structure / text contrastive embeddings"};
  app.set_config("--config", "", "TOML config file; explicit flags win");
  app.require_subcommand(1);
  app.fallthrough();

  Shared shared;
  std::string out_dir = ".";
  app.add_option("--seed", shared.seed, "Base seed for all randomness")->capture_default_str();
  app.add_flag("--offline", shared.offline, "Forbid network clients");
  app.add_option("--out-dir", out_dir, "Directory for all outputs")->capture_default_str();
  app.add_option("--threads", shared.threads, "Worker cap (0 = all cores)")->capture_default_str();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Write the 4-family synthetic corpus");
  std::size_t n_per_class = 50;
  synth->add_option("--n-per-class", n_per_class, "Records per family")->capture_default_str();

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate a manifest into corpus.jsonl");
  std::string manifest;
  std::size_t max_sites = 500;
  ingest_cmd->add_option("--manifest", manifest, "CSV or JSONL manifest")->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--max-sites", max_sites, "Drop structures with more sites")->capture_default_str();

  // split
  auto* split_cmd = app.add_subcommand("split", "Assign train/val/test at a fixed ratio");
  std::string split_corpus, split_manifest;
  std::vector<double> ratios = {8, 1, 1};
  auto* sc = split_cmd->add_option("--corpus", split_corpus, "corpus.jsonl to tag")->check(CLI::ExistingFile);
  auto* sm = split_cmd->add_option("--manifest", split_manifest, "Manifest ids only; writes splits.csv")
                 ->check(CLI::ExistingFile);
  sc->excludes(sm);
  split_cmd->add_option("--ratios", ratios, "train,val,test")->delimiter(',')->expected(3)->capture_default_str();

  // fetch-abstracts
  auto* fetch_cmd = app.add_subcommand("fetch-abstracts", "Look up abstracts by DOI");
  std::string fetch_corpus, fetch_fixtures, mailto;
  double rps = 0.0;
  fetch_cmd->add_option("--corpus", fetch_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
  fetch_cmd->add_option("--stub-fixtures", fetch_fixtures, "JSON fixture {doi: abstract}")->check(CLI::ExistingFile);
  fetch_cmd->add_option("--mailto", mailto, "Contact address for the DOI API");
  fetch_cmd->add_option("--rps", rps, "Request rate cap (0 = none)")->capture_default_str();

  // gen-keywords
  auto* kw_cmd = app.add_subcommand("gen-keywords", "Generate filtered keywords with an LLM");
  std::string kw_corpus, kw_fixtures, llm_model = "default", blocklist_file;
  kw_cmd->add_option("--corpus", kw_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
  kw_cmd->add_option("--stub-fixtures", kw_fixtures, "JSON fixture {id: [keywords] | raw reply}");
  kw_cmd->add_option("--llm-model", llm_model, "Model name sent to the chat endpoint")->capture_default_str();
  kw_cmd->add_option("--blocklist", blocklist_file, "One blocked phrase per line")->check(CLI::ExistingFile);

  // train / finetune
  struct TrainFlags {
    std::string corpus, checkpoint, model_config;
    std::size_t epochs = 0, batch = 0, eval_every = 1;
    double lr = 0, wd = 0, margin = 0, scale = 0;
    bool full_scale = false;
    std::vector<std::string> val_keywords;
  };
  TrainFlags tf;
  auto add_train_flags = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("--corpus", tf.corpus, "corpus.jsonl with splits")->required()->check(CLI::ExistingFile);
    auto* ck = sub->add_option("--checkpoint", tf.checkpoint, "Starting weights")->check(CLI::ExistingFile);
    if (needs_checkpoint) ck->required();
    sub->add_option("--model-config", tf.model_config, "Model config JSON")->check(CLI::ExistingFile);
    sub->add_option("--epochs", tf.epochs, "Epochs");
    sub->add_option("--batch-size", tf.batch, "Batch size N");
    sub->add_option("--lr", tf.lr, "Learning rate");
    sub->add_option("--weight-decay", tf.wd, "AdamW weight decay");
    sub->add_option("--margin", tf.margin, "Cosine margin m");
    sub->add_option("--scale", tf.scale, "Logit scale s");
    sub->add_option("--eval-every", tf.eval_every, "Validate every n epochs (0 = off)");
    sub->add_flag("--full-scale", tf.full_scale, "Start from the full-scale hyperparameters");
    sub->add_option("--val-keywords", tf.val_keywords, "Validation keywords")->delimiter(',');
  };
  auto* train_cmd = app.add_subcommand("train", "Title-based contrastive pre-training");
  add_train_flags(train_cmd, false);
  auto* finetune_cmd = app.add_subcommand("finetune", "Keyword-based fine-tuning");
  add_train_flags(finetune_cmd, true);

  // embed
  auto* embed_cmd = app.add_subcommand("embed", "Embed structures into an index");
  std::string embed_corpus, embed_ckpt, embed_split = "all";
  embed_cmd->add_option("--corpus", embed_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
  embed_cmd->add_option("--checkpoint", embed_ckpt, "Model weights")->required()->check(CLI::ExistingFile);
  embed_cmd->add_option("--split", embed_split, "all|train|val|test")->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Zero-shot keyword retrieval metrics");
  std::string eval_corpus, eval_ckpt, eval_split = "test";
  std::vector<std::string> eval_keywords;
  eval_cmd->add_option("--corpus", eval_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model weights")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", eval_split, "all|train|val|test")->capture_default_str();
  eval_cmd->add_option("--keywords", eval_keywords, "Query keywords")->delimiter(',');

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid over loss margin and scale");
  std::string sweep_corpus, sweep_model_config;
  std::vector<double> margins = {0.0, 0.25, 0.5}, scales = {1.0, 3.0, 10.0};
  std::size_t sweep_pre = 50, sweep_fine = 10;
  std::vector<std::string> sweep_keywords;
  sweep_cmd->add_option("--corpus", sweep_corpus, "corpus.jsonl")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--model-config", sweep_model_config, "Model config JSON")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--margins", margins, "Margins")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--scales", scales, "Scales")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--pretrain-epochs", sweep_pre, "Pre-training epochs per cell")->capture_default_str();
  sweep_cmd->add_option("--finetune-epochs", sweep_fine, "Fine-tuning epochs per cell (0 = skip)")
      ->capture_default_str();
  sweep_cmd->add_option("--val-keywords", sweep_keywords, "Validation keywords")->delimiter(',');

  // atlas
  auto* atlas_cmd = app.add_subcommand("atlas", "Cluster, project and score an index");
  std::string atlas_index, overlay_file;
  AtlasConfig atlas_cfg;
  atlas_cmd->add_option("--index", atlas_index, "Index written by embed")->required()->check(CLI::ExistingFile);
  atlas_cmd->add_option("--k", atlas_cfg.k, "Clusters")->capture_default_str();
  atlas_cmd->add_option("--perplexity", atlas_cfg.tsne.perplexity, "t-SNE perplexity")->capture_default_str();
  atlas_cmd->add_option("--iterations", atlas_cfg.tsne.iterations, "t-SNE iterations")->capture_default_str();
  atlas_cmd->add_option("--learning-rate", atlas_cfg.tsne.learning_rate, "t-SNE learning rate (0 = scale with n)")
      ->capture_default_str();
  atlas_cmd->add_option("--property-overlay", overlay_file, "CSV id,value rendered as an overlay")
      ->check(CLI::ExistingFile);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Read-only JSON API");
  ServiceConfig svc_cfg;
  std::string serve_ckpt, serve_index, serve_atlas;
  std::vector<std::string> cors;
  serve_cmd->add_option("--checkpoint", serve_ckpt, "Model weights")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--index", serve_index, "Index written by embed")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--atlas", serve_atlas, "atlas.json")->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", svc_cfg.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", svc_cfg.port, "Port (0 = any free port)")->capture_default_str();
  serve_cmd->add_option("--cors-origin", cors, "Allowed origin; repeatable, host:* for any port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  shared.out_dir = out_dir;
  spdlog::set_level(spdlog::level::from_str(log_level));
  RunLog log;

  try {
    fs::create_directories(shared.out_dir);
    const std::string cmd = sub->get_name();

    if (cmd == "synth") {
      const auto out = synth_toy_corpus(shared.seed, n_per_class, shared.out_dir);
      for (const auto& p : {out.manifest, out.corpus, out.abstracts_fixture, out.keywords_fixture}) log.output(p);
      std::cout << "wrote " << out.records.size() << " records to " << shared.out_dir.string() << "\n";

    } else if (cmd == "ingest") {
      log.input(manifest);
      const auto result = ingest(manifest, max_sites);
      write_corpus(shared.out_dir / "corpus.jsonl", result.records);
      std::ofstream ex(shared.out_dir / "exclusions.csv", std::ios::trunc);
      ex << "row,id,reason\n";
      for (const auto& e : result.exclusions) {
        ex << e.row << "," << e.id << ",\"" << e.reason << "\"\n";
      }
      log.output("corpus.jsonl");
      log.output("exclusions.csv");
      std::cout << "ingested " << result.records.size() << " records, excluded " << result.exclusions.size() << "\n";

    } else if (cmd == "split") {
      if (split_corpus.empty() && split_manifest.empty()) {
        throw CLI::RequiredError("--corpus or --manifest");
      }
      const std::array<double, 3> r = {ratios[0], ratios[1], ratios[2]};
      SplitCounts counts;
      if (!split_corpus.empty()) {
        log.input(split_corpus);
        auto records = read_corpus(split_corpus);
        split_records(records, r, derive_seed(shared.seed, 7));
        rebase_cif_paths(records, corpus_dir_of(split_corpus), fs::absolute(shared.out_dir));
        write_corpus(shared.out_dir / "corpus.jsonl", records);
        log.output("corpus.jsonl");
        counts = split_counts(records.size(), r);
      } else {
        log.input(split_manifest);
        const auto ids = read_manifest_ids(split_manifest);
        const auto tags = assign_splits(ids.size(), r, derive_seed(shared.seed, 7));
        std::ofstream out(shared.out_dir / "splits.csv", std::ios::trunc);
        out << "id,split\n";
        for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << "," << split_name(tags[i]) << "\n";
        log.output("splits.csv");
        counts = split_counts(ids.size(), r);
      }
      write_json(shared.out_dir / "split_counts.json",
                 {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}});
      log.output("split_counts.json");
      std::cout << "train " << counts.train << " val " << counts.val << " test " << counts.test << "\n";

    } else if (cmd == "fetch-abstracts") {
      if (shared.offline && fetch_fixtures.empty()) {
        throw Error(Errc::Offline, "offline mode requires --stub-fixtures");
      }
      log.input(fetch_corpus);
      auto records = read_corpus(fetch_corpus);
      std::unique_ptr<DoiClient> client;
      if (!fetch_fixtures.empty()) {
        log.input(fetch_fixtures);
        client = StubDoiClient::from_file(fetch_fixtures);
      } else {
        client = std::make_unique<CrossrefClient>(env_or("DOI_API_BASE", "https://api.crossref.org"), shared.offline,
                                                  mailto);
      }
      FetchOptions opts;
      opts.max_in_flight = std::min(opts.max_in_flight, worker_count(shared));
      opts.requests_per_second = rps;
      const auto stats = fetch_abstracts(records, *client, opts);
      rebase_cif_paths(records, corpus_dir_of(fetch_corpus), fs::absolute(shared.out_dir));
      write_corpus(shared.out_dir / "corpus.jsonl", records);
      log.output("corpus.jsonl");
      std::cout << "attempted " << stats.attempted << ", abstracts " << stats.abstracts << ", missing "
                << stats.missing << ", failed " << stats.failed << "\n";

    } else if (cmd == "gen-keywords") {
      if (shared.offline && kw_fixtures.empty()) {
        throw Error(Errc::Offline, "offline mode requires --stub-fixtures");
      }
      log.input(kw_corpus);
      auto records = read_corpus(kw_corpus);
      std::unique_ptr<LlmClient> client;
      if (!kw_fixtures.empty()) {
        if (!fs::is_regular_file(kw_fixtures)) throw Error(Errc::Io, "no such fixture file: " + kw_fixtures);
        log.input(kw_fixtures);
        client = StubLlmClient::from_file(kw_fixtures);
      } else {
        const std::string base = env_or("LLM_API_BASE", "");
        if (base.empty()) throw Error(Errc::InvalidConfig, "set LLM_API_BASE or pass --stub-fixtures");
        client = std::make_unique<ChatCompletionsClient>(base, env_or("LLM_API_KEY", ""), llm_model, shared.offline);
      }
      KeywordFilter filter;
      if (!blocklist_file.empty()) {
        log.input(blocklist_file);
        filter.blocklist.clear();
        std::ifstream in(blocklist_file);
        for (std::string line; std::getline(in, line);) {
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (!line.empty()) filter.blocklist.push_back(line);
        }
      }
      FetchOptions opts;
      opts.max_in_flight = std::min(opts.max_in_flight, worker_count(shared));
      const auto stats = generate_keywords(records, *client, filter, opts);
      rebase_cif_paths(records, corpus_dir_of(kw_corpus), fs::absolute(shared.out_dir));
      write_corpus(shared.out_dir / "corpus.jsonl", records);
      log.output("corpus.jsonl");
      std::cout << "requested " << stats.requested << ", kept " << stats.kept << ", empty after filter "
                << stats.dropped_empty << ", unparseable " << stats.parse_failures << "\n";

    } else if (cmd == "train" || cmd == "finetune") {
      const Stage stage = cmd == "train" ? Stage::Pretrain : Stage::Finetune;
      log.input(tf.corpus);
      const auto records = read_corpus(tf.corpus);
      const fs::path dir = corpus_dir_of(tf.corpus);
      TrainConfig cfg = make_train_config(stage, tf.full_scale, *sub, tf.epochs, tf.batch, tf.lr, tf.wd, tf.margin,
                                          tf.scale, tf.eval_every, shared.seed);
      cfg.val_keywords = resolve_keywords(tf.val_keywords, records);

      std::optional<DualEncoder<float>> model;
      if (!tf.checkpoint.empty()) {
        log.input(tf.checkpoint);
        model.emplace(load_model(tf.checkpoint));
        if (!tf.model_config.empty()) spdlog::warn("--model-config ignored; the checkpoint carries its own");
      } else {
        if (!tf.model_config.empty()) log.input(tf.model_config);
        model.emplace(model_config_from_file(tf.model_config), shared.seed);
      }
      const auto mode = cfg.caption_mode();
      const auto train = build_examples(select_split(records, Split::Train), dir, mode, model->config());
      const auto val = build_examples(select_split(records, Split::Val), dir, CaptionMode::Title, model->config());
      if (train.empty()) throw Error(Errc::EmptyCorpus, "no usable train records; run split (and gen-keywords) first");
      const auto result = run_training(*model, train, val, cfg, shared.out_dir);
      for (const char* f : {"config.json", "metrics.csv", "model.ckpt", "last.ckpt"}) log.output(f);
      std::cout << cmd << ": " << cfg.epochs << " epochs, best epoch " << result.best_epoch;
      if (result.best_val_auc) std::cout << ", val mean ROC-AUC " << *result.best_val_auc;
      std::cout << "\n";

    } else if (cmd == "embed") {
      log.input(embed_corpus);
      log.input(embed_ckpt);
      const auto records = records_for_split(read_corpus(embed_corpus), embed_split);
      const auto model = load_model(embed_ckpt);
      const auto examples = build_examples(records, corpus_dir_of(embed_corpus), CaptionMode::Title, model.config());
      if (examples.empty()) throw Error(Errc::EmptyCorpus, "no records to embed");
      const auto index = build_index(model, examples);
      index.save(shared.out_dir / "index.ckpt");
      log.output("index.ckpt");
      log.output(EmbeddingIndex::sidecar_path(shared.out_dir / "index.ckpt"));
      std::cout << "embedded " << index.size() << " structures\n";

    } else if (cmd == "eval") {
      log.input(eval_corpus);
      log.input(eval_ckpt);
      const auto all = read_corpus(eval_corpus);
      const auto records = records_for_split(all, eval_split);
      const auto model = load_model(eval_ckpt);
      const auto examples = build_examples(records, corpus_dir_of(eval_corpus), CaptionMode::Title, model.config());
      if (examples.empty()) throw Error(Errc::EmptyCorpus, "no records to evaluate");
      const auto keywords = resolve_keywords(eval_keywords, all);
      const auto result = evaluate_model(model, examples, keywords, shared.seed);
      write_metrics_csv(shared.out_dir / "metrics.csv", result);
      log.output("metrics.csv");
      for (const auto& row : result.rows) {
        if (row.curve.empty()) continue;
        const std::string name = "roc_" + file_safe(row.keyword) + ".csv";
        write_roc_csv(shared.out_dir / name, row.curve);
        log.output(name);
      }
      for (const auto& row : result.rows) {
        std::cout << row.keyword << "\tn_pos=" << row.n_pos << "\troc_auc="
                  << (row.roc_auc ? std::to_string(*row.roc_auc) : "n/a") << "\tbalanced_ap="
                  << (row.balanced_ap ? std::to_string(*row.balanced_ap) : "n/a");
        if (!row.note.empty()) std::cout << "\t" << row.note;
        std::cout << "\n";
      }
      std::cout << "mean\troc_auc=" << (result.mean_roc_auc ? std::to_string(*result.mean_roc_auc) : "n/a") << "\n";

    } else if (cmd == "sweep") {
      log.input(sweep_corpus);
      const auto records = read_corpus(sweep_corpus);
      const fs::path dir = corpus_dir_of(sweep_corpus);
      if (!sweep_model_config.empty()) log.input(sweep_model_config);
      const ModelConfig mc = model_config_from_file(sweep_model_config);
      SweepInputs in;
      in.train_titles = build_examples(select_split(records, Split::Train), dir, CaptionMode::Title, mc);
      in.val_titles = build_examples(select_split(records, Split::Val), dir, CaptionMode::Title, mc);
      if (sweep_fine > 0) {
        in.train_keywords = build_examples(select_split(records, Split::Train), dir, CaptionMode::Keywords, mc);
        in.val_keywords = in.val_titles;
      }
      TrainConfig pre = TrainConfig::defaults(Stage::Pretrain);
      TrainConfig fine = TrainConfig::defaults(Stage::Finetune);
      pre.epochs = sweep_pre;
      fine.epochs = std::max<std::size_t>(sweep_fine, 1);
      pre.seed = fine.seed = shared.seed;
      pre.val_keywords = fine.val_keywords = resolve_keywords(sweep_keywords, records);
      const auto rows = sweep(margins, scales, in, mc, pre, fine);
      write_sweep_csv(shared.out_dir / "sweep.csv", rows);
      log.output("sweep.csv");
      std::cout << "sweep: " << rows.size() << " cells\n";

    } else if (cmd == "atlas") {
      log.input(atlas_index);
      const auto index = EmbeddingIndex::load(atlas_index);
      atlas_cfg.seed = shared.seed;
      const auto atlas = build_atlas(index, atlas_cfg);
      save_atlas(shared.out_dir / "atlas.json", atlas);
      log.output("atlas.json");
      if (!overlay_file.empty()) {
        log.input(overlay_file);
        const auto values = load_property_overlay(overlay_file, atlas.ids);
        nlohmann::json v = nlohmann::json::array();
        for (const auto& x : values) v.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
        write_json(shared.out_dir / "overlay.json", {{"ids", atlas.ids}, {"values", v}});
        log.output("overlay.json");
      }
      std::cout << "atlas: " << atlas.ids.size() << " points in " << atlas.cluster_info.size() << " clusters\n";

    } else if (cmd == "serve") {
      if (!cors.empty()) svc_cfg.cors_origins = cors;
      log.input(serve_ckpt);
      log.input(serve_index);
      log.input(serve_atlas);
      write_run_manifest(app, *sub, shared, log);
      auto model = std::make_shared<const DualEncoder<float>>(load_model(serve_ckpt));
      auto index = EmbeddingIndex::load(serve_index);
      std::optional<Atlas> atlas;
      if (!serve_atlas.empty()) atlas = load_atlas(serve_atlas);
      Service service(svc_cfg);
      service.load(std::move(model), file_checksum(serve_ckpt), std::move(index), std::move(atlas));
      const int port = service.start();
      std::cerr << "listening on " << svc_cfg.host << ":" << port << "\n";
      service.wait();
      return 0;
    }

    write_run_manifest(app, *sub, shared, log);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
