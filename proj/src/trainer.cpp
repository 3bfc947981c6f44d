#include "crystalign/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "crystalign/cif.hpp"
#include "crystalign/error.hpp"
#include "crystalign/random.hpp"

namespace crystalign {
namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : "n/a"; }

// Flush-to-zero / denormals-are-zero for the training thread; tiny gradients
// otherwise hit the slow denormal path.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

// Keep large activation buffers on the heap instead of fresh mmap pages every step.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

std::string_view stage_name(Stage stage) { return stage == Stage::Pretrain ? "pretrain" : "finetune"; }

Stage parse_stage(std::string_view name) {
  if (name == "pretrain") return Stage::Pretrain;
  if (name == "finetune") return Stage::Finetune;
  throw Error(Errc::InvalidConfig, "unknown stage '" + std::string(name) + "'");
}

const std::vector<std::string>& default_validation_keywords() {
  static const std::vector<std::string> k = {"ferromagnetic", "ferroelectric",       "semiconductor",
                                             "superconductor", "electroluminescence", "thermoelectric"};
  return k;
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  if (stage == Stage::Finetune) {
    cfg.epochs = 50;
    cfg.lr = 1e-4;
  }
  return cfg;
}

TrainConfig TrainConfig::full_scale(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.batch_size = 16384;
  cfg.epochs = stage == Stage::Pretrain ? 2000 : 50;
  cfg.lr = stage == Stage::Pretrain ? 2e-5 : 1e-6;
  return cfg;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
  if (epochs < 1) throw Error(Errc::InvalidConfig, "epochs must be >= 1");
  if (!(lr >= 0.0)) throw Error(Errc::InvalidConfig, "learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw Error(Errc::InvalidConfig, "weight decay must be >= 0");
  loss.validate();
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"stage", stage_name(cfg.stage)},
          {"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},
          {"lr", cfg.lr},
          {"weight_decay", cfg.weight_decay},
          {"seed", cfg.seed},
          {"scale", cfg.loss.scale},
          {"margin", cfg.loss.margin},
          {"eval_every", cfg.eval_every},
          {"val_keywords", cfg.val_keywords}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, Stage stage) {
  TrainConfig cfg = TrainConfig::defaults(j.contains("stage") ? parse_stage(j["stage"].get<std::string>()) : stage);
  try {
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.loss.scale = j.value("scale", cfg.loss.scale);
    cfg.loss.margin = j.value("margin", cfg.loss.margin);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.val_keywords = j.value("val_keywords", cfg.val_keywords);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string make_caption(const CorpusRecord& record, CaptionMode mode) {
  if (mode == CaptionMode::Title) return record.title;
  if (!record.keywords || record.keywords->empty()) return {};
  std::string out;
  for (const auto& k : *record.keywords) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

std::vector<Example> build_examples(const std::vector<CorpusRecord>& records, const std::filesystem::path& corpus_dir,
                                    CaptionMode mode, const ModelConfig& model_cfg) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    Example ex;
    ex.id = rec.id;
    ex.title = rec.title;
    ex.caption = make_caption(rec, mode);
    if (ex.caption.empty()) {
      spdlog::warn("skipping {}: no {} caption", rec.id, mode == CaptionMode::Title ? "title" : "keyword");
      continue;
    }
    ex.tokens = tokenize(ex.caption, model_cfg.text.vocab_size);
    if (ex.tokens.empty()) {
      spdlog::warn("skipping {}: caption has no tokens", rec.id);
      continue;
    }
    try {
      const auto path = resolve_cif_path(rec, corpus_dir);
      auto structure = load_structure(path);
      structure.id = rec.id;
      ex.cif_path = path.string();
      ex.formula = chemical_formula(structure);
      ex.graph = build_graph(structure, model_cfg.graph);
    } catch (const Error& e) {
      spdlog::warn("skipping {}: {}", rec.id, e.what());
      continue;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

EmbeddingIndex build_index(const DualEncoder<float>& model, const std::vector<Example>& examples) {
  std::vector<CrystalGraph> graphs;
  graphs.reserve(examples.size());
  for (const auto& ex : examples) graphs.push_back(ex.graph);
  const auto rows = embed_graphs(model, graphs);
  EmbeddingIndex index(model.config().crystal.embed_dim);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    index.add(examples[i].id, rows[i], {examples[i].title, examples[i].formula, examples[i].cif_path});
  }
  return index;
}

KeywordEvaluation evaluate_model(const DualEncoder<float>& model, const std::vector<Example>& examples,
                                 const std::vector<std::string>& keywords, std::uint64_t seed) {
  const FlushDenormals ftz;
  const EmbeddingIndex index = build_index(model, examples);
  std::vector<LabelRule> rules;
  for (const auto& k : keywords) rules.push_back(LabelRule::for_keyword(k));
  // non-owning handle; the embedder does not outlive this call
  const ModelTextEmbedder embedder(std::shared_ptr<const DualEncoder<float>>(std::shared_ptr<void>(), &model));
  return evaluate_keywords(index, rules, embedder, seed);
}

Trainer::Trainer(DualEncoder<float>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
  params_ = model_.parameters();
  tune_allocator();
}

double Trainer::train_epoch(const std::vector<Example>& examples, std::size_t epoch) {
  if (examples.empty()) throw Error(Errc::EmptyCorpus, "no training examples");
  const FlushDenormals ftz;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(cfg_.seed, 1000 + epoch));
  rng.shuffle(std::span<std::size_t>(order));

  const AdamWConfig opt{cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay};
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::vector<const CrystalGraph*> graphs;
    std::vector<std::vector<std::uint32_t>> captions;
    for (std::size_t k = start; k < end; ++k) {
      graphs.push_back(&examples[order[k]].graph);
      captions.push_back(examples[order[k]].tokens);
    }
    for (auto& p : params_) p.zero_grad();
    try {
      const auto c = model_.crystal.forward(make_graph_batch(graphs));
      const auto t = model_.encode_text_batch(captions);
      auto loss = cosface_loss(c, t, cfg_.loss);
      total += static_cast<double>(loss.item());
      tensor::backward(loss);
    } catch (...) {
      tensor::Tape<float>::current().clear();
      throw;
    }
    adamw_step(std::span<tensor::Tensor<float>>(params_), state_, opt);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

TrainResult run_training(DualEncoder<float>& model, const std::vector<Example>& train,
                         const std::vector<Example>& val, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  if (train.empty()) throw Error(Errc::EmptyCorpus, "no training examples");
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    nlohmann::json j = {{"train", to_json(cfg)}, {"model", to_json(model.config())}};
    std::ofstream(*out_dir / "config.json") << j.dump(2) << '\n';
  }
  std::optional<std::ofstream> metrics;
  if (out_dir) {
    metrics.emplace(*out_dir / "metrics.csv", std::ios::trunc);
    *metrics << "epoch,loss,val_auc\n";
  }

  Trainer trainer(model, cfg);
  TrainResult result;
  std::optional<Checkpoint> best;
  const bool validate = cfg.eval_every > 0 && !val.empty() && !cfg.val_keywords.empty();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = trainer.train_epoch(train, epoch);
    if (validate && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      rec.val_auc = evaluate_model(model, val, cfg.val_keywords, cfg.seed).mean_roc_auc;
      // ties go to the later epoch; validation often saturates early
      if (rec.val_auc && (!result.best_val_auc || *rec.val_auc >= *result.best_val_auc)) {
        result.best_val_auc = rec.val_auc;
        result.best_epoch = epoch;
        best = model.to_checkpoint();
      }
    }
    if (metrics) *metrics << epoch << ',' << fmt_double(rec.loss) << ',' << fmt_opt(rec.val_auc) << '\n';
    if (epoch == 1 || epoch % 10 == 0 || epoch == cfg.epochs) {
      spdlog::info("{} epoch {}/{} loss {:.6f} val_auc {}", stage_name(cfg.stage), epoch, cfg.epochs, rec.loss,
                   fmt_opt(rec.val_auc));
    }
    result.history.push_back(rec);
  }

  Checkpoint last = model.to_checkpoint();
  last.metadata()["epoch"] = cfg.epochs;
  if (!best) {
    result.best_epoch = cfg.epochs;
    best = last;
  } else {
    best->metadata()["epoch"] = result.best_epoch;
    if (result.best_val_auc) best->metadata()["val_auc"] = *result.best_val_auc;
  }
  if (out_dir) {
    metrics->flush();
    best->save(*out_dir / "model.ckpt");
    last.save(*out_dir / "last.ckpt");
  }
  model.load_weights(*best);
  return result;
}

std::vector<SweepRow> sweep(const std::vector<double>& margins, const std::vector<double>& scales,
                            const SweepInputs& inputs, const ModelConfig& model_cfg, const TrainConfig& pretrain,
                            const TrainConfig& finetune) {
  if (margins.empty() || scales.empty()) throw Error(Errc::InvalidConfig, "sweep grids must be nonempty");
  std::vector<SweepRow> rows;
  for (double m : margins) {
    for (double s : scales) {
      SweepRow row;
      row.margin = m;
      row.scale = s;
      try {
        DualEncoder<float> model(model_cfg, pretrain.seed);
        TrainConfig pre = pretrain;
        pre.loss = {s, m};
        row.pretrain_auc = run_training(model, inputs.train_titles, inputs.val_titles, pre).best_val_auc;
        if (!inputs.train_keywords.empty()) {
          TrainConfig fine = finetune;
          fine.loss = {s, m};
          row.finetune_auc = run_training(model, inputs.train_keywords, inputs.val_keywords, fine).best_val_auc;
        }
      } catch (const Error& e) {
        row.error = e.what();
        spdlog::error("sweep cell m={} s={} failed: {}", m, s, e.what());
      }
      spdlog::info("sweep m={} s={} pretrain {} finetune {}", m, s, fmt_opt(row.pretrain_auc),
                   fmt_opt(row.finetune_auc));
      rows.push_back(std::move(row));
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.margin != b.margin ? a.margin < b.margin : a.scale < b.scale;
  });
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << "margin,scale,pretrain_auc,finetune_auc,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << fmt_double(r.margin) << ',' << fmt_double(r.scale) << ',' << fmt_opt(r.pretrain_auc) << ','
        << fmt_opt(r.finetune_auc) << ',' << err << '\n';
  }
}

}  // namespace crystalign
