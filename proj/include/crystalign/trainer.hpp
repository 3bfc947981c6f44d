#pragma once

// Contrastive training of the dual encoder: title pre-training and keyword
// fine-tuning share one loop, differing only in caption source and defaults.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crystalign/corpus.hpp"
#include "crystalign/encoders.hpp"
#include "crystalign/loss.hpp"
#include "crystalign/optim.hpp"
#include "crystalign/retrieval.hpp"

namespace crystalign {

enum class CaptionMode { Title, Keywords };
enum class Stage { Pretrain, Finetune };

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

/// Keywords scored on the validation split when none are configured.
const std::vector<std::string>& default_validation_keywords();

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  std::size_t batch_size = 32;
  std::size_t epochs = 200;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  LossConfig loss;
  std::size_t eval_every = 1;  // 0 turns validation off
  std::vector<std::string> val_keywords = default_validation_keywords();

  /// Desk-scale defaults: pretrain 200 epochs at 1e-3, finetune 50 epochs at 1e-4, N = 32.
  static TrainConfig defaults(Stage stage);
  /// N = 16384; 2000 epochs at 2e-5 (pretrain) or 50 epochs at 1e-6 (finetune).
  static TrainConfig full_scale(Stage stage);

  CaptionMode caption_mode() const { return stage == Stage::Pretrain ? CaptionMode::Title : CaptionMode::Keywords; }
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep the stage defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, Stage stage);

struct Example {
  std::string id;
  std::string title;
  std::string caption;
  std::string cif_path;
  std::string formula;
  CrystalGraph graph;
  std::vector<std::uint32_t> tokens;
};

/// Keyword captions join the list with ", ".
std::string make_caption(const CorpusRecord& record, CaptionMode mode);

/// Graphs and tokenized captions for the records. Records that fail to load,
/// lack the caption kind or tokenize to nothing are skipped with a warning.
std::vector<Example> build_examples(const std::vector<CorpusRecord>& records, const std::filesystem::path& corpus_dir,
                                    CaptionMode mode, const ModelConfig& model_cfg);

/// Structure embeddings for the examples, with title/formula/cif metadata.
EmbeddingIndex build_index(const DualEncoder<float>& model, const std::vector<Example>& examples);

/// evaluate_keywords over an index built from the examples.
KeywordEvaluation evaluate_model(const DualEncoder<float>& model, const std::vector<Example>& examples,
                                 const std::vector<std::string>& keywords, std::uint64_t seed = 0);

class Trainer {
 public:
  Trainer(DualEncoder<float>& model, TrainConfig cfg);

  /// One pass over the examples in a seeded order (last partial batch kept);
  /// returns the mean batch loss.
  double train_epoch(const std::vector<Example>& examples, std::size_t epoch);

  const TrainConfig& config() const { return cfg_; }
  const AdamWState<float>& optimizer_state() const { return state_; }

 private:
  DualEncoder<float>& model_;
  TrainConfig cfg_;
  std::vector<tensor::Tensor<float>> params_;
  AdamWState<float> state_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> val_auc;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_auc;
};

/// Runs cfg.epochs epochs. The weights with the best validation mean ROC-AUC are
/// kept, the latest on ties (the last epoch when validation is off or undefined), and left loaded in
/// `model`. With out_dir set, writes config.json, metrics.csv, model.ckpt (best)
/// and last.ckpt.
TrainResult run_training(DualEncoder<float>& model, const std::vector<Example>& train,
                         const std::vector<Example>& val, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct SweepRow {
  double margin = 0.0;
  double scale = 0.0;
  std::optional<double> pretrain_auc;
  std::optional<double> finetune_auc;
  std::string error;
};

struct SweepInputs {
  std::vector<Example> train_titles;
  std::vector<Example> val_titles;
  std::vector<Example> train_keywords;  // empty skips fine-tuning
  std::vector<Example> val_keywords;
};

/// One pretrain (+ finetune) run per (margin, scale) cell from a fresh model;
/// scores are validation mean ROC-AUC of the kept weights. Failing cells keep
/// their error text. Rows come back sorted by (margin, scale).
std::vector<SweepRow> sweep(const std::vector<double>& margins, const std::vector<double>& scales,
                            const SweepInputs& inputs, const ModelConfig& model_cfg, const TrainConfig& pretrain,
                            const TrainConfig& finetune);

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

}  // namespace crystalign
