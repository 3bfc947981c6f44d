#include <algorithm>
#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "crystalign/loss.hpp"
#include "crystalign/trainer.hpp"
#include "gradcheck.hpp"
#include "tempdir.hpp"

using namespace crystalign;
using namespace crystalign::tensor;

namespace {

Tensor<double> rows(const std::vector<double>& v, std::size_t n, std::size_t d) { return Tensor<double>({n, d}, v); }

double cosface(const std::vector<double>& c, const std::vector<double>& t, std::size_t n, std::size_t d, double s,
               double m) {
  return cosface_loss(rows(c, n, d), rows(t, n, d), LossConfig{s, m}).item();
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.crystal.hidden = 32;
  cfg.crystal.conv_layers = 2;
  cfg.crystal.embed_dim = 64;
  cfg.text.vocab_size = 4096;
  cfg.text.hidden = 32;
  cfg.text.embed_dim = 64;
  return cfg;
}

struct SynthFixture {
  testutil::TempDir dir{"contrastive"};
  std::vector<Example> train, val;

  SynthFixture() {
    const auto out = synth_toy_corpus(1, 50, dir.path());
    train = build_examples(select_split(out.records, Split::Train), dir.path(), CaptionMode::Title, small_model());
    val = build_examples(select_split(out.records, Split::Val), dir.path(), CaptionMode::Title, small_model());
  }
};

SynthFixture& synth() {
  static SynthFixture f;
  return f;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig cfg = TrainConfig::defaults(Stage::Pretrain);
  cfg.epochs = epochs;
  cfg.seed = 3;
  cfg.val_keywords = {"superconductor", "thermoelectric", "metal-organic framework", "ferroelectric"};
  return cfg;
}

}  // namespace

TEST(CosfaceLoss, SinglePairIsZero) {
  Rng rng(1);
  for (double s : {0.5, 3.0, 10.0}) {
    for (double m : {0.0, 0.5, 1.0}) {
      const auto c = oracle::random_unit_rows(rng, 1, 5), t = oracle::random_unit_rows(rng, 1, 5);
      EXPECT_EQ(cosface(c, t, 1, 5, s, m), 0.0);
    }
  }
}

TEST(CosfaceLoss, TwoPairHandValue) {
  const std::vector<double> c = {1, 0, 0, 1}, t = {1, 0, 0, 1};
  EXPECT_NEAR(cosface(c, t, 2, 2, 3.0, 0.5), 0.201413, 1e-6);
  EXPECT_NEAR(cosface(c, t, 2, 2, 3.0, 0.5), std::log1p(std::exp(-1.5)), 1e-12);
}

TEST(CosfaceLoss, ZeroMarginIsSoftmaxCrossEntropy) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8), d = 2 + rng.below(6);
    const double s = rng.uniform(0.5, 5.0);
    const auto c = oracle::random_unit_rows(rng, n, d), t = oracle::random_unit_rows(rng, n, d);
    EXPECT_NEAR(cosface(c, t, n, d, s, 0.0), oracle::clip_loss(c, t, n, d, s), 1e-9);
  }
}

TEST(CosfaceLoss, RowTermsAreLogOnePlusSum) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(5), d = 4;
    const double s = rng.uniform(1, 4), m = rng.uniform(0, 1);
    const auto c = oracle::random_unit_rows(rng, n, d), t = oracle::random_unit_rows(rng, n, d);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto dot = [&](std::size_t a, std::size_t b) {
        double v = 0;
        for (std::size_t k = 0; k < d; ++k) v += c[a * d + k] * t[b * d + k];
        return v;
      };
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) inner += std::exp(s * dot(i, j) - s * dot(i, i) + s * m);
      }
      want += std::log1p(inner);
    }
    want /= static_cast<double>(n);
    const double got = cosface(c, t, n, d, s, m);
    EXPECT_NEAR(got, want, 1e-9);
    EXPECT_GE(got, 0.0);
  }
}

TEST(CosfaceLoss, NondecreasingInMargin) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(6), d = 3;
    const auto c = oracle::random_unit_rows(rng, n, d), t = oracle::random_unit_rows(rng, n, d);
    double prev = -1.0;
    for (double m = 0.0; m <= 1.0; m += 0.1) {
      const double v = cosface(c, t, n, d, 3.0, m);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(CosfaceLoss, JointRowPermutationInvariant) {
  Rng rng(5);
  const std::size_t n = 6, d = 4;
  const auto c = oracle::random_unit_rows(rng, n, d), t = oracle::random_unit_rows(rng, n, d);
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  std::vector<double> pc(c.size()), pt(t.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      pc[i * d + k] = c[perm[i] * d + k];
      pt[i * d + k] = t[perm[i] * d + k];
    }
  }
  EXPECT_NEAR(cosface(c, t, n, d, 3, 0.5), cosface(pc, pt, n, d, 3, 0.5), 1e-12);
}

TEST(CosfaceLoss, Errors) {
  const Tensor<double> a({2, 2}, {1, 0, 0, 1}), b({2, 2}, {1, 0, 0, 2});
  try {
    cosface_loss(a, b, LossConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonUnitRows);
  }
  const Tensor<double> c({1, 2}, {1, 0});
  try {
    cosface_loss(a, c, LossConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
  EXPECT_THROW(cosface_loss(a, a, LossConfig{0.0, 0.5}), Error);
  EXPECT_THROW(cosface_loss(a, a, LossConfig{3.0, 1.5}), Error);
}

TEST(CosfaceLoss, GradientMatchesDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.below(6), d = 2 + rng.below(4);
    EXPECT_LT(gradcheck::check_cosface(rng, n, d, LossConfig{rng.uniform(1, 4), rng.uniform(0, 1)}), 1e-6);
  }
}

TEST(TrainConfigDefaults, DeskAndFullScale) {
  const auto pre = TrainConfig::defaults(Stage::Pretrain);
  EXPECT_EQ(pre.batch_size, 32u);
  EXPECT_EQ(pre.epochs, 200u);
  EXPECT_DOUBLE_EQ(pre.lr, 1e-3);
  const auto fine = TrainConfig::defaults(Stage::Finetune);
  EXPECT_EQ(fine.epochs, 50u);
  EXPECT_DOUBLE_EQ(fine.lr, 1e-4);
  const auto full = TrainConfig::full_scale(Stage::Pretrain);
  EXPECT_EQ(full.batch_size, 16384u);
  EXPECT_EQ(full.epochs, 2000u);
  EXPECT_DOUBLE_EQ(full.lr, 2e-5);
  EXPECT_DOUBLE_EQ(TrainConfig::full_scale(Stage::Finetune).lr, 1e-6);
  EXPECT_DOUBLE_EQ(pre.loss.scale, 3.0);
  EXPECT_DOUBLE_EQ(pre.loss.margin, 0.5);
}

TEST(TrainConfigDefaults, JsonRoundTrip) {
  auto cfg = quick(7);
  cfg.loss = {2.5, 0.3};
  const auto back = train_config_from_json(to_json(cfg), Stage::Pretrain);
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(Captions, KeywordsJoinedWithComma) {
  CorpusRecord r;
  r.title = "T";
  r.keywords = std::vector<std::string>{"Superconductivity", "thin films"};
  EXPECT_EQ(make_caption(r, CaptionMode::Keywords), "Superconductivity, thin films");
  EXPECT_EQ(make_caption(r, CaptionMode::Title), "T");
}

TEST(TrainEpoch, ZeroLearningRateLeavesWeights) {
  auto& fx = synth();
  const std::vector<Example> two(fx.train.begin(), fx.train.begin() + 2);
  DualEncoder<float> model(small_model(), 4);
  const auto before = model.to_checkpoint().serialize();
  auto cfg = quick(1);
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  Trainer trainer(model, cfg);
  const double loss = trainer.train_epoch(two, 1);
  EXPECT_EQ(model.to_checkpoint().serialize(), before);

  NoGradGuard guard;
  std::vector<const CrystalGraph*> graphs;
  std::vector<std::vector<std::uint32_t>> caps;
  for (const auto& e : two) {
    graphs.push_back(&e.graph);
    caps.push_back(e.tokens);
  }
  const auto direct = cosface_loss(model.crystal.forward(make_graph_batch(graphs)), model.encode_text_batch(caps),
                                   cfg.loss);
  EXPECT_NEAR(loss, direct.item(), 1e-6);
}

TEST(TrainEpoch, EmptySplitRejected) {
  DualEncoder<float> model(small_model(), 4);
  Trainer trainer(model, quick(1));
  try {
    trainer.train_epoch({}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyCorpus);
  }
}

TEST(Training, SameSeedSameCheckpointBytes) {
  auto& fx = synth();
  const std::vector<Example> part(fx.train.begin(), fx.train.begin() + 48);
  const auto run = [&] {
    DualEncoder<float> model(small_model(), 4);
    run_training(model, part, fx.val, quick(3));
    return model.to_checkpoint().serialize();
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, LossDropsOnSyntheticCorpus) {
  auto& fx = synth();
  ASSERT_EQ(fx.train.size() + fx.val.size(), 180u);
  DualEncoder<float> model(small_model(), 4);
  auto cfg = quick(50);
  cfg.eval_every = 0;
  const auto result = run_training(model, fx.train, fx.val, cfg);
  ASSERT_EQ(result.history.size(), 50u);
  EXPECT_LT(result.history.back().loss, result.history.front().loss);
}

TEST(Training, RunDirectoryFiles) {
  auto& fx = synth();
  testutil::TempDir out("run");
  const std::vector<Example> part(fx.train.begin(), fx.train.begin() + 40);
  DualEncoder<float> model(small_model(), 4);
  const auto result = run_training(model, part, fx.val, quick(2), out.path());
  for (const char* f : {"config.json", "metrics.csv", "model.ckpt", "last.ckpt"}) {
    EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
  }
  std::ifstream metrics(out / "metrics.csv");
  std::string header;
  std::getline(metrics, header);
  EXPECT_EQ(header, "epoch,loss,val_auc");
  // best weights are the ones left loaded
  const auto best = Checkpoint::load(out / "model.ckpt");
  EXPECT_EQ(best.metadata()["epoch"], result.best_epoch);
}

TEST(Training, TiedValidationKeepsLaterEpoch) {
  auto& fx = synth();
  const std::vector<Example> part(fx.train.begin(), fx.train.begin() + 16);
  DualEncoder<float> model(small_model(), 4);
  auto cfg = quick(3);
  cfg.lr = 0.0;
  const auto result = run_training(model, part, fx.val, cfg);
  ASSERT_TRUE(result.best_val_auc);
  EXPECT_EQ(result.best_epoch, 3u);
}

TEST(Sweep, SingleCellMatchesStandaloneRun) {
  auto& fx = synth();
  const std::vector<Example> part(fx.train.begin(), fx.train.begin() + 64);
  SweepInputs in{part, fx.val, {}, {}};
  const auto pre = quick(3), fine = TrainConfig::defaults(Stage::Finetune);
  const auto rows = sweep({0.3}, {2.0}, in, small_model(), pre, fine);
  ASSERT_EQ(rows.size(), 1u);
  DualEncoder<float> model(small_model(), pre.seed);
  auto cfg = pre;
  cfg.loss = {2.0, 0.3};
  const auto standalone = run_training(model, part, fx.val, cfg);
  ASSERT_TRUE(rows[0].pretrain_auc.has_value());
  EXPECT_EQ(*rows[0].pretrain_auc, *standalone.best_val_auc);
}

TEST(Sweep, GridRowsInRange) {
  auto& fx = synth();
  const std::vector<Example> part(fx.train.begin(), fx.train.begin() + 64);
  SweepInputs in{part, fx.val, {}, {}};
  const auto rows = sweep({0.5, 0.0}, {3.0, 1.0}, in, small_model(), quick(2), TrainConfig::defaults(Stage::Finetune));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].margin, 0.0);
  EXPECT_EQ(rows[0].scale, 1.0);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.pretrain_auc.has_value());
    EXPECT_GE(*r.pretrain_auc, 0.0);
    EXPECT_LE(*r.pretrain_auc, 1.0);
  }
}
