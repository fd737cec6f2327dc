#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "tcsmae/training.hpp"

using namespace tcsmae;
namespace fs = std::filesystem;

namespace {

PretrainConfig small_pretrain() {
  PretrainConfig c;
  c.resolution = 32;
  c.channels = {4, 4, 8, 8, 16};
  c.embed_dim = 16;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 3;
  return c;
}

FinetuneConfig small_finetune() {
  FinetuneConfig c;
  c.resolution = 32;
  c.channels = {4, 4, 8, 8, 16};
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 5;
  return c;
}

Dataset small_data(std::size_t n, double lesion_probability = 0.0, std::size_t first = 0) {
  PhantomSpec s;
  s.resolution = 32;
  s.lesion_probability = lesion_probability;
  return phantom_dataset(s, n, first);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tcsmae_test_training_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> flat_values(const ParameterSet& ps) {
  std::vector<double> out;
  for (const auto& p : ps) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST(PretrainSchedule, LearningRateDecaysPerEpoch) {
  PretrainConfig c = small_pretrain();
  for (std::size_t e = 0; e < 60; ++e) {
    const double expect = c.lr * std::pow(0.96, static_cast<double>(e));
    EXPECT_LE(std::abs(c.lr_at(e) - expect), 1e-12 * expect);
  }
  c.epochs = 3;
  Pretrainer t(c);
  const auto r = t.run(small_data(6));
  for (const auto& s : r.steps) EXPECT_LE(std::abs(s.lr - c.lr_at(s.epoch)), 1e-12 * c.lr_at(s.epoch));
}

TEST(PretrainBookkeeping, StepCountEqualsBatchCount) {
  PretrainConfig c = small_pretrain();
  c.epochs = 1;
  c.batch_size = 4;
  {
    Pretrainer t(c);
    EXPECT_EQ(t.run(small_data(4)).steps.size(), 1u);
  }
  c.epochs = 2;
  Pretrainer t(c);
  const auto r = t.run(small_data(10));
  ASSERT_EQ(r.steps.size(), 6u);  // ceil(10/4) per epoch
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    EXPECT_EQ(r.steps[i].step, i);
    EXPECT_EQ(r.steps[i].epoch, i / 3);
  }
  EXPECT_EQ(r.epoch_mean_ssim.size(), 2u);
}

TEST(PretrainStep, DescendsOnFourImageBatch) {
  PretrainConfig c = small_pretrain();
  c.lr = 1e-5;
  Pretrainer t(c);
  const Dataset d = small_data(4);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto masks = t.masks_for(d, idx, 0, 0);
  const double before = t.losses(d, masks).total.item();
  const auto rec = t.step(d, masks);
  EXPECT_EQ(rec.l_total, before);
  const double after = t.losses(d, masks).total.item();
  EXPECT_LT(after, before);
}

TEST(PretrainStep, ScalesZeroHasNoContrastiveTerm) {
  PretrainConfig c = small_pretrain();
  c.scales = 0;
  Pretrainer t(c);
  EXPECT_EQ(t.trainable().find("contrast.log_gamma"), nullptr);
  EXPECT_EQ(t.model().projection_parameters().size(), 0u);
  const auto r = t.run(small_data(4));
  for (const auto& s : r.steps) {
    EXPECT_FALSE(s.l_con.has_value());
    EXPECT_EQ(s.l_total, s.l_ssim);
  }
  EXPECT_NE(losses_csv(r.steps).find(",,"), std::string::npos);
}

TEST(PretrainStep, NonFiniteLossAbortsWithStepIndex) {
  Pretrainer t(small_pretrain());
  const Dataset d = small_data(2);
  const std::vector<std::size_t> idx{0, 1};
  const auto masks = t.masks_for(d, idx, 0, 0);
  t.step(d, masks);
  for (auto& p : t.model().head_parameters())
    for (double& v : p.tensor.mutable_values()) v = std::numeric_limits<double>::quiet_NaN();
  try {
    t.step(d, masks);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(PretrainStep, BranchesShareParameterStorage) {
  Pretrainer t(small_pretrain());
  const auto ps = t.trainable();
  EXPECT_EQ(ps.size(), t.model().parameters().size() + 1);
  std::set<const void*> nodes;
  for (const auto& p : ps) nodes.insert(p.tensor.node());
  EXPECT_EQ(nodes.size(), ps.size());
  // Both branches read the same tensors: after a step the model seen by each
  // branch is the one in the optimizer.
  const Dataset d = small_data(4);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto masks = t.masks_for(d, idx, 0, 0);
  t.step(d, masks);
  auto ps2 = t.trainable();
  auto a = ps.begin();
  for (auto b = ps2.begin(); b != ps2.end(); ++a, ++b) EXPECT_EQ(a->tensor.node(), b->tensor.node());
}

TEST(PretrainMasks, ResamplePerImageAndPerBatch) {
  PretrainConfig c = small_pretrain();
  Pretrainer t(c);
  const Dataset d = small_data(4);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  std::set<std::vector<std::size_t>> per_image;
  for (std::size_t e = 0; e < 6; ++e)
    for (const auto& m : t.masks_for(d, idx, e, 0)) per_image.insert(m.masked_intervals);
  EXPECT_GT(per_image.size(), 4u);
  EXPECT_EQ(t.masks_for(d, idx, 2, 0)[1].masked_intervals, t.masks_for(d, idx, 2, 7)[1].masked_intervals);

  c.resample = MaskResample::PerBatch;
  Pretrainer tb(c);
  const auto mb = tb.masks_for(d, idx, 0, 0);
  for (const auto& m : mb) EXPECT_EQ(m.masked_intervals, mb[0].masked_intervals);
  for (const auto& m : mb) EXPECT_EQ(m.masked_intervals.size(), 6u);
}

TEST(PretrainMasks, PatchMode) {
  PretrainConfig c = small_pretrain();
  c.mask.kind = MaskKind::Patch;
  c.mask.patch_size = 8;
  Pretrainer t(c);
  const Dataset d = small_data(2);
  const std::vector<std::size_t> idx{0, 1};
  const auto m = t.masks_for(d, idx, 0, 0);
  EXPECT_EQ(m[0].masked_intervals.size(), 12u);  // floor(0.75 * 16) patches
  EXPECT_DOUBLE_EQ(m[0].masked_fraction(), 0.75);
}

TEST(PretrainDeterminism, IdenticalRunsIdenticalTrajectories) {
  const Dataset d = small_data(6);
  PretrainConfig c = small_pretrain();
  c.hflip = true;
  Pretrainer a(c), b(c);
  EXPECT_EQ(losses_csv(a.run(d).steps), losses_csv(b.run(d).steps));
  EXPECT_EQ(flat_values(a.trainable()), flat_values(b.trainable()));
  c.seed = 4;
  Pretrainer other(c);
  EXPECT_NE(losses_csv(other.run(d).steps), losses_csv(Pretrainer(small_pretrain()).run(d).steps));
}

TEST(PretrainOutputs, FilesAndCheckpointRoundTrip) {
  const auto out = temp_dir("pre");
  const Dataset d = small_data(4);
  const auto r = pretrain(d, small_pretrain(), out);
  for (const char* f : {"checkpoint.bin", "manifest.json", "losses.csv", "config.resolved.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(io::read_bytes(out / "losses.csv").size(), losses_csv(r.steps).size());

  const Checkpoint ck = load_checkpoint(out / "checkpoint.bin");
  const auto again = temp_dir("pre_again");
  save_checkpoint(ck, again);
  EXPECT_EQ(io::read_bytes(out / "checkpoint.bin"), io::read_bytes(again / "checkpoint.bin"));
  EXPECT_EQ(io::read_bytes(out / "manifest.json"), io::read_bytes(again / "manifest.json"));

  // The resolved config replays the run exactly.
  const auto cfg = pretrain_config_from_json(io::read_json(out / "config.resolved.json"));
  const auto replay = temp_dir("pre_replay");
  pretrain(d, cfg, replay);
  EXPECT_EQ(io::read_bytes(out / "checkpoint.bin"), io::read_bytes(replay / "checkpoint.bin"));
  EXPECT_EQ(io::read_bytes(out / "losses.csv"), io::read_bytes(replay / "losses.csv"));

  const UNet m = load_model(out / "checkpoint.bin");
  EXPECT_EQ(m.config().resolution, 32u);
  EXPECT_EQ(m.config().mep.scales, 2);
}

TEST(PretrainConfigJson, RoundTripAndValidation) {
  PretrainConfig c = small_pretrain();
  c.mask.kind = MaskKind::Patch;
  c.resample = MaskResample::PerBatch;
  c.recon_combine = ReconCombine::Ratio;
  c.lambda = 0.5;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(pretrain_config_from_json(j)), j);

  auto expect_field = [](ojson j, const std::string& field) {
    try {
      pretrain_config_from_json(j);
      FAIL() << field;
    } catch (const InvalidArgument& e) {
      EXPECT_EQ(std::string(e.what()).rfind(field + ":", 0), 0u) << e.what();
    }
  };
  expect_field({{"bogus", 1}}, "bogus");
  expect_field({{"k", 0}}, "k");
  expect_field({{"rho", 1.0}}, "rho");
  expect_field({{"resolution", 48}}, "resolution");
  expect_field({{"epochs", 0}}, "epochs");
  expect_field({{"scales", 4}}, "scales");
  expect_field({{"mask", "grid"}}, "mask");
  expect_field({{"lr", "fast"}}, "lr");
}

TEST(FinetuneConfigJson, RoundTripAndValidation) {
  FinetuneConfig c = small_finetune();
  c.head = HeadKind::Multiclass;
  c.classes = 17;
  c.folds = 5;
  c.fold = 2;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(finetune_config_from_json(j)), j);
  EXPECT_THROW(finetune_config_from_json({{"bogus", 1}}), InvalidArgument);
  EXPECT_THROW(finetune_config_from_json({{"head", "reconstruction"}}), InvalidArgument);
  EXPECT_THROW(finetune_config_from_json({{"folds", 3}, {"fold", 3}}), InvalidArgument);
  FinetuneConfig p;
  EXPECT_EQ(p.effective_lr(), 1e-4);
  p.paper_lr = true;
  EXPECT_EQ(p.effective_lr(), 1e-6);
}

TEST(FinetuneSplit, HoldoutAndFolds) {
  FinetuneConfig c = small_finetune();
  const Split s = make_split(50, c);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.train.size(), 40u);
  std::set<std::size_t> all(s.val.begin(), s.val.end());
  all.insert(s.train.begin(), s.train.end());
  EXPECT_EQ(all.size(), 50u);
  EXPECT_EQ(make_split(50, c).val, s.val);

  c.folds = 5;
  std::set<std::size_t> vals;
  for (std::size_t f = 0; f < 5; ++f) {
    c.fold = f;
    const Split k = make_split(23, c);
    EXPECT_EQ(k.val.size() + k.train.size(), 23u);
    for (std::size_t v : k.val) EXPECT_TRUE(vals.insert(v).second);
  }
  EXPECT_EQ(vals.size(), 23u);
}

TEST(Finetune, FromCheckpointInheritsTrunk) {
  const auto out = temp_dir("ft_src");
  pretrain(small_data(4), small_pretrain(), out);
  const Checkpoint ck = load_checkpoint(out / "checkpoint.bin");

  FinetuneConfig c = small_finetune();
  c.from = (out / "checkpoint.bin").string();
  const UNet m = build_finetune_model(c);
  for (const auto& p : m.trunk_parameters()) {
    const StoredArray* a = ck.find(p.name);
    ASSERT_NE(a, nullptr) << p.name;
    EXPECT_EQ(std::vector<double>(p.tensor.values().begin(), p.tensor.values().end()), a->values) << p.name;
  }
  EXPECT_EQ(m.config().head.kind, HeadKind::Binary);
  EXPECT_EQ(m.projection_parameters().size(), 0u);

  c.from = "scratch";
  const UNet s = build_finetune_model(c);
  EXPECT_NE(flat_values(s.trunk_parameters()), flat_values(m.trunk_parameters()));
}

TEST(Finetune, MismatchedCheckpointListsNames) {
  const auto out = temp_dir("ft_bad");
  Pretrainer t(small_pretrain());
  Checkpoint ck = t.checkpoint();
  std::erase_if(ck.arrays, [](const auto& a) { return a.first == "enc3.conv.weight"; });
  save_checkpoint(ck, out);
  FinetuneConfig c = small_finetune();
  c.from = (out / "checkpoint.bin").string();
  try {
    build_finetune_model(c);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("enc3.conv.weight (missing)"), std::string::npos);
  }
}

TEST(Finetune, RunWritesCurves) {
  const auto out = temp_dir("ft_run");
  FinetuneConfig c = small_finetune();
  const auto r = finetune(small_data(10, 1.0), c, out);
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) {
    EXPECT_TRUE(std::isfinite(e.train_loss));
    EXPECT_EQ(e.val.samples.size(), 2u);
  }
  const auto bytes = io::read_bytes(out / "metrics.csv");
  const std::string csv(bytes.begin(), bytes.end());
  EXPECT_EQ(csv.rfind("epoch,lr,train_loss,val_dsc_mean,val_dsc_std,val_hd_mean,val_hd_std,val_hd_undefined,val_dsc_class1\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  for (const char* f : {"checkpoint.bin", "manifest.json", "config.resolved.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
}

TEST(Finetune, MulticlassEmitsPerClassColumns) {
  Dataset d = small_data(6, 1.0);
  for (auto& s : d) {
    // Class 2 = left half of the body (any non-air pixel), class 1 = lesion.
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t col = 0; col < 16; ++col)
        if ((*s.labels)(r, col) == 0 && s.norm(r, col) > 0.5) (*s.labels)(r, col) = 2;
    s.classes = 3;
  }
  FinetuneConfig c = small_finetune();
  c.head = HeadKind::Multiclass;
  c.classes = 3;
  c.epochs = 1;
  Finetuner f(c);
  const auto r = f.run(d);
  ASSERT_EQ(r.epochs[0].val.per_class_dsc_percent.size(), 2u);
  EXPECT_NE(metrics_csv(r.epochs).find("val_dsc_class2"), std::string::npos);
}

TEST(Finetune, DescendsOnTrainingBatch) {
  FinetuneConfig c = small_finetune();
  c.lr = 1e-3;
  Finetuner f(c);
  const Dataset d = small_data(4, 1.0);
  const double first = f.train_step(d);
  double last = first;
  for (int i = 0; i < 10; ++i) last = f.train_step(d);
  EXPECT_LT(last, first);
}

TEST(ReconReport, RowsAndDeterminism) {
  const UNet m(small_pretrain().model_config(), 1);
  const Dataset d = small_data(5);
  const MaskOptions opts;
  const auto rows = recon_ssim_report(m, d, opts, 9);
  ASSERT_EQ(rows.size(), 10u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rows[2 * i].condition, "masked");
    EXPECT_EQ(rows[2 * i + 1].condition, "unmasked");
    EXPECT_EQ(rows[2 * i].name, d[i].name);
  }
  EXPECT_EQ(recon_report_csv(rows), recon_report_csv(recon_ssim_report(m, d, opts, 9)));
  EXPECT_EQ(recon_report_csv(rows).rfind("sample,condition,ssim\n", 0), 0u);
  UNet seg(small_pretrain().model_config(), 1);
  seg.swap_head(HeadConfig::binary(), 0);
  EXPECT_THROW(recon_ssim_report(seg, d, opts, 9), InvalidArgument);
}

TEST(Augment, HflipIsAnInvolution) {
  const Dataset d = small_data(1, 1.0);
  const Sample twice = hflip(hflip(d[0]));
  EXPECT_EQ(twice.rgb.planes[0], d[0].rgb.planes[0]);
  EXPECT_EQ(twice.norm, d[0].norm);
  EXPECT_EQ(*twice.labels, *d[0].labels);
  const Sample once = hflip(d[0]);
  EXPECT_EQ(once.norm(3, 0), d[0].norm(3, 31));
}

TEST(Format, CsvDoublesRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17}) EXPECT_EQ(std::stod(fmt_double(v)), v);
}
