#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace partseg;
using namespace partseg::testing;

namespace {

std::string run_metrics(Trainer& t) {
  std::ostringstream out;
  t.run(&out);
  return out.str();
}

std::uint64_t text_fingerprint(const PartSegModel& m) { return fingerprint(m.text_parameters()); }

}  // namespace

TEST(PolyLr, Schedule) {
  EXPECT_EQ(poly_lr(0.01, 0, 100, 0.9), 0.01);
  EXPECT_EQ(poly_lr(0.01, 100, 100, 0.9), 0.0);
  EXPECT_EQ(poly_lr(0.01, 150, 100, 0.9), 0.0);
  EXPECT_EQ(poly_lr(0.01, 3, 0, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(0.02, 50, 100, 1.0), 0.01, 1e-15);
  EXPECT_NEAR(poly_lr(0.01, 25, 100, 0.9), 0.01 * std::pow(0.75, 0.9), 1e-15);
  double prev = 1.0;
  for (int s = 0; s <= 100; ++s) {
    const double lr = poly_lr(0.5, s, 100, 0.9);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(SgdMomentum, HeavyBallRecurrence) {
  ad::Var p = ad::parameter(Tensor({2}, std::vector<double>{1.0, -1.0}));
  SgdMomentum opt(0.5);
  const ParameterList params = {{"p", p}};
  double v0 = 0, x0 = 1.0;
  for (int t = 0; t < 5; ++t) {
    p.zero_grad();
    ad::backward(ad::linear(ad::tanh(p), ad::constant(Tensor({1, 2}, 1.0)), ad::constant(Tensor({1}))));
    const double g = p.grad()[0];
    EXPECT_NEAR(g, 1.0 - std::tanh(x0) * std::tanh(x0), 1e-15);
    v0 = 0.5 * v0 + g;
    x0 -= 0.1 * v0;
    opt.step(params, 0.1);
    EXPECT_NEAR(p.value()[0], x0, 1e-15);
  }
  // Global-norm clipping rescales the whole gradient.
  ad::Var q = ad::parameter(Tensor({2}));
  SgdMomentum clip(0.0);
  q.zero_grad();
  ad::backward(ad::linear(q, ad::constant(Tensor({1, 2}, std::vector<double>{3.0, 4.0})), ad::constant(Tensor({1}))));
  clip.step({{"q", q}}, 1.0, 1.0);
  EXPECT_NEAR(q.value()[0], -0.6, 1e-15);
  EXPECT_NEAR(q.value()[1], -0.8, 1e-15);
}

TEST(RunConfig, JsonRoundTripAndValidation) {
  RunConfig c;
  c.data = "/tmp/x";
  c.model.design = PromptDesign::kLGP;
  c.model.momentum = 0.5;
  c.model.shared_keys = SharedKeyMode::kGlobal;
  c.model.background = BackgroundMode::kLearned;
  c.model.logit_mode = LogitMode::kCosine;
  c.model.encoder.channels = 32;
  c.fusion_alpha = 0.25;
  c.clip_norm = 2.0;
  c.eval_seed = 99;
  c.split_id = 2;
  const json j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(j.at("design"), "lgp");
  EXPECT_EQ(j.at("encoder").at("channels"), 32);

  EXPECT_THROW(config_from_json(json{{"desing", "ppl"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"design", 3}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"logit_mode", "l2"}}), ConfigError);
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
  // Partial overlays keep the base.
  const RunConfig o = config_from_json(json{{"n_shared", 1}}, c);
  EXPECT_EQ(o.model.n_shared, 1u);
  EXPECT_EQ(o.fusion_alpha, 0.25);

  RunConfig bad;
  bad.model.momentum = 1.5;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = RunConfig{};
  bad.fusion_alpha = -0.1;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = RunConfig{};
  bad.k_shot = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = RunConfig{};
  bad.split_id = 4;
  EXPECT_THROW(validate(bad), ConfigError);

  const fs::path dir = tmp_dir("config_file");
  std::ofstream(dir / "c.json") << "{\"n_specific\": 2,";
  EXPECT_THROW(load_config_file(dir / "c.json"), ConfigError);
  EXPECT_THROW(load_config_file(dir / "absent.json"), ConfigError);
}

TEST(Trainer, SplitComesFromDatasetFile) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 0), d.index, d.store);
  EXPECT_EQ(t.split(), *load_split_file(d.index.root, 0));
}

TEST(Trainer, TrainsOnBaseCategoriesOnly) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 40), d.index, d.store);
  for (int s = 0; s < 40; ++s) {
    t.step();
    const std::string cat = t.last_episode().substr(0, t.last_episode().find(':'));
    EXPECT_TRUE(t.split().base_categories.count(cat)) << t.last_episode();
  }
}

TEST(Trainer, RerunsAreBitIdentical) {
  const auto& d = small_data();
  RunConfig cfg = small_run_config(d, 15);
  cfg.eval_every = 5;
  Trainer a(cfg, d.index, d.store), b(cfg, d.index, d.store);
  const std::string ma = run_metrics(a), mb = run_metrics(b);
  EXPECT_EQ(ma, mb);
  EXPECT_NE(ma.find("eval_miou"), std::string::npos);
  EXPECT_TRUE(a.checkpoint() == b.checkpoint());

  RunConfig other = cfg;
  other.seed = 1;
  Trainer c(other, d.index, d.store);
  EXPECT_NE(run_metrics(c), ma);
}

TEST(Trainer, FrozenTextEncoderNeverChanges) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 30), d.index, d.store);
  const auto before = text_fingerprint(t.model());
  const auto visual_before = fingerprint(t.model().encoders().visual->parameters());
  t.run();
  EXPECT_EQ(text_fingerprint(t.model()), before);
  EXPECT_NE(fingerprint(t.model().encoders().visual->parameters()), visual_before);
}

TEST(Trainer, EmaUpdatesFollowEpisodeKeys) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 1), d.index, d.store);
  std::map<std::string, Tensor> shared;
  for (const auto& k : t.model().bank().keys()) shared[k] = t.model().bank().entry(k).shared;
  t.step();
  const Category& cat = d.index.category(t.last_episode().substr(0, t.last_episode().find(':')));
  std::set<std::string> touched;
  for (int k = 0; k <= static_cast<int>(cat.num_parts()); ++k) touched.insert(part_key(cat, k));
  for (const auto& k : t.model().bank().keys()) {
    const auto& e = t.model().bank().entry(k);
    if (!touched.count(k)) {
      EXPECT_EQ(e.shared, shared[k]) << k;
      EXPECT_EQ(e.updates, 0u);
    }
  }
}

TEST(Checkpoint, SaveLoadResumeBitExact) {
  const auto& d = small_data();
  const fs::path dir = tmp_dir("ckpt");
  const RunConfig cfg = small_run_config(d, 20);

  Trainer straight(cfg, d.index, d.store);
  const std::string full = run_metrics(straight);

  Trainer first(cfg, d.index, d.store);
  for (int s = 0; s < 8; ++s) first.step();
  const Checkpoint ck = first.checkpoint();
  save_checkpoint(ck, dir / "ckpt");
  const Checkpoint loaded = load_checkpoint(dir / "ckpt");
  EXPECT_TRUE(loaded == ck);
  EXPECT_EQ(loaded.step, 8);

  Trainer resumed(loaded, d.index, d.store);
  EXPECT_EQ(params_fingerprint(resumed.model()), params_fingerprint(first.model()));
  const std::string tail = run_metrics(resumed);
  EXPECT_TRUE(resumed.checkpoint() == straight.checkpoint());
  // The resumed log is the tail of the uninterrupted one.
  ASSERT_GE(full.size(), tail.size());
  EXPECT_EQ(full.substr(full.size() - tail.size()), tail);
}

TEST(Checkpoint, Errors) {
  const fs::path dir = tmp_dir("ckpt_err");
  EXPECT_THROW(load_checkpoint(dir / "absent"), IoError);
  std::ofstream(dir / "junk") << "PSCKPT02garbage";
  EXPECT_THROW(load_checkpoint(dir / "junk"), ValidationError);
  {
    std::ofstream out(dir / "short", std::ios::binary);
    out.write("PSCKPT01", 8);
    const char len[8] = {100, 0, 0, 0, 0, 0, 0, 0};
    out.write(len, 8);
    out << "{}";
  }
  EXPECT_THROW(load_checkpoint(dir / "short"), ValidationError);
}

TEST(Evaluate, IsReadOnlyAndRepeatable) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 5), d.index, d.store);
  t.run();
  const auto fp = params_fingerprint(t.model());
  const auto a = evaluate(t.model(), d.index, d.store, t.split(), Partition::kNovel, 6, 1234, 1, 0.5);
  EXPECT_EQ(params_fingerprint(t.model()), fp);
  const auto b = evaluate(t.model(), d.index, d.store, t.split(), Partition::kNovel, 6, 1234, 1, 0.5);
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_EQ(a.episodes.size(), 6u);
  double sum = 0, sq = 0;
  for (const auto& e : a.episodes) {
    EXPECT_GE(e.miou, 0.0);
    EXPECT_LE(e.miou, 1.0);
    EXPECT_TRUE(t.split().novel_categories.count(e.category));
    sum += e.miou;
  }
  const double mean = sum / 6;
  for (const auto& e : a.episodes) sq += (e.miou - mean) * (e.miou - mean);
  EXPECT_NEAR(a.mean, mean, 1e-15);
  EXPECT_NEAR(a.std, std::sqrt(sq / 6), 1e-15);
  EXPECT_THROW(evaluate(t.model(), d.index, d.store, t.split(), Partition::kNovel, 0, 1, 1, 0.5), ArgumentError);
}

TEST(Evaluate, ZeroStepsEqualsInitialization) {
  const auto& d = small_data();
  Trainer zero(small_run_config(d, 0), d.index, d.store);
  zero.run();
  const PartSegModel fresh(small_model_config(), 0, zero.model().bank().keys());
  const auto a = evaluate(zero.model(), d.index, d.store, zero.split(), Partition::kNovel, 5, 7, 1, 0.5);
  const auto b = evaluate(fresh, d.index, d.store, zero.split(), Partition::kNovel, 5, 7, 1, 0.5);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(params_fingerprint(zero.model()), params_fingerprint(fresh));
}

TEST(Trainer, NonFiniteLossRaisesNumericError) {
  const auto& d = small_data();
  Trainer t(small_run_config(d, 3), d.index, d.store);
  t.step();
  auto params = t.model().encoders().visual->parameters();
  params.front().var.mutable_value().data[0] = std::nan("");
  try {
    t.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find(":"), std::string::npos);
  }
}

TEST(Trainer, OverfitModeRepeatsOneEpisode) {
  const auto& d = small_data();
  RunConfig cfg = small_run_config(d, 10);
  cfg.overfit_one_episode = true;
  Trainer t(cfg, d.index, d.store);
  t.step();
  const std::string id = t.last_episode();
  for (int s = 0; s < 9; ++s) {
    t.step();
    EXPECT_EQ(t.last_episode(), id);
  }
}

TEST(CrossDomain, SameDatasetMatchesEvaluate) {
  const auto& d = small_data();
  const RunConfig cfg = small_run_config(d, 3);
  Trainer t(cfg, d.index, d.store);
  t.run();
  const auto a = cross_domain_evaluate(t.model(), cfg, d.index, d.store, 5, 3, 0.5);
  const auto b = evaluate(t.model(), d.index, d.store, t.split(), Partition::kNovel, 5, 3, 1, 0.5);
  EXPECT_EQ(a.to_json(), b.to_json());

  // A target whose categories (and part names) were never seen still runs.
  const auto& other = small_data(8, 6);
  const auto c = cross_domain_evaluate(t.model(), cfg, other.index, other.store, 4, 3, 0.5);
  EXPECT_EQ(c.episodes.size(), 4u);

  DatasetIndex thin = other.index;
  for (auto& [_, locs] : thin.samples_by_category) locs.resize(1);
  EXPECT_THROW(cross_domain_evaluate(t.model(), cfg, thin, other.store, 4, 3, 0.5), DataError);
}

TEST(Harness, AblationRowsSharePairedStreams) {
  const auto& d = small_data();
  RunConfig base = small_run_config(d, 3);
  base.eval_episodes = 3;
  const auto rows = run_ablation(base, {"protonet", "text", "lgp", "lpp", "ppl"}, d.index, d.store);
  ASSERT_EQ(rows.size(), 5u);
  const json report = harness_report(rows, "design");
  ASSERT_EQ(report.at("rows").size(), 5u);
  for (const auto& r : report.at("rows")) {
    EXPECT_EQ(r.at("episode_stream"), report.at("rows")[0].at("episode_stream"));
    EXPECT_EQ(r.at("episodes"), 3);
  }
  EXPECT_EQ(rows[1].config.model.n_specific, 0u);
  EXPECT_EQ(rows[1].config.model.n_shared, 0u);
  EXPECT_EQ(rows[0].config.model.design, PromptDesign::kProtoNet);
  // Same config, same numbers.
  const auto again = run_ablation(base, {"protonet", "text", "lgp", "lpp", "ppl"}, d.index, d.store);
  EXPECT_EQ(harness_metrics(rows, "design"), harness_metrics(again, "design"));
  EXPECT_THROW(run_ablation(base, {"clip"}, d.index, d.store), ArgumentError);
}

TEST(Harness, SweepM) {
  const auto& d = small_data();
  RunConfig base = small_run_config(d, 2);
  base.eval_episodes = 2;
  const auto rows = sweep_m(base, {0.0, 0.5, 0.9, 0.99}, d.index, d.store);
  const json report = harness_report(rows, "m");
  ASSERT_EQ(report.at("rows").size(), 4u);
  EXPECT_EQ(report.at("rows")[3].at("m"), 0.99);
  EXPECT_EQ(report.at("rows")[1].at("episode_stream"), report.at("rows")[2].at("episode_stream"));
  const std::string metrics = harness_metrics(rows, "m");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 4 * 3);
  EXPECT_THROW(sweep_m(base, {0.5, 1.5}, d.index, d.store), ConfigError);
}
