// partseg command-line entry point.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data error,
// 4 numeric failure, 1 anything else.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "partseg/partseg.hpp"

using namespace partseg;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }
  return out;
}

bool deterministic_env() {
  const char* v = std::getenv("PARTSEG_DETERMINISTIC");
  return v == nullptr || std::string(v) != "0";
}

// Flags shared by every command that builds a RunConfig. Values left unset
// keep whatever the config file (or the built-in default) says.
struct RunFlags {
  std::string config;
  std::optional<std::string> data, design, shared_keys;
  std::optional<int> split, steps, k_shot, eval_episodes, eval_every;
  std::optional<std::size_t> n_specific, n_shared;
  std::optional<std::uint64_t> seed, eval_seed;
  std::optional<double> m, alpha, lr;
  bool overfit = false;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration file");
    app->add_option("--data", data, "Dataset root directory");
    app->add_option("--design", design, "Prompt design: protonet, lgp, lpp or ppl");
    app->add_option("--split", split, "Split id (0-3)");
    app->add_option("--steps", steps, "Training steps (max_steps)");
    app->add_option("--k-shot", k_shot, "Support shots per episode");
    app->add_option("--n-specific", n_specific, "Part-specific tokens per prompt");
    app->add_option("--n-shared", n_shared, "Part-shared tokens per prompt");
    app->add_option("--m", m, "EMA momentum of the shared-token bank");
    app->add_option("--alpha", alpha, "Fusion weight of the visual logits");
    app->add_option("--lr", lr, "Base learning rate");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--shared-keys", shared_keys, "Shared-token keying: per_part or global");
    app->add_option("--eval-episodes", eval_episodes, "Evaluation episodes");
    app->add_option("--eval-seed", eval_seed, "Evaluation episode-stream seed");
    app->add_option("--eval-every", eval_every, "Evaluate every N steps during training (0 = off)");
    app->add_flag("--overfit-one-episode", overfit, "Train on a single fixed episode");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_config_file(config);
    json delta = json::object();
    if (data) delta["data"] = *data;
    if (design) delta["design"] = *design;
    if (split) delta["split_id"] = *split;
    if (steps) delta["schedule"]["max_steps"] = *steps;
    if (k_shot) delta["k_shot"] = *k_shot;
    if (n_specific) delta["n_specific"] = *n_specific;
    if (n_shared) delta["n_shared"] = *n_shared;
    if (m) delta["momentum"] = *m;
    if (alpha) delta["fusion_alpha"] = *alpha;
    if (lr) delta["optimizer"]["base_lr"] = *lr;
    if (seed) delta["seed"] = *seed;
    if (shared_keys) delta["shared_key_mode"] = *shared_keys;
    if (eval_episodes) delta["eval"]["episodes"] = *eval_episodes;
    if (eval_seed) delta["eval"]["seed"] = *eval_seed;
    if (eval_every) delta["eval"]["every"] = *eval_every;
    if (overfit) delta["overfit_one_episode"] = true;
    try {
      cfg = config_from_json(delta, cfg);
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
    cfg.deterministic = deterministic_env();
    if (cfg.data.empty()) throw ConfigError("no dataset given (--data or \"data\" in the config)");
    if (!fs::is_directory(cfg.data)) throw ConfigError("dataset directory does not exist: " + cfg.data);
    validate(cfg);
    return cfg;
  }
};

struct LoadedData {
  DatasetIndex index;
  SampleStore store;
};

LoadedData load_data(const fs::path& root) {
  LoadedData d;
  d.index = ingest_dataset(root, &d.store);
  return d;
}

// --- gen-data ---------------------------------------------------------------

struct GenFlags {
  SynthConfig cfg;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenFlags& f) {
  validate(f.cfg);
  const auto index = generate_synthetic_dataset(f.cfg, f.seed, f.out);
  write_json(fs::path(f.out) / "resolved_config.json",
             {{"command", "gen-data"},
              {"seed", f.seed},
              {"categories", f.cfg.num_categories},
              {"samples", f.cfg.samples_per_category},
              {"size", f.cfg.image_size},
              {"object_scale", f.cfg.object_scale},
              {"out", f.out}});
  std::cout << "dataset " << f.out << ": " << index.categories.size() << " categories, " << index.sample_count()
            << " samples, " << f.cfg.image_size << "x" << f.cfg.image_size << "\n";
  for (const auto& c : index.categories) {
    std::cout << "  " << c.name << ":";
    for (const auto& p : c.parts) std::cout << ' ' << p.normalized_name;
    std::cout << "\n";
  }
  return kOk;
}

// --- train ------------------------------------------------------------------

int cmd_train(const RunFlags& flags, const std::string& out, const std::string& resume, int stop_at) {
  ensure_dir(out);
  std::optional<Checkpoint> ck;
  if (!resume.empty()) ck = load_checkpoint(resume);
  RunConfig cfg = ck ? ck->config : flags.resolve();
  if (ck && flags.steps) cfg.max_steps = *flags.steps;
  if (ck) ck->config = cfg;
  write_json(fs::path(out) / "resolved_config.json", to_json(cfg));

  const LoadedData data = load_data(cfg.data);
  Trainer trainer = ck ? Trainer(*ck, data.index, data.store) : Trainer(cfg, data.index, data.store);
  std::ofstream metrics(fs::path(out) / "metrics.jsonl", ck ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics to " + out);
  try {
    trainer.run(&metrics, stop_at);
  } catch (const NumericError& e) {
    write_json(fs::path(out) / "numeric_failure.json",
               {{"step", trainer.current_step()}, {"episode", trainer.last_episode()}, {"error", e.what()}});
    throw;
  }
  save_checkpoint(trainer.checkpoint(), fs::path(out) / "ckpt");
  std::cout << "trained " << to_string(cfg.model.design) << " for " << trainer.current_step() << " steps -> "
            << (fs::path(out) / "ckpt").string() << "\n";
  return kOk;
}

// --- eval / xdomain ---------------------------------------------------------

struct EvalFlags {
  std::string ckpt;
  std::optional<std::string> data;
  std::optional<int> episodes;
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  std::string partition = "novel";
  std::string out;
};

fs::path default_out(const EvalFlags& f, const char* sub) {
  return f.out.empty() ? fs::path(f.ckpt).parent_path() / sub : fs::path(f.out);
}

void print_report(const EvalReport& r) {
  std::cout << "mIoU " << r.mean << " +/- " << r.std << " over " << r.episodes.size() << " episodes\n";
  for (const auto& [cat, v] : r.per_category) std::cout << "  " << cat << ": " << v.first << "\n";
}

int cmd_eval(const EvalFlags& f, bool cross_domain) {
  const Checkpoint ck = load_checkpoint(f.ckpt);
  const RunConfig& cfg = ck.config;
  const std::string data_root = f.data ? *f.data : cfg.data;
  const int episodes = f.episodes.value_or(cfg.eval_episodes);
  const double alpha = f.alpha.value_or(cfg.fusion_alpha);
  const std::uint64_t seed = f.seed.value_or(cfg.eval_seed);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("--alpha must be in [0, 1]");
  if (episodes < 1) throw ConfigError("--episodes must be >= 1");
  if (f.partition != "novel" && f.partition != "base") throw ConfigError("--partition must be novel or base");
  if (cross_domain && !f.data) throw ConfigError("xdomain needs --data for the target dataset");
  const fs::path out = default_out(f, cross_domain ? "xdomain" : "eval");
  ensure_dir(out);
  json resolved = {{"command", cross_domain ? "xdomain" : "eval"},
                   {"ckpt", f.ckpt},
                   {"data", data_root},
                   {"episodes", episodes},
                   {"alpha", alpha},
                   {"eval_seed", seed},
                   {"partition", cross_domain ? "novel" : f.partition},
                   {"run", to_json(cfg)}};
  write_json(out / "resolved_config.json", resolved);

  const auto model = model_from_checkpoint(ck);
  const LoadedData data = load_data(data_root);
  EvalReport report;
  if (cross_domain) {
    report = cross_domain_evaluate(*model, cfg, data.index, data.store, episodes, seed, alpha);
  } else {
    const SplitSpec split = resolve_split(data.index, cfg.split_id, cfg.split_seed);
    report = evaluate(*model, data.index, data.store, split,
                      f.partition == "base" ? Partition::kBase : Partition::kNovel, episodes, seed, cfg.k_shot,
                      alpha);
  }
  json j = report.to_json();
  j["design"] = to_string(cfg.model.design);
  j["alpha"] = alpha;
  j["step"] = ck.step;
  write_json(out / (cross_domain ? "xdomain_report.json" : "eval_report.json"), j);
  print_report(report);
  return kOk;
}

// --- ablate / sweep-m -------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

int write_harness(const std::vector<HarnessRow>& rows, const fs::path& out, const char* stem, const char* key) {
  write_json(out / (std::string(stem) + ".json"), harness_report(rows, key));
  write_text_file(out / (std::string(stem) + "_metrics.jsonl"), harness_metrics(rows, key));
  std::cout << key << "\tmIoU\tstd\n";
  for (const auto& r : rows) std::cout << r.name << "\t" << r.report.mean << "\t" << r.report.std << "\n";
  return kOk;
}

int cmd_ablate(const RunFlags& flags, const std::string& designs, const std::string& out) {
  const RunConfig cfg = flags.resolve();
  const auto list = split_list(designs);
  if (list.empty()) throw ConfigError("--designs is empty");
  for (const auto& d : list)
    if (d != "text") (void)select_prompt_design(d);
  for (const auto& d : list) validate(apply_design(cfg, d));
  ensure_dir(out);
  json resolved = to_json(cfg);
  resolved["designs"] = list;
  write_json(fs::path(out) / "resolved_config.json", resolved);
  const LoadedData data = load_data(cfg.data);
  return write_harness(run_ablation(cfg, list, data.index, data.store), out, "ablation", "design");
}

int cmd_sweep_m(const RunFlags& flags, const std::string& values, const std::string& out) {
  const RunConfig cfg = flags.resolve();
  std::vector<double> ms;
  for (const auto& v : split_list(values)) {
    try {
      std::size_t used = 0;
      ms.push_back(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError("not a number in --values: '" + v + "'");
    }
  }
  if (ms.empty()) throw ConfigError("--values is empty");
  for (double m : ms)
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum m must be in [0, 1], got " + std::to_string(m));
  ensure_dir(out);
  json resolved = to_json(cfg);
  resolved["values"] = ms;
  write_json(fs::path(out) / "resolved_config.json", resolved);
  const LoadedData data = load_data(cfg.data);
  return write_harness(sweep_m(cfg, ms, data.index, data.store), out, "sweep_m", "m");
}

// --- plot -------------------------------------------------------------------

struct PlotFlags {
  std::vector<std::string> metrics;
  std::string sweep, ablation, report, ckpt, episode, data;
  std::optional<double> alpha;
  std::string out = ".";
};

int cmd_plot(const PlotFlags& f) {
  if (f.metrics.empty() && f.sweep.empty() && f.ablation.empty() && f.report.empty() && f.ckpt.empty())
    throw ConfigError("nothing to plot: give --metrics, --sweep, --ablation, --report or --ckpt");
  for (const auto& p : f.metrics)
    if (!fs::exists(p)) throw IoError("missing report: " + p);
  for (const auto* p : {&f.sweep, &f.ablation, &f.report, &f.ckpt})
    if (!p->empty() && !fs::exists(*p)) throw IoError("missing report: " + *p);
  ensure_dir(f.out);
  const fs::path out = f.out;
  write_json(out / "resolved_config.json", {{"command", "plot"},
                                            {"metrics", f.metrics},
                                            {"sweep", f.sweep},
                                            {"ablation", f.ablation},
                                            {"report", f.report},
                                            {"ckpt", f.ckpt},
                                            {"episode", f.episode}});

  if (!f.metrics.empty()) {
    // Harness metrics carry a "design" or "m" tag; one total-loss series per tag.
    std::vector<plot::Series> series;
    for (const auto& path : f.metrics) {
      std::map<std::string, plot::Series> groups;
      std::vector<std::string> order;
      for (const auto& rec : read_jsonl(path)) {
        if (!rec.contains("loss")) continue;
        std::string tag = fs::path(path).stem().string();
        if (rec.contains("design")) tag = rec["design"].get<std::string>();
        if (rec.contains("m")) tag = "m=" + rec["m"].get<std::string>();
        if (!groups.count(tag)) order.push_back(tag);
        auto& s = groups[tag];
        s.name = tag;
        s.points.emplace_back(rec["step"].get<double>(), rec["loss"].get<double>());
      }
      for (const auto& t : order) series.push_back(groups[t]);
    }
    plot::write_svg(out / "loss_curve.svg", plot::line_chart(series, "Training loss", "step", "L"));
  }
  if (!f.sweep.empty()) {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& r : read_json(f.sweep).at("rows")) bars.emplace_back("m=" + r.at("m").dump(), r.at("mean_miou"));
    plot::write_svg(out / "sweep_m.svg", plot::bar_chart(bars, "mIoU vs EMA momentum", "m", "mIoU"));
  }
  if (!f.ablation.empty()) {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& r : read_json(f.ablation).at("rows")) bars.emplace_back(r.at("design"), r.at("mean_miou"));
    plot::write_svg(out / "ablation.svg", plot::bar_chart(bars, "mIoU by prompt design", "design", "mIoU"));
  }
  if (!f.report.empty()) {
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [part, v] : read_json(f.report).at("per_part").items()) bars.emplace_back(part, v.at("mean_iou"));
    plot::write_svg(out / "per_class_iou.svg", plot::bar_chart(bars, "Per-part IoU", "part", "IoU"));
  }
  if (!f.ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(f.ckpt);
    const auto model = model_from_checkpoint(ck);
    const LoadedData data = load_data(f.data.empty() ? ck.config.data : f.data);
    Episode ep;
    if (!f.episode.empty() && f.episode.find(':') != std::string::npos) {
      ep = episode_from_id(data.index, data.store, f.episode);
    } else {
      // Index into the evaluation stream of the checkpoint's novel split.
      int n = 0;
      if (!f.episode.empty()) {
        try {
          n = std::stoi(f.episode);
        } catch (const std::exception&) {
          throw ConfigError("--episode must be an index or an episode id");
        }
      }
      if (n < 0) throw ConfigError("--episode index must be >= 0");
      const SplitSpec split = resolve_split(data.index, ck.config.split_id, ck.config.split_seed);
      Rng rng(derive_seed(ck.config.eval_seed, "eval-episodes"));
      for (int i = 0; i <= n; ++i)
        ep = sample_episode(data.index, data.store, split, Partition::kNovel, ck.config.k_shot, rng);
    }
    const auto pred = model->predict(ep, f.alpha.value_or(ck.config.fusion_alpha));
    png::write_rgb(out / "qualitative.png", plot::qualitative_panel(ep.query.image, ep.query.mask, pred.labels));
    std::cout << "episode " << ep.id << "\n";
  }
  std::cout << "plots written to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot part segmentation with part-aware prompt learning"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic part-segmentation dataset");
  gen_cmd->add_option("--categories", gen.cfg.num_categories, "Number of categories (>= 3)")->capture_default_str();
  gen_cmd->add_option("--samples", gen.cfg.samples_per_category, "Samples per category")->capture_default_str();
  gen_cmd->add_option("--size", gen.cfg.image_size, "Image side length in pixels")->capture_default_str();
  gen_cmd->add_option("--object-scale", gen.cfg.object_scale, "Object unit length / image size")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();

  RunFlags train_flags;
  std::string train_out = ".", resume;
  int stop_at = -1;
  auto* train_cmd = app.add_subcommand("train", "Episodic training; writes ckpt and metrics.jsonl");
  train_flags.add(train_cmd);
  train_cmd->add_option("--out", train_out, "Output directory")->capture_default_str();
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint (its config is reused)");
  train_cmd->add_option("--stop-at", stop_at, "Stop after this step without changing the schedule")
      ->check(CLI::NonNegativeNumber);

  EvalFlags eval_flags;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the novel (or base) partition");
  EvalFlags xd_flags;
  auto* xd_cmd = app.add_subcommand("xdomain", "Evaluate a checkpoint on another dataset without training");
  for (auto [cmd, f] : {std::pair{eval_cmd, &eval_flags}, std::pair{xd_cmd, &xd_flags}}) {
    cmd->add_option("--ckpt", f->ckpt, "Checkpoint file")->required();
    cmd->add_option("--data", f->data, cmd == xd_cmd ? "Target dataset root" : "Dataset root (default: training data)");
    cmd->add_option("--episodes", f->episodes, "Number of evaluation episodes");
    cmd->add_option("--alpha", f->alpha, "Fusion weight of the visual logits");
    cmd->add_option("--seed", f->seed, "Evaluation episode-stream seed");
    cmd->add_option("--out", f->out, "Output directory (default: next to the checkpoint)");
  }
  eval_cmd->add_option("--partition", eval_flags.partition, "novel or base")->capture_default_str();

  RunFlags ablate_flags;
  std::string designs = "protonet,text,lgp,lpp,ppl", ablate_out = ".";
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate each prompt design on paired streams");
  ablate_flags.add(ablate_cmd);
  ablate_cmd->add_option("--designs", designs, "Comma-separated designs (protonet,text,lgp,lpp,ppl)")
      ->capture_default_str();
  ablate_cmd->add_option("--out", ablate_out, "Output directory")->capture_default_str();

  RunFlags sweep_flags;
  std::string values = "0,0.5,0.9,0.99", sweep_out = ".";
  auto* sweep_cmd = app.add_subcommand("sweep-m", "Train and evaluate once per EMA momentum value");
  sweep_flags.add(sweep_cmd);
  sweep_cmd->add_option("--values", values, "Comma-separated m values in [0, 1]")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->capture_default_str();

  PlotFlags plot_flags;
  auto* plot_cmd = app.add_subcommand("plot", "Render loss curves, bar charts and qualitative panels");
  plot_cmd->add_option("--metrics", plot_flags.metrics, "metrics.jsonl files (loss curve)");
  plot_cmd->add_option("--sweep", plot_flags.sweep, "sweep_m.json (mIoU per m)");
  plot_cmd->add_option("--ablation", plot_flags.ablation, "ablation.json (mIoU per design)");
  plot_cmd->add_option("--report", plot_flags.report, "eval_report.json (per-part IoU)");
  plot_cmd->add_option("--ckpt", plot_flags.ckpt, "Checkpoint for the qualitative panel");
  plot_cmd->add_option("--episode", plot_flags.episode, "Episode id or index into the evaluation stream");
  plot_cmd->add_option("--data", plot_flags.data, "Dataset root for the qualitative panel");
  plot_cmd->add_option("--alpha", plot_flags.alpha, "Fusion weight for the qualitative panel");
  plot_cmd->add_option("--out", plot_flags.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_flags, train_out, resume, stop_at);
    if (*eval_cmd) return cmd_eval(eval_flags, false);
    if (*xd_cmd) return cmd_eval(xd_flags, true);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, designs, ablate_out);
    if (*sweep_cmd) return cmd_sweep_m(sweep_flags, values, sweep_out);
    if (*plot_cmd) return cmd_plot(plot_flags);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const LookupError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
