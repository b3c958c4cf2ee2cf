#pragma once

// Episodic training, checkpointing, evaluation and experiment harnesses.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "partseg/data.hpp"
#include "partseg/model.hpp"

namespace partseg {

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  int schema_version = 1;
  std::string data;
  int split_id = 0;
  std::uint64_t split_seed = 0;  // only used when the dataset has no splits.json
  ModelConfig model;
  double fusion_alpha = 0.5;
  double base_lr = 0.01;
  double sgd_momentum = 0.9;
  double clip_norm = 5.0;  // global gradient-norm cap; 0 disables
  double poly_power = 0.9;
  int max_steps = 3000;
  int k_shot = 1;
  std::uint64_t seed = 0;
  bool overfit_one_episode = false;
  int eval_every = 0;
  int eval_episodes = 200;
  std::uint64_t eval_seed = 1234;
  bool deterministic = true;
};

inline void validate(const RunConfig& cfg) {
  if (cfg.schema_version != 1) throw ConfigError("unsupported config schema_version " + std::to_string(cfg.schema_version));
  validate(cfg.model);
  if (cfg.split_id < 0 || cfg.split_id > 3) throw ConfigError("split_id must be in 0..3");
  if (!(cfg.fusion_alpha >= 0.0 && cfg.fusion_alpha <= 1.0)) throw ConfigError("fusion alpha must be in [0, 1]");
  if (!(cfg.base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
  if (!(cfg.sgd_momentum >= 0.0 && cfg.sgd_momentum < 1.0)) throw ConfigError("SGD momentum must be in [0, 1)");
  if (cfg.max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (cfg.k_shot < 1) throw ConfigError("k_shot must be >= 1");
  if (cfg.eval_episodes < 0 || cfg.eval_every < 0) throw ConfigError("eval settings must be >= 0");
  if (cfg.clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
}

namespace detail {

template <typename E>
E enum_from(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string("invalid ") + what + " '" + s + "'");
}

inline const char* logit_mode_name(LogitMode m) { return m == LogitMode::kDot ? "dot" : "cosine"; }
inline const char* key_mode_name(SharedKeyMode m) { return m == SharedKeyMode::kPerPart ? "per_part" : "global"; }
inline const char* bg_mode_name(BackgroundMode m) { return m == BackgroundMode::kPooled ? "pooled" : "learned"; }

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& e = m.encoder;
  return {
      {"schema_version", c.schema_version},
      {"data", c.data},
      {"split_id", c.split_id},
      {"split_seed", c.split_seed},
      {"design", to_string(m.design)},
      {"encoder",
       {{"visual_arch", e.visual_arch},
        {"text_arch", e.text_arch},
        {"channels", e.channels},
        {"stride", e.stride},
        {"token_dim", e.token_dim},
        {"context_limit", e.context_limit},
        {"n_text", e.n_text},
        {"text_hidden", e.text_hidden}}},
      {"n_specific", m.n_specific},
      {"n_shared", m.n_shared},
      {"momentum", m.momentum},
      {"shared_key_mode", detail::key_mode_name(m.shared_keys)},
      {"background_mode", detail::bg_mode_name(m.background)},
      {"background_in_softmax", m.background_in_softmax},
      {"text_frozen", m.text_frozen},
      {"logit_mode", detail::logit_mode_name(m.logit_mode)},
      {"temperature", m.temperature},
      {"loss_weights", {{"visual", m.loss_weights.visual}, {"textual", m.loss_weights.textual}}},
      {"fusion_alpha", c.fusion_alpha},
      {"optimizer", {{"base_lr", c.base_lr}, {"momentum", c.sgd_momentum}, {"clip_norm", c.clip_norm}}},
      {"schedule", {{"power", c.poly_power}, {"max_steps", c.max_steps}}},
      {"k_shot", c.k_shot},
      {"seed", c.seed},
      {"overfit_one_episode", c.overfit_one_episode},
      {"eval", {{"every", c.eval_every}, {"episodes", c.eval_episodes}, {"seed", c.eval_seed}}},
      {"deterministic", c.deterministic},
  };
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline RunConfig config_from_json(const json& j, RunConfig c = {}) {
  static const std::set<std::string> known = {
      "schema_version", "data", "split_id", "split_seed", "design", "encoder", "n_specific",
      "n_shared", "momentum", "shared_key_mode", "background_mode", "background_in_softmax",
      "text_frozen", "logit_mode", "temperature", "loss_weights", "fusion_alpha", "optimizer",
      "schedule", "k_shot", "seed", "overfit_one_episode", "eval", "deterministic"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  try {
    auto get = [&](const json& obj, const char* key, auto& field) {
      if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    auto& m = c.model;
    get(j, "schema_version", c.schema_version);
    get(j, "data", c.data);
    get(j, "split_id", c.split_id);
    get(j, "split_seed", c.split_seed);
    if (j.contains("design")) m.design = select_prompt_design(j.at("design").get<std::string>());
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      get(e, "visual_arch", m.encoder.visual_arch);
      get(e, "text_arch", m.encoder.text_arch);
      get(e, "channels", m.encoder.channels);
      get(e, "stride", m.encoder.stride);
      get(e, "token_dim", m.encoder.token_dim);
      get(e, "context_limit", m.encoder.context_limit);
      get(e, "n_text", m.encoder.n_text);
      get(e, "text_hidden", m.encoder.text_hidden);
    }
    get(j, "n_specific", m.n_specific);
    get(j, "n_shared", m.n_shared);
    get(j, "momentum", m.momentum);
    if (j.contains("shared_key_mode"))
      m.shared_keys = detail::enum_from<SharedKeyMode>(
          j.at("shared_key_mode").get<std::string>(),
          {{"per_part", SharedKeyMode::kPerPart}, {"global", SharedKeyMode::kGlobal}}, "shared_key_mode");
    if (j.contains("background_mode"))
      m.background = detail::enum_from<BackgroundMode>(
          j.at("background_mode").get<std::string>(),
          {{"pooled", BackgroundMode::kPooled}, {"learned", BackgroundMode::kLearned}}, "background_mode");
    get(j, "background_in_softmax", m.background_in_softmax);
    get(j, "text_frozen", m.text_frozen);
    if (j.contains("logit_mode"))
      m.logit_mode = detail::enum_from<LogitMode>(j.at("logit_mode").get<std::string>(),
                                                  {{"dot", LogitMode::kDot}, {"cosine", LogitMode::kCosine}},
                                                  "logit_mode");
    get(j, "temperature", m.temperature);
    if (j.contains("loss_weights")) {
      get(j.at("loss_weights"), "visual", m.loss_weights.visual);
      get(j.at("loss_weights"), "textual", m.loss_weights.textual);
    }
    get(j, "fusion_alpha", c.fusion_alpha);
    if (j.contains("optimizer")) {
      get(j.at("optimizer"), "base_lr", c.base_lr);
      get(j.at("optimizer"), "momentum", c.sgd_momentum);
      get(j.at("optimizer"), "clip_norm", c.clip_norm);
    }
    if (j.contains("schedule")) {
      get(j.at("schedule"), "power", c.poly_power);
      get(j.at("schedule"), "max_steps", c.max_steps);
    }
    get(j, "k_shot", c.k_shot);
    get(j, "seed", c.seed);
    get(j, "overfit_one_episode", c.overfit_one_episode);
    if (j.contains("eval")) {
      get(j.at("eval"), "every", c.eval_every);
      get(j.at("eval"), "episodes", c.eval_episodes);
      get(j.at("eval"), "seed", c.eval_seed);
    }
    get(j, "deterministic", c.deterministic);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config_file(const fs::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return config_from_json(json::parse(in), std::move(base));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

/// Polynomial decay lr_t = base_lr * (1 - t / max_steps)^power.
inline double poly_lr(double base_lr, int step, int max_steps, double power) {
  if (max_steps <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(std::min(step, max_steps)) / max_steps;
  return base_lr * std::pow(frac, power);
}

/// Split from the dataset's splits.json when present, otherwise built.
inline SplitSpec resolve_split(const DatasetIndex& index, int split_id, std::uint64_t split_seed) {
  if (auto s = load_split_file(index.root, split_id)) return *s;
  return build_splits(index, split_id, split_seed);
}

// ---------------------------------------------------------------------------
// Optimizer

/// SGD with heavy-ball momentum: v <- mu * v + g; p <- p - lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(const ParameterList& params, double lr, double clip_norm = 0.0) {
    double scale = 1.0;
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : params)
        for (double g : p.var.grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    for (const auto& p : params) {
      auto& v = velocity_[p.name];
      const auto g = p.var.grad();
      if (v.size() != g.size()) v.assign(g.size(), 0.0);
      auto& value = const_cast<ad::Var&>(p.var).mutable_value().data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        v[i] = momentum_ * v[i] + scale * g[i];
        value[i] -= lr * v[i];
      }
    }
  }

  std::map<std::string, std::vector<double>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<double>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------
// Checkpoint archive
//
// Layout: 8-byte magic "PSCKPT01", u64 little-endian manifest length, the JSON
// manifest, then a blob of little-endian IEEE-754 doubles. The manifest names
// every blob slice by offset and count (in doubles).

struct BankSnapshot {
  Tensor current;
  Tensor shared;
  std::uint64_t updates = 0;
};

struct Checkpoint {
  RunConfig config;
  int step = 0;
  std::map<std::string, Tensor> parameters;
  std::map<std::string, std::vector<double>> velocity;
  std::map<std::string, BankSnapshot> bank;
  std::string train_rng;

  bool operator==(const Checkpoint& o) const {
    if (step != o.step || parameters != o.parameters || velocity != o.velocity ||
        train_rng != o.train_rng || to_json(config) != to_json(o.config) || bank.size() != o.bank.size())
      return false;
    for (const auto& [k, b] : bank) {
      auto it = o.bank.find(k);
      if (it == o.bank.end() || !(it->second.current == b.current) || !(it->second.shared == b.shared) ||
          it->second.updates != b.updates)
        return false;
    }
    return true;
  }
};

inline constexpr char kCheckpointMagic[8] = {'P', 'S', 'C', 'K', 'P', 'T', '0', '1'};

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  std::vector<double> blob;
  auto append = [&](const std::vector<double>& v) {
    const std::size_t off = blob.size();
    blob.insert(blob.end(), v.begin(), v.end());
    return json{{"offset", off}, {"count", v.size()}};
  };
  json manifest;
  manifest["format"] = "partseg-checkpoint";
  manifest["version"] = 1;
  manifest["step"] = ck.step;
  manifest["config"] = to_json(ck.config);
  manifest["rng"] = {{"train", ck.train_rng}};
  manifest["parameters"] = json::array();
  for (const auto& [name, t] : ck.parameters) {
    json e = append(t.data);
    e["name"] = name;
    e["shape"] = t.shape;
    manifest["parameters"].push_back(e);
  }
  manifest["optimizer"] = json::array();
  for (const auto& [name, v] : ck.velocity) {
    json e = append(v);
    e["name"] = name;
    manifest["optimizer"].push_back(e);
  }
  manifest["bank"] = json::array();
  for (const auto& [key, b] : ck.bank) {
    json e;
    e["key"] = key;
    e["shape"] = b.current.shape;
    e["current"] = append(b.current.data);
    e["shared"] = append(b.shared.data);
    e["updates"] = b.updates;
    e["momentum"] = ck.config.model.momentum;
    manifest["bank"].push_back(e);
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  auto put_u64 = [&](std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
  };
  put_u64(text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double d : blob) put_u64(std::bit_cast<std::uint64_t>(d));
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ValidationError("not a checkpoint file: " + path.string());
  auto get_u64 = [&]() {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw ValidationError("truncated checkpoint " + path.string());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  };
  const std::uint64_t len = get_u64();
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError("truncated checkpoint manifest");
  std::vector<double> blob;
  for (;;) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) break;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    blob.push_back(std::bit_cast<double>(v));
  }
  Checkpoint ck;
  try {
    const json m = json::parse(text);
    if (m.at("format") != "partseg-checkpoint" || m.at("version") != 1)
      throw ValidationError("unsupported checkpoint version");
    auto slice = [&](const json& e) {
      const std::size_t off = e.at("offset"), n = e.at("count");
      if (off + n > blob.size()) throw ValidationError("checkpoint blob too short");
      return std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(off),
                                 blob.begin() + static_cast<std::ptrdiff_t>(off + n));
    };
    ck.config = config_from_json(m.at("config"));
    ck.step = m.at("step");
    ck.train_rng = m.at("rng").at("train");
    for (const auto& e : m.at("parameters"))
      ck.parameters[e.at("name")] = Tensor(e.at("shape").get<Shape>(), slice(e));
    for (const auto& e : m.at("optimizer")) ck.velocity[e.at("name")] = slice(e);
    for (const auto& e : m.at("bank")) {
      const Shape shape = e.at("shape").get<Shape>();
      ck.bank[e.at("key")] = {Tensor(shape, slice(e.at("current"))), Tensor(shape, slice(e.at("shared"))),
                              e.at("updates").get<std::uint64_t>()};
    }
  } catch (const json::exception& e) {
    throw ValidationError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  return ck;
}

/// Rebuilds a model from a checkpoint (bank keys and every parameter value).
inline std::unique_ptr<PartSegModel> model_from_checkpoint(const Checkpoint& ck) {
  std::vector<std::string> keys;
  for (const auto& [k, _] : ck.bank) keys.push_back(k);
  auto model = std::make_unique<PartSegModel>(ck.config.model, ck.config.seed, keys);
  for (const auto& [k, b] : ck.bank) model->bank().set_entry(k, b.current, b.shared, b.updates);
  ParameterList all = model->trainable_parameters();
  if (ck.config.model.text_frozen)
    for (auto& p : model->text_parameters()) all.push_back(p);
  for (auto& p : all) {
    if (p.name.rfind("bank/", 0) == 0) continue;
    auto it = ck.parameters.find(p.name);
    if (it == ck.parameters.end()) throw ValidationError("checkpoint lacks parameter " + p.name);
    if (it->second.shape != p.var.shape()) throw ValidationError("shape mismatch for parameter " + p.name);
    p.var.mutable_value() = it->second;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EpisodeResult {
  std::string id;
  std::string category;
  double miou = 0.0;
};

struct EvalReport {
  std::vector<EpisodeResult> episodes;
  double mean = 0.0;
  double std = 0.0;
  std::map<std::string, std::pair<double, int>> per_category;  // mean, count
  std::map<std::string, std::pair<double, int>> per_part;      // mean IoU over episodes where valid

  json to_json() const {
    json j;
    j["episodes"] = episodes.size();
    j["mean_miou"] = mean;
    j["std_miou"] = std;
    j["per_category"] = json::object();
    for (const auto& [k, v] : per_category) j["per_category"][k] = {{"mean_miou", v.first}, {"episodes", v.second}};
    j["per_part"] = json::object();
    for (const auto& [k, v] : per_part) j["per_part"][k] = {{"mean_iou", v.first}, {"count", v.second}};
    j["episode_results"] = json::array();
    for (const auto& e : episodes) j["episode_results"].push_back({{"id", e.id}, {"miou", e.miou}});
    return j;
  }
};

/// Mean and population std of per-episode mIoU over a seeded episode stream.
/// Read-only with respect to the model.
inline EvalReport evaluate(const PartSegModel& model, const DatasetIndex& index, const SampleStore& store,
                           const SplitSpec& split, Partition partition, int episodes,
                           std::uint64_t eval_seed, int k_shot, double alpha) {
  if (episodes < 1) throw ArgumentError("episodes must be >= 1");
  Rng rng(derive_seed(eval_seed, "eval-episodes"));
  EvalReport report;
  std::map<std::string, std::pair<double, int>> cat_sum, part_sum;
  for (int e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(index, store, split, partition, k_shot, rng);
    const auto pred = model.predict(ep, alpha);
    const auto r = miou(pred.labels, ep.query.mask, ep.category.num_parts() + 1, model.ignored_label());
    report.episodes.push_back({ep.id, ep.category.name, r.mean});
    auto& c = cat_sum[ep.category.name];
    c.first += r.mean;
    ++c.second;
    for (std::size_t k = 0; k < r.iou.size(); ++k) {
      if (!r.valid[k]) continue;
      auto& p = part_sum[part_key(ep.category, static_cast<int>(k))];
      p.first += r.iou[k];
      ++p.second;
    }
  }
  double sum = 0.0;
  for (const auto& e : report.episodes) sum += e.miou;
  report.mean = sum / static_cast<double>(report.episodes.size());
  double var = 0.0;
  for (const auto& e : report.episodes) var += (e.miou - report.mean) * (e.miou - report.mean);
  report.std = std::sqrt(var / static_cast<double>(report.episodes.size()));
  for (const auto& [k, v] : cat_sum) report.per_category[k] = {v.first / v.second, v.second};
  for (const auto& [k, v] : part_sum) report.per_part[k] = {v.first / v.second, v.second};
  return report;
}

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  int step = 0;
  double loss_vcl = 0.0;
  double loss_tcl = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  std::string episode;

  json to_json() const {
    return {{"step", step}, {"loss_vcl", loss_vcl}, {"loss_tcl", loss_tcl}, {"loss", loss}, {"lr", lr}};
  }
};

class Trainer {
 public:
  Trainer(RunConfig cfg, const DatasetIndex& index, const SampleStore& store)
      : cfg_(std::move(cfg)), index_(&index), store_(&store), opt_(cfg_.sgd_momentum) {
    validate(cfg_);
    split_ = resolve_split(index, cfg_.split_id, cfg_.split_seed);
    std::vector<Category> base;
    for (const auto& name : split_.base_categories) base.push_back(index.category(name));
    model_ = std::make_unique<PartSegModel>(cfg_.model, cfg_.seed, shared_keys_for(base, cfg_.model.shared_keys));
    rng_.seed(derive_seed(cfg_.seed, "train-episodes"));
  }

  Trainer(const Checkpoint& ck, const DatasetIndex& index, const SampleStore& store)
      : cfg_(ck.config), index_(&index), store_(&store), opt_(ck.config.sgd_momentum) {
    validate(cfg_);
    split_ = resolve_split(index, cfg_.split_id, cfg_.split_seed);
    model_ = model_from_checkpoint(ck);
    opt_.velocity() = ck.velocity;
    step_ = ck.step;
    std::istringstream in(ck.train_rng);
    in >> rng_;
  }

  /// One optimizer step on one episode. Throws NumericError on a non-finite loss.
  StepRecord step() {
    const double lr = poly_lr(cfg_.base_lr, step_, cfg_.max_steps, cfg_.poly_power);
    const Episode ep = next_episode();
    last_episode_ = ep.id;
    const ParameterList params = model_->trainable_parameters();
    for (const auto& p : params) const_cast<ad::Var&>(p.var).zero_grad();
    const auto out = model_->forward(ep, Mode::kTrain);
    StepRecord rec{step_, out.loss_vcl.value.item(), out.loss_tcl.value.item(), out.total.item(), lr, ep.id};
    if (!std::isfinite(rec.loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(step_) + " on episode " + ep.id);
    }
    ad::backward(out.total);
    opt_.step(params, lr, cfg_.clip_norm);
    std::set<std::string> keys(out.shared_keys.begin(), out.shared_keys.end());
    for (const auto& k : keys) model_->bank().ema_update(k);
    ++step_;
    return rec;
  }

  /// Runs to max_steps (or to `stop_at` when smaller), streaming JSON-lines
  /// metrics when `metrics` is set.
  void run(std::ostream* metrics = nullptr, int stop_at = -1) {
    const int end = stop_at >= 0 ? std::min(stop_at, cfg_.max_steps) : cfg_.max_steps;
    while (step_ < end) {
      const StepRecord rec = step();
      if (metrics) *metrics << rec.to_json().dump() << '\n';
      if (cfg_.eval_every > 0 && step_ % cfg_.eval_every == 0) {
        const auto r = evaluate(*model_, *index_, *store_, split_, Partition::kNovel, cfg_.eval_episodes,
                                cfg_.eval_seed, cfg_.k_shot, cfg_.fusion_alpha);
        if (metrics) *metrics << json{{"step", step_}, {"eval_miou", r.mean}}.dump() << '\n';
      }
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = cfg_;
    ck.step = step_;
    for (const auto& p : model_->trainable_parameters())
      if (p.name.rfind("bank/", 0) != 0) ck.parameters[p.name] = p.var.value();
    if (cfg_.model.text_frozen)
      for (const auto& p : model_->text_parameters()) ck.parameters[p.name] = p.var.value();
    ck.velocity = opt_.velocity();
    for (const auto& key : model_->bank().keys()) {
      const auto& e = model_->bank().entry(key);
      ck.bank[key] = {e.current.value(), e.shared, e.updates};
    }
    std::ostringstream rng;
    rng << rng_;
    ck.train_rng = rng.str();
    return ck;
  }

  PartSegModel& model() { return *model_; }
  const PartSegModel& model() const { return *model_; }
  const SplitSpec& split() const { return split_; }
  const RunConfig& config() const { return cfg_; }
  int current_step() const { return step_; }
  const std::string& last_episode() const { return last_episode_; }

 private:
  Episode next_episode() {
    if (cfg_.overfit_one_episode) {
      if (!fixed_) {
        Rng r(derive_seed(cfg_.seed, "overfit-episode"));
        fixed_ = sample_episode(*index_, *store_, split_, Partition::kBase, cfg_.k_shot, r);
      }
      return *fixed_;
    }
    return sample_episode(*index_, *store_, split_, Partition::kBase, cfg_.k_shot, rng_);
  }

  RunConfig cfg_;
  const DatasetIndex* index_;
  const SampleStore* store_;
  SplitSpec split_;
  std::unique_ptr<PartSegModel> model_;
  SgdMomentum opt_;
  Rng rng_;
  int step_ = 0;
  std::optional<Episode> fixed_;
  std::string last_episode_;
};

/// Evaluation on a second dataset with no further optimization. The target
/// dataset is split with the checkpoint's split id; its novel partition is
/// evaluated. Parts unseen in training get an empty shared-token block.
inline EvalReport cross_domain_evaluate(const PartSegModel& model, const RunConfig& cfg,
                                        const DatasetIndex& target, const SampleStore& store,
                                        int episodes, std::uint64_t eval_seed, double alpha) {
  const SplitSpec split = resolve_split(target, cfg.split_id, cfg.split_seed);
  bool any = false;
  for (const auto& name : split.novel_categories) {
    auto it = target.samples_by_category.find(name);
    if (it != target.samples_by_category.end() && it->second.size() > static_cast<std::size_t>(cfg.k_shot))
      any = true;
  }
  if (!any) throw DataError("target dataset has no evaluable novel category");
  return evaluate(model, target, store, split, Partition::kNovel, episodes, eval_seed, cfg.k_shot, alpha);
}

// ---------------------------------------------------------------------------
// Harnesses

/// Config delta for one ablation row: protonet, text (text encoder with
/// label-only prompts), lgp, lpp, ppl.
inline RunConfig apply_design(RunConfig cfg, const std::string& design) {
  if (design == "text") {
    cfg.model.design = PromptDesign::kPPL;
    cfg.model.n_specific = 0;
    cfg.model.n_shared = 0;
  } else {
    cfg.model.design = select_prompt_design(design);
  }
  return cfg;
}

struct HarnessRow {
  std::string name;
  RunConfig config;
  EvalReport report;
  std::vector<StepRecord> train_log;
};

inline HarnessRow train_and_evaluate(const std::string& name, const RunConfig& cfg, const DatasetIndex& index,
                                     const SampleStore& store) {
  Trainer trainer(cfg, index, store);
  HarnessRow row{name, cfg, {}, {}};
  while (trainer.current_step() < cfg.max_steps) row.train_log.push_back(trainer.step());
  row.report = evaluate(trainer.model(), index, store, trainer.split(), Partition::kNovel, cfg.eval_episodes,
                        cfg.eval_seed, cfg.k_shot, cfg.fusion_alpha);
  return row;
}

inline std::vector<HarnessRow> run_ablation(const RunConfig& base, const std::vector<std::string>& designs,
                                            const DatasetIndex& index, const SampleStore& store) {
  std::vector<HarnessRow> rows;
  for (const auto& d : designs) rows.push_back(train_and_evaluate(d, apply_design(base, d), index, store));
  return rows;
}

inline std::vector<HarnessRow> sweep_m(const RunConfig& base, const std::vector<double>& values,
                                       const DatasetIndex& index, const SampleStore& store) {
  for (double m : values)
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum m must be in [0, 1], got " + std::to_string(m));
  std::vector<HarnessRow> rows;
  for (double m : values) {
    RunConfig cfg = base;
    cfg.model.momentum = m;
    std::ostringstream name;
    name << m;
    rows.push_back(train_and_evaluate(name.str(), cfg, index, store));
  }
  return rows;
}

/// Comparison table; every row carries the evaluated episode ids so paired
/// streams can be checked.
inline json harness_report(const std::vector<HarnessRow>& rows, const char* key) {
  json j;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    std::vector<std::string> ids;
    for (const auto& e : r.report.episodes) ids.push_back(e.id);
    json row = {{key, r.name},
                {"mean_miou", r.report.mean},
                {"std_miou", r.report.std},
                {"episodes", r.report.episodes.size()},
                {"episode_stream", std::to_string(fnv1a(json(ids).dump()))},
                {"per_category", r.report.to_json()["per_category"]}};
    if (std::string(key) == "m") row["m"] = r.config.model.momentum;
    j["rows"].push_back(row);
  }
  return j;
}

inline std::string harness_metrics(const std::vector<HarnessRow>& rows, const char* key) {
  std::ostringstream out;
  for (const auto& r : rows) {
    for (const auto& s : r.train_log) {
      json rec = s.to_json();
      rec[key] = r.name;
      out << rec.dump() << '\n';
    }
    out << json{{key, r.name}, {"step", r.config.max_steps}, {"eval_miou", r.report.mean}}.dump() << '\n';
  }
  return out.str();
}

}  // namespace partseg
