#pragma once

// Part-annotated datasets: categories and their part vocabularies, disjoint
// base/novel splits, episodic sampling, a procedural generator producing
// pixel-exact part masks, and on-disk ingestion.
//
// On-disk layout (all JSON UTF-8 with sorted keys):
//   manifest.json              categories, parts, sample locators, image size
//   images/<cat>/<id>.png      8-bit RGB
//   masks/<cat>/<id>.png       8-bit single channel, value = part id, 0 = background
//   splits.json                {"<split_id>": {"base": [...], "novel": [...]}}

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "partseg/errors.hpp"
#include "partseg/image.hpp"
#include "partseg/rng.hpp"

namespace partseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kBackground = 0;
inline constexpr const char* kBackgroundName = "background";

struct PartClass {
  int id = 0;
  std::string raw_name;
  std::string normalized_name;
  bool operator==(const PartClass&) const = default;
};

struct Category {
  std::string name;
  std::vector<PartClass> parts;  // ids 1..N in order

  std::size_t num_parts() const { return parts.size(); }
  bool operator==(const Category&) const = default;
};

struct Sample {
  std::string id;
  Image image;
  LabelMap mask;
};

struct SampleLocator {
  std::string id;
  std::string image;  // relative to the dataset root
  std::string mask;
  bool operator==(const SampleLocator&) const = default;
};

/// One few-shot task. The query mask is for loss and metric computation only.
struct Episode {
  std::string id;
  Category category;
  std::vector<Sample> support;
  Sample query;
  int k_shot = 1;
};

struct SplitSpec {
  int split_id = 0;
  std::set<std::string> base_categories;
  std::set<std::string> novel_categories;
  bool operator==(const SplitSpec&) const = default;
};

enum class Partition { kBase, kNovel };

struct DatasetIndex {
  fs::path root;
  std::vector<Category> categories;
  std::map<std::string, std::vector<SampleLocator>> samples_by_category;

  const Category& category(const std::string& name) const {
    for (const auto& c : categories)
      if (c.name == name) return c;
    throw LookupError("unknown category: " + name);
  }
  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : samples_by_category) n += v.size();
    return n;
  }
  bool operator==(const DatasetIndex&) const = default;
};

// ---------------------------------------------------------------------------
// Part names

inline std::string to_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

/// Cross-category part key: lowercase final word of the raw name once the
/// category name has been removed ("Car side mirror" -> "mirror").
inline std::string normalize_part_name(const std::string& raw_name, const std::string& category) {
  std::istringstream words(to_lower(raw_name));
  const std::string cat = to_lower(category);
  std::string word, last;
  while (words >> word)
    if (word != cat) last = word;
  if (last.empty()) last = to_lower(raw_name);
  return last;
}

/// Name used for class id k of a category (0 = background).
inline const std::string& part_key(const Category& category, int k) {
  static const std::string background = kBackgroundName;
  if (k == kBackground) return background;
  return category.parts.at(static_cast<std::size_t>(k - 1)).normalized_name;
}

// ---------------------------------------------------------------------------
// Splits

/// Order-independent hash of category names and sample ids.
inline std::uint64_t fingerprint(const DatasetIndex& index) {
  std::uint64_t h = fnv1a("partseg-index");
  std::vector<std::string> names;
  for (const auto& c : index.categories) names.push_back(c.name);
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    h = fnv1a(n, h);
    h = fnv1a("\x1f", h);
    auto it = index.samples_by_category.find(n);
    if (it == index.samples_by_category.end()) continue;
    for (const auto& s : it->second) h = fnv1a(s.id + "\x1e", h);
  }
  return h;
}

/// Number of novel categories per split: 2 of 11 scaled to the category count.
inline std::size_t novel_count(std::size_t categories) {
  return std::max<std::size_t>(1, (2 * categories + 10) / 11);
}

/// Deterministic seeded round-robin split. Categories are shuffled once per
/// (index, seed); split s takes the s-th consecutive run of novel categories,
/// so the four splits cover every category when 4 * n_novel >= n.
inline SplitSpec build_splits(const DatasetIndex& index, int split_id, std::uint64_t seed) {
  if (index.categories.size() < 3) {
    throw ConfigError("at least 3 categories are required to build splits, got " +
                      std::to_string(index.categories.size()));
  }
  if (split_id < 0 || split_id > 3) {
    throw ArgumentError("split_id must be in 0..3, got " + std::to_string(split_id));
  }
  std::vector<std::string> names;
  for (const auto& c : index.categories) names.push_back(c.name);
  std::sort(names.begin(), names.end());
  Rng rng(splitmix64(seed ^ fingerprint(index)));
  for (std::size_t i = names.size() - 1; i > 0; --i) std::swap(names[i], names[uniform_index(rng, i + 1)]);

  const std::size_t n = names.size();
  const std::size_t k = novel_count(n);
  SplitSpec split;
  split.split_id = split_id;
  for (std::size_t j = 0; j < k; ++j)
    split.novel_categories.insert(names[(static_cast<std::size_t>(split_id) * k + j) % n]);
  for (const auto& name : names)
    if (!split.novel_categories.count(name)) split.base_categories.insert(name);
  return split;
}

inline json splits_to_json(const std::vector<SplitSpec>& splits) {
  json out = json::object();
  for (const auto& s : splits) {
    out[std::to_string(s.split_id)] = {{"base", s.base_categories}, {"novel", s.novel_categories}};
  }
  return out;
}

inline std::vector<SplitSpec> splits_from_json(const json& j) {
  std::vector<SplitSpec> out;
  for (const auto& [key, value] : j.items()) {
    SplitSpec s;
    s.split_id = std::stoi(key);
    s.base_categories = value.at("base").get<std::set<std::string>>();
    s.novel_categories = value.at("novel").get<std::set<std::string>>();
    out.push_back(std::move(s));
  }
  return out;
}

/// Reads `splits.json` under the dataset root when present.
inline std::optional<SplitSpec> load_split_file(const fs::path& root, int split_id) {
  const fs::path path = root / "splits.json";
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed splits.json: " + std::string(e.what()));
  }
  for (auto& s : splits_from_json(j))
    if (s.split_id == split_id) return s;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Sample loading and episodic sampling

inline Sample load_sample(const DatasetIndex& index, const SampleLocator& loc) {
  Sample s;
  s.id = loc.id;
  s.image = png::read_rgb(index.root / loc.image);
  s.mask = png::read_labels(index.root / loc.mask);
  return s;
}

/// In-memory copy of every sample of an index, keyed by (category, id).
class SampleStore {
 public:
  SampleStore() = default;
  explicit SampleStore(const DatasetIndex& index) {
    for (const auto& [cat, locs] : index.samples_by_category)
      for (const auto& loc : locs) insert(cat, load_sample(index, loc));
  }

  void insert(const std::string& category, Sample sample) {
    const std::string key = category + '/' + sample.id;
    samples_.insert_or_assign(key, std::move(sample));
  }
  const Sample& get(const std::string& category, const std::string& id) const {
    auto it = samples_.find(category + '/' + id);
    if (it == samples_.end()) throw LookupError("sample not loaded: " + category + '/' + id);
    return it->second;
  }
  bool empty() const { return samples_.empty(); }

 private:
  std::map<std::string, Sample> samples_;
};

namespace detail {

template <typename Load>
Episode draw_episode(const DatasetIndex& index, const SplitSpec& split, Partition partition,
                     int k_shot, Rng& rng, Load&& load) {
  if (k_shot < 1) throw ArgumentError("k_shot must be >= 1");
  const auto& pool = partition == Partition::kBase ? split.base_categories : split.novel_categories;
  std::vector<std::string> eligible;
  std::string short_category;
  for (const auto& name : pool) {  // std::set: sorted, deterministic
    auto it = index.samples_by_category.find(name);
    const std::size_t n = it == index.samples_by_category.end() ? 0 : it->second.size();
    if (n >= static_cast<std::size_t>(k_shot) + 1)
      eligible.push_back(name);
    else if (short_category.empty())
      short_category = name;
  }
  if (eligible.empty()) {
    throw SamplingError("no category in the " +
                        std::string(partition == Partition::kBase ? "base" : "novel") +
                        " partition has " + std::to_string(k_shot + 1) + " samples" +
                        (short_category.empty() ? std::string(" (partition empty)")
                                                : " (e.g. '" + short_category + "')"));
  }
  const std::string& name = eligible[uniform_index(rng, eligible.size())];
  const auto& locs = index.samples_by_category.at(name);

  // Partial Fisher-Yates: first k_shot + 1 positions are distinct draws.
  std::vector<std::size_t> order(locs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i <= static_cast<std::size_t>(k_shot); ++i)
    std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);

  Episode ep;
  ep.category = index.category(name);
  ep.k_shot = k_shot;
  ep.id = name + ":";
  for (int s = 0; s < k_shot; ++s) {
    ep.support.push_back(load(name, locs[order[s]]));
    ep.id += (s ? "," : "") + locs[order[s]].id;
  }
  ep.query = load(name, locs[order[k_shot]]);
  ep.id += ">" + ep.query.id;
  return ep;
}

}  // namespace detail

/// Samples one episode from a uniformly chosen eligible category of the
/// partition, reading images from disk.
inline Episode sample_episode(const DatasetIndex& index, const SplitSpec& split,
                              Partition partition, int k_shot, Rng& rng) {
  return detail::draw_episode(index, split, partition, k_shot, rng,
                              [&](const std::string&, const SampleLocator& loc) {
                                return load_sample(index, loc);
                              });
}

/// Same draw sequence as above, served from a preloaded store.
inline Episode sample_episode(const DatasetIndex& index, const SampleStore& store,
                              const SplitSpec& split, Partition partition, int k_shot, Rng& rng) {
  return detail::draw_episode(index, split, partition, k_shot, rng,
                              [&](const std::string& cat, const SampleLocator& loc) {
                                return store.get(cat, loc.id);
                              });
}

/// Rebuilds an episode from its id "category:s1,s2>q".
inline Episode episode_from_id(const DatasetIndex& index, const SampleStore& store, const std::string& id) {
  const auto colon = id.find(':'), gt = id.find('>');
  if (colon == std::string::npos || gt == std::string::npos || gt < colon)
    throw ArgumentError("malformed episode id '" + id + "'");
  Episode ep;
  ep.id = id;
  ep.category = index.category(id.substr(0, colon));
  std::stringstream shots(id.substr(colon + 1, gt - colon - 1));
  for (std::string s; std::getline(shots, s, ',');) ep.support.push_back(store.get(ep.category.name, s));
  if (ep.support.empty()) throw ArgumentError("episode id '" + id + "' has no support shots");
  ep.k_shot = static_cast<int>(ep.support.size());
  ep.query = store.get(ep.category.name, id.substr(gt + 1));
  return ep;
}

// ---------------------------------------------------------------------------
// Analytic shapes (image pixel coordinates; a pixel (x, y) is tested at its
// center (x + 0.5, y + 0.5)).

enum class ShapeKind { kEllipse, kBox, kTriangle };

struct Shape2D {
  ShapeKind kind = ShapeKind::kEllipse;
  // ellipse: cx, cy, rx, ry, angle | box: cx, cy, half_w, half_h, angle |
  // triangle: x1, y1, x2, y2, x3, y3
  std::vector<double> params;

  bool contains(double x, double y) const {
    const auto& p = params;
    switch (kind) {
      case ShapeKind::kEllipse: {
        const double c = std::cos(p[4]), s = std::sin(p[4]);
        const double dx = x - p[0], dy = y - p[1];
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        return (u * u) / (p[2] * p[2]) + (v * v) / (p[3] * p[3]) <= 1.0;
      }
      case ShapeKind::kBox: {
        const double c = std::cos(p[4]), s = std::sin(p[4]);
        const double dx = x - p[0], dy = y - p[1];
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        return std::abs(u) <= p[2] && std::abs(v) <= p[3];
      }
      case ShapeKind::kTriangle: {
        auto edge = [&](double ax, double ay, double bx, double by) {
          return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        };
        const double e1 = edge(p[0], p[1], p[2], p[3]);
        const double e2 = edge(p[2], p[3], p[4], p[5]);
        const double e3 = edge(p[4], p[5], p[0], p[1]);
        return (e1 >= 0 && e2 >= 0 && e3 >= 0) || (e1 <= 0 && e2 <= 0 && e3 <= 0);
      }
    }
    return false;
  }
};

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::kEllipse: return "ellipse";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "ellipse") return ShapeKind::kEllipse;
  if (s == "box") return ShapeKind::kBox;
  if (s == "triangle") return ShapeKind::kTriangle;
  throw ValidationError("unknown shape kind: " + s);
}

/// Shape instance recorded by the generator: part id plus geometry.
struct PartShape {
  int part = 0;
  Shape2D shape;
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  int num_categories = 6;
  int samples_per_category = 40;
  int image_size = 64;
  double position_jitter = 0.08;  // fraction of image size
  double scale_min = 0.85;
  double scale_max = 1.15;
  double rotation_jitter = 0.25;  // radians
  double color_jitter = 0.08;
  double noise_std = 0.03;
  double object_scale = 0.36;  // object unit length as a fraction of image size
};

namespace synth {

struct ShapeTemplate {
  ShapeKind kind;
  std::vector<double> params;  // object frame, same layout as Shape2D
};

struct PartTemplate {
  std::string name;  // suffix appended to the category's display name
  int layer;         // higher layers are painted over lower ones
  std::vector<ShapeTemplate> shapes;
};

struct CategoryTemplate {
  std::string name;
  std::vector<PartTemplate> parts;
};

inline ShapeTemplate E(double cx, double cy, double rx, double ry, double a = 0) {
  return {ShapeKind::kEllipse, {cx, cy, rx, ry, a}};
}
inline ShapeTemplate B(double cx, double cy, double hw, double hh, double a = 0) {
  return {ShapeKind::kBox, {cx, cy, hw, hh, a}};
}
inline ShapeTemplate T(double x1, double y1, double x2, double y2, double x3, double y3) {
  return {ShapeKind::kTriangle, {x1, y1, x2, y2, x3, y3}};
}

/// Eleven object templates loosely modeled on common part-annotated
/// super-categories; animals come first so small configs share many parts.
inline const std::vector<CategoryTemplate>& catalogue() {
  static const std::vector<CategoryTemplate> cats = {
      {"quadruped",
       {{"head", 2, {E(1.05, -0.45, 0.36, 0.30)}},
        {"body", 1, {E(0, 0, 0.9, 0.42)}},
        {"foot", 0,
         {B(-0.6, 0.55, 0.09, 0.30), B(-0.3, 0.55, 0.09, 0.30), B(0.3, 0.55, 0.09, 0.30),
          B(0.6, 0.55, 0.09, 0.30)}},
        {"tail", 0, {B(-1.05, -0.25, 0.32, 0.07, -0.6)}}}},
      {"biped",
       {{"head", 2, {E(0, -0.95, 0.30, 0.30)}},
        {"body", 1, {E(0, -0.1, 0.38, 0.60)}},
        {"hand", 0, {B(-0.55, -0.2, 0.10, 0.42, 0.3), B(0.55, -0.2, 0.10, 0.42, -0.3)}},
        {"foot", 0, {B(-0.2, 0.75, 0.11, 0.30), B(0.2, 0.75, 0.11, 0.30)}}}},
      {"fish",
       {{"head", 2, {E(0.75, 0, 0.35, 0.32)}},
        {"body", 1, {E(0, 0, 0.8, 0.4)}},
        {"fin", 0, {T(-0.15, -0.3, 0.35, -0.3, 0.0, -0.8)}},
        {"tail", 0, {T(-0.7, 0, -1.2, -0.45, -1.2, 0.45)}}}},
      {"bird",
       {{"head", 2, {E(0.62, -0.42, 0.26, 0.24)}},
        {"body", 1, {E(0, 0, 0.62, 0.38)}},
        {"wing", 2, {T(-0.35, -0.05, 0.35, -0.05, -0.1, -0.85)}},
        {"foot", 0, {B(-0.12, 0.55, 0.05, 0.22), B(0.15, 0.55, 0.05, 0.22)}},
        {"tail", 0, {T(-0.5, 0, -1.1, -0.3, -1.1, 0.2)}}}},
      {"snake",
       {{"head", 2, {E(0.88, -0.05, 0.24, 0.18)}},
        {"body", 1,
         {E(-0.9, 0.1, 0.32, 0.16, 0.3), E(-0.45, 0.15, 0.32, 0.16, -0.3),
          E(0.0, 0.05, 0.32, 0.16, 0.3), E(0.45, 0.1, 0.32, 0.16, -0.3)}}}},
      {"reptile",
       {{"head", 2, {E(0.85, 0, 0.25, 0.2)}},
        {"body", 1, {E(0, 0, 0.7, 0.28)}},
        {"foot", 0,
         {B(-0.4, 0.35, 0.07, 0.22, 0.5), B(-0.4, -0.35, 0.07, 0.22, -0.5),
          B(0.4, 0.35, 0.07, 0.22, -0.5), B(0.4, -0.35, 0.07, 0.22, 0.5)}},
        {"tail", 0, {T(-0.6, -0.12, -0.6, 0.12, -1.3, 0)}}}},
      {"car",
       {{"body", 1, {B(0, -0.1, 1.0, 0.3), B(0.05, -0.5, 0.55, 0.2)}},
        {"tire", 2, {E(-0.6, 0.28, 0.22, 0.22), E(0.6, 0.28, 0.22, 0.22)}},
        {"side mirror", 2, {B(0.65, -0.5, 0.09, 0.07)}}}},
      {"bicycle",
       {{"body", 1, {B(0, -0.05, 0.55, 0.06, -0.3), B(-0.2, -0.05, 0.06, 0.4, 0.4)}},
        {"head", 2, {B(0.45, -0.6, 0.06, 0.2, 0.3)}},
        {"seat", 2, {B(-0.35, -0.55, 0.18, 0.06)}},
        {"tire", 0, {E(-0.65, 0.3, 0.38, 0.38), E(0.65, 0.3, 0.38, 0.38)}}}},
      {"boat",
       {{"body", 1, {B(0, 0.35, 0.95, 0.22), T(0.95, 0.13, 0.95, 0.57, 1.25, 0.13)}},
        {"sail", 1, {T(-0.05, 0.1, -0.05, -1.0, 0.7, 0.1)}}}},
      {"aeroplane",
       {{"head", 2, {E(1.0, 0, 0.2, 0.15)}},
        {"body", 1, {E(0, 0, 1.0, 0.18)}},
        {"engine", 2, {E(0.0, 0.45, 0.15, 0.07), E(0.0, -0.45, 0.15, 0.07)}},
        {"wing", 0, {T(-0.2, 0, 0.25, 0, -0.35, 0.8), T(-0.2, 0, 0.25, 0, -0.35, -0.8)}},
        {"tail", 0, {T(-0.85, 0, -1.15, 0.35, -1.15, -0.35)}}}},
      {"bottle",
       {{"body", 1, {B(0, 0.2, 0.35, 0.7)}}, {"mouth", 1, {B(0, -0.7, 0.13, 0.22)}}}},
  };
  return cats;
}

inline std::string display_name(const std::string& category) {
  std::string out = category;
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

/// Texture shared by every part with the same normalized name, so that part
/// appearance transfers across categories.
struct Texture {
  int pattern;  // 0 stripes, 1 checker, 2 dots, 3 rings, 4 plain
  double angle;
  double period;
};

inline Texture texture_for(const std::string& part) {
  static const std::map<std::string, Texture> known = {
      {"body", {0, 0.0, 6.0}},
      {"head", {1, 0.0, 4.0}},
      {"foot", {0, std::numbers::pi / 2, 4.0}},
      {"tail", {0, std::numbers::pi / 4, 5.0}},
      {"hand", {2, 0.0, 5.0}},
      {"wing", {0, -std::numbers::pi / 4, 4.0}},
      {"fin", {3, 0.0, 4.0}},
      {"tire", {1, std::numbers::pi / 4, 6.0}},
      {"mirror", {4, 0.0, 1.0}},
      {"seat", {2, 0.0, 4.0}},
      {"sail", {0, 0.0, 3.0}},
      {"engine", {4, 0.0, 1.0}},
      {"mouth", {0, std::numbers::pi / 2, 6.0}},
  };
  if (auto it = known.find(part); it != known.end()) return it->second;
  const std::uint64_t h = splitmix64(fnv1a(part));
  return {static_cast<int>(h % 5), static_cast<double>((h >> 8) % 8) * std::numbers::pi / 8,
          4.0 + static_cast<double>((h >> 16) % 4)};
}

inline double pattern_value(const Texture& t, double u, double v, double phase) {
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  const double a = c * u + s * v + phase, b = -s * u + c * v + phase;
  const double w = 2.0 * std::numbers::pi / t.period;
  switch (t.pattern) {
    case 0: return 0.5 + 0.5 * std::sin(w * a);
    case 1: return (std::sin(w * a) * std::sin(w * b)) > 0 ? 1.0 : 0.0;
    case 2: {
      const double fa = std::fmod(std::abs(a), t.period) - t.period / 2;
      const double fb = std::fmod(std::abs(b), t.period) - t.period / 2;
      return fa * fa + fb * fb < t.period * t.period / 9 ? 1.0 : 0.0;
    }
    case 3: return 0.5 + 0.5 * std::sin(w * std::sqrt(a * a + b * b));
    default: return 0.5;
  }
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0), f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct RenderedSample {
  Image image;
  LabelMap mask;
  std::vector<PartShape> shapes;
};

inline RenderedSample render(const CategoryTemplate& tpl, const std::string& category,
                             const SynthConfig& cfg, Rng& rng) {
  const int size = cfg.image_size;
  const double sz = static_cast<double>(size);
  const double unit = cfg.object_scale * sz * uniform(rng, cfg.scale_min, cfg.scale_max);
  const double cx = sz / 2 + uniform(rng, -cfg.position_jitter, cfg.position_jitter) * sz;
  const double cy = sz / 2 + uniform(rng, -cfg.position_jitter, cfg.position_jitter) * sz;
  const double rot = uniform(rng, -cfg.rotation_jitter, cfg.rotation_jitter);
  const double cr = std::cos(rot), sr = std::sin(rot);
  auto to_image = [&](double ox, double oy) {
    return std::pair<double, double>(cx + unit * (cr * ox - sr * oy), cy + unit * (sr * ox + cr * oy));
  };

  RenderedSample out;
  // Paint order: by layer, then by part id.
  std::vector<std::size_t> order(tpl.parts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return tpl.parts[a].layer < tpl.parts[b].layer; });
  for (std::size_t pi : order) {
    for (const auto& st : tpl.parts[pi].shapes) {
      Shape2D shape{st.kind, st.params};
      const auto& p = st.params;
      if (st.kind == ShapeKind::kTriangle) {
        for (int v = 0; v < 3; ++v) {
          auto [x, y] = to_image(p[2 * v], p[2 * v + 1]);
          shape.params[2 * v] = x;
          shape.params[2 * v + 1] = y;
        }
      } else {
        auto [x, y] = to_image(p[0], p[1]);
        shape.params = {x, y, p[2] * unit, p[3] * unit, p[4] + rot};
      }
      out.shapes.push_back({static_cast<int>(pi) + 1, std::move(shape)});
    }
  }

  // Per-sample appearance.
  const double hue = unit_from_bits(splitmix64(fnv1a(category)));
  std::vector<std::array<double, 3>> colors;
  std::vector<Texture> textures;
  std::vector<double> phases;
  for (std::size_t pi = 0; pi < tpl.parts.size(); ++pi) {
    const std::string key = normalize_part_name(tpl.parts[pi].name, category);
    const double offset = (unit_from_bits(splitmix64(fnv1a(category + "/" + key))) - 0.5) * 0.12;
    auto rgb = hsv_to_rgb(hue + offset, 0.55, 0.8);
    for (auto& ch : rgb) ch = std::clamp(ch + uniform(rng, -cfg.color_jitter, cfg.color_jitter), 0.0, 1.0);
    colors.push_back(rgb);
    textures.push_back(texture_for(key));
    phases.push_back(uniform(rng, 0.0, 8.0));
  }
  const auto bg_a = hsv_to_rgb(uniform01(rng), uniform(rng, 0.1, 0.4), uniform(rng, 0.3, 0.9));
  const auto bg_b = hsv_to_rgb(uniform01(rng), uniform(rng, 0.1, 0.4), uniform(rng, 0.3, 0.9));
  const double bg_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  out.image = Image(3, size, size);
  out.mask = LabelMap(size, size, kBackground);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      int label = kBackground;
      for (const auto& ps : out.shapes)  // later shapes paint over earlier ones
        if (ps.shape.contains(px, py)) label = ps.part;
      out.mask.at(y, x) = label;
      std::array<double, 3> rgb;
      if (label == kBackground) {
        const double t = 0.5 + 0.5 * std::sin((std::cos(bg_angle) * px + std::sin(bg_angle) * py) / sz * 3.0);
        for (int c = 0; c < 3; ++c) rgb[c] = bg_a[c] * t + bg_b[c] * (1 - t);
      } else {
        const std::size_t pi = static_cast<std::size_t>(label - 1);
        // Texture coordinates live in the object frame so patterns rotate with the object.
        const double dx = px - cx, dy = py - cy;
        const double u = cr * dx + sr * dy, v = -sr * dx + cr * dy;
        const double t = pattern_value(textures[pi], u, v, phases[pi]);
        for (int c = 0; c < 3; ++c) rgb[c] = colors[pi][c] * (0.55 + 0.45 * t);
      }
      for (int c = 0; c < 3; ++c)
        out.image.at(c, y, x) = std::clamp(rgb[c] + gaussian(rng, 0.0, cfg.noise_std), 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace synth

inline void validate(const SynthConfig& cfg) {
  if (cfg.num_categories < 3)
    throw ConfigError("synthetic dataset needs at least 3 categories, got " +
                      std::to_string(cfg.num_categories));
  if (cfg.samples_per_category < 2) throw ConfigError("samples_per_category must be >= 2");
  if (cfg.image_size < 8 || cfg.image_size > 4096) throw ConfigError("image_size must be in [8, 4096]");
  if (cfg.scale_min <= 0 || cfg.scale_max < cfg.scale_min) throw ConfigError("invalid scale range");
}

/// Category templates used for a given count; beyond the built-in catalogue,
/// templates repeat with a numeric suffix and their own color palette.
inline std::vector<synth::CategoryTemplate> synth_categories(int count) {
  const auto& cat = synth::catalogue();
  std::vector<synth::CategoryTemplate> out;
  for (int i = 0; i < count; ++i) {
    auto tpl = cat[static_cast<std::size_t>(i) % cat.size()];
    const int round = i / static_cast<int>(cat.size());
    if (round > 0) tpl.name += std::to_string(round + 1);
    out.push_back(std::move(tpl));
  }
  return out;
}

inline json shape_to_json(const PartShape& s) {
  return {{"part", s.part}, {"kind", to_string(s.shape.kind)}, {"params", s.shape.params}};
}

inline PartShape shape_from_json(const json& j) {
  return {j.at("part").get<int>(),
          {shape_kind_from_string(j.at("kind").get<std::string>()),
           j.at("params").get<std::vector<double>>()}};
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

/// Renders the dataset under `root` (images, masks, manifest.json,
/// splits.json) and returns its index. Same (config, seed) gives
/// byte-identical files.
inline DatasetIndex generate_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                               const fs::path& root) {
  validate(cfg);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create dataset root " + root.string());

  DatasetIndex index;
  index.root = root;
  json manifest;
  manifest["format"] = "partseg-dataset";
  manifest["version"] = 1;
  manifest["image_size"] = {cfg.image_size, cfg.image_size};
  manifest["generator"] = {{"seed", seed},
                           {"num_categories", cfg.num_categories},
                           {"samples_per_category", cfg.samples_per_category},
                           {"position_jitter", cfg.position_jitter},
                           {"scale_min", cfg.scale_min},
                           {"scale_max", cfg.scale_max},
                           {"rotation_jitter", cfg.rotation_jitter},
                           {"color_jitter", cfg.color_jitter},
                           {"noise_std", cfg.noise_std},
                           {"object_scale", cfg.object_scale}};
  manifest["categories"] = json::array();
  manifest["samples"] = json::object();

  for (const auto& tpl : synth_categories(cfg.num_categories)) {
    Category category{tpl.name, {}};
    for (std::size_t i = 0; i < tpl.parts.size(); ++i) {
      const std::string raw = synth::display_name(tpl.name) + " " + tpl.parts[i].name;
      category.parts.push_back(
          {static_cast<int>(i) + 1, raw, normalize_part_name(raw, tpl.name)});
    }
    json jparts = json::array();
    for (const auto& p : category.parts)
      jparts.push_back({{"id", p.id}, {"raw_name", p.raw_name}, {"normalized_name", p.normalized_name}});
    manifest["categories"].push_back({{"name", category.name}, {"parts", jparts}});

    fs::create_directories(root / "images" / tpl.name, ec);
    fs::create_directories(root / "masks" / tpl.name, ec);
    if (ec) throw IoError("cannot create directories under " + root.string());

    Rng rng(derive_seed(seed, "synth/" + tpl.name));
    json jsamples = json::array();
    auto& locs = index.samples_by_category[tpl.name];
    for (int s = 0; s < cfg.samples_per_category; ++s) {
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "%04d", s);
      const std::string id = idbuf;
      const auto rendered = synth::render(tpl, tpl.name, cfg, rng);
      SampleLocator loc{id, "images/" + tpl.name + "/" + id + ".png",
                        "masks/" + tpl.name + "/" + id + ".png"};
      png::write_rgb(root / loc.image, rendered.image);
      png::write_labels(root / loc.mask, rendered.mask);
      json jshapes = json::array();
      for (const auto& sh : rendered.shapes) jshapes.push_back(shape_to_json(sh));
      jsamples.push_back({{"id", id}, {"image", loc.image}, {"mask", loc.mask}, {"shapes", jshapes}});
      locs.push_back(std::move(loc));
    }
    manifest["samples"][tpl.name] = jsamples;
    index.categories.push_back(std::move(category));
  }
  write_text_file(root / "manifest.json", manifest.dump(2) + "\n");

  std::vector<SplitSpec> splits;
  for (int s = 0; s < 4; ++s) splits.push_back(build_splits(index, s, seed));
  write_text_file(root / "splits.json", splits_to_json(splits).dump(2) + "\n");
  return index;
}

/// Shapes recorded for one sample (empty for datasets without geometry).
inline std::vector<PartShape> recorded_shapes(const fs::path& root, const std::string& category,
                                              const std::string& id) {
  std::ifstream in(root / "manifest.json");
  const json manifest = json::parse(in);
  std::vector<PartShape> out;
  for (const auto& s : manifest.at("samples").at(category))
    if (s.at("id") == id && s.contains("shapes"))
      for (const auto& js : s.at("shapes")) out.push_back(shape_from_json(js));
  return out;
}

/// Loads and validates a dataset directory. Every image and mask is read;
/// dimensions and label ranges are checked. When `store` is given the decoded
/// samples are kept there.
inline DatasetIndex ingest_dataset(const fs::path& root, SampleStore* store = nullptr) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw ValidationError("no manifest: " + manifest_path.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  DatasetIndex index;
  index.root = root;
  try {
    std::optional<std::pair<std::size_t, std::size_t>> declared;
    if (manifest.contains("image_size")) {
      const auto sz = manifest.at("image_size").get<std::vector<std::size_t>>();
      if (sz.size() != 2) throw ValidationError("image_size must be [height, width]");
      declared = {sz[0], sz[1]};
    }
    for (const auto& jc : manifest.at("categories")) {
      Category c;
      c.name = jc.at("name").get<std::string>();
      for (const auto& jp : jc.at("parts")) {
        PartClass p;
        p.id = jp.at("id").get<int>();
        p.raw_name = jp.at("raw_name").get<std::string>();
        p.normalized_name = jp.contains("normalized_name")
                                ? jp.at("normalized_name").get<std::string>()
                                : normalize_part_name(p.raw_name, c.name);
        c.parts.push_back(std::move(p));
      }
      if (c.parts.empty()) throw ValidationError("category '" + c.name + "' has no parts");
      for (std::size_t i = 0; i < c.parts.size(); ++i)
        if (c.parts[i].id != static_cast<int>(i) + 1)
          throw ValidationError("category '" + c.name + "': part ids must be 1..N in order");
      for (const auto& existing : index.categories)
        if (existing.name == c.name) throw ValidationError("duplicate category '" + c.name + "'");
      index.categories.push_back(std::move(c));
    }
    for (const auto& c : index.categories) {
      auto& locs = index.samples_by_category[c.name];
      if (!manifest.at("samples").contains(c.name)) continue;
      for (const auto& js : manifest.at("samples").at(c.name)) {
        SampleLocator loc{js.at("id").get<std::string>(), js.at("image").get<std::string>(),
                          js.at("mask").get<std::string>()};
        Sample s = load_sample(index, loc);
        if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
          throw ValidationError("image/mask size mismatch: " + loc.mask);
        }
        if (declared && (s.image.height != declared->first || s.image.width != declared->second)) {
          throw ValidationError("image size differs from manifest image_size: " + loc.image);
        }
        const int n = static_cast<int>(c.num_parts());
        for (int v : s.mask.labels) {
          if (v < 0 || v > n) {
            throw ValidationError("mask " + loc.mask + " contains label " + std::to_string(v) +
                                  " but category '" + c.name + "' declares N=" + std::to_string(n));
          }
        }
        if (store) store->insert(c.name, std::move(s));
        locs.push_back(std::move(loc));
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + manifest_path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ValidationError(e.what());
  }
  return index;
}

}  // namespace partseg
