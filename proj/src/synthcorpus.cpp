#include "pedetect/synthcorpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "pedetect/container.hpp"
#include "pedetect/error.hpp"
#include "pedetect/hash.hpp"

namespace pedetect::synth {
namespace {

constexpr std::uint64_t kLabelStream = 0x4C4142454C53ULL;   // "LABELS"
constexpr std::uint64_t kStudyStream = 0x5354554459ULL;     // "STUDY"
constexpr std::uint64_t kRoleStream = 0x524F4C4553ULL;      // "ROLES"
constexpr float kMinHu = -1024.0f;
constexpr float kMaxHu = 3071.0f;
constexpr float kBackgroundHu = -50.0f;

std::uint64_t partition_tag(Partition p) { return p == Partition::development ? 1 : 2; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

std::int64_t count_of(std::int64_t n, double fraction) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(n) * fraction));
}

void check(bool ok, const char* field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

bool in_tube(const Vessel& v, double z, double y, double x) {
  const double dy = y - v.y_at(z);
  const double dx = x - v.x_at(z);
  return dy * dy + dx * dx <= v.radius * v.radius;
}

bool in_lesion(const Lesion& l, const Vessel& v, double z, double y, double x) {
  const double dz = (z - l.center_z) / l.radius_z;
  const double dy = (y - l.center_y) / l.radius_yx;
  const double dx = (x - l.center_x) / l.radius_yx;
  return dz * dz + dy * dy + dx * dx <= 1.0 && in_tube(v, z, y, x);
}

bool in_arc(const Arc& a, double cy, double cx, double y, double x) {
  const double r = std::hypot(y - cy, x - cx);
  if (std::abs(r - a.radius) > 0.5 * a.thickness) return false;
  double d = std::atan2(y - cy, x - cx) - a.angle;
  d = std::remainder(d, 2.0 * std::numbers::pi);
  return std::abs(d) <= a.half_span;
}

std::vector<std::int64_t> lesion_slices(const StudyGeometry& g, const Lesion& l) {
  std::vector<std::int64_t> out;
  const auto lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(l.center_z - l.radius_z)));
  const auto hi = std::min<std::int64_t>(g.shape.slices - 1,
                                         static_cast<std::int64_t>(std::ceil(l.center_z + l.radius_z)));
  const auto& v = g.vessels[static_cast<std::size_t>(l.vessel)];
  for (auto z = lo; z <= hi; ++z) {
    bool any = false;
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.center_y - l.radius_yx - 1));
    const auto y1 = std::min<std::int64_t>(g.shape.rows - 1, static_cast<std::int64_t>(l.center_y + l.radius_yx + 1));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.center_x - l.radius_yx - 1));
    const auto x1 = std::min<std::int64_t>(g.shape.cols - 1, static_cast<std::int64_t>(l.center_x + l.radius_yx + 1));
    for (auto y = y0; y <= y1 && !any; ++y)
      for (auto x = x0; x <= x1 && !any; ++x)
        any = in_lesion(l, v, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
    if (any) out.push_back(z);
  }
  return out;
}

}  // namespace

double Vessel::y_at(double z) const { return center_y + amplitude * std::sin(frequency * z + phase_y); }
double Vessel::x_at(double z) const { return center_x + amplitude * std::cos(frequency * z + phase_x); }

void CorpusConfig::validate() const {
  check(study_count >= 0, "study_count", "must be >= 0");
  check(test_study_count >= 0, "test_study_count", "must be >= 0");
  check(positive_fraction >= 0.0 && positive_fraction <= 1.0, "positive_fraction", "must lie in [0, 1]");
  check(volume_shape.slices >= 5, "volume_shape", "needs at least 5 slices");
  check(volume_shape.rows >= 16 && volume_shape.cols >= 16, "volume_shape", "needs at least 16x16 pixels");
  check(slice_thickness_mm > 0.0, "slice_thickness_mm", "must be > 0");
  check(pixel_spacing_mm > 0.0, "pixel_spacing_mm", "must be > 0");
  check(lesion_count_range.lo >= 0 && lesion_count_range.lo <= lesion_count_range.hi,
        "lesion_count_range", "must be a nonempty nonnegative interval");
  check(lesion_radius_range_vox.lo > 0.0 && lesion_radius_range_vox.lo <= lesion_radius_range_vox.hi,
        "lesion_radius_range_vox", "must be a nonempty positive interval");
  check(confounder_correlation >= 0.0 && confounder_correlation <= 1.0, "confounder_correlation",
        "must lie in [0, 1]");
  check(test_confounder_correlation >= 0.0 && test_confounder_correlation <= 1.0,
        "test_confounder_correlation", "must lie in [0, 1]");
  check(!label_only_confounder_correlation ||
            (*label_only_confounder_correlation >= 0.0 && *label_only_confounder_correlation <= 1.0),
        "label_only_confounder_correlation", "must lie in [0, 1]");
  check(noise_std_hu >= 0.0, "noise_std_hu", "must be >= 0");
  check(annotation_spacing_mm >= 0.0, "annotation_spacing_mm", "must be >= 0");
  check(annotated_fraction >= 0.0 && annotated_fraction <= 1.0, "annotated_fraction", "must lie in [0, 1]");
  check(validation_fraction >= 0.0 && validation_fraction < 1.0, "validation_fraction", "must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = nlohmann::json{
      {"study_count", c.study_count},
      {"positive_fraction", c.positive_fraction},
      {"volume_shape", {c.volume_shape.slices, c.volume_shape.rows, c.volume_shape.cols}},
      {"slice_thickness_mm", c.slice_thickness_mm},
      {"pixel_spacing_mm", c.pixel_spacing_mm},
      {"lesion_count_range", {c.lesion_count_range.lo, c.lesion_count_range.hi}},
      {"lesion_radius_range_vox", {c.lesion_radius_range_vox.lo, c.lesion_radius_range_vox.hi}},
      {"confounder_correlation", c.confounder_correlation},
      {"noise_std_hu", c.noise_std_hu},
      {"annotation_spacing_mm", c.annotation_spacing_mm},
      {"rng_seed", c.rng_seed},
      {"annotated_fraction", c.annotated_fraction},
      {"validation_fraction", c.validation_fraction},
      {"test_study_count", c.test_study_count},
      {"test_confounder_correlation", c.test_confounder_correlation},
  };
  // Omitted when unset so existing corpora keep their checksums.
  if (c.label_only_confounder_correlation)
    j["label_only_confounder_correlation"] = *c.label_only_confounder_correlation;
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.study_count = j.value("study_count", d.study_count);
  c.positive_fraction = j.value("positive_fraction", d.positive_fraction);
  if (j.contains("volume_shape")) {
    const auto& s = j.at("volume_shape");
    if (!s.is_array() || s.size() != 3) throw ConfigError("volume_shape", "expected [slices, rows, cols]");
    c.volume_shape = {s[0].get<std::int64_t>(), s[1].get<std::int64_t>(), s[2].get<std::int64_t>()};
  } else {
    c.volume_shape = d.volume_shape;
  }
  c.slice_thickness_mm = j.value("slice_thickness_mm", d.slice_thickness_mm);
  c.pixel_spacing_mm = j.value("pixel_spacing_mm", d.pixel_spacing_mm);
  auto pair = [&](const char* key, auto fallback) {
    if (!j.contains(key)) return fallback;
    const auto& r = j.at(key);
    if (!r.is_array() || r.size() != 2) throw ConfigError(key, "expected [lo, hi]");
    decltype(fallback) out;
    out.lo = r[0].get<decltype(out.lo)>();
    out.hi = r[1].get<decltype(out.hi)>();
    return out;
  };
  c.lesion_count_range = pair("lesion_count_range", d.lesion_count_range);
  c.lesion_radius_range_vox = pair("lesion_radius_range_vox", d.lesion_radius_range_vox);
  c.confounder_correlation = j.value("confounder_correlation", d.confounder_correlation);
  c.noise_std_hu = j.value("noise_std_hu", d.noise_std_hu);
  c.annotation_spacing_mm = j.value("annotation_spacing_mm", d.annotation_spacing_mm);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.annotated_fraction = j.value("annotated_fraction", d.annotated_fraction);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.test_study_count = j.value("test_study_count", d.test_study_count);
  c.test_confounder_correlation = j.value("test_confounder_correlation", d.test_confounder_correlation);
  c.label_only_confounder_correlation.reset();
  if (j.contains("label_only_confounder_correlation") && !j.at("label_only_confounder_correlation").is_null())
    c.label_only_confounder_correlation = j.at("label_only_confounder_correlation").get<double>();
}

std::string study_id(Partition p, std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06lld", p == Partition::development ? "dev" : "test",
                static_cast<long long>(index));
  return buf;
}

std::uint64_t study_seed(const CorpusConfig& config, Partition p, std::int64_t index) {
  return derive_seed(config.rng_seed, kStudyStream ^ partition_tag(p), static_cast<std::uint64_t>(index));
}

std::vector<int> assign_labels(const CorpusConfig& config, Partition p) {
  const auto n = config.partition_size(p);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(config.rng_seed, kLabelStream, partition_tag(p)));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_pos = count_of(n, config.positive_fraction);
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n_pos; ++i) labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  return labels;
}

StudyGeometry plan_study(const CorpusConfig& config, std::int64_t index, int label, Partition p,
                         bool annotated) {
  StudyGeometry g;
  g.shape = config.volume_shape;
  std::mt19937_64 rng(study_seed(config, p, index));
  const double rows = static_cast<double>(g.shape.rows);
  const double cols = static_cast<double>(g.shape.cols);
  const double side = std::min(rows, cols);
  const double scale = side / 96.0;
  const double cy = 0.5 * (rows - 1.0);
  const double cx = 0.5 * (cols - 1.0);

  const std::int64_t margin = g.shape.slices / 8;
  g.structure_start = uniform_int(rng, 0, margin);
  g.structure_end = g.shape.slices - 1 - uniform_int(rng, 0, margin);

  const auto n_vessels = uniform_int(rng, 5, 7);
  for (std::int64_t i = 0; i < n_vessels; ++i) {
    Vessel v;
    const double r = uniform(rng, 0.0, 0.22 * side);
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    v.center_y = cy + r * std::sin(theta);
    v.center_x = cx + r * std::cos(theta);
    v.amplitude = uniform(rng, 1.0, 3.0) * scale;
    v.frequency = 2.0 * std::numbers::pi / (static_cast<double>(g.shape.slices) * uniform(rng, 0.8, 1.6));
    v.phase_y = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    v.phase_x = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    v.radius = uniform(rng, 4.5, 6.0) * scale;
    v.hu = static_cast<float>(uniform(rng, 250.0, 400.0));
    g.vessels.push_back(v);
  }

  double corr = p == Partition::development ? config.confounder_correlation : config.test_confounder_correlation;
  if (p == Partition::development && !annotated && config.label_only_confounder_correlation)
    corr = *config.label_only_confounder_correlation;
  const bool with_arc = std::bernoulli_distribution(label ? corr : 1.0 - corr)(rng);
  // Drawn unconditionally so the lesion draws below do not depend on the flag.
  Arc arc;
  arc.radius = 0.43 * side;
  arc.thickness = 3.0 * scale;
  arc.angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  arc.half_span = uniform(rng, 0.45, 0.75);
  arc.hu = static_cast<float>(uniform(rng, 600.0, 800.0));
  if (with_arc) g.confounder = arc;

  if (label) {
    const auto n_lesions = std::max<std::int64_t>(
        1, uniform_int(rng, config.lesion_count_range.lo, config.lesion_count_range.hi));
    const std::int64_t band = g.structure_end - g.structure_start;
    const std::int64_t z_lo = g.structure_start + std::min<std::int64_t>(2, band / 2);
    const std::int64_t z_hi = std::max(z_lo, g.structure_end - std::min<std::int64_t>(2, band / 2));
    for (std::int64_t i = 0; i < n_lesions; ++i) {
      Lesion l;
      l.vessel = uniform_int(rng, 0, n_vessels - 1);
      const auto& v = g.vessels[static_cast<std::size_t>(l.vessel)];
      l.center_z = static_cast<double>(uniform_int(rng, z_lo, z_hi));
      l.center_y = std::clamp(std::round(v.y_at(l.center_z)), 0.0, rows - 1.0);
      l.center_x = std::clamp(std::round(v.x_at(l.center_z)), 0.0, cols - 1.0);
      l.radius_yx = std::min(uniform(rng, config.lesion_radius_range_vox.lo, config.lesion_radius_range_vox.hi),
                             0.7 * v.radius);  // keep a bright rim around the defect
      l.radius_z = std::max(0.5, 1.5 * l.radius_yx * config.pixel_spacing_mm / config.slice_thickness_mm);
      l.hu = static_cast<float>(uniform(rng, 30.0, 80.0));
      g.lesions.push_back(l);
    }
  }
  return g;
}

Mask2D rasterize_lesions(const StudyGeometry& g, std::int64_t z) {
  Mask2D m(g.shape.rows, g.shape.cols);
  for (const auto& l : g.lesions) {
    if (std::abs(static_cast<double>(z) - l.center_z) > l.radius_z) continue;
    const auto& v = g.vessels[static_cast<std::size_t>(l.vessel)];
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.center_y - l.radius_yx - 1));
    const auto y1 = std::min<std::int64_t>(g.shape.rows - 1, static_cast<std::int64_t>(l.center_y + l.radius_yx + 1));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.center_x - l.radius_yx - 1));
    const auto x1 = std::min<std::int64_t>(g.shape.cols - 1, static_cast<std::int64_t>(l.center_x + l.radius_yx + 1));
    for (auto y = y0; y <= y1; ++y)
      for (auto x = x0; x <= x1; ++x)
        if (in_lesion(l, v, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x))) m.at(y, x) = 1;
  }
  return m;
}

std::int64_t lesion_voxel_count(const StudyGeometry& g) {
  std::int64_t n = 0;
  for (std::int64_t z = 0; z < g.shape.slices; ++z) n += rasterize_lesions(g, z).count();
  return n;
}

std::vector<std::int64_t> annotated_slices(const CorpusConfig& config, const StudyGeometry& g) {
  const auto step = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::ceil(config.annotation_spacing_mm / config.slice_thickness_mm - 1e-9)));
  std::vector<std::int64_t> chosen;
  std::vector<std::vector<std::int64_t>> supports;
  for (const auto& l : g.lesions) {
    auto s = lesion_slices(g, l);
    supports.push_back(s);
    const auto c = static_cast<std::int64_t>(l.center_z);
    if (std::find(s.begin(), s.end(), c) != s.end() &&
        std::find(chosen.begin(), chosen.end(), c) == chosen.end())
      chosen.push_back(c);
  }
  const std::vector<std::int64_t> centers = chosen;
  for (std::size_t i = 0; i < g.lesions.size(); ++i) {
    const auto c = static_cast<std::int64_t>(g.lesions[i].center_z);
    for (auto z : supports[i]) {
      if ((z - c) % step != 0 || z == c) continue;
      const bool far = std::all_of(chosen.begin(), chosen.end(),
                                   [&](std::int64_t a) { return std::abs(a - z) >= step; });
      if (far) chosen.push_back(z);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

Study generate_study(const CorpusConfig& config, std::int64_t index, std::optional<int> force_label,
                     Partition p, std::optional<bool> annotated) {
  config.validate();
  if (index < 0 || index >= config.partition_size(p))
    throw ConfigError("index", "study index " + std::to_string(index) + " outside partition of size " +
                                   std::to_string(config.partition_size(p)));
  Study s;
  s.label = force_label ? (*force_label != 0) : assign_labels(config, p)[static_cast<std::size_t>(index)];
  if (!annotated) {
    annotated = true;
    if (p == Partition::development && config.label_only_confounder_correlation)
      annotated = plan_manifest(config)[static_cast<std::size_t>(index)].annotated;
  }
  s.geometry = plan_study(config, index, s.label, p, *annotated);
  s.meta = {study_id(p, index), index, p, study_seed(config, p, index), s.geometry.confounder.has_value()};

  const auto& g = s.geometry;
  s.volume = Volume(g.shape, {config.slice_thickness_mm, config.pixel_spacing_mm, config.pixel_spacing_mm},
                    kBackgroundHu);
  const double cy = 0.5 * (static_cast<double>(g.shape.rows) - 1.0);
  const double cx = 0.5 * (static_cast<double>(g.shape.cols) - 1.0);
  std::mt19937_64 noise_rng(derive_seed(s.meta.seed, 0x4E4F495345ULL, 0));
  std::normal_distribution<float> noise(0.0f, static_cast<float>(config.noise_std_hu));

  for (std::int64_t z = 0; z < g.shape.slices; ++z) {
    const bool in_band = z >= g.structure_start && z <= g.structure_end;
    const auto zd = static_cast<double>(z);
    for (std::int64_t y = 0; y < g.shape.rows; ++y) {
      for (std::int64_t x = 0; x < g.shape.cols; ++x) {
        float v = kBackgroundHu;
        const auto yd = static_cast<double>(y);
        const auto xd = static_cast<double>(x);
        if (in_band) {
          for (const auto& vs : g.vessels)
            if (in_tube(vs, zd, yd, xd)) v = vs.hu;
          for (const auto& l : g.lesions)
            if (in_lesion(l, g.vessels[static_cast<std::size_t>(l.vessel)], zd, yd, xd)) v = l.hu;
          if (g.confounder && in_arc(*g.confounder, cy, cx, yd, xd)) v = g.confounder->hu;
        }
        if (config.noise_std_hu > 0.0) v += noise(noise_rng);
        s.volume.at(z, y, x) = std::clamp(v, kMinHu, kMaxHu);
      }
    }
  }

  if (s.label) {
    for (auto z : annotated_slices(config, g)) s.lesion_masks.emplace(z, rasterize_lesions(g, z));
  }
  return s;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

std::vector<const ManifestEntry*> CorpusManifest::select(Split s, std::optional<bool> annotated) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : studies)
    if (e.split == s && (!annotated || e.annotated == *annotated)) out.push_back(&e);
  return out;
}

const ManifestEntry* CorpusManifest::find(const std::string& id) const {
  for (const auto& e : studies)
    if (e.id == id) return &e;
  return nullptr;
}

void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"id", e.id},
                     {"index", e.index},
                     {"partition", e.partition == Partition::development ? "development" : "test"},
                     {"split", to_string(e.split)},
                     {"label", e.label},
                     {"annotated", e.annotated},
                     {"confounder", e.confounder},
                     {"seed", e.seed},
                     {"annotated_slices", e.annotated_slices},
                     {"volume", e.volume_file},
                     {"sidecar", e.sidecar_file},
                     {"mask", e.mask_file}};
}

void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.id = j.at("id").get<std::string>();
  e.index = j.at("index").get<std::int64_t>();
  e.partition = j.at("partition").get<std::string>() == "test" ? Partition::test : Partition::development;
  e.split = split_from_string(j.at("split").get<std::string>());
  e.label = j.at("label").get<int>();
  e.annotated = j.at("annotated").get<bool>();
  e.confounder = j.at("confounder").get<bool>();
  e.seed = j.at("seed").get<std::uint64_t>();
  e.annotated_slices = j.at("annotated_slices").get<std::vector<std::int64_t>>();
  e.volume_file = j.at("volume").get<std::string>();
  e.sidecar_file = j.at("sidecar").get<std::string>();
  e.mask_file = j.value("mask", "");
}

std::vector<ManifestEntry> plan_manifest(const CorpusConfig& config) {
  config.validate();
  std::vector<ManifestEntry> entries;
  for (auto p : {Partition::development, Partition::test}) {
    const auto labels = assign_labels(config, p);
    const auto n = config.partition_size(p);
    const auto first = entries.size();
    for (std::int64_t i = 0; i < n; ++i) {
      ManifestEntry e;
      e.id = study_id(p, i);
      e.index = i;
      e.partition = p;
      e.split = p == Partition::test ? Split::test : Split::train;
      e.label = labels[static_cast<std::size_t>(i)];
      e.seed = study_seed(config, p, i);
      entries.push_back(e);
    }
    if (p == Partition::test) continue;
    // Stratify annotation by label, then validation by (label, annotated).
    std::mt19937_64 rng(derive_seed(config.rng_seed, kRoleStream, 0));
    for (int label : {0, 1}) {
      std::vector<std::size_t> group;
      for (auto k = first; k < entries.size(); ++k)
        if (entries[k].label == label) group.push_back(k);
      std::shuffle(group.begin(), group.end(), rng);
      const auto n_annot = static_cast<std::size_t>(count_of(static_cast<std::int64_t>(group.size()),
                                                             config.annotated_fraction));
      for (std::size_t k = 0; k < group.size(); ++k) entries[group[k]].annotated = k < n_annot;
      for (bool annotated : {true, false}) {
        std::vector<std::size_t> sub;
        for (auto k : group)
          if (entries[k].annotated == annotated) sub.push_back(k);
        const auto n_val = static_cast<std::size_t>(count_of(static_cast<std::int64_t>(sub.size()),
                                                             config.validation_fraction));
        for (std::size_t k = 0; k < n_val; ++k) entries[sub[sub.size() - 1 - k]].split = Split::validation;
      }
    }
  }
  return entries;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace

CorpusManifest generate_corpus(const CorpusConfig& config, const std::filesystem::path& output_dir) {
  CorpusManifest manifest;
  manifest.config = config;
  manifest.studies = plan_manifest(config);
  std::error_code ec;
  std::filesystem::create_directories(output_dir, ec);
  if (ec) throw DataError("cannot create " + output_dir.string() + ": " + ec.message());

  std::uint64_t checksum = fnv1a(nlohmann::json(config).dump());
  for (auto& e : manifest.studies) {
    Study s = generate_study(config, e.index, e.label, e.partition, e.annotated);
    e.confounder = s.meta.confounder;
    for (const auto& [z, m] : s.lesion_masks) e.annotated_slices.push_back(z);
    e.volume_file = e.id + ".avol";
    e.sidecar_file = e.id + ".json";
    container::write_volume(output_dir / e.volume_file, s.volume);
    if (!s.lesion_masks.empty()) {
      e.mask_file = e.id + ".amsk";
      std::vector<std::uint8_t> bits;
      for (const auto& [z, m] : s.lesion_masks) bits.insert(bits.end(), m.bits.begin(), m.bits.end());
      container::Header h{std::string(container::kMaskMagic), container::DType::uint8,
                          {1, static_cast<std::uint64_t>(s.volume.shape.rows),
                           static_cast<std::uint64_t>(s.volume.shape.cols)},
                          {s.volume.spacing.z, s.volume.spacing.y, s.volume.spacing.x}};
      container::write_u8(output_dir / e.mask_file, h, bits);
    }
    nlohmann::json side = {{"id", e.id},
                           {"label", e.label},
                           {"seed", e.seed},
                           {"annotated_slices", e.annotated_slices},
                           {"confounder", e.confounder},
                           {"structure_extent", {s.geometry.structure_start, s.geometry.structure_end}},
                           {"lesion_count", s.geometry.lesions.size()},
                           {"spacing_mm", {s.volume.spacing.z, s.volume.spacing.y, s.volume.spacing.x}}};
    write_text(output_dir / e.sidecar_file, side.dump(2) + "\n");

    checksum = fnv1a(nlohmann::json(e).dump(), checksum);
    checksum = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.volume.voxels.data()),
                               s.volume.voxels.size() * sizeof(float)),
                     checksum);
  }
  manifest.checksum = hex64(checksum);

  nlohmann::json doc = {{"format", "pedetect-manifest-1"},
                        {"config", config},
                        {"checksum", manifest.checksum},
                        {"studies", manifest.studies}};
  write_text(output_dir / kManifestFile, doc.dump(2) + "\n");
  return manifest;
}

CorpusManifest read_manifest(const std::filesystem::path& corpus_dir) {
  const auto path = corpus_dir / kManifestFile;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(path.string() + ": " + ex.what());
  }
  CorpusManifest m;
  m.config = doc.at("config").get<CorpusConfig>();
  m.checksum = doc.at("checksum").get<std::string>();
  m.studies = doc.at("studies").get<std::vector<ManifestEntry>>();
  return m;
}

bool corpus_matches(const std::filesystem::path& corpus_dir, const CorpusConfig& config) {
  if (!std::filesystem::exists(corpus_dir / kManifestFile)) return false;
  CorpusManifest m;
  try {
    m = read_manifest(corpus_dir);
  } catch (const std::exception&) {
    return false;
  }
  if (nlohmann::json(m.config) != nlohmann::json(config)) return false;
  // Same chain as generate_corpus, over what is actually on disk.
  std::uint64_t checksum = fnv1a(nlohmann::json(config).dump());
  for (const auto& e : m.studies) {
    Volume v;
    try {
      v = container::read_volume(corpus_dir / e.volume_file);
    } catch (const std::exception&) {
      return false;
    }
    if (!e.mask_file.empty() && !std::filesystem::exists(corpus_dir / e.mask_file)) return false;
    checksum = fnv1a(nlohmann::json(e).dump(), checksum);
    checksum = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(v.voxels.data()), v.voxels.size() * sizeof(float)),
                     checksum);
  }
  return hex64(checksum) == m.checksum;
}

Study load_study(const std::filesystem::path& corpus_dir, const ManifestEntry& entry) {
  Study s;
  s.volume = container::read_volume(corpus_dir / entry.volume_file);
  s.label = entry.label;
  s.meta = {entry.id, entry.index, entry.partition, entry.seed, entry.confounder};
  if (!entry.mask_file.empty()) {
    auto blob = container::read(corpus_dir / entry.mask_file, container::kMaskMagic);
    if (blob.records != entry.annotated_slices.size())
      throw DataError(entry.mask_file + ": mask count does not match annotated slices");
    const auto rows = static_cast<std::int64_t>(blob.header.shape[1]);
    const auto cols = static_cast<std::int64_t>(blob.header.shape[2]);
    for (std::size_t k = 0; k < blob.records; ++k) {
      Mask2D m(rows, cols);
      std::copy_n(blob.u8.begin() + static_cast<std::ptrdiff_t>(k * m.bits.size()), m.bits.size(), m.bits.begin());
      s.lesion_masks.emplace(entry.annotated_slices[k], std::move(m));
    }
  }
  return s;
}

}  // namespace pedetect::synth
