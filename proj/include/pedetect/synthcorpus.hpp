#pragma once

// Synthetic contrast-CT-like studies: bright tubular vessels carrying small dark
// filling defects (lesions), plus an optional bright rib-like arc whose presence
// is correlated with the study label.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pedetect/volume.hpp"

namespace pedetect::synth {

struct IntRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

enum class Partition : std::uint8_t { development, test };

struct CorpusConfig {
  std::int64_t study_count = 200;
  double positive_fraction = 0.5;
  Shape3 volume_shape{40, 96, 96};
  double slice_thickness_mm = 2.5;
  double pixel_spacing_mm = 4.0;
  IntRange lesion_count_range{1, 3};
  RealRange lesion_radius_range_vox{2.0, 3.0};
  // P(confounder | positive); negatives carry it with 1 - this.
  double confounder_correlation = 0.9;
  double noise_std_hu = 20.0;
  double annotation_spacing_mm = 10.0;
  std::uint64_t rng_seed = 0;

  // Share of development studies with pixel annotations (the stage-I subset).
  double annotated_fraction = 0.5;
  double validation_fraction = 0.2;
  // Held-out partition drawn from a disjoint seed stream.
  std::int64_t test_study_count = 0;
  double test_confounder_correlation = 0.5;
  // Confounder correlation of development studies outside the annotated
  // subset; unset means confounder_correlation. Lets the bias live in the
  // annotated data only, with label-only studies drawn from a broader
  // population.
  std::optional<double> label_only_confounder_correlation;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  std::int64_t partition_size(Partition p) const {
    return p == Partition::development ? study_count : test_study_count;
  }
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct Vessel {
  double center_y = 0, center_x = 0;
  double amplitude = 0, frequency = 0, phase_y = 0, phase_x = 0;
  double radius = 0;
  float hu = 300.0f;

  double y_at(double z) const;
  double x_at(double z) const;
};

struct Lesion {
  std::int64_t vessel = 0;
  double center_z = 0, center_y = 0, center_x = 0;
  double radius_z = 0, radius_yx = 0;
  float hu = 50.0f;
};

struct Arc {
  double radius = 0, thickness = 0, angle = 0, half_span = 0;
  float hu = 700.0f;
};

// Everything drawn from the study seed except voxel noise.
struct StudyGeometry {
  Shape3 shape;
  std::int64_t structure_start = 0;  // first slice containing vessels
  std::int64_t structure_end = 0;    // last slice containing vessels (inclusive)
  std::vector<Vessel> vessels;
  std::vector<Lesion> lesions;
  std::optional<Arc> confounder;
};

struct StudyMeta {
  std::string id;
  std::int64_t index = 0;
  Partition partition = Partition::development;
  std::uint64_t seed = 0;
  bool confounder = false;
};

struct Study {
  Volume volume;
  int label = 0;
  std::map<std::int64_t, Mask2D> lesion_masks;  // annotated slice -> mask
  StudyMeta meta;
  StudyGeometry geometry;
};

std::string study_id(Partition p, std::int64_t index);
std::uint64_t study_seed(const CorpusConfig& config, Partition p, std::int64_t index);

// Labels for a partition: exactly round(n * positive_fraction) positives.
std::vector<int> assign_labels(const CorpusConfig& config, Partition p);

StudyGeometry plan_study(const CorpusConfig& config, std::int64_t index, int label,
                         Partition p = Partition::development, bool annotated = true);
// Voxels of slice z covered by any lesion (ellipsoid clipped to its vessel).
Mask2D rasterize_lesions(const StudyGeometry& g, std::int64_t z);
std::int64_t lesion_voxel_count(const StudyGeometry& g);
// Greedy sparse annotation: lesion-centre slices first, then slices on an
// annotation-spacing grid around each centre that keep the spacing.
std::vector<std::int64_t> annotated_slices(const CorpusConfig& config, const StudyGeometry& g);

// `annotated` defaults to the study's role in the corpus plan; it only
// matters when label_only_confounder_correlation is set.
Study generate_study(const CorpusConfig& config, std::int64_t index,
                     std::optional<int> force_label = std::nullopt,
                     Partition p = Partition::development, std::optional<bool> annotated = std::nullopt);

enum class Split : std::uint8_t { train, validation, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string id;
  std::int64_t index = 0;
  Partition partition = Partition::development;
  Split split = Split::train;
  int label = 0;
  bool annotated = false;
  bool confounder = false;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> annotated_slices;
  std::string volume_file;
  std::string sidecar_file;
  std::string mask_file;  // empty for negatives
};

struct CorpusManifest {
  CorpusConfig config;
  std::vector<ManifestEntry> studies;
  std::string checksum;

  std::vector<const ManifestEntry*> select(Split s, std::optional<bool> annotated = {}) const;
  const ManifestEntry* find(const std::string& id) const;
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);

inline constexpr const char* kManifestFile = "manifest.json";

// Split/annotation roles for every study of a partition; stratified by label.
std::vector<ManifestEntry> plan_manifest(const CorpusConfig& config);

CorpusManifest generate_corpus(const CorpusConfig& config,
                               const std::filesystem::path& output_dir);
CorpusManifest read_manifest(const std::filesystem::path& corpus_dir);
// True when the directory holds a corpus generated from `config` whose files
// still reproduce the manifest checksum.
bool corpus_matches(const std::filesystem::path& corpus_dir, const CorpusConfig& config);

// Loads volume and masks of one manifest entry.
Study load_study(const std::filesystem::path& corpus_dir, const ManifestEntry& entry);

}  // namespace pedetect::synth
