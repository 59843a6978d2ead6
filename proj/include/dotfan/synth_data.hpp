#pragma once

// Procedural toy faces with exact ground truth: identity label, Theta and
// illumination label. Identity is carried jointly by alpha_shape and a
// per-identity colour palette.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dotfan/codes.hpp"
#include "dotfan/face_model.hpp"
#include "dotfan/image.hpp"

namespace dotfan::synth {

inline constexpr const char* kGeneratorVersion = "toyface-1";
inline constexpr double kBackground = 0.5;  // intensity outside the face
inline constexpr double kAmbient = 0.3;     // shading floor

struct Palette {
  std::array<double, 3> skin{};
  std::array<std::array<double, 3>, 3> slots{};  // eyes, nose, mouth
};

// Palette and shape drawn from the identity seed.
struct ToyIdentity {
  Palette palette;
  std::vector<double> alpha_shape;

  static ToyIdentity from_seed(std::uint64_t identity_seed, int d_s, double shape_sigma);
};

struct ToyFaceRecord {
  Image image;
  int identity_label = 0;
  face::ShapeParams theta;
  int illumination_label = codes::kPassThroughLabel;
};

// Unit light direction for labels 0..12 (x right, y down, z to camera).
std::array<double, 3> light_direction(int label);
// Per-pixel multiplicative field, row-major H x W; all ones for label 13.
std::vector<double> shading_field(int label, int image_size);

// Deterministic render. The caller assigns identity_label.
ToyFaceRecord generate_toy_face(const face::MorphableModel& model, const ToyIdentity& identity,
                                const face::ShapeParams& theta, int illumination_label,
                                int image_size);
ToyFaceRecord generate_toy_face(const face::MorphableModel& model, std::uint64_t identity_seed,
                                const face::ShapeParams& theta, int illumination_label,
                                int image_size, double shape_sigma = 0.3);

struct DatasetConfig {
  int n_identities = 20;
  int images_per_identity = 20;
  int image_size = 32;
  codes::PoseRanges poses;
  codes::IlluminationDistribution illumination = codes::IlluminationDistribution::uniform_all();
  std::uint64_t seed = 0;
  // Labels run from identity_offset; seeds hash the label, so offset
  // ranges give disjoint identities.
  int identity_offset = 0;
  double shape_sigma = 0.3;

  void validate() const;
};

struct ToyDataset {
  std::vector<ToyFaceRecord> records;  // identity-major
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
};

std::uint64_t identity_seed(std::uint64_t dataset_seed, int identity_label);
std::uint64_t record_seed(std::uint64_t dataset_seed, int identity_label, int index);

// Record (i, j) depends only on (seed, label i, index j).
ToyDataset build_dataset(const face::MorphableModel& model, const DatasetConfig& config);

// The morphable model every toy dataset with these dimensions is drawn
// from; fixed vertex count and seed.
face::MorphableModel toy_model(int d_s, int d_e);

// ---- manifests ----

struct ManifestRow {
  std::string path;  // relative to the manifest's directory
  int identity = 0;
  int illumination = codes::kPassThroughLabel;
  std::optional<face::ShapeParams> theta;
  std::string origin;  // "raw" or "synth"; empty when the column is absent
};

struct DatasetManifest {
  std::vector<ManifestRow> rows;
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
  int d_s = 0;
  int d_e = 0;
};

// CSV `path,identity,illum,theta_b64[,origin]` plus a `<file>.json`
// sidecar carrying seed, generator version and Theta dimensions.
void write_manifest(const std::filesystem::path& csv, const DatasetManifest& manifest,
                    bool with_origin);
// Throws DataError on malformed input (with the line number).
DatasetManifest read_manifest(const std::filesystem::path& csv);

// Writes <root>/<identity>/<index>.png and <root>/manifest.csv.
DatasetManifest write_dataset(const std::filesystem::path& root, const ToyDataset& dataset,
                              int d_s, int d_e);
// Reads every image listed in the manifest.
std::vector<Image> load_images(const std::filesystem::path& csv, const DatasetManifest& manifest);

}  // namespace dotfan::synth
