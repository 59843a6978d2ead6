#pragma once

// Face synthesis with trained networks: frontalization, rotation to pose
// presets, relighting, code interpolation and bulk dataset augmentation.
//
// The shape coefficients of every output come from the regressor's
// estimate on its source, so synthesis changes pose, expression and
// lighting but never the face shape. Outputs inherit the source identity.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dotfan/codes.hpp"
#include "dotfan/face_model.hpp"
#include "dotfan/image.hpp"
#include "dotfan/networks.hpp"
#include "dotfan/synth_data.hpp"

namespace dotfan::augment {

inline constexpr double kMaxPresetYawDeg = 45.0;

// Trained encoder and generator plus the frozen embedder and regressor.
class Synthesizer {
 public:
  Synthesizer(nn::Encoder encoder, nn::Generator generator, nn::FaceExpert fem, nn::ShapeRegressor fsr);
  // Reads encoder, generator, fem and fsr checkpoints from `dir`. Throws
  // CheckpointError when a file is missing or the specs disagree.
  static Synthesizer load(const std::filesystem::path& dir);

  const nn::NetworkSpec& spec() const { return generator_.spec(); }
  const nn::FaceExpert& fem() const { return fem_; }
  const nn::ShapeRegressor& fsr() const { return fsr_; }

  // [E(x), fem(x), fsr(x), pass-through illumination].
  codes::AttributeCode source_code(const Image& x) const;
  Image generate(const codes::AttributeCode& f) const;
  // Same images as generate() one by one, up to summation order.
  std::vector<Image> generate_batch(std::span<const codes::AttributeCode> codes) const;

 private:
  nn::Encoder encoder_;
  nn::Generator generator_;
  nn::FaceExpert fem_;
  nn::ShapeRegressor fsr_;
};

// A named target pose. Without a yaw the source's estimated pose is kept.
struct PosePreset {
  std::string name;
  std::optional<double> yaw_deg;

  bool operator==(const PosePreset&) const = default;
};

PosePreset frontal_preset();
PosePreset keep_preset();
// Seven yaws from -45 to +45 degrees in steps of 15.
std::vector<PosePreset> yaw_sweep();

// Comma-separated tokens: `frontal`, `keep`, `sweep`, or `yaw<deg>` such
// as `yaw-30`. Throws ContractError on unknown tokens or |yaw| > 45.
std::vector<PosePreset> parse_poses(std::string_view list);
// Comma-separated labels or ranges (`0,4,8,12`, `0-12`). Throws
// ContractError outside 0..13.
std::vector<int> parse_labels(std::string_view list);

// R = Ry(yaw), T = 0, zero expression; shape from `estimate`. A keep
// preset returns `estimate` unchanged.
face::ShapeParams preset_pose(const PosePreset& preset, const face::ShapeParams& estimate);

// Creates `dir`. A non-empty directory is replaced only with `overwrite`
// and only when it holds a manifest.csv; otherwise ContractError.
void prepare_output_dir(const std::filesystem::path& dir, bool overwrite);

struct SourceImage {
  std::string path;  // as given, or as listed in a manifest
  Image image;
  int identity = -1;  // -1 when the source carries no label
};

// Each input is a PNG or a dataset manifest (.csv). Unreadable or
// wrongly-sized PNGs are skipped with a warning; a malformed manifest
// throws DataError.
std::vector<SourceImage> load_sources(std::span<const std::string> inputs, int image_size,
                                      std::ostream* warnings);

struct OutputRecord {
  std::string source;
  std::string output;  // relative to the output directory
  std::string pose;
  int illumination = codes::kPassThroughLabel;
  int identity = -1;
  face::ShapeParams theta;  // target pose with the source's shape
};

struct SynthesisResult {
  std::vector<OutputRecord> records;
  std::vector<Image> images;
};

// Every (source, pose, label) triple, source-major then pose then label.
SynthesisResult synthesize_grid(const Synthesizer& synth, std::span<const SourceImage> sources,
                                std::span<const PosePreset> poses, std::span<const int> labels);

// Writes the images and `manifest.csv` (source,output,pose,illum,identity,
// theta_b64). An existing directory is replaced only with `overwrite` and
// only when it holds a manifest; otherwise ContractError.
void write_outputs(const std::filesystem::path& dir, const SynthesisResult& result, bool overwrite);
// Throws DataError (with the line number) on malformed input.
std::vector<OutputRecord> read_output_manifest(const std::filesystem::path& csv, int d_s, int d_e);

// Frames for alpha = i / (steps - 1); the first and last frames are the
// direct generations of `left` and `right`. Throws ContractError when
// steps < 2.
std::vector<Image> interpolate_frames(const Synthesizer& synth, const codes::AttributeCode& left,
                                      const codes::AttributeCode& right, int steps);

struct AugmentationPlan {
  std::vector<PosePreset> poses = yaw_sweep();
  std::vector<int> labels = parse_labels("0-12");
  int multiplier = 1;  // synthesized variants per source: 1 or 3

  void validate() const;
};

// `<dataset dir>_aug<multiplier>` next to the source dataset.
std::filesystem::path default_augment_dir(const std::filesystem::path& manifest_csv, int multiplier);

// Synthesizes plan.multiplier variants of every source row, each with a
// pose and label drawn uniformly from the plan, and writes them with a
// combined manifest (sources marked raw, outputs synth) into `out_dir`.
// Returns the combined manifest.
synth::DatasetManifest augment_dataset(const Synthesizer& synth, const std::filesystem::path& manifest_csv,
                                       const AugmentationPlan& plan, std::uint64_t seed,
                                       const std::filesystem::path& out_dir, bool overwrite);

}  // namespace dotfan::augment
