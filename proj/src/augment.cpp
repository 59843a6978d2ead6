#include "dotfan/augment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "dotfan/config.hpp"
#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "dotfan/seeding.hpp"
#include "dotfan/trainer.hpp"

namespace dotfan::augment {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kAugmentTag = fnv1a("augment");
constexpr std::size_t kChunk = 64;
constexpr const char* kOutputHeader = "source,output,pose,illum,identity,theta_b64";

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto end = text.find(sep, start);
    out.emplace_back(text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return value;
}

std::string yaw_name(double yaw) {
  if (yaw == 0.0) return "yaw0";
  return std::string("yaw") + (yaw > 0 ? "+" : "-") + format_double(std::abs(yaw));
}

PosePreset yaw_preset(double yaw) {
  if (!std::isfinite(yaw) || std::abs(yaw) > kMaxPresetYawDeg) {
    throw ContractError("pose preset yaw must lie within +-45 degrees");
  }
  return {yaw_name(yaw), yaw};
}

std::string zero_padded(std::size_t value, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << value;
  return os.str();
}

fs::path absolute_normal(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

}  // namespace

// ---------------------------------------------------------------- synthesizer

Synthesizer::Synthesizer(nn::Encoder encoder, nn::Generator generator, nn::FaceExpert fem,
                         nn::ShapeRegressor fsr)
    : encoder_(std::move(encoder)), generator_(std::move(generator)), fem_(std::move(fem)), fsr_(std::move(fsr)) {
  const auto& s = generator_.spec();
  if (!(encoder_.spec() == s) || !(fem_.spec() == s) || !(fsr_.spec() == s)) {
    throw CheckpointError("encoder, generator, embedder and regressor were built with different specs");
  }
}

Synthesizer Synthesizer::load(const fs::path& dir) {
  return Synthesizer(nn::Encoder::load(dir / train::kEncoderFile), nn::Generator::load(dir / train::kGeneratorFile),
                     nn::FaceExpert::load(dir / train::kFemFile), nn::ShapeRegressor::load(dir / train::kFsrFile));
}

codes::AttributeCode Synthesizer::source_code(const Image& x) const {
  x.validate();
  if (x.size != spec().image_size) throw ContractError("image size does not match the networks");
  return codes::compose(nn::encode(encoder_, x), nn::embed_identity(fem_, x), nn::regress_shape(fsr_, x),
                        codes::IlluminationCode());
}

Image Synthesizer::generate(const codes::AttributeCode& f) const { return nn::generate(generator_, f); }

std::vector<Image> Synthesizer::generate_batch(std::span<const codes::AttributeCode> codes) const {
  ag::NoGradGuard guard;
  std::vector<Image> out;
  out.reserve(codes.size());
  for (std::size_t start = 0; start < codes.size(); start += kChunk) {
    const auto chunk = codes.subspan(start, std::min(kChunk, codes.size() - start));
    for (auto& image : nn::to_images(generator_.forward(nn::codes_to_batch(chunk)))) out.push_back(std::move(image));
  }
  return out;
}

// ---------------------------------------------------------------- presets

PosePreset frontal_preset() { return {"frontal", 0.0}; }
PosePreset keep_preset() { return {"keep", std::nullopt}; }

std::vector<PosePreset> yaw_sweep() {
  std::vector<PosePreset> out;
  for (int yaw = -45; yaw <= 45; yaw += 15) out.push_back(yaw_preset(yaw));
  return out;
}

std::vector<PosePreset> parse_poses(std::string_view list) {
  std::vector<PosePreset> out;
  for (const auto& raw : split(list, ',')) {
    const auto token = trim(raw);
    if (token == "frontal") {
      out.push_back(frontal_preset());
    } else if (token == "keep") {
      out.push_back(keep_preset());
    } else if (token == "sweep") {
      for (auto& p : yaw_sweep()) out.push_back(std::move(p));
    } else if (token.rfind("yaw", 0) == 0) {
      const auto yaw = parse_number<double>(std::string_view(token).substr(3));
      if (!yaw) throw ContractError("bad pose preset '" + token + "'");
      out.push_back(yaw_preset(*yaw));
    } else {
      throw ContractError("unknown pose preset '" + token + "' (use frontal, keep, sweep or yaw<deg>)");
    }
  }
  return out;
}

std::vector<int> parse_labels(std::string_view list) {
  std::vector<int> out;
  const auto check = [](int label) {
    if (label < 0 || label > codes::kPassThroughLabel) {
      throw ContractError("illumination label " + std::to_string(label) + " outside 0..13");
    }
    return label;
  };
  for (const auto& raw : split(list, ',')) {
    const auto token = trim(raw);
    const auto dash = token.find('-', 1);
    if (dash == std::string::npos) {
      const auto v = parse_number<int>(token);
      if (!v) throw ContractError("bad illumination label '" + token + "'");
      out.push_back(check(*v));
      continue;
    }
    const auto lo = parse_number<int>(std::string_view(token).substr(0, dash));
    const auto hi = parse_number<int>(std::string_view(token).substr(dash + 1));
    if (!lo || !hi || *lo > *hi) throw ContractError("bad illumination range '" + token + "'");
    for (int l = check(*lo); l <= check(*hi); ++l) out.push_back(l);
  }
  return out;
}

face::ShapeParams preset_pose(const PosePreset& preset, const face::ShapeParams& estimate) {
  if (!preset.yaw_deg) return estimate;
  face::ShapeParams p = face::ShapeParams::frontal(estimate.shape_dim(), estimate.exp_dim());
  p.rotation = face::rotation_from_euler(*preset.yaw_deg * std::numbers::pi / 180.0, 0.0, 0.0);
  p.alpha_shape = estimate.alpha_shape;
  return p;
}

// ---------------------------------------------------------------- sources

void prepare_output_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite) throw ContractError("output directory " + dir.string() + " exists; pass --overwrite");
    if (!fs::exists(dir / "manifest.csv")) {
      throw ContractError("refusing to replace " + dir.string() + ": it holds no manifest.csv");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::vector<SourceImage> load_sources(std::span<const std::string> inputs, int image_size,
                                      std::ostream* warnings) {
  std::vector<SourceImage> out;
  const auto add = [&](const std::string& path, const fs::path& file, int identity) {
    try {
      Image image = io::read_png(file);
      if (image.size != image_size) {
        throw DataError(std::to_string(image.size) + " px instead of " + std::to_string(image_size));
      }
      out.push_back({path, std::move(image), identity});
    } catch (const DataError& e) {
      if (warnings) *warnings << "warning: skipping " << path << ": " << e.what() << "\n";
    }
  };
  for (const auto& input : inputs) {
    const fs::path p(input);
    if (p.extension() == ".csv") {
      const auto manifest = synth::read_manifest(p);
      for (const auto& row : manifest.rows) {
        const auto file = p.parent_path() / row.path;
        add(file.string(), file, row.identity);
      }
    } else {
      add(input, p, -1);
    }
  }
  return out;
}

// ---------------------------------------------------------------- synthesis

SynthesisResult synthesize_grid(const Synthesizer& synth, std::span<const SourceImage> sources,
                                std::span<const PosePreset> poses, std::span<const int> labels) {
  if (poses.empty() || labels.empty()) throw ContractError("synthesis needs at least one pose and one label");
  for (int l : labels) {
    if (l < 0 || l > codes::kPassThroughLabel) throw ContractError("illumination label outside 0..13");
  }
  SynthesisResult result;
  std::vector<codes::AttributeCode> targets;
  const int width = std::max<int>(4, static_cast<int>(std::to_string(sources.size()).size()));
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto base = synth.source_code(sources[i].image);
    for (const auto& pose : poses) {
      const auto theta = preset_pose(pose, base.pose);
      for (int label : labels) {
        targets.push_back(codes::replace_illumination(codes::replace_pose(base, theta), label));
        result.records.push_back({sources[i].path,
                                  zero_padded(i, width) + "_" + pose.name + "_l" + std::to_string(label) + ".png",
                                  pose.name, label, sources[i].identity, theta});
      }
    }
  }
  result.images = synth.generate_batch(targets);
  return result;
}

void write_outputs(const fs::path& dir, const SynthesisResult& result, bool overwrite) {
  if (result.records.size() != result.images.size()) throw ContractError("records and images differ in count");
  prepare_output_dir(dir, overwrite);
  std::ostringstream os;
  os << kOutputHeader << "\n";
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    const auto& r = result.records[i];
    if (r.source.find(',') != std::string::npos) throw ContractError("source path contains ','");
    io::write_png(dir / r.output, result.images[i]);
    os << r.source << ',' << r.output << ',' << r.pose << ',' << r.illumination << ',' << r.identity << ','
       << io::encode_doubles(r.theta.flatten()) << "\n";
  }
  io::write_text(dir / "manifest.csv", os.str());
}

std::vector<OutputRecord> read_output_manifest(const fs::path& csv, int d_s, int d_e) {
  std::istringstream is(io::read_text(csv));
  std::string line;
  int line_no = 0;
  std::vector<OutputRecord> out;
  const auto fail = [&](const std::string& why) {
    throw DataError(csv.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != kOutputHeader) fail("unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) fail("expected 6 fields");
    const auto illum = parse_number<int>(f[3]);
    const auto identity = parse_number<int>(f[4]);
    if (!illum || !identity) fail("non-integer label");
    std::vector<double> theta;
    try {
      theta = io::decode_doubles(f[5]);
    } catch (const std::exception& e) {
      fail(e.what());
    }
    if (theta.size() != face::shape_params_length(d_s, d_e)) fail("theta has the wrong length");
    OutputRecord r{f[0], f[1], f[2], *illum, *identity, face::ShapeParams::unflatten(theta, d_s, d_e)};
    out.push_back(std::move(r));
  }
  if (line_no == 0) fail("empty manifest");
  return out;
}

std::vector<Image> interpolate_frames(const Synthesizer& synth, const codes::AttributeCode& left,
                                      const codes::AttributeCode& right, int steps) {
  if (steps < 2) throw ContractError("interpolation needs at least 2 steps");
  std::vector<Image> frames;
  for (int i = 0; i < steps; ++i) {
    const double alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
    frames.push_back(synth.generate(codes::interpolate(left, right, alpha)));
  }
  return frames;
}

// ---------------------------------------------------------------- bulk augmentation

void AugmentationPlan::validate() const {
  if (multiplier != 1 && multiplier != 3) throw ContractError("augmentation multiplier must be 1 or 3");
  if (poses.empty() || labels.empty()) throw ContractError("augmentation plan needs poses and labels");
  for (const auto& p : poses) {
    if (p.yaw_deg && std::abs(*p.yaw_deg) > kMaxPresetYawDeg) throw ContractError("plan yaw beyond 45 degrees");
  }
  for (int l : labels) {
    if (l < 0 || l > codes::kPassThroughLabel) throw ContractError("plan label outside 0..13");
  }
}

fs::path default_augment_dir(const fs::path& manifest_csv, int multiplier) {
  auto root = absolute_normal(manifest_csv).parent_path();
  return root.parent_path() / (root.filename().string() + "_aug" + std::to_string(multiplier));
}

synth::DatasetManifest augment_dataset(const Synthesizer& synth, const fs::path& manifest_csv,
                                       const AugmentationPlan& plan, std::uint64_t seed, const fs::path& out_dir,
                                       bool overwrite) {
  plan.validate();
  const auto source = synth::read_manifest(manifest_csv);
  const auto& dims = synth.spec().code_dims;
  if (source.d_s != dims.d_s || source.d_e != dims.d_e) {
    throw CheckpointError("manifest shape dimensions do not match the networks");
  }
  const auto images = synth::load_images(manifest_csv, source);
  for (const auto& image : images) {
    if (image.size != synth.spec().image_size) throw DataError("source image size does not match the networks");
  }
  const fs::path out = absolute_normal(out_dir);
  const fs::path src_dir = absolute_normal(manifest_csv).parent_path();
  if (out == src_dir) throw ContractError("augmentation output must differ from the source directory");
  prepare_output_dir(out, overwrite);

  synth::DatasetManifest combined;
  combined.seed = seed;
  combined.d_s = source.d_s;
  combined.d_e = source.d_e;
  for (const auto& row : source.rows) {
    auto raw = row;
    raw.path = (src_dir / row.path).lexically_normal().lexically_relative(out).generic_string();
    raw.origin = "raw";
    combined.rows.push_back(std::move(raw));
  }

  std::vector<codes::AttributeCode> targets;
  for (std::size_t i = 0; i < source.rows.size(); ++i) {
    const auto base = synth.source_code(images[i]);
    for (int k = 0; k < plan.multiplier; ++k) {
      std::mt19937_64 rng(derive_seed(seed, {kAugmentTag, i, static_cast<std::uint64_t>(k)}));
      std::uniform_int_distribution<std::size_t> pick_pose(0, plan.poses.size() - 1);
      std::uniform_int_distribution<std::size_t> pick_label(0, plan.labels.size() - 1);
      const auto& pose = plan.poses[pick_pose(rng)];
      const int label = plan.labels[pick_label(rng)];
      const auto theta = preset_pose(pose, base.pose);
      targets.push_back(codes::replace_illumination(codes::replace_pose(base, theta), label));
      synth::ManifestRow row;
      row.identity = source.rows[i].identity;
      row.path = std::to_string(row.identity) + "/" + std::to_string(i) + "_" + std::to_string(k) + ".png";
      row.illumination = label;
      row.theta = theta;
      row.origin = "synth";
      combined.rows.push_back(std::move(row));
    }
  }
  const auto generated = synth.generate_batch(targets);
  for (std::size_t j = 0; j < generated.size(); ++j) {
    const auto& row = combined.rows[source.rows.size() + j];
    fs::create_directories((out / row.path).parent_path());
    io::write_png(out / row.path, generated[j]);
  }
  synth::write_manifest(out / "manifest.csv", combined, true);
  return combined;
}

}  // namespace dotfan::augment
