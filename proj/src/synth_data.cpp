#include "dotfan/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "dotfan/seeding.hpp"
#include "json.hpp"

namespace dotfan::synth {

namespace {

constexpr std::uint64_t kIdentityTag = 0x1D;
constexpr std::uint64_t kRecordTag = 0x2E;
constexpr double kBlobSigma = 0.09;  // normalised image units

struct LightSpec {
  double azimuth_deg;
  double elevation_deg;
};

// Fixed light array: a horizontal arc, an upper ring and two low lights.
constexpr std::array<LightSpec, codes::kLitLabelCount> kLights{{
    {-90, 0}, {-60, 0}, {-30, 0}, {0, 0}, {30, 0}, {60, 0}, {90, 0},
    {-60, 40}, {-20, 40}, {20, 40}, {60, 40},
    {-45, -40}, {45, -40},
}};

std::array<double, 3> random_colour(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::array<double, 3> c;
  for (auto& v : c) v = u(rng);
  return c;
}

}  // namespace

ToyIdentity ToyIdentity::from_seed(std::uint64_t identity_seed, int d_s, double shape_sigma) {
  std::mt19937_64 rng(identity_seed);
  ToyIdentity id;
  id.palette.skin = random_colour(rng, 0.35, 0.9);
  for (auto& slot : id.palette.slots) slot = random_colour(rng, 0.05, 0.95);
  std::normal_distribution<double> normal(0.0, shape_sigma);
  id.alpha_shape.resize(d_s);
  for (auto& a : id.alpha_shape) a = normal(rng);
  return id;
}

std::array<double, 3> light_direction(int label) {
  if (label < 0 || label >= codes::kLitLabelCount) {
    throw ContractError("no light direction for label " + std::to_string(label));
  }
  constexpr double deg = std::numbers::pi / 180.0;
  const double az = kLights[label].azimuth_deg * deg;
  const double el = kLights[label].elevation_deg * deg;
  // Positive elevation is above the face; y points down.
  return {std::sin(az) * std::cos(el), -std::sin(el), std::cos(az) * std::cos(el)};
}

std::vector<double> shading_field(int label, int image_size) {
  if (label < 0 || label >= codes::kIlluminationSize) {
    throw ContractError("illumination label " + std::to_string(label) + " out of range");
  }
  std::vector<double> field(static_cast<std::size_t>(image_size) * image_size, 1.0);
  if (label == codes::kPassThroughLabel) return field;
  const auto l = light_direction(label);
  // Normals of a sphere of radius sqrt(2) seen through the image plane.
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      const double u = 2.0 * (x + 0.5) / image_size - 1.0;
      const double v = 2.0 * (y + 0.5) / image_size - 1.0;
      const double z = std::sqrt(std::max(0.0, 2.0 - u * u - v * v));
      const double lambert = (u * l[0] + v * l[1] + z * l[2]) / std::numbers::sqrt2;
      field[static_cast<std::size_t>(y) * image_size + x] =
          kAmbient + (1.0 - kAmbient) * std::max(0.0, lambert);
    }
  return field;
}

ToyFaceRecord generate_toy_face(const face::MorphableModel& model, const ToyIdentity& identity,
                                const face::ShapeParams& theta, int illumination_label,
                                int image_size) {
  if (image_size <= 0) throw ContractError("image size must be positive");
  const auto field = shading_field(illumination_label, image_size);
  const face::FaceMask mask = face::render_mask(model, theta, image_size, image_size);
  const face::Vertices verts = face::reconstruct_shape(model, theta);

  struct Blob {
    double x, y;
    const std::array<double, 3>* colour;
  };
  std::vector<Blob> blobs;
  for (const auto& lm : model.landmarks()) {
    const int slot = std::clamp(lm.slot, 1, 3) - 1;
    blobs.push_back({verts(lm.vertex, 0), verts(lm.vertex, 1), &identity.palette.slots[slot]});
  }

  ToyFaceRecord rec;
  rec.theta = theta;
  rec.illumination_label = illumination_label;
  rec.image = Image::filled(image_size, 0.0);
  const double inv_two_sigma2 = 1.0 / (2.0 * kBlobSigma * kBlobSigma);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      const double u = 2.0 * (x + 0.5) / image_size - 1.0;
      const double v = 2.0 * (y + 0.5) / image_size - 1.0;
      std::array<double, 3> base;
      if (mask.at(y, x)) base = identity.palette.skin;
      else base.fill(kBackground);
      // Order-independent blend so mirrored landmark pairs render alike.
      double weight = 0.0;
      std::array<double, 3> mix{0.0, 0.0, 0.0};
      for (const auto& b : blobs) {
        const double a = std::exp(-((u - b.x) * (u - b.x) + (v - b.y) * (v - b.y)) * inv_two_sigma2);
        weight += a;
        for (int c = 0; c < 3; ++c) mix[c] += a * (*b.colour)[c];
      }
      const double alpha = std::min(1.0, weight);
      const double s = field[static_cast<std::size_t>(y) * image_size + x];
      for (int c = 0; c < 3; ++c) {
        const double colour = weight > 0.0 ? mix[c] / weight : 0.0;
        const double intensity = (1.0 - alpha) * base[c] + alpha * colour;
        rec.image.at(c, y, x) = std::clamp(2.0 * intensity * s - 1.0, -1.0, 1.0);
      }
    }
  return rec;
}

ToyFaceRecord generate_toy_face(const face::MorphableModel& model, std::uint64_t identity_seed,
                                const face::ShapeParams& theta, int illumination_label,
                                int image_size, double shape_sigma) {
  const auto identity = ToyIdentity::from_seed(identity_seed, model.shape_dim(), shape_sigma);
  return generate_toy_face(model, identity, theta, illumination_label, image_size);
}

void DatasetConfig::validate() const {
  if (n_identities < 2) throw ContractError("a dataset needs at least 2 identities");
  if (images_per_identity < 1) throw ContractError("images_per_identity must be >= 1");
  if (image_size <= 0) throw ContractError("image_size must be positive");
  if (identity_offset < 0) throw ContractError("identity_offset must be >= 0");
  if (!(shape_sigma >= 0.0)) throw ContractError("shape_sigma must be >= 0");
  poses.validate();
  illumination.validate();
}

std::uint64_t identity_seed(std::uint64_t dataset_seed, int identity_label) {
  return derive_seed(dataset_seed, {kIdentityTag, static_cast<std::uint64_t>(identity_label)});
}

std::uint64_t record_seed(std::uint64_t dataset_seed, int identity_label, int index) {
  return derive_seed(dataset_seed, {kRecordTag, static_cast<std::uint64_t>(identity_label),
                                    static_cast<std::uint64_t>(index)});
}

ToyDataset build_dataset(const face::MorphableModel& model, const DatasetConfig& config) {
  config.validate();
  ToyDataset out;
  out.seed = config.seed;
  out.records.reserve(static_cast<std::size_t>(config.n_identities) * config.images_per_identity);
  for (int i = 0; i < config.n_identities; ++i) {
    const int label = config.identity_offset + i;
    const auto identity = ToyIdentity::from_seed(identity_seed(config.seed, label),
                                                 model.shape_dim(), config.shape_sigma);
    for (int j = 0; j < config.images_per_identity; ++j) {
      std::mt19937_64 rng(record_seed(config.seed, label, j));
      const auto target = codes::sample_target_attributes(rng, config.poses, config.illumination,
                                                          model.shape_dim(), model.exp_dim());
      face::ShapeParams theta = target.pose;
      theta.alpha_shape = identity.alpha_shape;
      auto rec = generate_toy_face(model, identity, theta, target.illumination.label(),
                                   config.image_size);
      rec.identity_label = label;
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------- manifests

namespace {

constexpr const char* kHeader = "path,identity,illum,theta_b64";
constexpr const char* kHeaderWithOrigin = "path,identity,illum,theta_b64,origin";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_int(const std::string& text, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": '" + text + "' is not an integer");
  }
}

}  // namespace

face::MorphableModel toy_model(int d_s, int d_e) {
  constexpr int kVertices = 96;
  constexpr std::uint64_t kModelSeed = 7;
  return face::MorphableModel::make_toy(kVertices, d_s, d_e, kModelSeed);
}

void write_manifest(const std::filesystem::path& csv, const DatasetManifest& manifest,
                    bool with_origin) {
  std::set<std::string> seen;
  std::ostringstream os;
  os << (with_origin ? kHeaderWithOrigin : kHeader) << "\n";
  for (const auto& row : manifest.rows) {
    if (!seen.insert(row.path).second) throw ContractError("duplicate manifest path " + row.path);
    if (row.path.find(',') != std::string::npos) throw ContractError("manifest path contains ','");
    os << row.path << ',' << row.identity << ',' << row.illumination << ',';
    if (row.theta) os << io::encode_doubles(row.theta->flatten());
    if (with_origin) os << ',' << row.origin;
    os << "\n";
  }
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  io::write_text(csv, os.str());
  const nlohmann::json meta{{"seed", manifest.seed},
                            {"generator_version", manifest.generator_version},
                            {"d_s", manifest.d_s},
                            {"d_e", manifest.d_e},
                            {"rows", manifest.rows.size()}};
  io::write_text(csv.string() + ".json", meta.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& csv) {
  DatasetManifest m;
  try {
    const auto meta = nlohmann::json::parse(io::read_text(csv.string() + ".json"));
    m.seed = meta.at("seed").get<std::uint64_t>();
    m.generator_version = meta.at("generator_version").get<std::string>();
    m.d_s = meta.at("d_s").get<int>();
    m.d_e = meta.at("d_e").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(csv.string() + ".json: " + e.what());
  }
  std::istringstream is(io::read_text(csv));
  std::string line;
  int line_no = 0;
  bool with_origin = false;
  std::set<std::string> seen;
  const std::size_t theta_len = face::shape_params_length(m.d_s, m.d_e);
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = csv.string() + ":" + std::to_string(line_no);
    if (line_no == 1) {
      if (line == kHeaderWithOrigin) with_origin = true;
      else if (line != kHeader) throw DataError(where + ": unexpected header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != (with_origin ? 5u : 4u)) throw DataError(where + ": wrong field count");
    ManifestRow row;
    row.path = fields[0];
    if (row.path.empty() || !seen.insert(row.path).second) {
      throw DataError(where + ": empty or duplicate path");
    }
    row.identity = parse_int(fields[1], where);
    row.illumination = parse_int(fields[2], where);
    if (row.identity < 0 || row.illumination < 0 || row.illumination >= codes::kIlluminationSize) {
      throw DataError(where + ": label out of range");
    }
    if (!fields[3].empty()) {
      const auto flat = io::decode_doubles(fields[3]);
      if (flat.size() != theta_len) throw DataError(where + ": theta has the wrong length");
      row.theta = face::ShapeParams::unflatten(flat, m.d_s, m.d_e);
    }
    if (with_origin) {
      row.origin = fields[4];
      if (row.origin != "raw" && row.origin != "synth") throw DataError(where + ": bad origin");
    }
    m.rows.push_back(std::move(row));
  }
  if (line_no == 0) throw DataError(csv.string() + ": empty manifest");
  return m;
}

DatasetManifest write_dataset(const std::filesystem::path& root, const ToyDataset& dataset, int d_s,
                              int d_e) {
  DatasetManifest m;
  m.seed = dataset.seed;
  m.generator_version = dataset.generator_version;
  m.d_s = d_s;
  m.d_e = d_e;
  std::map<int, int> next_index;
  for (const auto& rec : dataset.records) {
    const int index = next_index[rec.identity_label]++;
    const std::string rel = std::to_string(rec.identity_label) + "/" + std::to_string(index) + ".png";
    std::filesystem::create_directories(root / std::to_string(rec.identity_label));
    io::write_png(root / rel, rec.image);
    m.rows.push_back(ManifestRow{rel, rec.identity_label, rec.illumination_label, rec.theta, ""});
  }
  write_manifest(root / "manifest.csv", m, false);
  return m;
}

std::vector<Image> load_images(const std::filesystem::path& csv, const DatasetManifest& manifest) {
  const auto base = csv.parent_path();
  std::vector<Image> out;
  out.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) out.push_back(io::read_png(base / row.path));
  return out;
}

}  // namespace dotfan::synth
