#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "dotfan/synth_data.hpp"

using namespace dotfan;
using namespace dotfan::synth;

namespace {

const face::MorphableModel& toy_model() {
  static const auto model = face::MorphableModel::make_toy(96, 10, 4, 7);
  return model;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dotfan_synth_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

DatasetConfig frontal_config(int identities, int per_identity) {
  DatasetConfig c;
  c.n_identities = identities;
  c.images_per_identity = per_identity;
  c.poses.yaw_min_deg = c.poses.yaw_max_deg = 0.0;
  c.poses.pitch_min_deg = c.poses.pitch_max_deg = 0.0;
  c.poses.roll_min_deg = c.poses.roll_max_deg = 0.0;
  c.poses.translation_max = 0.0;
  c.poses.expression_max = 0.3;
  const int pass[] = {codes::kPassThroughLabel};
  c.illumination = codes::IlluminationDistribution::uniform(pass);
  return c;
}

}  // namespace

TEST_CASE("rendering is deterministic and bounded") {
  const auto& m = toy_model();
  auto theta = face::ShapeParams::frontal(10, 4);
  theta.rotation = face::rotation_from_euler(0.3, 0.1, 0.0);
  const auto a = generate_toy_face(m, 42, theta, 5, 32);
  const auto b = generate_toy_face(m, 42, theta, 5, 32);
  CHECK(a.image.pixels == b.image.pixels);
  for (double v : a.image.pixels) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  const auto other = generate_toy_face(m, 43, theta, 5, 32);
  CHECK(max_abs_diff(a.image, other.image) > 0.05);
}

TEST_CASE("illumination acts as a multiplicative shading field") {
  const auto& m = toy_model();
  auto theta = face::ShapeParams::frontal(10, 4);
  theta.rotation = face::rotation_from_euler(-0.2, 0.05, 0.02);
  const auto plain = generate_toy_face(m, 9, theta, codes::kPassThroughLabel, 32);
  for (int label = 0; label < codes::kLitLabelCount; ++label) {
    const auto lit = generate_toy_face(m, 9, theta, label, 32);
    const auto field = shading_field(label, 32);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const double base = plain.image.at(c, y, x) + 1.0;
          if (base < 0.05) continue;
          const double ratio = (lit.image.at(c, y, x) + 1.0) / base;
          CHECK(std::abs(ratio - field[y * 32 + x]) < 1e-5);
        }
  }
  for (double s : shading_field(codes::kPassThroughLabel, 16)) CHECK(s == 1.0);
  CHECK_THROWS_AS(shading_field(14, 16), ContractError);
  CHECK_THROWS_AS(light_direction(13), ContractError);
}

TEST_CASE("lit labels are distinct unit directions") {
  for (int a = 0; a < codes::kLitLabelCount; ++a) {
    const auto la = light_direction(a);
    CHECK(std::abs(la[0] * la[0] + la[1] * la[1] + la[2] * la[2] - 1.0) < 1e-12);
    for (int b = a + 1; b < codes::kLitLabelCount; ++b) {
      const auto lb = light_direction(b);
      CHECK(la[0] * lb[0] + la[1] * lb[1] + la[2] * lb[2] < 0.999);
    }
  }
}

TEST_CASE("flipping the pose mirrors the render") {
  const auto& m = toy_model();
  const auto identity = ToyIdentity::from_seed(11, 10, 0.3);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto t = codes::sample_target_attributes(rng, {}, codes::IlluminationDistribution::uniform_all(),
                                             10, 4);
    t.pose.alpha_shape = identity.alpha_shape;
    const auto a = generate_toy_face(m, identity, t.pose, codes::kPassThroughLabel, 32);
    const auto b = generate_toy_face(m, identity, face::flip_pose(t.pose), codes::kPassThroughLabel, 32);
    const auto mirrored = b.image.mirrored();
    double err = 0.0;
    for (std::size_t i = 0; i < a.image.pixels.size(); ++i) err += std::abs(a.image.pixels[i] - mirrored.pixels[i]);
    err /= static_cast<double>(a.image.pixels.size()) * 2.0;  // pixel range is 2
    CHECK(err < 0.02);
  }
}

TEST_CASE("dataset layout, counts and prefix stability") {
  const auto& m = toy_model();
  DatasetConfig c;
  c.n_identities = 10;
  c.images_per_identity = 3;
  c.seed = 17;
  const auto ds = build_dataset(m, c);
  REQUIRE(ds.records.size() == 30);
  std::set<std::vector<double>> shapes;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(ds.records[i].identity_label == static_cast<int>(i / 3));
    shapes.insert(ds.records[i].theta.alpha_shape);
    const int illum = ds.records[i].illumination_label;
    CHECK(illum >= 0);
    CHECK(illum < codes::kIlluminationSize);
  }
  CHECK(shapes.size() == 10);

  DatasetConfig longer = c;
  longer.images_per_identity = 8;
  const auto ds8 = build_dataset(m, longer);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(ds8.records[i * 8 + j].image.pixels == ds.records[i * 3 + j].image.pixels);
      CHECK(ds8.records[i * 8 + j].theta == ds.records[i * 3 + j].theta);
    }

  DatasetConfig shifted = c;
  shifted.identity_offset = 10;
  const auto ds_shift = build_dataset(m, shifted);
  CHECK(ds_shift.records.front().identity_label == 10);
  CHECK(ds_shift.records.front().theta.alpha_shape != ds.records.front().theta.alpha_shape);

  DatasetConfig bad = c;
  bad.n_identities = 1;
  CHECK_THROWS_AS(build_dataset(m, bad), ContractError);
}

TEST_CASE("ground-truth Theta matches itself under the shape metric") {
  const auto& m = toy_model();
  DatasetConfig c;
  c.n_identities = 3;
  c.images_per_identity = 4;
  const auto ds = build_dataset(m, c);
  const auto w = face::ImportanceMatrix::ones(10, 4);
  for (const auto& r : ds.records) {
    CHECK(face::wpdc_loss(r.theta, r.theta, w) == 0.0);
    CHECK(face::rotation_orthonormality_error(r.theta.rotation) < 1e-9);
  }
}

TEST_CASE("identities are separable by a nearest-centroid classifier") {
  const auto& m = toy_model();
  auto train_cfg = frontal_config(10, 6);
  train_cfg.seed = 3;
  const auto ds = build_dataset(m, train_cfg);
  const std::size_t len = ds.records.front().image.pixels.size();
  std::vector<std::vector<double>> centroids(10, std::vector<double>(len, 0.0));
  int correct = 0;
  int total = 0;
  // Centroids from the first 3 images of each identity, tested on the rest.
  for (const auto& r : ds.records) {
    const int idx = static_cast<int>(&r - ds.records.data()) % 6;
    if (idx >= 3) continue;
    for (std::size_t k = 0; k < len; ++k) centroids[r.identity_label][k] += r.image.pixels[k] / 3.0;
  }
  for (const auto& r : ds.records) {
    const int idx = static_cast<int>(&r - ds.records.data()) % 6;
    if (idx < 3) continue;
    int best = -1;
    double best_d = 1e300;
    for (int k = 0; k < 10; ++k) {
      double d = 0.0;
      for (std::size_t p = 0; p < len; ++p) d += std::pow(r.image.pixels[p] - centroids[k][p], 2);
      if (d < best_d) best_d = d, best = k;
    }
    correct += best == r.identity_label;
    ++total;
  }
  CHECK(static_cast<double>(correct) / total > 0.9);
}

TEST_CASE("manifest and dataset round trip") {
  const auto& m = toy_model();
  DatasetConfig c;
  c.n_identities = 3;
  c.images_per_identity = 2;
  c.seed = 99;
  const auto ds = build_dataset(m, c);
  const auto root = scratch("roundtrip");
  const auto written = write_dataset(root, ds, 10, 4);
  const auto read = read_manifest(root / "manifest.csv");
  CHECK(read.seed == 99);
  CHECK(read.generator_version == kGeneratorVersion);
  REQUIRE(read.rows.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(read.rows[i].path == written.rows[i].path);
    CHECK(read.rows[i].identity == ds.records[i].identity_label);
    CHECK(read.rows[i].illumination == ds.records[i].illumination_label);
    REQUIRE(read.rows[i].theta.has_value());
    CHECK(*read.rows[i].theta == ds.records[i].theta);
    CHECK(read.rows[i].origin.empty());
  }
  const auto images = load_images(root / "manifest.csv", read);
  REQUIRE(images.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(max_abs_diff(images[i], ds.records[i].image) <= 1.0 / 255.0 + 1e-12);

  auto with_origin = read;
  with_origin.rows[0].origin = "raw";
  with_origin.rows[0].theta.reset();
  for (std::size_t i = 1; i < 6; ++i) with_origin.rows[i].origin = "synth";
  write_manifest(root / "aug.csv", with_origin, true);
  const auto back = read_manifest(root / "aug.csv");
  CHECK(back.rows[0].origin == "raw");
  CHECK_FALSE(back.rows[0].theta.has_value());
  CHECK(back.rows[5].origin == "synth");
}

TEST_CASE("malformed manifests report the offending line") {
  const auto root = scratch("malformed");
  DatasetManifest m;
  m.d_s = 10;
  m.d_e = 4;
  m.rows.push_back({"a.png", 0, 13, std::nullopt, ""});
  write_manifest(root / "m.csv", m, false);
  auto rewrite = [&](const std::string& body) { io::write_text(root / "m.csv", body); };

  rewrite("path,identity,illum,theta_b64\na.png,0,13,\nb.png,x,13,\n");
  try {
    read_manifest(root / "m.csv");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3") != std::string::npos);
  }
  rewrite("path,identity,illum,theta_b64\na.png,0,14,\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
  rewrite("path,identity,illum,theta_b64\na.png,0,1\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
  rewrite("path,identity,illum,theta_b64\na.png,0,1,\na.png,1,1,\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
  rewrite("wrong,header\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
  rewrite("path,identity,illum,theta_b64\na.png,0,1,AAAA\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
  rewrite("path,identity,illum,theta_b64,origin\na.png,0,1,,other\n");
  CHECK_THROWS_AS(read_manifest(root / "m.csv"), DataError);
}
