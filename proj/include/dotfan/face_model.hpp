#pragma once

// Linear morphable face-shape model, pose parameterisation, the weighted
// parameter distance cost, face-mask rasterisation and pose mirroring.
//
// Coordinates: vertices live in normalised image units where x and y span
// [-1, 1] across the image (y points down) and z points toward the camera.
// Projection is orthographic: pixel = (coord + 1) * size / 2.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dotfan::face {

using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

constexpr int kRotationLength = 9;
constexpr int kTranslationLength = 3;

constexpr std::size_t shape_params_length(int d_s, int d_e) {
  return static_cast<std::size_t>(kRotationLength + kTranslationLength + d_s + d_e);
}

// Theta = [R (row-major 3x3), T, alpha_shape, alpha_exp].
struct ShapeParams {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> translation{0, 0, 0};
  std::vector<double> alpha_shape;
  std::vector<double> alpha_exp;

  static ShapeParams frontal(int d_s, int d_e);
  static ShapeParams unflatten(std::span<const double> flat, int d_s, int d_e);

  std::size_t size() const { return shape_params_length(shape_dim(), exp_dim()); }
  int shape_dim() const { return static_cast<int>(alpha_shape.size()); }
  int exp_dim() const { return static_cast<int>(alpha_exp.size()); }
  std::vector<double> flatten() const;

  bool operator==(const ShapeParams&) const = default;
};

// Importance weights for the parameter distance cost, one per Theta entry.
struct ImportanceMatrix {
  std::array<double, 9> w_rotation{};
  std::array<double, 3> w_translation{};
  std::vector<double> w_shape;
  std::vector<double> w_exp;

  static ImportanceMatrix ones(int d_s, int d_e);
  static ImportanceMatrix unflatten(std::span<const double> flat, int d_s, int d_e);
  std::vector<double> flatten() const;
};

struct FaceMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;  // row-major, entries 0 or 1
  bool out_of_frame = false;       // no vertex hull overlaps the image

  std::uint8_t at(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x]; }
  std::size_t area() const;
  FaceMask mirrored() const;
};

// A landmark vertex and the colour slot the toy renderer paints it with.
struct Landmark {
  int vertex = 0;
  int slot = 0;
};

class MorphableModel {
 public:
  // Bases are (3V) x d with row 3*v + axis; their columns must be orthonormal.
  MorphableModel(Vertices mean, Eigen::MatrixXd shape_basis, Eigen::MatrixXd exp_basis,
                 std::uint64_t seed = 0, std::vector<Landmark> landmarks = {});

  // Seeded synthetic model whose mean and bases are mirror-symmetric, so
  // every reconstructed face is left/right symmetric.
  static MorphableModel make_toy(int vertices, int d_s, int d_e, std::uint64_t seed);

  int vertex_count() const { return static_cast<int>(mean_.rows()); }
  int shape_dim() const { return static_cast<int>(shape_basis_.cols()); }
  int exp_dim() const { return static_cast<int>(exp_basis_.cols()); }
  std::uint64_t seed() const { return seed_; }
  const Vertices& mean() const { return mean_; }
  const Eigen::MatrixXd& shape_basis() const { return shape_basis_; }
  const Eigen::MatrixXd& exp_basis() const { return exp_basis_; }
  const std::vector<Landmark>& landmarks() const { return landmarks_; }

  // Writes the array archive at `path` and a JSON sidecar at `path`.json.
  void save(const std::filesystem::path& path) const;
  static MorphableModel load(const std::filesystem::path& path);

 private:
  Vertices mean_;
  Eigen::MatrixXd shape_basis_;
  Eigen::MatrixXd exp_basis_;
  std::uint64_t seed_ = 0;
  std::vector<Landmark> landmarks_;
};

// Per-vertex R * (mean + A_shape a_shape + A_exp a_exp) + T.
Vertices reconstruct_shape(const MorphableModel& model, const ShapeParams& p);

// sum_i w_i (pred_i - target_i)^2.
double wpdc_loss(const ShapeParams& predicted, const ShapeParams& target,
                 const ImportanceMatrix& w);
// Gradient of wpdc_loss with respect to the flattened prediction.
std::vector<double> wpdc_gradient(const ShapeParams& predicted, const ShapeParams& target,
                                  const ImportanceMatrix& w);

// w_i = min(1, |target_i - mean_i| / (std_i + eps)) over the pool, then
// rescaled so the largest weight is 1 (all ones when every distance is 0).
ImportanceMatrix build_importance_matrix(const ShapeParams& target,
                                         std::span<const ShapeParams> pool);

inline constexpr double kImportanceEpsilon = 1e-8;

// Filled convex hull of the orthographically projected vertices.
FaceMask render_mask(const MorphableModel& model, const ShapeParams& p, int height, int width);
// Same, from already-projected pixel coordinates (x, y) per vertex.
FaceMask rasterize_hull(std::span<const std::array<double, 2>> points, int height, int width);

// Conjugates the pose by the x-axis reflection F = diag(-1, 1, 1).
ShapeParams flip_pose(const ShapeParams& p);

// Yaw about the vertical axis, pitch about x, roll about z (radians);
// R = Ry(yaw) * Rx(pitch) * Rz(roll).
std::array<double, 9> rotation_from_euler(double yaw, double pitch, double roll);
double yaw_of(const std::array<double, 9>& rotation);
double yaw_of(std::span<const double> flat_params);

// Largest deviation of R^T R from I and of det R from 1.
double rotation_orthonormality_error(const std::array<double, 9>& rotation);

}  // namespace dotfan::face
