#pragma once

// Rotation, rigid-transform and pinhole-camera utilities, all in 64-bit.

#include <Eigen/Core>
#include <filesystem>
#include <string>
#include <vector>

#include "tempose/errors.hpp"

namespace tempose::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
// One point per row, meters.
using PointSet = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr double kNormalizedTolerance = 1e-9;
inline constexpr double kDegenerateNorm = 1e-9;

// Component order is (w, x, y, z).
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double norm() const;
  bool is_normalized() const;
  // Throws DegenerateRotationError when norm <= 1e-9.
  Quaternion normalized() const;
  Quaternion operator-() const { return {-w, -x, -y, -z}; }
  // Same rotation with w >= 0.
  Quaternion canonical() const;

  bool operator==(const Quaternion&) const = default;
};

double dot(const Quaternion& a, const Quaternion& b);
Quaternion multiply(const Quaternion& a, const Quaternion& b);
Quaternion from_axis_angle(const Vec3& axis, double angle);
// Geodesic rotation angle in radians between two rotations.
double rotation_angle_between(const Quaternion& a, const Quaternion& b);
// Constant-speed interpolation along the great arc from a to b (no sign flip).
Quaternion slerp(const Quaternion& a, const Quaternion& b, double t);

struct Pose {
  Quaternion rotation;
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
};

// Returns a ∘ b, i.e. x -> a(b(x)).
Pose compose(const Pose& a, const Pose& b);

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double px = 0.0;
  double py = 0.0;

  void validate() const;
  bool operator==(const CameraIntrinsics&) const = default;
};

struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double height = 1.0;

  Vec2 center() const { return {cx, cy}; }
  void validate() const;
  bool operator==(const BoundingBox&) const = default;
};

struct ObjectModel {
  int class_id = 0;
  std::string name;
  PointSet points;
  bool symmetric = false;
  double diameter = 0.0;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  // Enforces m >= 4 and diameter == max pairwise distance (1e-9).
  void validate() const;
};

// Builds a model and fills in its diameter.
ObjectModel make_object_model(int class_id, std::string name, PointSet points, bool symmetric);
double max_pairwise_distance(const PointSet& points);

Mat3 quat_to_rotmat(const Quaternion& q);

// w = 1 - ||(x, y, z)||, left unnormalized.
Quaternion complete_quaternion(double x, double y, double z);

// Inverts the pinhole relation for the shifted center c + delta_c at depth t_z.
Vec3 recover_translation(const Vec2& c, const Vec2& delta_c, double t_z, const CameraIntrinsics& K);

Vec2 project_center(const Vec3& t, const CameraIntrinsics& K);

PointSet transform_points(const Pose& pose, const PointSet& points);

// Object registry stored as JSON lines; each record references a CSV of
// x,y,z rows relative to the registry file.
std::vector<ObjectModel> load_object_models(const std::filesystem::path& path);
void save_object_models(const std::filesystem::path& path, const std::vector<ObjectModel>& models);

PointSet load_points_csv(const std::filesystem::path& path);
void save_points_csv(const std::filesystem::path& path, const PointSet& points);

}  // namespace tempose::geom
