#include "tempose/geom.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace tempose::geom {

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

bool Quaternion::is_normalized() const { return std::abs(norm() - 1.0) <= kNormalizedTolerance; }

Quaternion Quaternion::normalized() const {
  const double n = norm();
  if (!(n > kDegenerateNorm)) {
    throw DegenerateRotationError(fmt::format("quaternion norm {} is too small to define a rotation", n));
  }
  return {w / n, x / n, y / n, z / n};
}

Quaternion Quaternion::canonical() const { return w < 0.0 ? -*this : *this; }

double dot(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

Quaternion multiply(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion from_axis_angle(const Vec3& axis, double angle) {
  const double n = axis.norm();
  if (!(n > kDegenerateNorm)) throw DegenerateRotationError("rotation axis has zero length");
  const Vec3 u = axis / n;
  const double s = std::sin(angle / 2.0);
  return {std::cos(angle / 2.0), u.x() * s, u.y() * s, u.z() * s};
}

double rotation_angle_between(const Quaternion& a, const Quaternion& b) {
  const double d = std::abs(dot(a.normalized(), b.normalized()));
  return 2.0 * std::acos(std::min(1.0, d));
}

Quaternion slerp(const Quaternion& a, const Quaternion& b, double t) {
  const double d = std::clamp(dot(a, b), -1.0, 1.0);
  const double theta = std::acos(d);
  const double s = std::sin(theta);
  double wa, wb;
  if (s < 1e-12) {
    wa = 1.0 - t;
    wb = t;
  } else {
    wa = std::sin((1.0 - t) * theta) / s;
    wb = std::sin(t * theta) / s;
  }
  Quaternion q{wa * a.w + wb * b.w, wa * a.x + wb * b.x, wa * a.y + wb * b.y, wa * a.z + wb * b.z};
  return q.normalized();
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = multiply(a.rotation, b.rotation);
  out.translation = quat_to_rotmat(a.rotation) * b.translation + a.translation;
  return out;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw ValidationError(fmt::format("focal lengths must be positive, got fx={} fy={}", fx, fy));
  }
}

void BoundingBox::validate() const {
  if (!(width > 0.0) || !(height > 0.0)) {
    throw ValidationError(fmt::format("bounding box extents must be positive, got {}x{}", width, height));
  }
}

double max_pairwise_distance(const PointSet& points) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = i + 1; j < points.rows(); ++j)
      best = std::max(best, (points.row(i) - points.row(j)).norm());
  return best;
}

void ObjectModel::validate() const {
  if (points.rows() < 4) {
    throw ValidationError(
        fmt::format("object model {} has {} points, need at least 4", class_id, points.rows()));
  }
  const double d = max_pairwise_distance(points);
  if (std::abs(d - diameter) > 1e-9) {
    throw ValidationError(fmt::format("object model {} diameter {} does not match point set ({})",
                                      class_id, diameter, d));
  }
}

ObjectModel make_object_model(int class_id, std::string name, PointSet points, bool symmetric) {
  ObjectModel m;
  m.class_id = class_id;
  m.name = std::move(name);
  m.points = std::move(points);
  m.symmetric = symmetric;
  m.diameter = max_pairwise_distance(m.points);
  m.validate();
  return m;
}

Mat3 quat_to_rotmat(const Quaternion& q) {
  const Quaternion u = q.normalized();
  const double w = u.w, x = u.x, y = u.y, z = u.z;
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

Quaternion complete_quaternion(double x, double y, double z) {
  return {1.0 - std::sqrt(x * x + y * y + z * z), x, y, z};
}

Vec3 recover_translation(const Vec2& c, const Vec2& delta_c, double t_z, const CameraIntrinsics& K) {
  if (!(t_z > 0.0)) throw InvalidDepthError(fmt::format("depth must be positive, got {}", t_z));
  return {(c.x() + delta_c.x() - K.px) * t_z / K.fx, (c.y() + delta_c.y() - K.py) * t_z / K.fy, t_z};
}

Vec2 project_center(const Vec3& t, const CameraIntrinsics& K) {
  if (!(t.z() > 0.0)) throw InvalidDepthError(fmt::format("depth must be positive, got {}", t.z()));
  return {K.fx * t.x() / t.z() + K.px, K.fy * t.y() / t.z() + K.py};
}

PointSet transform_points(const Pose& pose, const PointSet& points) {
  const Mat3 r = quat_to_rotmat(pose.rotation);
  PointSet out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const Vec3 p = points.row(i).transpose();
    out.row(i) = (r * p + pose.translation).transpose();
  }
  return out;
}

PointSet load_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point file " + path.string());
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z)) throw ParseError("expected three columns x,y,z in " + path.string(), line_no);
    std::string rest;
    if (ss >> rest) throw ParseError("extra columns in " + path.string(), line_no);
    values.insert(values.end(), {x, y, z});
  }
  PointSet pts(static_cast<Eigen::Index>(values.size() / 3), 3);
  std::copy(values.begin(), values.end(), pts.data());
  return pts;
}

void save_points_csv(const std::filesystem::path& path, const PointSet& points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write point file " + path.string());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    out << fmt::format("{:.17g},{:.17g},{:.17g}\n", points(i, 0), points(i, 1), points(i, 2));
  }
}

std::vector<ObjectModel> load_object_models(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open object registry " + path.string());
  std::vector<ObjectModel> models;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed object record: ") + e.what(), line_no);
    }
    try {
      ObjectModel m;
      m.class_id = j.at("class_id").get<int>();
      m.name = j.value("name", fmt::format("class_{}", m.class_id));
      m.symmetric = j.value("symmetric", false);
      m.points = load_points_csv(path.parent_path() / j.at("points").get<std::string>());
      m.diameter = j.contains("diameter") ? j.at("diameter").get<double>()
                                          : max_pairwise_distance(m.points);
      m.validate();
      models.push_back(std::move(m));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad object record: ") + e.what(), line_no);
    }
  }
  return models;
}

void save_object_models(const std::filesystem::path& path, const std::vector<ObjectModel>& models) {
  const auto dir = path.parent_path();
  std::filesystem::create_directories(dir / "models");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write object registry " + path.string());
  for (const auto& m : models) {
    const std::string rel = fmt::format("models/{}.csv", m.name);
    save_points_csv(dir / rel, m.points);
    nlohmann::ordered_json j;
    j["class_id"] = m.class_id;
    j["name"] = m.name;
    j["symmetric"] = m.symmetric;
    j["diameter"] = m.diameter;
    j["points"] = rel;
    out << j.dump() << '\n';
  }
}

}  // namespace tempose::geom
