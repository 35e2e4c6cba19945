#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <stdexcept>
#include <string>
#include <vector>

namespace palpation {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Error raised by every module for contract violations and bad input.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rigid transform x -> R x + t, with R held as a unit quaternion.
/// Translations are in millimeters.
struct RigidTransform {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from(const Mat3& r, const Vec3& t);
  static RigidTransform from_axis_angle(const Vec3& axis, double angle_rad, const Vec3& t);

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 rotate(const Vec3& v) const { return rotation * v; }
  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }

  RigidTransform inverse() const;
  /// (this * other)(x) == this->apply(other.apply(x))
  RigidTransform operator*(const RigidTransform& other) const;

  /// Angle of the relative rotation between two transforms, radians.
  static double rotation_distance(const RigidTransform& a, const RigidTransform& b);
};

double triangle_area(const Vec2& a, const Vec2& b, const Vec2& c);

/// Barycentric coordinates of p with respect to triangle (a, b, c) in 2D.
/// Returns false when the triangle is degenerate.
bool barycentric(const Vec2& p, const Vec2& a, const Vec2& b, const Vec2& c, Eigen::Vector3d& w);

/// Exact closest point on triangle (a, b, c) to p (Ericson, Real-Time Collision Detection 5.1.5).
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

}  // namespace palpation
