#include "palpation/geometry.hpp"

#include <cmath>

namespace palpation {

RigidTransform RigidTransform::from(const Mat3& r, const Vec3& t) {
  RigidTransform out;
  out.rotation = Eigen::Quaterniond(r).normalized();
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& axis, double angle_rad, const Vec3& t) {
  RigidTransform out;
  out.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(angle_rad, axis.normalized()));
  out.translation = t;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation = (rotation * other.rotation).normalized();
  out.translation = rotation * other.translation + translation;
  return out;
}

double RigidTransform::rotation_distance(const RigidTransform& a, const RigidTransform& b) {
  // atan2 form stays accurate for small angles, unlike acos of the dot product.
  const Eigen::Quaterniond r = a.rotation.conjugate() * b.rotation;
  return 2.0 * std::atan2(r.vec().norm(), std::abs(r.w()));
}

double triangle_area(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y()));
}

bool barycentric(const Vec2& p, const Vec2& a, const Vec2& b, const Vec2& c, Eigen::Vector3d& w) {
  const double area = triangle_area(a, b, c);
  if (std::abs(area) < 1e-300) return false;
  w[0] = triangle_area(p, b, c) / area;
  w[1] = triangle_area(a, p, c) / area;
  w[2] = 1.0 - w[0] - w[1];
  return true;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return a + v * ab;
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return a + w * ac;
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + w * (c - b);
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  return a + ab * v + ac * w;
}

}  // namespace palpation
