#pragma once

#include "palpation/geometry.hpp"
#include "palpation/phantom.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace palpation {

class MeshIndex;

struct HornFit {
  RigidTransform transform;
  double rmse = 0.0;  // mm
};

/// Closed-form least-squares rigid transform mapping src onto dst
/// (Horn 1987, unit quaternion from the dominant eigenvector of the 4x4
/// symmetric matrix built from the cross-covariance).
HornFit horn_fit(std::span<const Vec3> src, std::span<const Vec3> dst);

/// sqrt(mean ||T(src_i) - dst_i||^2)
double rmse(const RigidTransform& transform, std::span<const Vec3> src, std::span<const Vec3> dst);

struct IcpParams {
  int max_iterations = 200;
  double convergence_tol_mm = 1e-5;
  /// Fraction of worst correspondences discarded every iteration.
  double trim_fraction = 0.1;
};

struct RegistrationResult {
  /// Maps model coordinates into the cloud (camera) frame.
  RigidTransform transform;
  /// Trimmed point-to-surface RMSE, the quantity ICP minimizes.
  double rmse = 0.0;
  /// Point-to-surface RMSE over every cloud point.
  double rmse_all = 0.0;
  int iterations = 0;
  double elapsed_s = 0.0;
  bool converged = false;
  /// Trimmed RMSE at the initial pose and after each accepted iteration.
  std::vector<double> rmse_history;
};

/// Trimmed point-to-surface ICP with horn_fit as the inner solver.
/// `init` maps model to cloud frame; when absent, the model is first aligned
/// by centroid and principal axes.
RegistrationResult icp_register(const PointCloud& cloud, const TriMesh& model, const MeshIndex& index,
                                std::optional<RigidTransform> init, const IcpParams& params = {});
RegistrationResult icp_register(const PointCloud& cloud, const TriMesh& model,
                                std::optional<RigidTransform> init, const IcpParams& params = {});

/// Point-to-surface RMSE of the cloud after mapping it into the model frame
/// with transform.inverse().
double point_to_surface_rmse(const PointCloud& cloud, const MeshIndex& index, const RigidTransform& transform);

PointCloud read_ply(std::istream& in);
PointCloud read_ply_file(const std::string& path);
void write_ply(std::ostream& out, const PointCloud& cloud);
void write_ply_file(const std::string& path, const PointCloud& cloud);

nlohmann::json to_json(const RigidTransform& t);
RigidTransform transform_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RegistrationResult& r);
RegistrationResult registration_from_json(const nlohmann::json& j);

}  // namespace palpation
