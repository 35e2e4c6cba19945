#pragma once

#include "palpation/geometry.hpp"
#include "palpation/phantom.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace palpation {

/// Admissible probing range: contact force below 10 N, deformation below 8 mm.
inline constexpr double kAdmissibleForceN = 10.0;
inline constexpr double kAdmissibleDepthMm = 8.0;

struct ProbeParams {
  double lambda_mm = 10.0;  // approach offset along the normal
  double d_max_mm = 8.0;    // penetration limit
  double f_max_n = 10.0;    // force limit
  double z_safe_mm = 30.0;  // safe height above the organ's bounding box
  double step_mm = 0.1;     // descent resolution
};

/// The probing trajectory: safe point p1, approach point p2 = p0 + lambda n,
/// and the commanded end point p3 = p2 - (lambda + d_max) n.
struct ProbePlan {
  Vec2 target_uv = Vec2::Zero();
  Vec3 p0 = Vec3::Zero();
  Vec3 n = Vec3::UnitZ();
  Vec3 p1 = Vec3::Zero();
  Vec3 p2 = Vec3::Zero();
  Vec3 p3 = Vec3::Zero();
  double lambda_mm = 10.0;
  double d_max_mm = 8.0;
  double f_max_n = 10.0;
  double z_safe_mm = 30.0;
  double step_mm = 0.1;
};

/// Builds a plan from a surface point directly; z_safe is an absolute height.
ProbePlan make_plan(const Vec2& uv, const Vec3& p0, const Vec3& n, const ProbeParams& params, double safe_z);

/// Plan for probing the phantom at uv. p1 sits z_safe above the mesh's top.
ProbePlan plan_probe(const PhantomModel& phantom, const Vec2& uv, const ProbeParams& params);

struct SensorModel {
  /// Gaussian noise, truncated at +-3 sigma (the sensor's noise bound).
  double noise_sigma_n = 0.05;
  /// Fixed offset; when unset it is drawn from U(0, 0.5) N per probe.
  std::optional<double> baseline_n;
  /// Probability that a post-contact reading is replaced by a spike.
  double outlier_rate = 0.0;
  /// Spikes are uniform in [0, outlier_scale * F_max]; outlier_scale <= 1.
  double outlier_scale = 0.5;
};

enum class Termination { force_limited, depth_limited };

const char* to_string(Termination t);
Termination termination_from_string(const std::string& s);

struct ForceSample {
  double displacement_mm = 0.0;  // travel from p2 along -n
  double force_n = 0.0;
};

struct ProbeRecord {
  ProbePlan plan;
  /// Descent only, ordered by strictly increasing displacement.
  std::vector<ForceSample> samples;
  Termination termination = Termination::depth_limited;
  /// Constant sensor offset present in `samples`.
  double baseline_offset = 0.0;
  std::uint64_t seed = 0;
};

/// Descends from p2 toward p3 in step_mm increments against a linear contact
/// (force = k * penetration). Motion stops where the noise-free reading first
/// reaches F_max or where penetration reaches d_max; the stop is resolved
/// between grid steps so the limit is never overshot.
ProbeRecord simulate_descent(const ProbePlan& plan, double stiffness_n_per_mm, const SensorModel& sensor,
                             std::uint64_t seed);

/// simulate_descent with the phantom's ground-truth stiffness at the target.
ProbeRecord execute_probe(const PhantomModel& phantom, const ProbePlan& plan, const SensorModel& sensor,
                          std::uint64_t seed);

nlohmann::json to_json(const ProbeRecord& record);
ProbeRecord probe_record_from_json(const nlohmann::json& j);

}  // namespace palpation
