#pragma once

#include "palpation/geometry.hpp"
#include "palpation/probe_sim.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace palpation {

struct StiffnessSample {
  Vec2 uv = Vec2::Zero();
  double stiffness = 0.0;  // N/mm, clamped at 0
  int inlier_count = 0;
  double inlier_fraction = 0.0;
  double intercept = 0.0;  // N
  /// Set when the fitted slope was negative and clamped to zero.
  bool clamped = false;
};

nlohmann::json to_json(const StiffnessSample& s);
StiffnessSample stiffness_sample_from_json(const nlohmann::json& j);

/// Samples recorded before descent reached half the approach offset are
/// treated as free-air readings near p2.
std::span<const ForceSample> pre_contact_samples(const ProbeRecord& record);

/// Subtracts the mean pre-contact reading from every sample.
/// Throws "cannot estimate baseline" without pre-contact samples.
ProbeRecord remove_baseline(const ProbeRecord& record);

struct RansacParams {
  int iterations = 200;
  double inlier_tol_n = 0.15;
  /// Minimum consensus as a fraction of the samples, used when
  /// min_inliers is unset.
  double min_inlier_fraction = 0.4;
  std::optional<int> min_inliers;
  std::uint64_t seed = 7;
};

struct LineFit {
  double slope = 0.0;      // N/mm
  double intercept = 0.0;  // N
  std::vector<bool> inliers;
  int inlier_count = 0;
};

/// Two-point-seeded RANSAC followed by least squares over the consensus set.
/// All pairs are tried when there are no more pairs than iterations.
LineFit ransac_line_fit(std::span<const ForceSample> samples, const RansacParams& params = {});

struct EstimatorParams {
  RansacParams ransac;
  /// Contact onset: this many consecutive readings above
  /// noise_multiplier * (pre-contact standard deviation).
  int onset_run = 3;
  double noise_multiplier = 3.0;
};

/// Baseline removal, contact-onset detection, then RANSAC on the loaded part.
StiffnessSample estimate_stiffness(const ProbeRecord& record, const EstimatorParams& params = {});

}  // namespace palpation
