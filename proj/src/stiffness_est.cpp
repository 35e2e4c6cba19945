#include "palpation/stiffness_est.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace palpation {

nlohmann::json to_json(const StiffnessSample& s) {
  return {{"uv", {s.uv.x(), s.uv.y()}},
          {"k_n_per_mm", s.stiffness},
          {"inlier_count", s.inlier_count},
          {"inlier_fraction", s.inlier_fraction},
          {"intercept_n", s.intercept},
          {"clamped", s.clamped}};
}

StiffnessSample stiffness_sample_from_json(const nlohmann::json& j) {
  try {
    StiffnessSample s;
    s.uv = Vec2(j.at("uv").at(0).get<double>(), j.at("uv").at(1).get<double>());
    s.stiffness = j.at("k_n_per_mm").get<double>();
    s.inlier_fraction = j.at("inlier_fraction").get<double>();
    s.intercept = j.at("intercept_n").get<double>();
    s.inlier_count = j.value("inlier_count", 0);
    s.clamped = j.value("clamped", false);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid stiffness sample: ") + e.what());
  }
}

std::span<const ForceSample> pre_contact_samples(const ProbeRecord& record) {
  const double window = 0.5 * record.plan.lambda_mm;
  const auto end = std::find_if(record.samples.begin(), record.samples.end(),
                                [&](const ForceSample& s) { return s.displacement_mm >= window; });
  return {record.samples.data(), static_cast<std::size_t>(end - record.samples.begin())};
}

ProbeRecord remove_baseline(const ProbeRecord& record) {
  const auto pre = pre_contact_samples(record);
  if (pre.empty()) throw Error("cannot estimate baseline");
  double mean = 0.0;
  for (const auto& s : pre) mean += s.force_n;
  mean /= static_cast<double>(pre.size());
  ProbeRecord out = record;
  for (auto& s : out.samples) s.force_n -= mean;
  out.baseline_offset = record.baseline_offset - mean;
  return out;
}

namespace {

struct Line {
  double slope = 0.0;
  double intercept = 0.0;
};

bool least_squares(std::span<const ForceSample> samples, const std::vector<bool>& mask, Line& out) {
  double n = 0.0, sd = 0.0, sf = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!mask[i]) continue;
    n += 1.0;
    sd += samples[i].displacement_mm;
    sf += samples[i].force_n;
  }
  if (n < 2.0) return false;
  const double md = sd / n;
  const double mf = sf / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!mask[i]) continue;
    const double dx = samples[i].displacement_mm - md;
    sxx += dx * dx;
    sxy += dx * (samples[i].force_n - mf);
  }
  if (!(sxx > 0.0)) return false;
  out.slope = sxy / sxx;
  out.intercept = mf - out.slope * md;
  return true;
}

int consensus(std::span<const ForceSample> samples, const Line& line, double tol, std::vector<bool>* mask,
              double* residual_sum) {
  int count = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double r = std::abs(samples[i].force_n - (line.slope * samples[i].displacement_mm + line.intercept));
    const bool in = r <= tol;
    if (mask) (*mask)[i] = in;
    if (in) {
      ++count;
      sum += r;
    }
  }
  if (residual_sum) *residual_sum = sum;
  return count;
}

}  // namespace

LineFit ransac_line_fit(std::span<const ForceSample> samples, const RansacParams& params) {
  if (samples.size() < 2) throw Error("line fit needs at least 2 samples");
  if (!(params.inlier_tol_n > 0.0)) throw Error("inlier tolerance must be positive");
  if (params.iterations < 1) throw Error("RANSAC needs at least one iteration");
  const std::size_t n = samples.size();
  const int required =
      params.min_inliers ? *params.min_inliers
                         : std::max(2, static_cast<int>(std::ceil(params.min_inlier_fraction * static_cast<double>(n))));

  Line best;
  int best_count = -1;
  double best_residual = 0.0;
  const auto consider = [&](std::size_t i, std::size_t j) {
    const double dd = samples[j].displacement_mm - samples[i].displacement_mm;
    if (dd == 0.0) return;
    Line line;
    line.slope = (samples[j].force_n - samples[i].force_n) / dd;
    line.intercept = samples[i].force_n - line.slope * samples[i].displacement_mm;
    double residual = 0.0;
    const int count = consensus(samples, line, params.inlier_tol_n, nullptr, &residual);
    if (count > best_count || (count == best_count && residual < best_residual)) {
      best = line;
      best_count = count;
      best_residual = residual;
    }
  };

  const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  if (pairs <= params.iterations) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) consider(i, j);
  } else {
    std::mt19937_64 rng(params.seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (int it = 0; it < params.iterations; ++it) {
      const std::size_t i = pick(rng);
      std::size_t j = pick(rng);
      while (j == i) j = pick(rng);
      consider(std::min(i, j), std::max(i, j));
    }
  }
  if (best_count < required) throw Error("no consistent linear trend");

  LineFit fit;
  fit.inliers.assign(n, false);
  fit.inlier_count = consensus(samples, best, params.inlier_tol_n, &fit.inliers, nullptr);
  Line line = best;
  // Refit over the consensus set; a refit that shrinks the consensus is kept
  // only for the least-squares pass that produced it.
  for (int pass = 0; pass < 3; ++pass) {
    Line refined;
    if (!least_squares(samples, fit.inliers, refined)) break;
    std::vector<bool> mask(n, false);
    const int count = consensus(samples, refined, params.inlier_tol_n, &mask, nullptr);
    line = refined;
    if (count < required || mask == fit.inliers) break;
    fit.inliers = std::move(mask);
    fit.inlier_count = count;
  }
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  return fit;
}

StiffnessSample estimate_stiffness(const ProbeRecord& record, const EstimatorParams& params) {
  const ProbeRecord clean = remove_baseline(record);
  const auto pre = pre_contact_samples(clean);
  double var = 0.0;
  for (const auto& s : pre) var += s.force_n * s.force_n;  // mean is zero after removal
  const double sigma = pre.size() > 1 ? std::sqrt(var / static_cast<double>(pre.size() - 1)) : 0.0;
  const double threshold = std::max(params.noise_multiplier * sigma, 1e-9);

  const auto& samples = clean.samples;
  std::size_t onset = samples.size();
  int run = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    run = samples[i].force_n > threshold ? run + 1 : 0;
    if (run == params.onset_run) {
      onset = i + 1 - static_cast<std::size_t>(params.onset_run);
      break;
    }
  }
  if (onset == samples.size()) throw Error("no contact detected");
  const std::span<const ForceSample> loaded(samples.data() + onset, samples.size() - onset);
  if (loaded.size() < 2) throw Error("too few samples after contact");

  const LineFit fit = ransac_line_fit(loaded, params.ransac);
  StiffnessSample out;
  out.uv = record.plan.target_uv;
  out.clamped = fit.slope < 0.0;
  out.stiffness = std::max(fit.slope, 0.0);
  out.intercept = fit.intercept;
  out.inlier_count = fit.inlier_count;
  out.inlier_fraction = static_cast<double>(fit.inlier_count) / static_cast<double>(loaded.size());
  return out;
}

}  // namespace palpation
