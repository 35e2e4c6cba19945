#include "palpation/probe_sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace palpation {

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

void check_params(const ProbeParams& p) {
  if (!(p.lambda_mm > 0.0)) throw Error("lambda must be positive");
  if (!(p.d_max_mm > 0.0)) throw Error("d_max must be positive");
  if (p.d_max_mm > kAdmissibleDepthMm) throw Error("exceeds admissible deformation");
  if (!(p.f_max_n > 0.0)) throw Error("F_max must be positive");
  if (p.f_max_n > kAdmissibleForceN) throw Error("exceeds admissible force");
  if (!(p.step_mm > 0.0)) throw Error("descent step must be positive");
}

}  // namespace

ProbePlan make_plan(const Vec2& uv, const Vec3& p0, const Vec3& n, const ProbeParams& params, double safe_z) {
  check_params(params);
  ProbePlan plan;
  plan.target_uv = uv;
  plan.p0 = p0;
  plan.n = n.normalized();
  plan.lambda_mm = params.lambda_mm;
  plan.d_max_mm = params.d_max_mm;
  plan.f_max_n = params.f_max_n;
  plan.z_safe_mm = safe_z;
  plan.step_mm = params.step_mm;
  plan.p2 = plan.p0 + plan.lambda_mm * plan.n;
  plan.p3 = plan.p2 - (plan.lambda_mm + plan.d_max_mm) * plan.n;
  plan.p1 = Vec3(plan.p2.x(), plan.p2.y(), std::max(safe_z, plan.p2.z()));
  return plan;
}

ProbePlan plan_probe(const PhantomModel& phantom, const Vec2& uv, const ProbeParams& params) {
  check_params(params);
  const SurfacePoint sp = surface_point(phantom, uv);
  return make_plan(uv, sp.point, sp.normal, params, phantom.bbox_max().z() + params.z_safe_mm);
}

const char* to_string(Termination t) {
  return t == Termination::force_limited ? "force_limited" : "depth_limited";
}

Termination termination_from_string(const std::string& s) {
  if (s == "force_limited") return Termination::force_limited;
  if (s == "depth_limited") return Termination::depth_limited;
  throw Error("unknown termination '" + s + "'");
}

ProbeRecord simulate_descent(const ProbePlan& plan, double stiffness, const SensorModel& sensor,
                             std::uint64_t seed) {
  if (!(sensor.noise_sigma_n >= 0.0)) throw Error("sensor noise must be non-negative");
  if (!(sensor.outlier_rate >= 0.0 && sensor.outlier_rate < 0.5)) throw Error("outlier_rate must be in [0, 0.5)");
  if (!(sensor.outlier_scale >= 0.0 && sensor.outlier_scale <= 1.0)) throw Error("outlier_scale must be in [0, 1]");
  if (!(stiffness >= 0.0)) throw Error("stiffness must be non-negative");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ProbeRecord rec;
  rec.plan = plan;
  rec.seed = seed;
  rec.baseline_offset = sensor.baseline_n ? *sensor.baseline_n : 0.5 * unit(rng);

  const double travel = plan.lambda_mm + plan.d_max_mm;
  const double noise_bound = 3.0 * sensor.noise_sigma_n;
  const auto clean_reading = [&](double d) {
    return rec.baseline_offset + stiffness * std::max(0.0, d - plan.lambda_mm);
  };
  const auto measure = [&](double d) {
    const bool in_contact = d > plan.lambda_mm;
    if (in_contact && sensor.outlier_rate > 0.0 && unit(rng) < sensor.outlier_rate)
      return unit(rng) * sensor.outlier_scale * plan.f_max_n;
    double e = sensor.noise_sigma_n > 0.0 ? sensor.noise_sigma_n * gauss(rng) : 0.0;
    e = std::clamp(e, -noise_bound, noise_bound);
    return clean_reading(d) + e;
  };

  for (long i = 0;; ++i) {
    double d = static_cast<double>(i) * plan.step_mm;
    bool depth_stop = false;
    if (d >= travel - 1e-9) {
      d = travel;
      depth_stop = true;
    }
    if (clean_reading(d) >= plan.f_max_n) {
      // Resolve where the clean reading crosses F_max within this step.
      double stop = d;
      if (stiffness > 0.0) {
        stop = plan.lambda_mm + (plan.f_max_n - rec.baseline_offset) / stiffness;
        stop = std::clamp(stop, rec.samples.empty() ? 0.0 : std::nextafter(rec.samples.back().displacement_mm, travel), d);
      }
      rec.samples.push_back({stop, measure(stop)});
      rec.termination = Termination::force_limited;
      break;
    }
    rec.samples.push_back({d, measure(d)});
    if (depth_stop) {
      rec.termination = Termination::depth_limited;
      break;
    }
  }
  return rec;
}

ProbeRecord execute_probe(const PhantomModel& phantom, const ProbePlan& plan, const SensorModel& sensor,
                          std::uint64_t seed) {
  return simulate_descent(plan, true_stiffness(phantom, plan.target_uv), sensor, seed);
}

nlohmann::json to_json(const ProbeRecord& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) samples.push_back({s.displacement_mm, s.force_n});
  return {{"target_uv", {r.plan.target_uv.x(), r.plan.target_uv.y()}},
          {"p0", vec_json(r.plan.p0)},
          {"n", vec_json(r.plan.n)},
          {"p1", vec_json(r.plan.p1)},
          {"p2", vec_json(r.plan.p2)},
          {"p3", vec_json(r.plan.p3)},
          {"lambda_mm", r.plan.lambda_mm},
          {"d_max_mm", r.plan.d_max_mm},
          {"f_max_n", r.plan.f_max_n},
          {"z_safe_mm", r.plan.z_safe_mm},
          {"step_mm", r.plan.step_mm},
          {"samples", samples},
          {"termination", to_string(r.termination)},
          {"baseline_offset_n", r.baseline_offset},
          {"seed", r.seed}};
}

ProbeRecord probe_record_from_json(const nlohmann::json& j) {
  try {
    ProbeRecord r;
    r.plan.target_uv = Vec2(j.at("target_uv").at(0).get<double>(), j.at("target_uv").at(1).get<double>());
    r.plan.p0 = vec_from(j.at("p0"));
    r.plan.n = vec_from(j.at("n"));
    r.plan.lambda_mm = j.at("lambda_mm").get<double>();
    r.plan.d_max_mm = j.at("d_max_mm").get<double>();
    r.plan.f_max_n = j.at("f_max_n").get<double>();
    r.plan.z_safe_mm = j.value("z_safe_mm", 0.0);
    r.plan.step_mm = j.value("step_mm", 0.1);
    r.plan.p2 = j.contains("p2") ? vec_from(j.at("p2")) : Vec3(r.plan.p0 + r.plan.lambda_mm * r.plan.n);
    r.plan.p3 = j.contains("p3") ? vec_from(j.at("p3"))
                                 : Vec3(r.plan.p2 - (r.plan.lambda_mm + r.plan.d_max_mm) * r.plan.n);
    r.plan.p1 = j.contains("p1") ? vec_from(j.at("p1")) : r.plan.p2;
    for (const auto& s : j.at("samples")) r.samples.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    r.termination = termination_from_string(j.at("termination").get<std::string>());
    r.baseline_offset = j.value("baseline_offset_n", 0.0);
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid probe record: ") + e.what());
  }
}

}  // namespace palpation
