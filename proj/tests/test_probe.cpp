#include "palpation/probe_sim.hpp"
#include "palpation/stiffness_est.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <Eigen/Dense>

using namespace palpation;
using namespace palpation::testing;

namespace {

ProbePlan flat_plan(double lambda = 10.0, double d_max = 8.0, double f_max = 10.0) {
  ProbeParams p;
  p.lambda_mm = lambda;
  p.d_max_mm = d_max;
  p.f_max_n = f_max;
  return make_plan(Vec2(0.5, 0.5), Vec3::Zero(), Vec3::UnitZ(), p, 40.0);
}

SensorModel quiet(double baseline = 0.0) {
  SensorModel s;
  s.noise_sigma_n = 0.0;
  s.baseline_n = baseline;
  return s;
}

ProbeRecord synthetic(const ProbePlan& plan, const std::vector<ForceSample>& samples) {
  ProbeRecord r;
  r.plan = plan;
  r.samples = samples;
  return r;
}

}  // namespace

TEST_CASE("make_plan geometry") {
  const ProbePlan plan = flat_plan(10.0, 8.0);
  CHECK((plan.p2 - Vec3(0, 0, 10)).norm() < 1e-12);
  CHECK((plan.p3 - Vec3(0, 0, -8)).norm() < 1e-12);
  CHECK(plan.p1 == Vec3(0, 0, 40));
}

TEST_CASE("admissible range is enforced") {
  ProbeParams p;
  p.d_max_mm = 9.0;
  CHECK_THROWS_WITH(make_plan(Vec2(0.5, 0.5), Vec3::Zero(), Vec3::UnitZ(), p, 40.0), "exceeds admissible deformation");
  p = ProbeParams{};
  p.f_max_n = 10.5;
  CHECK_THROWS_WITH(make_plan(Vec2(0.5, 0.5), Vec3::Zero(), Vec3::UnitZ(), p, 40.0), "exceeds admissible force");
  p = ProbeParams{};
  p.lambda_mm = 0.0;
  CHECK_THROWS(make_plan(Vec2(0.5, 0.5), Vec3::Zero(), Vec3::UnitZ(), p, 40.0));
}

TEST_CASE("plan_probe on the dome satisfies the plan invariants") {
  const auto ph = dome_phantom();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.25, 0.75);
  const ProbeParams params;
  for (int i = 0; i < 200; ++i) {
    const Vec2 uv(u(rng), u(rng));
    const ProbePlan plan = plan_probe(*ph, uv, params);
    const SurfacePoint sp = surface_point(*ph, uv);
    CHECK((plan.p0 - sp.point).norm() < 1e-12);
    CHECK(std::abs(plan.n.norm() - 1.0) < 1e-12);
    CHECK(std::abs((plan.p2 - plan.p0).norm() - params.lambda_mm) < 1e-9);
    const Vec3 d = plan.p3 - plan.p2;
    CHECK(std::abs(d.norm() - (params.lambda_mm + params.d_max_mm)) < 1e-9);
    CHECK(d.normalized().dot(plan.n) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(plan.p1.z() >= ph->bbox_max().z() + params.z_safe_mm - 1e-12);
    CHECK(plan.p1.head<2>() == plan.p2.head<2>());
  }
  CHECK_THROWS_WITH(plan_probe(*ph, Vec2(0.02, 0.02), params), "uv not on surface");
}

TEST_CASE("execute_probe contact model") {
  SUBCASE("soft tissue reaches the depth limit") {
    const ProbeRecord r = simulate_descent(flat_plan(), 0.5, quiet(), 1);
    CHECK(r.termination == Termination::depth_limited);
    CHECK(r.samples.back().force_n == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(r.samples.back().displacement_mm == doctest::Approx(18.0).epsilon(1e-12));
  }
  SUBCASE("stiff tissue reaches the force limit") {
    const ProbeRecord r = simulate_descent(flat_plan(), 2.0, quiet(), 1);
    CHECK(r.termination == Termination::force_limited);
    CHECK(r.samples.back().displacement_mm - r.plan.lambda_mm == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(r.samples.back().force_n <= 10.0 + 1e-12);
  }
  SUBCASE("noiseless baseline is reproduced exactly before contact") {
    const ProbeRecord r = simulate_descent(flat_plan(), 1.0, quiet(0.3), 1);
    int pre = 0;
    for (const auto& s : r.samples)
      if (s.displacement_mm <= r.plan.lambda_mm) {
        CHECK(s.force_n == 0.3);
        ++pre;
      }
    CHECK(pre == 101);
  }
  SUBCASE("monotone loading without noise") {
    const ProbeRecord r = simulate_descent(flat_plan(), 1.3, quiet(0.2), 1);
    for (std::size_t i = 1; i < r.samples.size(); ++i) CHECK(r.samples[i].force_n >= r.samples[i - 1].force_n);
  }
  SUBCASE("displacements strictly increase and stay within travel") {
    SensorModel s;
    s.outlier_rate = 0.3;
    for (std::uint64_t seed = 1; seed < 50; ++seed) {
      const ProbeRecord r = simulate_descent(flat_plan(), 0.1 * static_cast<double>(seed), s, seed);
      for (std::size_t i = 1; i < r.samples.size(); ++i)
        CHECK(r.samples[i].displacement_mm > r.samples[i - 1].displacement_mm);
      CHECK(r.samples.back().displacement_mm <= r.plan.lambda_mm + r.plan.d_max_mm);
    }
  }
  SUBCASE("deterministic under a seed") {
    SensorModel s;
    s.outlier_rate = 0.2;
    const ProbeRecord a = simulate_descent(flat_plan(), 1.0, s, 77);
    const ProbeRecord b = simulate_descent(flat_plan(), 1.0, s, 77);
    CHECK(to_json(a).dump() == to_json(b).dump());
    CHECK(to_json(simulate_descent(flat_plan(), 1.0, s, 78)).dump() != to_json(a).dump());
  }
  SUBCASE("sensor validation") {
    SensorModel s;
    s.outlier_rate = 0.5;
    CHECK_THROWS(simulate_descent(flat_plan(), 1.0, s, 1));
    s = SensorModel{};
    s.noise_sigma_n = -1.0;
    CHECK_THROWS(simulate_descent(flat_plan(), 1.0, s, 1));
  }
}

TEST_CASE("safety limits hold over randomized probes") {
  const auto ph = dome_phantom();
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0;
  while (checked < 300) {
    const Vec2 uv(u(rng), u(rng));
    if (!ph->locator().locate(uv)) continue;
    ProbeParams p;
    p.d_max_mm = 1.0 + 7.0 * u(rng);
    p.f_max_n = 1.0 + 9.0 * u(rng);
    SensorModel s;
    s.noise_sigma_n = 0.2 * u(rng);
    s.outlier_rate = 0.45 * u(rng);
    s.outlier_scale = u(rng);
    const ProbeRecord r = execute_probe(*ph, plan_probe(*ph, uv, p), s, rng());
    for (const auto& smp : r.samples) {
      CHECK(smp.force_n <= p.f_max_n + 3.0 * s.noise_sigma_n + 1e-12);
      CHECK(smp.displacement_mm - p.lambda_mm <= p.d_max_mm + 1e-12);
    }
    ++checked;
  }
}

TEST_CASE("probe record JSON round trip") {
  SensorModel s;
  s.outlier_rate = 0.1;
  const ProbeRecord r = simulate_descent(flat_plan(), 1.7, s, 5);
  const auto j = to_json(r);
  for (const char* key : {"target_uv", "p0", "n", "lambda_mm", "d_max_mm", "f_max_n", "samples", "termination", "seed"})
    CHECK(j.contains(key));
  CHECK(to_json(probe_record_from_json(j)).dump() == j.dump());
}

TEST_CASE("remove_baseline") {
  SUBCASE("constant offset goes to zero") {
    const ProbeRecord r = remove_baseline(simulate_descent(flat_plan(), 1.0, quiet(0.3), 1));
    for (const auto& s : pre_contact_samples(r)) CHECK(std::abs(s.force_n) < 1e-12);
  }
  SUBCASE("zero baseline leaves the record unchanged") {
    const ProbeRecord raw = simulate_descent(flat_plan(), 1.0, quiet(0.0), 1);
    const ProbeRecord r = remove_baseline(raw);
    for (std::size_t i = 0; i < raw.samples.size(); ++i) CHECK(r.samples[i].force_n == raw.samples[i].force_n);
  }
  SUBCASE("noisy baseline estimate is within the standard error") {
    // lambda = 4 mm leaves 20 pre-contact samples at 0.1 mm steps.
    SensorModel s;
    s.noise_sigma_n = 0.05;
    s.baseline_n = 0.3;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const ProbeRecord raw = simulate_descent(flat_plan(4.0), 1.0, s, seed);
      REQUIRE(pre_contact_samples(raw).size() == 20);
      const ProbeRecord r = remove_baseline(raw);
      double mean = 0.0;
      for (const auto& smp : pre_contact_samples(r)) mean += smp.force_n / 20.0;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(std::abs(raw.baseline_offset - r.baseline_offset - 0.3) < 0.05);
    }
  }
  SUBCASE("no pre-contact samples") {
    const ProbeRecord r = synthetic(flat_plan(), {{6.0, 0.0}, {7.0, 0.0}});
    CHECK_THROWS_WITH(remove_baseline(r), "cannot estimate baseline");
  }
}

TEST_CASE("ransac_line_fit") {
  SUBCASE("exact line") {
    std::vector<ForceSample> s;
    for (int i = 0; i < 50; ++i) s.push_back({0.1 * i, 1.2 * 0.1 * i});
    const LineFit fit = ransac_line_fit(s);
    CHECK(fit.slope == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(fit.inlier_count == 50);
  }
  SUBCASE("two points") {
    const std::vector<ForceSample> s{{0.0, 0.0}, {1.0, 2.0}};
    const LineFit fit = ransac_line_fit(s);
    CHECK(fit.slope == doctest::Approx(2.0));
    CHECK(std::abs(fit.intercept) < 1e-12);
  }
  SUBCASE("20% outliers: matches least squares over the true inliers") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> spike(0.0, 5.0), unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.03);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<ForceSample> s;
      std::vector<int> truth;
      for (int i = 0; i < 80; ++i) {
        const double d = 0.1 * i;
        if (unit(rng) < 0.2) {
          s.push_back({d, spike(rng)});
        } else {
          s.push_back({d, 1.2 * d + noise(rng)});
          truth.push_back(i);
        }
      }
      Eigen::MatrixXd a(truth.size(), 2);
      Eigen::VectorXd b(truth.size());
      for (std::size_t k = 0; k < truth.size(); ++k) {
        a(k, 0) = s[truth[k]].displacement_mm;
        a(k, 1) = 1.0;
        b[k] = s[truth[k]].force_n;
      }
      const double oracle = a.colPivHouseholderQr().solve(b)[0];
      const LineFit fit = ransac_line_fit(s);
      CHECK(std::abs(fit.slope - 1.2) < 0.05 * 1.2);
      CHECK(std::abs(fit.slope - oracle) < 0.05 * 1.2);
    }
  }
  SUBCASE("deterministic under a seed") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    std::vector<ForceSample> s;
    for (int i = 0; i < 100; ++i) s.push_back({0.1 * i, i % 3 == 0 ? u(rng) : 0.4 * 0.1 * i});
    CHECK(ransac_line_fit(s).slope == ransac_line_fit(s).slope);
  }
  SUBCASE("too little consensus") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<ForceSample> s;
    for (int i = 0; i < 80; ++i) s.push_back({0.1 * i, u(rng)});
    CHECK_THROWS_WITH(ransac_line_fit(s), "no consistent linear trend");
  }
}

TEST_CASE("estimate_stiffness") {
  SUBCASE("noiseless record is exact") {
    const ProbeRecord r = simulate_descent(flat_plan(), 0.5, quiet(), 1);
    CHECK(std::abs(estimate_stiffness(r).stiffness - 0.5) < 1e-6);
  }
  SUBCASE("baseline 0.3 N over stiff tissue") {
    SensorModel s;
    s.baseline_n = 0.3;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const StiffnessSample k = estimate_stiffness(simulate_descent(flat_plan(), 2.0, s, seed));
      CHECK(std::abs(k.stiffness - 2.0) < 0.05 * 2.0);
      CHECK(k.inlier_fraction <= 1.0);
      CHECK(k.inlier_fraction >= 0.0);
    }
  }
  SUBCASE("all-outlier record") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<ForceSample> s;
    for (int i = 0; i <= 180; ++i) s.push_back({0.1 * i, 0.1 * i <= 10.0 ? 0.0 : u(rng)});
    CHECK_THROWS_WITH(estimate_stiffness(synthetic(flat_plan(), s)), "no consistent linear trend");
  }
  SUBCASE("no contact") {
    std::vector<ForceSample> s;
    for (int i = 0; i <= 180; ++i) s.push_back({0.1 * i, 0.0});
    CHECK_THROWS_WITH(estimate_stiffness(synthetic(flat_plan(), s)), "no contact detected");
  }
  SUBCASE("negative slope clamps to zero with a flag") {
    std::vector<ForceSample> s;
    for (int i = 0; i <= 180; ++i) {
      const double d = 0.1 * i;
      s.push_back({d, d <= 10.0 ? 0.0 : 3.0 - 0.1 * (d - 10.0)});
    }
    const StiffnessSample k = estimate_stiffness(synthetic(flat_plan(), s));
    CHECK(k.clamped);
    CHECK(k.stiffness == 0.0);
  }
  SUBCASE("baseline invariance") {
    SensorModel sensor;
    sensor.outlier_rate = 0.2;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const ProbeRecord r = simulate_descent(flat_plan(), 1.1, sensor, seed);
      ProbeRecord shifted = r;
      for (auto& smp : shifted.samples) smp.force_n += 0.37;
      CHECK(std::abs(estimate_stiffness(r).stiffness - estimate_stiffness(shifted).stiffness) < 1e-9);
    }
  }
  SUBCASE("millimetres to centimetres scales stiffness by ten") {
    SensorModel sensor;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const ProbeRecord r = simulate_descent(flat_plan(), 0.8, sensor, seed);
      ProbeRecord cm = r;
      cm.plan.lambda_mm /= 10.0;
      for (auto& smp : cm.samples) smp.displacement_mm /= 10.0;
      const double k_mm = estimate_stiffness(r).stiffness;
      CHECK(estimate_stiffness(cm).stiffness == doctest::Approx(10.0 * k_mm).epsilon(1e-12));
    }
  }
  SUBCASE("sample JSON") {
    const StiffnessSample k = estimate_stiffness(simulate_descent(flat_plan(), 0.5, quiet(), 1));
    const auto j = to_json(k);
    for (const char* key : {"uv", "k_n_per_mm", "inlier_fraction", "intercept_n"}) CHECK(j.contains(key));
    CHECK(to_json(stiffness_sample_from_json(j)).dump() == j.dump());
  }
}
