#include "palpation/registration.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <numbers>
#include <sstream>

using namespace palpation;
using namespace palpation::testing;

namespace {

std::vector<Vec3> random_points(std::mt19937_64& rng, int n, double scale = 50.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  return pts;
}

std::vector<Vec3> transformed(const RigidTransform& t, const std::vector<Vec3>& pts) {
  std::vector<Vec3> out;
  for (const auto& p : pts) out.push_back(t.apply(p));
  return out;
}

double ssr(const RigidTransform& t, const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  double s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) s += (t.apply(src[i]) - dst[i]).squaredNorm();
  return s;
}

}  // namespace

TEST_CASE("horn_fit examples") {
  std::mt19937_64 rng(1);
  const auto src = random_points(rng, 6);

  SUBCASE("identical sets give the identity") {
    const HornFit fit = horn_fit(src, src);
    CHECK(RigidTransform::rotation_distance(fit.transform, RigidTransform::identity()) < 1e-9);
    CHECK(fit.transform.translation.norm() < 1e-9);
    CHECK(fit.rmse < 1e-9);
  }
  SUBCASE("pure translation") {
    const auto dst = transformed(RigidTransform::from(Mat3::Identity(), Vec3(1, 2, 3)), src);
    const HornFit fit = horn_fit(src, dst);
    CHECK((fit.transform.translation - Vec3(1, 2, 3)).norm() < 1e-9);
    CHECK(RigidTransform::rotation_distance(fit.transform, RigidTransform::identity()) < 1e-9);
    CHECK(fit.rmse < 1e-9);
  }
  SUBCASE("rotation of 90 degrees about z") {
    const Mat3 rz = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ()).toRotationMatrix();
    const auto t = RigidTransform::from(rz, Vec3::Zero());
    CHECK((t.apply(Vec3(1, 0, 0)) - Vec3(0, 1, 0)).norm() < 1e-12);
    const HornFit fit = horn_fit(src, transformed(t, src));
    CHECK((fit.transform.rotation_matrix() - rz).norm() < 1e-9);
  }
  SUBCASE("random transforms are reproduced exactly") {
    for (int i = 0; i < 50; ++i) {
      const RigidTransform t = random_transform(rng, std::numbers::pi, 200.0);
      const auto s = random_points(rng, 3 + i % 10);
      const HornFit fit = horn_fit(s, transformed(t, s));
      CHECK(RigidTransform::rotation_distance(fit.transform, t) < 1e-9);
      CHECK((fit.transform.translation - t.translation).norm() < 1e-9);
    }
  }
  SUBCASE("errors") {
    const std::vector<Vec3> two(src.begin(), src.begin() + 2);
    CHECK_THROWS_WITH(horn_fit(two, two), "horn_fit needs at least 3 correspondences");
    const std::vector<Vec3> line{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {5, 5, 5}};
    CHECK_THROWS_WITH(horn_fit(line, line), "degenerate (collinear) configuration");
    const std::vector<Vec3> five(src.begin(), src.begin() + 5);
    CHECK_THROWS_WITH(horn_fit(src, five), "correspondence sets differ in length");
  }
}

TEST_CASE("horn_fit is the least-squares optimum") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto src = random_points(rng, 4 + trial % 3, 20.0);
    auto dst = transformed(random_transform(rng, 2.0, 30.0), src);
    for (auto& p : dst) p += Vec3(noise(rng), noise(rng), noise(rng));
    const HornFit fit = horn_fit(src, dst);
    const double best = ssr(fit.transform, src, dst);
    // 3^6 grid of small perturbations in rotation-vector / translation space.
    const double da = 1e-3, dt = 1e-2;
    for (int code = 0; code < 729; ++code) {
      int c = code;
      Eigen::Matrix<double, 6, 1> step;
      for (int k = 0; k < 6; ++k) {
        step[k] = (c % 3) - 1;
        c /= 3;
      }
      if (step.isZero()) continue;
      const Vec3 w = step.head<3>() * da;
      const RigidTransform delta =
          w.norm() > 0 ? RigidTransform::from_axis_angle(w.normalized(), w.norm(), step.tail<3>() * dt)
                       : RigidTransform::from(Mat3::Identity(), step.tail<3>() * dt);
      CHECK(ssr(delta * fit.transform, src, dst) >= best - 1e-9);
    }
  }
}

TEST_CASE("horn_fit equivariance: a common pre-transform conjugates the answer") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto src = random_points(rng, 8);
    auto dst = transformed(random_transform(rng, 2.0, 50.0), src);
    for (auto& p : dst) p += Vec3(noise(rng), noise(rng), noise(rng));
    const RigidTransform g = random_transform(rng, 3.0, 100.0);
    const HornFit a = horn_fit(src, dst);
    const HornFit b = horn_fit(transformed(g, src), transformed(g, dst));
    const RigidTransform expected = g * a.transform * g.inverse();
    CHECK(RigidTransform::rotation_distance(b.transform, expected) < 1e-9);
    CHECK((b.transform.translation - expected.translation).norm() < 1e-9);
    CHECK(b.rmse == doctest::Approx(a.rmse).epsilon(1e-9));
  }
}

TEST_CASE("horn_fit with 1.5 mm noise at 6 points stays in the 1-4 mm band") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> noise(0.0, 1.5);
  double mean = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto src = random_points(rng, 6);
    auto dst = transformed(random_transform(rng, std::numbers::pi, 100.0), src);
    for (auto& p : dst) p += Vec3(noise(rng), noise(rng), noise(rng));
    mean += horn_fit(src, dst).rmse / 100.0;
  }
  CHECK(mean >= 1.0);
  CHECK(mean <= 4.0);
}

TEST_CASE("rmse") {
  std::mt19937_64 rng(6);
  const auto src = random_points(rng, 7);
  CHECK(rmse(RigidTransform::identity(), src, src) == 0.0);
  const std::vector<Vec3> a{{0, 0, 0}}, b{{3, 0, 0}};
  CHECK(rmse(RigidTransform::identity(), a, b) == doctest::Approx(3.0));
  const std::vector<Vec3> shorter(src.begin(), src.begin() + 3);
  CHECK_THROWS_WITH(rmse(RigidTransform::identity(), src, shorter), "length mismatch");

  SUBCASE("invariant under a common rigid motion with conjugated transform") {
    auto dst = random_points(rng, 7);
    const RigidTransform t = random_transform(rng, 1.0, 10.0);
    const RigidTransform g = random_transform(rng, 2.0, 40.0);
    CHECK(rmse(g * t * g.inverse(), transformed(g, src), transformed(g, dst)) == doctest::Approx(rmse(t, src, dst)).epsilon(1e-12));
  }
}

TEST_CASE("icp_register") {
  const auto ph = dome_phantom();
  const TriMesh& mesh = ph->mesh();

  SUBCASE("noiseless cloud at identity converges immediately") {
    CloudParams p;
    p.n_points = 2000;
    const PointCloud cloud = synthesize_cloud(*ph, RigidTransform::identity(), p);
    const auto r = icp_register(cloud, mesh, ph->index(), RigidTransform::identity());
    CHECK(r.converged);
    CHECK(r.iterations == 1);
    CHECK(r.rmse < 1e-6);
    CHECK(r.rmse_all < 1e-6);
  }
  SUBCASE("5 mm translation is recovered from an identity start") {
    CloudParams p;
    p.n_points = 3000;
    const RigidTransform truth = RigidTransform::from(Mat3::Identity(), Vec3(3.0, -4.0, 0.0));
    const PointCloud cloud = synthesize_cloud(*ph, truth, p);
    const auto r = icp_register(cloud, mesh, ph->index(), RigidTransform::identity());
    CHECK((r.transform.translation - truth.translation).norm() < 0.1);
    CHECK(r.rmse_all < 1e-3);
  }
  SUBCASE("noisy partial cloud with a perturbed start") {
    std::mt19937_64 rng(12);
    const RigidTransform truth = RigidTransform::from_axis_angle(Vec3(0.2, 1.0, -0.3), 0.6, Vec3(5, -8, 90));
    CloudParams p;
    p.noise_sigma_mm = 1.5;
    p.visibility_fraction = 0.6;
    p.n_points = 5000;
    const PointCloud cloud = synthesize_cloud(*ph, truth, p);
    const RigidTransform init = truth * RigidTransform::from_axis_angle(Vec3(1, 1, 0), 10.0 * std::numbers::pi / 180,
                                                                        Vec3(6.0, -6.0, 4.0));
    const auto r = icp_register(cloud, mesh, ph->index(), init);
    CHECK(r.rmse_all <= 2.0);
    CHECK(r.rmse_all == doctest::Approx(point_to_surface_rmse(cloud, ph->index(), r.transform)).epsilon(1e-12));
    SUBCASE("trimmed RMSE never increases") {
      for (std::size_t i = 1; i < r.rmse_history.size(); ++i) CHECK(r.rmse_history[i] <= r.rmse_history[i - 1]);
    }
    SUBCASE("deterministic apart from wall time") {
      const auto again = icp_register(cloud, mesh, ph->index(), init);
      CHECK(again.transform.rotation.coeffs() == r.transform.rotation.coeffs());
      CHECK(again.transform.translation == r.transform.translation);
      CHECK(again.rmse == r.rmse);
      CHECK(again.rmse_all == r.rmse_all);
      CHECK(again.iterations == r.iterations);
      CHECK(again.rmse_history == r.rmse_history);
    }
  }
  SUBCASE("principal-axes start without an initial pose") {
    const RigidTransform truth = RigidTransform::from_axis_angle(Vec3(0, 0, 1), 0.4, Vec3(10, 20, 30));
    CloudParams p;
    p.n_points = 4000;
    const PointCloud cloud = synthesize_cloud(*ph, truth, p);
    const auto r = icp_register(cloud, mesh, ph->index(), std::nullopt);
    CHECK(r.rmse_all < 1e-3);
  }
  SUBCASE("errors") {
    CHECK_THROWS_WITH(icp_register(PointCloud{}, mesh, ph->index(), std::nullopt), "empty cloud");
    PointCloud bad;
    bad.points = {{0, 0, 0}, {1, std::nan(""), 0}};
    CHECK_THROWS_WITH(icp_register(bad, mesh, ph->index(), std::nullopt), "non-finite points in cloud");
  }
}

TEST_CASE("PLY and JSON round trips") {
  PointCloud c;
  c.points = {{0.125, -3.5, 7.0}, {1e-7, 2.0 / 3.0, 1e5}};
  std::stringstream ss;
  write_ply(ss, c);
  const PointCloud r = read_ply(ss);
  CHECK(r.points == c.points);

  std::mt19937_64 rng(3);
  const RigidTransform t = random_transform(rng, 2.0, 20.0);
  const RigidTransform back = transform_from_json(to_json(t));
  CHECK(back.rotation.coeffs() == t.rotation.coeffs());
  CHECK(back.translation == t.translation);
  const auto j = to_json(t);
  CHECK(j.contains("rotation_wxyz"));
  CHECK(j.contains("translation_mm"));

  RegistrationResult res;
  res.transform = t;
  res.rmse = 1.25;
  res.rmse_all = 1.5;
  res.iterations = 7;
  res.elapsed_s = 0.5;
  res.converged = true;
  res.rmse_history = {3.0, 2.0, 1.25};
  const auto rj = to_json(res);
  for (const char* key : {"rmse_mm", "iterations", "elapsed_s", "converged"}) CHECK(rj.contains(key));
  const RegistrationResult rb = registration_from_json(rj);
  CHECK(rb.rmse_all == 1.5);
  CHECK(rb.rmse_history == res.rmse_history);
}
