#include "palpation/registration.hpp"

#include "palpation/mesh_index.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace palpation {

HornFit horn_fit(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw Error("correspondence sets differ in length");
  if (src.size() < 3) throw Error("horn_fit needs at least 3 correspondences");

  const double n = static_cast<double>(src.size());
  Vec3 src_mean = Vec3::Zero();
  Vec3 dst_mean = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    src_mean += src[i];
    dst_mean += dst[i];
  }
  src_mean /= n;
  dst_mean /= n;

  // S(a, b) = sum_i src'_a dst'_b
  Mat3 s = Mat3::Zero();
  Mat3 scatter = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - src_mean;
    const Vec3 b = dst[i] - dst_mean;
    s += a * b.transpose();
    scatter += a * a.transpose();
  }

  Eigen::SelfAdjointEigenSolver<Mat3> scatter_eig(scatter);
  const Vec3 spread = scatter_eig.eigenvalues();
  if (!(spread[1] > 1e-12 * std::max(spread[2], 1e-300)))
    throw Error("degenerate (collinear) configuration");

  Eigen::Matrix4d nm;
  nm(0, 0) = s(0, 0) + s(1, 1) + s(2, 2);
  nm(0, 1) = s(1, 2) - s(2, 1);
  nm(0, 2) = s(2, 0) - s(0, 2);
  nm(0, 3) = s(0, 1) - s(1, 0);
  nm(1, 1) = s(0, 0) - s(1, 1) - s(2, 2);
  nm(1, 2) = s(0, 1) + s(1, 0);
  nm(1, 3) = s(2, 0) + s(0, 2);
  nm(2, 2) = -s(0, 0) + s(1, 1) - s(2, 2);
  nm(2, 3) = s(1, 2) + s(2, 1);
  nm(3, 3) = -s(0, 0) - s(1, 1) + s(2, 2);
  nm(1, 0) = nm(0, 1);
  nm(2, 0) = nm(0, 2);
  nm(3, 0) = nm(0, 3);
  nm(2, 1) = nm(1, 2);
  nm(3, 1) = nm(1, 3);
  nm(3, 2) = nm(2, 3);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(nm);
  const Eigen::Vector4d q = eig.eigenvectors().col(3);

  HornFit out;
  out.transform.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized();
  // Canonical sign keeps results comparable across calls.
  if (out.transform.rotation.w() < 0.0) out.transform.rotation.coeffs() *= -1.0;
  out.transform.translation = dst_mean - out.transform.rotation * src_mean;
  out.rmse = rmse(out.transform, src, dst);
  return out;
}

double rmse(const RigidTransform& transform, std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw Error("length mismatch");
  if (src.empty()) throw Error("rmse of an empty set");
  double acc = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) acc += (transform.apply(src[i]) - dst[i]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(src.size()));
}

// ---------------------------------------------------------------------------
// ICP

namespace {

struct Correspondences {
  std::vector<Vec3> src;  // cloud points, cloud frame
  std::vector<Vec3> dst;  // closest surface points, model frame
  std::vector<int> faces; // matched face per cloud point (all points)
  double trimmed_rmse = 0.0;
};

// `to_model` maps cloud points into the model frame. `hints` are the faces
// matched on the previous pass; they only speed up the search.
Correspondences match(const std::vector<Vec3>& cloud, const MeshIndex& index, const RigidTransform& to_model,
                      double trim_fraction, const std::vector<int>& hints) {
  const std::size_t n = cloud.size();
  std::vector<Vec3> nearest(n);
  std::vector<double> d2(n);
  Correspondences c;
  c.faces.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto hit = index.closest(to_model.apply(cloud[i]), hints.empty() ? -1 : hints[i]);
    nearest[i] = hit.point;
    d2[i] = hit.squared_distance;
    c.faces[i] = hit.face;
  }
  const auto drop = static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(n)));
  const std::size_t keep = std::max<std::size_t>(std::min(n, std::size_t{3}), n - std::min(drop, n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d2[a] < d2[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());

  c.src.reserve(keep);
  c.dst.reserve(keep);
  double acc = 0.0;
  for (std::size_t i : order) {
    c.src.push_back(cloud[i]);
    c.dst.push_back(nearest[i]);
    acc += d2[i];
  }
  c.trimmed_rmse = std::sqrt(acc / static_cast<double>(keep));
  return c;
}

// Pose as (rotation vector * length scale, translation) so that both parts
// are in mm and comparable.
using Twist = Eigen::Matrix<double, 6, 1>;
constexpr double kTwistLengthScale = 30.0;

Twist to_twist(const RigidTransform& t) {
  const Eigen::AngleAxisd aa(t.rotation);
  Twist out;
  out.head<3>() = aa.axis() * aa.angle() * kTwistLengthScale;
  out.tail<3>() = t.translation;
  return out;
}

RigidTransform from_twist(const Twist& x) {
  const Vec3 rv = x.head<3>() / kTwistLengthScale;
  const double angle = rv.norm();
  RigidTransform out;
  out.rotation = angle > 0.0 ? Eigen::Quaterniond(Eigen::AngleAxisd(angle, rv / angle))
                             : Eigen::Quaterniond::Identity();
  out.translation = x.tail<3>();
  return out;
}

struct LoopOutcome {
  RigidTransform to_model;
  std::vector<double> history;
  int iterations = 0;
  bool converged = false;
};

// Anderson acceleration of the fixed-point map pose -> horn_fit(match(pose))
// (as in AA-ICP, Pavlov et al. 2018). The accelerated pose is kept only when
// it lowers the trimmed error below the plain ICP update; otherwise the
// plain update is taken and the history restarts.
constexpr int kAndersonDepth = 5;
constexpr std::size_t kCoarseTarget = 1000;

LoopOutcome icp_loop(const std::vector<Vec3>& cloud, const MeshIndex& index, RigidTransform to_model,
                     const IcpParams& params, int max_iterations) {
  LoopOutcome out;
  // Poses are expressed relative to the starting pose to keep rotation
  // vectors small.
  const RigidTransform origin = to_model;
  const RigidTransform origin_inv = origin.inverse();
  const auto pose_of = [&](const Twist& x) { return from_twist(x) * origin; };

  Correspondences corr = match(cloud, index, to_model, params.trim_fraction, {});
  out.history.push_back(corr.trimmed_rmse);
  Twist x = Twist::Zero();
  std::vector<Twist> g_hist;
  std::vector<Twist> f_hist;

  for (int it = 1; it <= max_iterations; ++it) {
    out.iterations = it;
    const RigidTransform plain = horn_fit(corr.src, corr.dst).transform;
    Correspondences plain_corr = match(cloud, index, plain, params.trim_fraction, corr.faces);
    // The trimmed objective cannot rise in exact arithmetic; a rise is
    // round-off at the optimum.
    if (plain_corr.trimmed_rmse > corr.trimmed_rmse) {
      out.converged = true;
      break;
    }
    const Twist g = to_twist(plain * origin_inv);
    const Twist f = g - x;

    Twist next_x = g;
    RigidTransform next = plain;
    Correspondences next_corr = std::move(plain_corr);
    if (!g_hist.empty()) {
      const int m = static_cast<int>(g_hist.size());
      Eigen::Matrix<double, 6, Eigen::Dynamic> df(6, m);
      Eigen::Matrix<double, 6, Eigen::Dynamic> dg(6, m);
      for (int j = 0; j < m; ++j) {
        df.col(j) = f - f_hist[j];
        dg.col(j) = g - g_hist[j];
      }
      const Eigen::VectorXd gamma = df.colPivHouseholderQr().solve(f);
      if (gamma.allFinite()) {
        const Twist candidate_x = g - dg * gamma;
        const RigidTransform candidate = pose_of(candidate_x);
        Correspondences candidate_corr = match(cloud, index, candidate, params.trim_fraction, next_corr.faces);
        if (candidate_corr.trimmed_rmse < next_corr.trimmed_rmse) {
          next_x = candidate_x;
          next = candidate;
          next_corr = std::move(candidate_corr);
        } else {
          g_hist.clear();
          f_hist.clear();
        }
      }
    }
    g_hist.push_back(g);
    f_hist.push_back(f);
    if (static_cast<int>(g_hist.size()) > kAndersonDepth) {
      g_hist.erase(g_hist.begin());
      f_hist.erase(f_hist.begin());
    }

    const double improvement = corr.trimmed_rmse - next_corr.trimmed_rmse;
    x = next_x;
    to_model = next;
    corr = std::move(next_corr);
    out.history.push_back(corr.trimmed_rmse);
    if (improvement < params.convergence_tol_mm) {
      out.converged = true;
      break;
    }
  }
  out.to_model = to_model;
  return out;
}

std::pair<Vec3, Mat3> principal_axes(const std::vector<Vec3>& pts, const std::vector<double>& weights) {
  double wsum = 0.0;
  Vec3 mean = Vec3::Zero();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    mean += weights[i] * pts[i];
    wsum += weights[i];
  }
  mean /= wsum;
  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Vec3 d = pts[i] - mean;
    cov += weights[i] * d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov / wsum);
  Mat3 axes = eig.eigenvectors();
  if (axes.determinant() < 0.0) axes.col(0) *= -1.0;
  return {mean, axes};
}

// Cloud-to-model transform from centroid and principal-axis alignment; of
// the four proper sign choices the one with the lowest short-run ICP error wins.
RigidTransform principal_axes_init(const std::vector<Vec3>& cloud, const TriMesh& model, const MeshIndex& index,
                                   const IcpParams& params) {
  std::vector<Vec3> centers;
  std::vector<double> areas;
  for (std::size_t f = 0; f < model.faces.size(); ++f) {
    centers.push_back((model.face_vertex(f, 0) + model.face_vertex(f, 1) + model.face_vertex(f, 2)) / 3.0);
    areas.push_back(model.face_area(f));
  }
  const auto [model_mean, model_axes] = principal_axes(centers, areas);
  const auto [cloud_mean, cloud_axes] = principal_axes(cloud, std::vector<double>(cloud.size(), 1.0));

  const double signs[4][3] = {{1, 1, 1}, {-1, -1, 1}, {-1, 1, -1}, {1, -1, -1}};
  RigidTransform best;
  double best_rmse = std::numeric_limits<double>::infinity();
  for (const auto& sg : signs) {
    const Mat3 flip = Vec3(sg[0], sg[1], sg[2]).asDiagonal();
    const Mat3 r = model_axes * flip * cloud_axes.transpose();
    const RigidTransform guess = RigidTransform::from(r, model_mean - r * cloud_mean);
    const LoopOutcome trial = icp_loop(cloud, index, guess, params, 15);
    if (trial.history.back() < best_rmse) {
      best_rmse = trial.history.back();
      best = trial.to_model;
    }
  }
  return best;
}

}  // namespace

double point_to_surface_rmse(const PointCloud& cloud, const MeshIndex& index, const RigidTransform& transform) {
  if (cloud.points.empty()) throw Error("empty cloud");
  const RigidTransform to_model = transform.inverse();
  double acc = 0.0;
  for (const auto& p : cloud.points) acc += index.closest(to_model.apply(p)).squared_distance;
  return std::sqrt(acc / static_cast<double>(cloud.points.size()));
}

RegistrationResult icp_register(const PointCloud& cloud, const TriMesh& model, const MeshIndex& index,
                                std::optional<RigidTransform> init, const IcpParams& params) {
  const auto start = std::chrono::steady_clock::now();
  if (cloud.points.empty()) throw Error("empty cloud");
  for (const auto& p : cloud.points)
    if (!p.allFinite()) throw Error("non-finite points in cloud");
  if (params.max_iterations < 1) throw Error("max_iterations must be >= 1");
  if (!(params.trim_fraction >= 0.0 && params.trim_fraction < 1.0)) throw Error("trim_fraction must be in [0, 1)");

  RigidTransform to_model = init ? init->inverse() : principal_axes_init(cloud.points, model, index, params);

  // Coarse pass on a regular subsample. Its result is adopted only if it
  // lowers the full-cloud trimmed error, so the reported history (full cloud
  // only) stays non-increasing.
  if (cloud.points.size() >= 2 * kCoarseTarget) {
    const std::size_t stride = cloud.points.size() / kCoarseTarget;
    std::vector<Vec3> coarse;
    for (std::size_t i = 0; i < cloud.points.size(); i += stride) coarse.push_back(cloud.points[i]);
    const LoopOutcome rough = icp_loop(coarse, index, to_model, params, params.max_iterations);
    const double before = match(cloud.points, index, to_model, params.trim_fraction, {}).trimmed_rmse;
    const double after = match(cloud.points, index, rough.to_model, params.trim_fraction, {}).trimmed_rmse;
    if (after < before) to_model = rough.to_model;
  }
  const LoopOutcome loop = icp_loop(cloud.points, index, to_model, params, params.max_iterations);

  RegistrationResult result;
  result.transform = loop.to_model.inverse();
  result.rmse = loop.history.back();
  result.rmse_history = loop.history;
  result.iterations = loop.iterations;
  result.converged = loop.converged;
  result.rmse_all = point_to_surface_rmse(cloud, index, result.transform);
  result.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

RegistrationResult icp_register(const PointCloud& cloud, const TriMesh& model, std::optional<RigidTransform> init,
                                const IcpParams& params) {
  const MeshIndex index(model);
  return icp_register(cloud, model, index, init, params);
}

// ---------------------------------------------------------------------------
// PLY (ascii, x y z)

PointCloud read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw Error("not a PLY file");
  std::size_t vertex_count = 0;
  int property_count = 0;
  int xyz[3] = {-1, -1, -1};
  bool in_vertex = false;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> vertex_count;
    } else if (word == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (name == "x") xyz[0] = property_count;
      if (name == "y") xyz[1] = property_count;
      if (name == "z") xyz[2] = property_count;
      ++property_count;
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw Error("only ascii PLY is supported");
  if (xyz[0] < 0 || xyz[1] < 0 || xyz[2] < 0) throw Error("PLY vertex element lacks x/y/z");
  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    if (!std::getline(in, line)) throw Error("PLY truncated");
    std::istringstream ls(line);
    std::vector<double> values(property_count);
    for (auto& v : values)
      if (!(ls >> v)) throw Error("PLY vertex row malformed");
    cloud.points.emplace_back(values[xyz[0]], values[xyz[1]], values[xyz[2]]);
  }
  return cloud;
}

PointCloud read_ply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open point cloud: " + path);
  return read_ply(in);
}

void write_ply(std::ostream& out, const PointCloud& cloud) {
  out << "ply\nformat ascii 1.0\ncomment frame " << cloud.frame << "\ncomment units mm\n"
      << "element vertex " << cloud.points.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\nend_header\n";
  out.precision(17);
  for (const auto& p : cloud.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

void write_ply_file(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write point cloud: " + path);
  write_ply(out, cloud);
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const RigidTransform& t) {
  const auto& q = t.rotation;
  return {{"rotation_wxyz", {q.w(), q.x(), q.y(), q.z()}},
          {"translation_mm", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

RigidTransform transform_from_json(const nlohmann::json& j) {
  try {
    const auto& q = j.at("rotation_wxyz");
    const auto& t = j.at("translation_mm");
    RigidTransform out;
    out.rotation = Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                      q.at(3).get<double>());
    if (std::abs(out.rotation.norm() - 1.0) > 1e-6) throw Error("rotation quaternion is not unit length");
    // Serialized unit quaternions round-trip bit-exactly; renormalize only
    // hand-written ones.
    if (std::abs(out.rotation.norm() - 1.0) > 1e-15) out.rotation.normalize();
    out.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid transform: ") + e.what());
  }
}

nlohmann::json to_json(const RegistrationResult& r) {
  nlohmann::json j = to_json(r.transform);
  j["rmse_mm"] = r.rmse;
  j["rmse_all_mm"] = r.rmse_all;
  j["iterations"] = r.iterations;
  j["elapsed_s"] = r.elapsed_s;
  j["converged"] = r.converged;
  j["rmse_history_mm"] = r.rmse_history;
  return j;
}

RegistrationResult registration_from_json(const nlohmann::json& j) {
  RegistrationResult r;
  r.transform = transform_from_json(j);
  try {
    r.rmse = j.at("rmse_mm").get<double>();
    r.rmse_all = j.value("rmse_all_mm", r.rmse);
    r.iterations = j.at("iterations").get<int>();
    r.elapsed_s = j.value("elapsed_s", 0.0);
    r.converged = j.value("converged", false);
    r.rmse_history = j.value("rmse_history_mm", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid registration result: ") + e.what());
  }
  return r;
}

}  // namespace palpation
