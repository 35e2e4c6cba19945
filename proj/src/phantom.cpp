#include "palpation/phantom.hpp"

#include "palpation/mesh_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <tuple>

namespace palpation {

// ---------------------------------------------------------------------------
// TriMesh

double TriMesh::face_area(std::size_t f) const {
  const Vec3 a = face_vertex(f, 0);
  return 0.5 * (face_vertex(f, 1) - a).cross(face_vertex(f, 2) - a).norm();
}

void TriMesh::validate() const {
  if (vertices.empty() || faces.empty()) throw Error("mesh has no geometry");
  if (uv.size() != vertices.size()) throw Error("missing UV channel");
  if (normals.size() != vertices.size()) throw Error("missing normals");
  std::vector<char> referenced(vertices.size(), 0);
  for (const auto& f : faces) {
    for (int idx : f) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= vertices.size()) throw Error("invalid face");
      referenced[idx] = 1;
    }
  }
  if (std::find(referenced.begin(), referenced.end(), 0) != referenced.end())
    throw Error("unreferenced vertex");
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    if (!vertices[i].allFinite()) throw Error("non-finite vertex");
    if (std::abs(normals[i].norm() - 1.0) > 1e-6) throw Error("normal not unit length");
    const Vec2& t = uv[i];
    if (!(t.x() >= 0.0 && t.x() <= 1.0 && t.y() >= 0.0 && t.y() <= 1.0))
      throw Error("uv outside [0,1]^2");
  }
  for (std::size_t f = 0; f < faces.size(); ++f) {
    if (std::abs(triangle_area(face_uv(f, 0), face_uv(f, 1), face_uv(f, 2))) <= 0.0)
      throw Error("degenerate UV triangle");
  }
}

// ---------------------------------------------------------------------------
// OBJ

namespace {

// Parses "v/vt/vn" into zero-based indices; vt or vn are -1 when absent.
std::tuple<int, int, int> parse_obj_corner(const std::string& token, int nv, int nt, int nn) {
  int idx[3] = {0, 0, 0};
  bool present[3] = {false, false, false};
  std::size_t start = 0;
  for (int k = 0; k < 3; ++k) {
    const std::size_t slash = token.find('/', start);
    const std::string part = token.substr(start, slash == std::string::npos ? std::string::npos : slash - start);
    if (!part.empty()) {
      try {
        idx[k] = std::stoi(part);
      } catch (const std::exception&) {
        throw Error("malformed mesh: bad face token '" + token + "'");
      }
      present[k] = true;
    }
    if (slash == std::string::npos) break;
    start = slash + 1;
  }
  if (!present[0]) throw Error("malformed mesh: bad face token '" + token + "'");
  if (!present[1]) throw Error("missing UV channel");
  const int counts[3] = {nv, nt, nn};
  int out[3] = {-1, -1, -1};
  for (int k = 0; k < 3; ++k) {
    if (!present[k]) continue;
    out[k] = idx[k] > 0 ? idx[k] - 1 : counts[k] + idx[k];
    if (out[k] < 0 || out[k] >= counts[k]) throw Error("invalid face");
  }
  return {out[0], out[1], out[2]};
}

}  // namespace

TriMesh read_obj(std::istream& in) {
  std::vector<Vec3> positions;
  std::vector<Vec2> texcoords;
  std::vector<Vec3> normals;
  std::vector<std::array<std::tuple<int, int, int>, 3>> corners;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v" || tag == "vn") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z()))
        throw Error("malformed mesh: line " + std::to_string(line_no));
      (tag == "v" ? positions : normals).push_back(p);
    } else if (tag == "vt") {
      Vec2 t;
      if (!(ls >> t.x() >> t.y())) throw Error("malformed mesh: line " + std::to_string(line_no));
      texcoords.push_back(t);
    } else if (tag == "f") {
      std::vector<std::string> tokens;
      std::string tok;
      while (ls >> tok) tokens.push_back(tok);
      if (tokens.size() != 3)
        throw Error("malformed mesh: only triangular faces are supported (line " +
                    std::to_string(line_no) + ")");
      std::array<std::tuple<int, int, int>, 3> face;
      for (int k = 0; k < 3; ++k)
        face[k] = parse_obj_corner(tokens[k], static_cast<int>(positions.size()),
                                   static_cast<int>(texcoords.size()),
                                   static_cast<int>(normals.size()));
      corners.push_back(face);
    }
  }
  if (texcoords.empty()) throw Error("missing UV channel");

  TriMesh mesh;
  std::map<std::tuple<int, int, int>, int> remap;
  bool need_normals = false;
  for (const auto& face : corners) {
    std::array<int, 3> f{};
    for (int k = 0; k < 3; ++k) {
      auto [it, inserted] = remap.try_emplace(face[k], static_cast<int>(mesh.vertices.size()));
      if (inserted) {
        const auto [vi, ti, ni] = face[k];
        mesh.vertices.push_back(positions[vi]);
        mesh.uv.push_back(texcoords[ti]);
        if (ni >= 0) {
          mesh.normals.push_back(normals[ni].normalized());
        } else {
          mesh.normals.push_back(Vec3::Zero());
          need_normals = true;
        }
      }
      f[k] = it->second;
    }
    mesh.faces.push_back(f);
  }
  if (need_normals) {
    // Area-weighted face normals for corners without a vn record.
    std::vector<Vec3> acc(mesh.vertices.size(), Vec3::Zero());
    for (const auto& f : mesh.faces) {
      const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
      for (int v : f) acc[v] += n;
    }
    for (std::size_t i = 0; i < acc.size(); ++i)
      if (mesh.normals[i].isZero()) mesh.normals[i] = acc[i].normalized();
  }
  return mesh;
}

TriMesh read_obj_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open mesh file: " + path);
  return read_obj(in);
}

void write_obj(std::ostream& out, const TriMesh& mesh) {
  out.precision(17);
  out << "# palpation-lab mesh, millimeters\n";
  for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& t : mesh.uv) out << "vt " << t.x() << ' ' << t.y() << '\n';
  for (const auto& n : mesh.normals) out << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
  for (const auto& f : mesh.faces) {
    out << 'f';
    for (int i : f) out << ' ' << i + 1 << '/' << i + 1 << '/' << i + 1;
    out << '\n';
  }
}

void write_obj_file(const std::string& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write mesh file: " + path);
  write_obj(out, mesh);
}

// ---------------------------------------------------------------------------
// Stiffness

void StiffnessField::validate() const {
  if (!(background > 0.0) || !std::isfinite(background)) throw Error("background stiffness must be positive");
  for (const auto& inc : inclusions) {
    const Vec2& c = inc.center_uv;
    if (!(c.x() >= 0.0 && c.x() <= 1.0 && c.y() >= 0.0 && c.y() <= 1.0))
      throw Error("inclusion outside [0,1]^2");
    if (!(inc.radius_uv > 0.0)) throw Error("inclusion radius must be positive");
    if (!(inc.smoothing_uv >= 0.0)) throw Error("inclusion smoothing must be non-negative");
    if (!(inc.stiffness > background)) throw Error("inclusion not stiffer than background");
  }
}

double StiffnessField::value(const Vec2& uv) const {
  double k = background;
  for (const auto& inc : inclusions) {
    const double r = (uv - inc.center_uv).norm();
    double weight = 0.0;
    if (r <= inc.radius_uv) {
      weight = 1.0;
    } else if (r < inc.radius_uv + inc.smoothing_uv) {
      const double t = (r - inc.radius_uv) / inc.smoothing_uv;
      weight = 1.0 - t * t * (3.0 - 2.0 * t);
    }
    k = std::max(k, background + (inc.stiffness - background) * weight);
  }
  return k;
}

StiffnessField stiffness_from_json(const nlohmann::json& j) {
  StiffnessField field;
  try {
    field.background = j.at("background_stiffness_n_per_mm").get<double>();
    for (const auto& ji : j.value("inclusions", nlohmann::json::array())) {
      Inclusion inc;
      const auto c = ji.at("center_uv");
      if (!c.is_array() || c.size() != 2) throw Error("center_uv must be [u, v]");
      inc.center_uv = Vec2(c[0].get<double>(), c[1].get<double>());
      inc.radius_uv = ji.at("radius_uv").get<double>();
      inc.stiffness = ji.at("stiffness_n_per_mm").get<double>();
      inc.smoothing_uv = ji.value("smoothing_uv", 0.0);
      field.inclusions.push_back(inc);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid stiffness config: ") + e.what());
  }
  field.validate();
  return field;
}

nlohmann::json to_json(const StiffnessField& field) {
  nlohmann::json j;
  j["background_stiffness_n_per_mm"] = field.background;
  j["inclusions"] = nlohmann::json::array();
  for (const auto& inc : field.inclusions) {
    j["inclusions"].push_back({{"center_uv", {inc.center_uv.x(), inc.center_uv.y()}},
                               {"radius_uv", inc.radius_uv},
                               {"stiffness_n_per_mm", inc.stiffness},
                               {"smoothing_uv", inc.smoothing_uv}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// UV lookup

UvLocator::UvLocator(const TriMesh& mesh, int cells_per_side)
    : mesh_(&mesh), cells_(cells_per_side), buckets_(static_cast<std::size_t>(cells_per_side * cells_per_side)) {
  const auto cell = [this](double x) {
    return std::clamp(static_cast<int>(std::floor(x * cells_)), 0, cells_ - 1);
  };
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    Eigen::AlignedBox2d box;
    for (int k = 0; k < 3; ++k) box.extend(mesh.face_uv(f, k));
    for (int y = cell(box.min().y()); y <= cell(box.max().y()); ++y)
      for (int x = cell(box.min().x()); x <= cell(box.max().x()); ++x)
        buckets_[y * cells_ + x].push_back(static_cast<int>(f));
  }
}

std::optional<std::pair<int, Eigen::Vector3d>> UvLocator::locate(const Vec2& uv) const {
  constexpr double kInsideTol = 1e-12;
  if (!(uv.x() >= 0.0 && uv.x() <= 1.0 && uv.y() >= 0.0 && uv.y() <= 1.0)) return std::nullopt;
  const int x = std::clamp(static_cast<int>(std::floor(uv.x() * cells_)), 0, cells_ - 1);
  const int y = std::clamp(static_cast<int>(std::floor(uv.y() * cells_)), 0, cells_ - 1);
  // Among containing faces (several on shared edges) keep the one whose
  // smallest weight is largest, then the lowest face id.
  std::optional<std::pair<int, Eigen::Vector3d>> best;
  double best_min = -std::numeric_limits<double>::infinity();
  for (int f : buckets_[y * cells_ + x]) {
    Eigen::Vector3d w;
    if (!barycentric(uv, mesh_->face_uv(f, 0), mesh_->face_uv(f, 1), mesh_->face_uv(f, 2), w)) continue;
    const double m = w.minCoeff();
    if (m < -kInsideTol) continue;
    if (m > best_min) {
      best_min = m;
      best = std::make_pair(f, w);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// PhantomModel

PhantomModel::PhantomModel(TriMesh mesh, StiffnessField field)
    : mesh_(std::move(mesh)), field_(std::move(field)) {
  mesh_.validate();
  field_.validate();
  locator_ = std::make_unique<UvLocator>(mesh_);
  index_ = std::make_unique<MeshIndex>(mesh_);
  Eigen::AlignedBox3d box;
  for (const auto& v : mesh_.vertices) box.extend(v);
  bbox_min_ = box.min();
  bbox_max_ = box.max();
}

PhantomModel::~PhantomModel() = default;

std::shared_ptr<const PhantomModel> load_phantom(TriMesh mesh, StiffnessField field) {
  return std::make_shared<const PhantomModel>(std::move(mesh), std::move(field));
}

std::shared_ptr<const PhantomModel> load_phantom(const std::string& obj_path,
                                                 const nlohmann::json& stiffness_config) {
  return load_phantom(read_obj_file(obj_path), stiffness_from_json(stiffness_config));
}

SurfacePoint surface_point_at(const TriMesh& mesh, int face, const Eigen::Vector3d& w) {
  SurfacePoint sp;
  sp.face = face;
  sp.barycentric = w;
  sp.point = Vec3::Zero();
  Vec3 n = Vec3::Zero();
  for (int k = 0; k < 3; ++k) {
    sp.point += w[k] * mesh.vertices[mesh.faces[face][k]];
    n += w[k] * mesh.normals[mesh.faces[face][k]];
  }
  sp.normal = n.normalized();
  return sp;
}

SurfacePoint surface_point(const PhantomModel& phantom, const Vec2& uv) {
  const auto hit = phantom.locator().locate(uv);
  if (!hit) throw Error("uv not on surface");
  return surface_point_at(phantom.mesh(), hit->first, hit->second);
}

double true_stiffness(const PhantomModel& phantom, const Vec2& uv) { return phantom.field().value(uv); }

// ---------------------------------------------------------------------------
// Synthetic intraoperative cloud

PointCloud synthesize_cloud(const PhantomModel& phantom, const RigidTransform& true_pose,
                            const CloudParams& params) {
  if (!(params.visibility_fraction > 0.0 && params.visibility_fraction <= 1.0))
    throw Error("visibility_fraction must be in (0, 1]");
  if (!(params.noise_sigma_mm >= 0.0)) throw Error("noise_sigma must be non-negative");
  if (params.n_points == 0) throw Error("cloud must have at least one point");

  const TriMesh& mesh = phantom.mesh();
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    total += mesh.face_area(f);
    cumulative[f] = total;
  }
  const Vec3 center = 0.5 * (phantom.bbox_min() + phantom.bbox_max());
  const double sector = params.visibility_fraction * 2.0 * std::numbers::pi;

  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  PointCloud cloud;
  cloud.points.reserve(params.n_points);
  std::size_t attempts = 0;
  const std::size_t max_attempts = params.n_points * 1000;
  while (cloud.points.size() < params.n_points) {
    if (++attempts > max_attempts) throw Error("visible sector contains no surface");
    const double pick = unit(rng) * total;
    const auto f = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin(),
                                 static_cast<std::ptrdiff_t>(cumulative.size()) - 1));
    double r1 = unit(rng);
    double r2 = unit(rng);
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Vec3 a = mesh.face_vertex(f, 0);
    const Vec3 p = a + r1 * (mesh.face_vertex(f, 1) - a) + r2 * (mesh.face_vertex(f, 2) - a);
    if (params.visibility_fraction < 1.0) {
      double az = std::atan2(p.y() - center.y(), p.x() - center.x()) - params.sector_start_rad;
      az = std::fmod(az, 2.0 * std::numbers::pi);
      if (az < 0.0) az += 2.0 * std::numbers::pi;
      if (az > sector) continue;
    }
    Vec3 q = true_pose.apply(p);
    if (params.noise_sigma_mm > 0.0) {
      const Vec3 e(noise(rng), noise(rng), noise(rng));
      q += params.noise_sigma_mm * e;
    }
    cloud.points.push_back(q);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Built-in dome

TriMesh make_dome_mesh(const DomeParams& p) {
  if (p.rings < 2 || p.segments < 3) throw Error("dome needs >= 2 rings and >= 3 segments");
  TriMesh mesh;
  const auto position = [&](double theta, double phi) {
    const double s = std::sin(theta);
    const double c = std::cos(theta);
    const double x = p.radius_x * s * std::cos(phi);
    const double y = p.radius_y * s * std::sin(phi);
    const double w = p.groove_width_fraction * p.radius_y;
    const double groove = p.groove_depth * std::exp(-(y * y) / (w * w)) * std::sin(2.0 * theta) *
                          (1.0 + std::cos(phi)) * 0.5;
    return Vec3(x, y, p.height * c * (1.0 + p.asymmetry * s * std::cos(phi)) - groove);
  };
  mesh.vertices.push_back(position(0.0, 0.0));
  mesh.uv.emplace_back(0.5, 0.5);
  for (int r = 1; r <= p.rings; ++r) {
    const double theta = 0.5 * std::numbers::pi * r / p.rings;
    const double rho = p.uv_radius * r / p.rings;
    for (int s = 0; s < p.segments; ++s) {
      const double phi = 2.0 * std::numbers::pi * s / p.segments;
      mesh.vertices.push_back(position(theta, phi));
      mesh.uv.emplace_back(0.5 + rho * std::cos(phi), 0.5 + rho * std::sin(phi));
    }
  }
  const auto ring_vertex = [&](int r, int s) { return 1 + (r - 1) * p.segments + (s % p.segments); };
  for (int s = 0; s < p.segments; ++s) mesh.faces.push_back({0, ring_vertex(1, s), ring_vertex(1, s + 1)});
  for (int r = 1; r < p.rings; ++r) {
    for (int s = 0; s < p.segments; ++s) {
      const int a = ring_vertex(r, s);
      const int b = ring_vertex(r + 1, s);
      const int c = ring_vertex(r + 1, s + 1);
      const int d = ring_vertex(r, s + 1);
      mesh.faces.push_back({a, b, c});
      mesh.faces.push_back({a, c, d});
    }
  }
  // Counter-clockwise in UV maps to outward-facing geometry; normals are
  // area-weighted face normals.
  std::vector<Vec3> acc(mesh.vertices.size(), Vec3::Zero());
  for (const auto& f : mesh.faces) {
    const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
    for (int v : f) acc[v] += n;
  }
  mesh.normals.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) mesh.normals[i] = acc[i].normalized();
  return mesh;
}

}  // namespace palpation
