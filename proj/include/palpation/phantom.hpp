#pragma once

#include "palpation/geometry.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace palpation {

class MeshIndex;

/// Triangle mesh with one normal and one UV coordinate per vertex.
/// Positions are in millimeters; UVs live in [0,1]^2.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;
  std::vector<Vec2> uv;

  /// Throws Error with a message naming the first violated invariant.
  void validate() const;

  Vec3 face_vertex(std::size_t f, int corner) const { return vertices[faces[f][corner]]; }
  Vec2 face_uv(std::size_t f, int corner) const { return uv[faces[f][corner]]; }
  double face_area(std::size_t f) const;
};

/// Wavefront OBJ reader. Only `v`, `vt`, `vn` and triangular `f v/vt/vn`
/// records are interpreted; unique (v, vt, vn) triples become mesh vertices.
TriMesh read_obj(std::istream& in);
TriMesh read_obj_file(const std::string& path);
void write_obj(std::ostream& out, const TriMesh& mesh);
void write_obj_file(const std::string& path, const TriMesh& mesh);

struct Inclusion {
  Vec2 center_uv = Vec2(0.5, 0.5);
  double radius_uv = 0.08;
  double stiffness = 2.0;     // N/mm
  double smoothing_uv = 0.02; // width of the smoothstep ramp outside radius_uv
};

/// Ground-truth stiffness defined over UV space.
struct StiffnessField {
  double background = 0.5;  // N/mm
  std::vector<Inclusion> inclusions;

  void validate() const;
  /// Background outside all inclusions, inclusion value inside radius_uv,
  /// smoothstep between radius_uv and radius_uv + smoothing_uv. Overlapping
  /// inclusions combine by maximum.
  double value(const Vec2& uv) const;
};

StiffnessField stiffness_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StiffnessField& field);

struct PointCloud {
  std::vector<Vec3> points;
  std::string frame = "camera";
};

/// Location on the mesh addressed by face and barycentric weights.
struct SurfacePoint {
  Vec3 point;
  Vec3 normal;
  int face = -1;
  Eigen::Vector3d barycentric;
};

/// Bucket grid over the UV atlas answering "which face contains this uv".
class UvLocator {
 public:
  explicit UvLocator(const TriMesh& mesh, int cells_per_side = 64);

  /// Face containing uv and its barycentric weights, or nullopt off-atlas.
  std::optional<std::pair<int, Eigen::Vector3d>> locate(const Vec2& uv) const;

 private:
  const TriMesh* mesh_;
  int cells_;
  std::vector<std::vector<int>> buckets_;
};

/// Immutable organ model: mesh, UV lookup, distance index and stiffness.
class PhantomModel {
 public:
  PhantomModel(TriMesh mesh, StiffnessField field);
  PhantomModel(const PhantomModel&) = delete;
  PhantomModel& operator=(const PhantomModel&) = delete;
  ~PhantomModel();

  const TriMesh& mesh() const { return mesh_; }
  const StiffnessField& field() const { return field_; }
  const UvLocator& locator() const { return *locator_; }
  const MeshIndex& index() const { return *index_; }

  /// Axis-aligned bounds of the mesh, model frame.
  Vec3 bbox_min() const { return bbox_min_; }
  Vec3 bbox_max() const { return bbox_max_; }

 private:
  TriMesh mesh_;
  StiffnessField field_;
  std::unique_ptr<UvLocator> locator_;
  std::unique_ptr<MeshIndex> index_;
  Vec3 bbox_min_;
  Vec3 bbox_max_;
};

/// Validates both inputs; rejects meshes without UVs.
std::shared_ptr<const PhantomModel> load_phantom(TriMesh mesh, StiffnessField field);
std::shared_ptr<const PhantomModel> load_phantom(const std::string& obj_path,
                                                 const nlohmann::json& stiffness_config);

/// Barycentric interpolation of position and (renormalized) normal at uv.
/// Throws "uv not on surface" when uv falls outside the atlas.
SurfacePoint surface_point(const PhantomModel& phantom, const Vec2& uv);

/// Position and normal for a known face/barycentric location.
SurfacePoint surface_point_at(const TriMesh& mesh, int face, const Eigen::Vector3d& w);

double true_stiffness(const PhantomModel& phantom, const Vec2& uv);

struct CloudParams {
  double noise_sigma_mm = 0.0;
  double visibility_fraction = 1.0;
  std::size_t n_points = 10000;
  /// Start azimuth of the visible sector around the model z axis, radians.
  double sector_start_rad = 0.0;
  std::uint64_t seed = 1;
};

/// Area-uniform surface samples restricted to a contiguous azimuthal sector,
/// mapped by true_pose and perturbed by isotropic Gaussian noise.
PointCloud synthesize_cloud(const PhantomModel& phantom, const RigidTransform& true_pose,
                            const CloudParams& params);

struct DomeParams {
  double radius_x = 30.0;
  double radius_y = 22.0;
  double height = 13.0;
  /// Tilts the dome toward +x so no rotation about z maps it onto itself.
  double asymmetry = 0.3;
  /// Shallow median groove on the +x half, like a prostate's median sulcus.
  double groove_depth = 6.0;
  double groove_width_fraction = 0.25;
  int rings = 24;
  int segments = 64;
  /// Radius of the UV disk the dome is unwrapped onto, centered at (0.5, 0.5).
  double uv_radius = 0.48;
};

/// Prostate-like open dome with an azimuthal-equidistant UV atlas.
TriMesh make_dome_mesh(const DomeParams& params = {});

}  // namespace palpation
