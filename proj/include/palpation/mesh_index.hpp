#pragma once

#include "palpation/geometry.hpp"

#include <array>
#include <vector>

namespace palpation {

struct TriMesh;

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries. Holds a copy of the triangle corners, so it does not reference
/// the mesh after construction.
class MeshIndex {
 public:
  struct Hit {
    Vec3 point;
    double squared_distance = 0.0;
    int face = -1;
  };

  explicit MeshIndex(const TriMesh& mesh);

  Hit closest(const Vec3& p) const { return closest(p, -1); }
  /// Same answer as closest(p); `hint_face` (e.g. the previous match) only
  /// seeds the pruning bound.
  Hit closest(const Vec3& p, int hint_face) const;
  std::size_t face_count() const { return triangles_.size(); }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;   // child node index, or -1 for a leaf
    int right = -1;
    int first = 0;   // leaf range into order_
    int count = 0;
  };

  int build(int first, int count, int depth);

  std::vector<std::array<Vec3, 3>> triangles_;
  std::vector<Vec3> centroids_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

}  // namespace palpation
