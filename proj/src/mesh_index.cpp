#include "palpation/mesh_index.hpp"

#include "palpation/phantom.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace palpation {

namespace {

constexpr int kLeafSize = 4;

double box_squared_distance(const Eigen::AlignedBox3d& box, const Vec3& p) {
  const Vec3 d = (box.min() - p).cwiseMax(p - box.max()).cwiseMax(0.0);
  return d.squaredNorm();
}

}  // namespace

MeshIndex::MeshIndex(const TriMesh& mesh) {
  if (mesh.faces.empty()) throw Error("mesh index needs at least one face");
  triangles_.reserve(mesh.faces.size());
  centroids_.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces) {
    const std::array<Vec3, 3> tri{mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]};
    triangles_.push_back(tri);
    centroids_.push_back((tri[0] + tri[1] + tri[2]) / 3.0);
  }
  order_.resize(triangles_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * triangles_.size() / kLeafSize + 2);
  build(0, static_cast<int>(order_.size()), 0);
}

int MeshIndex::build(int first, int count, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box;
  Eigen::AlignedBox3d centroid_box;
  for (int i = first; i < first + count; ++i) {
    for (const auto& v : triangles_[order_[i]]) box.extend(v);
    centroid_box.extend(centroids_[order_[i]]);
  }
  nodes_[id].box = box;
  if (count <= kLeafSize || depth > 64) {
    nodes_[id].first = first;
    nodes_[id].count = count;
    return id;
  }
  int axis = 0;
  centroid_box.sizes().maxCoeff(&axis);
  const int mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](int a, int b) { return centroids_[a][axis] < centroids_[b][axis]; });
  const int left = build(first, mid - first, depth + 1);
  const int right = build(mid, first + count - mid, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

MeshIndex::Hit MeshIndex::closest(const Vec3& p, int hint_face) const {
  Hit best;
  best.squared_distance = std::numeric_limits<double>::infinity();
  if (hint_face >= 0 && static_cast<std::size_t>(hint_face) < triangles_.size()) {
    const auto& tri = triangles_[hint_face];
    best.point = closest_point_on_triangle(p, tri[0], tri[1], tri[2]);
    best.squared_distance = (best.point - p).squaredNorm();
    best.face = hint_face;
  }
  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[stack[--top]];
    if (box_squared_distance(node.box, p) > best.squared_distance) continue;
    if (node.left < 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const auto& tri = triangles_[order_[i]];
        const Vec3 q = closest_point_on_triangle(p, tri[0], tri[1], tri[2]);
        const double d2 = (q - p).squaredNorm();
        // Ties go to the lower face id so results never depend on traversal order.
        if (d2 < best.squared_distance || (d2 == best.squared_distance && order_[i] < best.face)) {
          best.squared_distance = d2;
          best.point = q;
          best.face = order_[i];
        }
      }
      continue;
    }
    const double dl = box_squared_distance(nodes_[node.left].box, p);
    const double dr = box_squared_distance(nodes_[node.right].box, p);
    // Push the farther child first so the nearer one is visited next.
    if (dl < dr) {
      stack[top++] = node.right;
      stack[top++] = node.left;
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  return best;
}

}  // namespace palpation
