#include "facecom/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "facecom/errors.hpp"

namespace facecom {

namespace {

constexpr double kMinFaceArea = 1e-12;  // mm^2

}  // namespace

Vec3 face_normal_unnormalized(const TriMesh& mesh, int face) {
  const Face& f = mesh.faces[static_cast<std::size_t>(face)];
  const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
  const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
  const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
  return (b - a).cross(c - a);
}

double face_area(const TriMesh& mesh, int face) {
  return 0.5 * face_normal_unnormalized(mesh, face).norm();
}

Vec3 face_centroid(const TriMesh& mesh, int face) {
  const Face& f = mesh.faces[static_cast<std::size_t>(face)];
  return (mesh.vertices[static_cast<std::size_t>(f[0])] +
          mesh.vertices[static_cast<std::size_t>(f[1])] +
          mesh.vertices[static_cast<std::size_t>(f[2])]) /
         3.0;
}

std::size_t drop_degenerate_faces(TriMesh& mesh) {
  const int n = static_cast<int>(mesh.vertices.size());
  std::vector<Face> kept;
  kept.reserve(mesh.faces.size());
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const Face& f = mesh.faces[i];
    bool ok = true;
    for (int idx : f) ok = ok && idx >= 0 && idx < n;
    ok = ok && f[0] != f[1] && f[1] != f[2] && f[0] != f[2];
    if (ok && face_area(mesh, static_cast<int>(i)) <= kMinFaceArea) ok = false;
    if (ok) kept.push_back(f);
  }
  const std::size_t dropped = mesh.faces.size() - kept.size();
  mesh.faces = std::move(kept);
  return dropped;
}

VertexNormals vertex_normals(const TriMesh& mesh) {
  VertexNormals out;
  out.normals.assign(mesh.vertices.size(), Vec3::Zero());
  out.valid.assign(mesh.vertices.size(), false);
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    // The cross product's length is twice the area, which is the weight.
    const Vec3 n = face_normal_unnormalized(mesh, static_cast<int>(i));
    for (int v : mesh.faces[i]) {
      out.normals[static_cast<std::size_t>(v)] += n;
      out.valid[static_cast<std::size_t>(v)] = true;
    }
  }
  for (std::size_t v = 0; v < out.normals.size(); ++v) {
    const double len = out.normals[v].norm();
    if (!out.valid[v] || len == 0.0) {
      out.valid[v] = false;
      out.normals[v].setZero();
    } else {
      out.normals[v] /= len;
    }
  }
  return out;
}

Mat3 axis_angle_to_matrix(const Vec3& omega) {
  const double angle = omega.norm();
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

Vec3 matrix_to_axis_angle(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

Mat3 RigidTransform::rotation_matrix() const { return axis_angle_to_matrix(rotation); }

RigidTransform RigidTransform::inverse() const {
  const Mat3 r = rotation_matrix();
  return from_matrix(r.transpose(), -(r.transpose() * translation));
}

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  const Mat3 r = rotation_matrix();
  return from_matrix(r * other.rotation_matrix(), r * other.translation + translation);
}

RigidTransform RigidTransform::from_matrix(const Mat3& rotation, const Vec3& translation) {
  RigidTransform t;
  t.rotation = matrix_to_axis_angle(rotation);
  t.translation = translation;
  return t;
}

TriMesh apply_transform(const TriMesh& mesh, const RigidTransform& t) {
  TriMesh out = mesh;
  const Mat3 r = t.rotation_matrix();
  for (Vec3& v : out.vertices) v = r * v + t.translation;
  return out;
}

std::vector<Vec3> apply_transform(std::span<const Vec3> points, const RigidTransform& t) {
  const Mat3 r = t.rotation_matrix();
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(r * p + t.translation);
  return out;
}

std::vector<std::vector<int>> vertex_adjacency(const TriMesh& mesh) {
  std::vector<std::vector<int>> adj(mesh.vertices.size());
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f[static_cast<std::size_t>(k)];
      const int b = f[static_cast<std::size_t>((k + 1) % 3)];
      adj[static_cast<std::size_t>(a)].push_back(b);
      adj[static_cast<std::size_t>(b)].push_back(a);
    }
  }
  for (auto& list : adj) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return adj;
}

std::vector<Edge> mesh_edges(const TriMesh& mesh) {
  std::vector<std::pair<int, int>> all;
  all.reserve(mesh.faces.size() * 3);
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[static_cast<std::size_t>(k)];
      int b = f[static_cast<std::size_t>((k + 1) % 3)];
      if (a > b) std::swap(a, b);
      all.emplace_back(a, b);
    }
  }
  std::sort(all.begin(), all.end());
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j] == all[i]) ++j;
    edges.push_back({all[i].first, all[i].second, static_cast<int>(j - i)});
    i = j;
  }
  return edges;
}

double mean_edge_length(const TriMesh& mesh) {
  const auto edges = mesh_edges(mesh);
  if (edges.empty()) return 0.0;
  double sum = 0.0;
  for (const Edge& e : edges) {
    sum += (mesh.vertices[static_cast<std::size_t>(e.a)] - mesh.vertices[static_cast<std::size_t>(e.b)])
               .norm();
  }
  return sum / static_cast<double>(edges.size());
}

std::vector<bool> boundary_vertices(const TriMesh& mesh) {
  std::vector<bool> flag(mesh.vertices.size(), false);
  for (const Edge& e : mesh_edges(mesh)) {
    if (e.face_count == 1) {
      flag[static_cast<std::size_t>(e.a)] = true;
      flag[static_cast<std::size_t>(e.b)] = true;
    }
  }
  return flag;
}

std::vector<int> compact_vertices(TriMesh& mesh) {
  const std::size_t n = mesh.vertices.size();
  std::vector<int> original;
  if (mesh.faces.empty()) {
    original.resize(n);
    std::iota(original.begin(), original.end(), 0);
    return original;
  }
  std::vector<bool> used(n, false);
  for (const Face& f : mesh.faces)
    for (int v : f) used[static_cast<std::size_t>(v)] = true;
  std::vector<int> remap(n, -1);
  std::vector<Vec3> verts;
  std::vector<int> labels;
  for (std::size_t v = 0; v < n; ++v) {
    if (!used[v]) continue;
    remap[v] = static_cast<int>(verts.size());
    verts.push_back(mesh.vertices[v]);
    if (!mesh.labels.empty()) labels.push_back(mesh.labels[v]);
    original.push_back(static_cast<int>(v));
  }
  for (Face& f : mesh.faces)
    for (int& v : f) v = remap[static_cast<std::size_t>(v)];
  mesh.vertices = std::move(verts);
  mesh.labels = std::move(labels);
  return original;
}

Vec3 centroid(std::span<const Vec3> points) {
  Vec3 c = Vec3::Zero();
  if (points.empty()) return c;
  for (const Vec3& p : points) c += p;
  return c / static_cast<double>(points.size());
}

}  // namespace facecom
