#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace facecom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Face = std::array<int, 3>;

// Indexed triangle mesh. Positions are in millimeters.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  // Optional per-vertex integer tags; either empty or one per vertex.
  std::vector<int> labels;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
  bool has_faces() const { return !faces.empty(); }
};

struct LoadReport {
  std::size_t dropped_faces = 0;
};

enum class PlyEncoding { BinaryFloat32, BinaryFloat64, Ascii };

// Reads OBJ (v/f records) or PLY (ascii, binary_little_endian). Faces with a
// repeated index or zero area are dropped and counted in `report`.
TriMesh load_mesh(const std::filesystem::path& path, LoadReport* report = nullptr);

// Format is chosen from the extension (.obj or .ply). OBJ coordinates are
// written with round-trip precision.
void save_mesh(const TriMesh& mesh, const std::filesystem::path& path,
               PlyEncoding encoding = PlyEncoding::BinaryFloat32);

// Drops faces with out-of-range indices, repeated indices or zero area.
std::size_t drop_degenerate_faces(TriMesh& mesh);

Vec3 face_normal_unnormalized(const TriMesh& mesh, int face);
double face_area(const TriMesh& mesh, int face);
Vec3 face_centroid(const TriMesh& mesh, int face);

struct VertexNormals {
  std::vector<Vec3> normals;
  // False for vertices with no incident face (normal is zero there).
  std::vector<bool> valid;
};

// Area-weighted average of incident face normals.
VertexNormals vertex_normals(const TriMesh& mesh);

// Axis-angle rotation followed by a translation; no scale or shear.
struct RigidTransform {
  Vec3 rotation = Vec3::Zero();     // radians * unit axis
  Vec3 translation = Vec3::Zero();  // mm

  static RigidTransform identity() { return {}; }
  Mat3 rotation_matrix() const;
  Vec3 apply(const Vec3& p) const { return rotation_matrix() * p + translation; }
  RigidTransform inverse() const;
  // (this * other)(p) == this->apply(other.apply(p))
  RigidTransform compose(const RigidTransform& other) const;
  static RigidTransform from_matrix(const Mat3& rotation, const Vec3& translation);
};

Mat3 axis_angle_to_matrix(const Vec3& omega);
Vec3 matrix_to_axis_angle(const Mat3& rotation);

TriMesh apply_transform(const TriMesh& mesh, const RigidTransform& t);
std::vector<Vec3> apply_transform(std::span<const Vec3> points, const RigidTransform& t);

// Closest point query result. barycentric is relative to the face's corners.
struct SurfaceHit {
  double distance = 0.0;
  Vec3 closest_point = Vec3::Zero();
  int face_index = -1;
  Vec3 barycentric = Vec3::Zero();
};

struct TrianglePoint {
  Vec3 point;
  Vec3 barycentric;
};

// Exact closest point on triangle (a, b, c) by Voronoi-region classification.
TrianglePoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                        const Vec3& c);

// Bounding-volume hierarchy over the faces of a mesh. Holds a copy of the
// geometry, so it stays valid if the source mesh is modified or destroyed.
class SurfaceIndex {
 public:
  explicit SurfaceIndex(const TriMesh& mesh);

  // Exact minimum distance over all faces; ties go to the lowest face index.
  SurfaceHit closest(const Vec3& p) const;
  const TriMesh& mesh() const { return mesh_; }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };
  int build(int begin, int end);

  TriMesh mesh_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

// Builds a SurfaceIndex per call; reuse a SurfaceIndex for repeated queries.
SurfaceHit point_to_surface(const Vec3& p, const TriMesh& mesh);

// Static k-d tree over a point set with (distance, index) ordering.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  // The k nearest points sorted by distance, ties broken by lower index.
  std::vector<int> knn(const Vec3& q, int k) const;
  int nearest(const Vec3& q) const;
  std::size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[static_cast<std::size_t>(i)]; }

 private:
  struct Node {
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };
  int build(int begin, int end, int depth);

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

std::vector<std::vector<int>> knn_vertices(const TriMesh& source, std::span<const Vec3> queries,
                                           int k);

// Sorted, symmetric, self-loop-free neighbor lists.
std::vector<std::vector<int>> vertex_adjacency(const TriMesh& mesh);

struct Edge {
  int a = 0;  // a < b
  int b = 0;
  int face_count = 0;
};

// Unique undirected edges in (a, b) lexicographic order with their face counts.
std::vector<Edge> mesh_edges(const TriMesh& mesh);
double mean_edge_length(const TriMesh& mesh);

// Per-vertex flag: vertex touches an edge that has exactly one incident face.
std::vector<bool> boundary_vertices(const TriMesh& mesh);

// Removes vertices that no face references. Returns, for each surviving
// vertex, its index in the input mesh. Point sets (no faces) are kept whole.
std::vector<int> compact_vertices(TriMesh& mesh);

Vec3 centroid(std::span<const Vec3> points);

}  // namespace facecom
