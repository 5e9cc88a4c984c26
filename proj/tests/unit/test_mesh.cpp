#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "facecom/errors.hpp"
#include "facecom/mesh.hpp"
#include "support/shapes.hpp"

using namespace facecom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "facecom_test_mesh";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("obj with one triangle") {
  const auto p = scratch("tri.obj");
  write_text(p, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
  const TriMesh m = load_mesh(p);
  CHECK(m.vertex_count() == 3);
  CHECK(m.face_count() == 1);
}

TEST_CASE("degenerate faces are dropped and counted") {
  const auto p = scratch("degen.obj");
  write_text(p, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 1 2\n");
  LoadReport report;
  const TriMesh m = load_mesh(p, &report);
  CHECK(m.face_count() == 1);
  CHECK(report.dropped_faces == 1);
}

TEST_CASE("load errors") {
  CHECK_THROWS_AS(load_mesh(scratch("missing.obj")), DataError);
  const auto txt = scratch("mesh.txt");
  write_text(txt, "v 0 0 0\n");
  CHECK_THROWS_AS(load_mesh(txt), DataError);
  const auto empty = scratch("empty.obj");
  write_text(empty, "# nothing\n");
  CHECK_THROWS_AS(load_mesh(empty), DataError);
}

TEST_CASE("round trips") {
  const TriMesh sphere = testing::bumpy_sphere(2, 0.1, 3);
  for (const auto& [name, enc] : std::vector<std::pair<std::string, PlyEncoding>>{
           {"rt.obj", PlyEncoding::Ascii},
           {"rt64.ply", PlyEncoding::BinaryFloat64},
           {"rtascii.ply", PlyEncoding::Ascii},
           {"rt32.ply", PlyEncoding::BinaryFloat32}}) {
    CAPTURE(name);
    const auto p = scratch(name);
    save_mesh(sphere, p, enc);
    const TriMesh back = load_mesh(p);
    REQUIRE(back.vertex_count() == sphere.vertex_count());
    CHECK(back.faces == sphere.faces);
    double worst = 0.0;
    for (std::size_t i = 0; i < sphere.vertices.size(); ++i)
      worst = std::max(worst, (back.vertices[i] - sphere.vertices[i]).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("float32 ply keeps face-scale coordinates within float precision") {
  TriMesh m = testing::icosphere(2);
  for (auto& v : m.vertices) v *= 100.0;
  const auto p = scratch("scaled32.ply");
  save_mesh(m, p);
  const TriMesh back = load_mesh(p);
  double worst = 0.0;
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    worst = std::max(worst, (back.vertices[i] - m.vertices[i]).cwiseAbs().maxCoeff());
  CHECK(worst < 1e-5);
}

TEST_CASE("save cube, point cloud, large mesh") {
  const auto cube_path = scratch("cube.ply");
  save_mesh(testing::cube(), cube_path);
  const TriMesh cube = load_mesh(cube_path);
  CHECK(cube.vertex_count() == 8);
  CHECK(cube.face_count() == 12);

  TriMesh cloud;
  cloud.vertices = {{0, 0, 0}, {1, 2, 3}};
  const auto cloud_path = scratch("cloud.ply");
  save_mesh(cloud, cloud_path);
  const TriMesh cloud_back = load_mesh(cloud_path);
  CHECK(cloud_back.vertex_count() == 2);
  CHECK(cloud_back.face_count() == 0);

  const auto big_path = scratch("big.ply");
  save_mesh(testing::icosphere(4), big_path);
  CHECK(load_mesh(big_path).vertex_count() == 2562);
}

TEST_CASE("labels survive ply") {
  TriMesh m = testing::cube();
  m.labels = {0, 1, 2, 0, 1, 2, 0, 1};
  const auto p = scratch("labels.ply");
  save_mesh(m, p);
  CHECK(load_mesh(p).labels == m.labels);
}

TEST_CASE("unwritable path") {
  CHECK_THROWS_AS(save_mesh(testing::cube(), "/nonexistent-dir/x/cube.ply"), DataError);
}

TEST_CASE("vertex normals") {
  const TriMesh grid = testing::flat_grid(6, 5.0);
  const VertexNormals n = vertex_normals(grid);
  for (std::size_t i = 0; i < grid.vertices.size(); ++i) {
    CHECK(n.valid[i]);
    CHECK((n.normals[i] - Vec3(0, 0, 1)).norm() < 1e-12);
  }

  const TriMesh sphere = testing::icosphere(3);
  const VertexNormals sn = vertex_normals(sphere);
  for (std::size_t i = 0; i < sphere.vertices.size(); ++i) {
    CHECK(std::abs(sn.normals[i].norm() - 1.0) < 1e-9);
    CHECK(sn.normals[i].dot(sphere.vertices[i].normalized()) > std::cos(5.0 * EIGEN_PI / 180.0));
  }

  TriMesh lone = testing::cube();
  lone.vertices.emplace_back(5, 5, 5);
  const VertexNormals ln = vertex_normals(lone);
  CHECK_FALSE(ln.valid.back());
  CHECK(ln.normals.back().norm() == 0.0);
}

TEST_CASE("point to surface on a single triangle") {
  TriMesh tri;
  tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  tri.faces = {{0, 1, 2}};
  const SurfaceHit a = point_to_surface({0.2, 0.2, 0.5}, tri);
  CHECK(a.distance == doctest::Approx(0.5).epsilon(1e-12));
  CHECK((a.closest_point - Vec3(0.2, 0.2, 0)).norm() < 1e-12);
  const SurfaceHit b = point_to_surface({2, 0, 0}, tri);
  CHECK(b.distance == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((b.closest_point - Vec3(1, 0, 0)).norm() < 1e-12);
  CHECK_THROWS_AS(point_to_surface({0, 0, 0}, TriMesh{}), DataError);
}

TEST_CASE("bvh distance equals exhaustive search") {
  const TriMesh sphere = testing::bumpy_sphere(3, 0.05, 11);
  const SurfaceIndex index(sphere);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.6, 1.6);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    const SurfaceHit hit = index.closest(p);
    worst = std::max(worst, std::abs(hit.distance - testing::brute_distance(p, sphere)));
    const Face& f = sphere.faces[static_cast<std::size_t>(hit.face_index)];
    const Vec3 rebuilt = hit.barycentric[0] * sphere.vertices[static_cast<std::size_t>(f[0])] +
                         hit.barycentric[1] * sphere.vertices[static_cast<std::size_t>(f[1])] +
                         hit.barycentric[2] * sphere.vertices[static_cast<std::size_t>(f[2])];
    CHECK((rebuilt - hit.closest_point).norm() < 1e-9);
    CHECK(hit.barycentric.minCoeff() >= 0.0);
    CHECK(std::abs(hit.barycentric.sum() - 1.0) < 1e-9);
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("vertices lie on their own surface") {
  const TriMesh sphere = testing::bumpy_sphere(2, 0.1, 2);
  const SurfaceIndex index(sphere);
  for (const Vec3& v : sphere.vertices) CHECK(index.closest(v).distance < 1e-9);
}

TEST_CASE("point to surface is rigid invariant") {
  const TriMesh sphere = testing::bumpy_sphere(2, 0.1, 4);
  RigidTransform t;
  t.rotation = Vec3(0.3, -1.1, 0.7);
  t.translation = Vec3(10, -4, 2);
  const SurfaceIndex a(sphere);
  const SurfaceIndex b(apply_transform(sphere, t));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    CHECK(std::abs(a.closest(p).distance - b.closest(t.apply(p)).distance) < 1e-6);
  }
}

TEST_CASE("apply transform") {
  const TriMesh sphere = testing::bumpy_sphere(2, 0.1, 1);
  const TriMesh same = apply_transform(sphere, RigidTransform::identity());
  CHECK(same.vertices == sphere.vertices);

  RigidTransform shift;
  shift.translation = Vec3(1, 2, 3);
  const TriMesh moved = apply_transform(sphere, shift);
  for (std::size_t i = 0; i < sphere.vertices.size(); ++i)
    CHECK(moved.vertices[i] == sphere.vertices[i] + Vec3(1, 2, 3));

  RigidTransform half_turn;
  half_turn.rotation = Vec3(0, 0, EIGEN_PI);
  CHECK((half_turn.apply(Vec3(1, 0, 0)) - Vec3(-1, 0, 0)).norm() < 1e-9);

  RigidTransform general;
  general.rotation = Vec3(-0.4, 2.2, 0.9);
  general.translation = Vec3(3, 3, -8);
  const Mat3 r = general.rotation_matrix();
  CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(r.determinant() > 0.0);
  const TriMesh g = apply_transform(sphere, general);
  for (const Edge& e : mesh_edges(sphere)) {
    const double before = (sphere.vertices[static_cast<std::size_t>(e.a)] - sphere.vertices[static_cast<std::size_t>(e.b)]).norm();
    const double after = (g.vertices[static_cast<std::size_t>(e.a)] - g.vertices[static_cast<std::size_t>(e.b)]).norm();
    CHECK(std::abs(after - before) <= 1e-6 * before);
  }
  CHECK(g.faces == sphere.faces);
}

TEST_CASE("axis angle round trip and composition") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.7, 1.7);
  for (int i = 0; i < 50; ++i) {
    const Vec3 w(u(rng), u(rng), u(rng));
    if (w.norm() >= EIGEN_PI - 1e-3) continue;
    CHECK((matrix_to_axis_angle(axis_angle_to_matrix(w)) - w).norm() < 1e-9);
    RigidTransform a{w, Vec3(u(rng), u(rng), u(rng))};
    RigidTransform b{Vec3(u(rng), 0.1, -0.2), Vec3(1, 2, 3)};
    const Vec3 p(0.3, -0.7, 2.0);
    CHECK((a.compose(b).apply(p) - a.apply(b.apply(p))).norm() < 1e-9);
    CHECK((a.inverse().apply(a.apply(p)) - p).norm() < 1e-9);
  }
}

TEST_CASE("knn") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  TriMesh cloud;
  for (int i = 0; i < 300; ++i) cloud.vertices.emplace_back(u(rng), u(rng), u(rng));
  std::vector<Vec3> queries;
  for (int i = 0; i < 100; ++i) queries.emplace_back(u(rng), u(rng), u(rng));
  const auto got = knn_vertices(cloud, queries, 7);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::pair<double, int>> all;
    for (std::size_t i = 0; i < cloud.vertices.size(); ++i)
      all.emplace_back((cloud.vertices[i] - queries[q]).squaredNorm(), static_cast<int>(i));
    std::sort(all.begin(), all.end());
    for (int k = 0; k < 7; ++k) CHECK(got[q][static_cast<std::size_t>(k)] == all[static_cast<std::size_t>(k)].second);
  }

  const std::vector<Vec3> at_vertex{cloud.vertices[42]};
  CHECK(knn_vertices(cloud, at_vertex, 1)[0][0] == 42);
  CHECK(knn_vertices(cloud, at_vertex, 300)[0].size() == 300);
  CHECK_THROWS_AS(knn_vertices(cloud, at_vertex, 301), DataError);
}

TEST_CASE("knn ties go to the lower index") {
  TriMesh twin;
  twin.vertices = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}};
  const std::vector<Vec3> origin{Vec3::Zero()};
  CHECK(knn_vertices(twin, origin, 1)[0][0] == 0);
  CHECK(knn_vertices(twin, origin, 3)[0] == std::vector<int>{0, 1, 2});
}

TEST_CASE("adjacency and edges") {
  const TriMesh ico = testing::icosahedron();
  const auto adj = vertex_adjacency(ico);
  for (std::size_t v = 0; v < adj.size(); ++v) {
    CHECK(adj[v].size() == 5);
    for (int u : adj[v]) {
      CHECK(u != static_cast<int>(v));
      const auto& back = adj[static_cast<std::size_t>(u)];
      CHECK(std::find(back.begin(), back.end(), static_cast<int>(v)) != back.end());
    }
  }
  CHECK(mesh_edges(ico).size() == 30);
  const auto grid_boundary = boundary_vertices(testing::flat_grid(4, 1.0));
  CHECK(std::count(grid_boundary.begin(), grid_boundary.end(), true) == 12);
}

TEST_CASE("compact vertices keeps order") {
  TriMesh m = testing::flat_grid(3, 1.0);
  m.faces = {m.faces[5]};
  const std::vector<int> map = compact_vertices(m);
  CHECK(m.vertex_count() == 3);
  CHECK(std::is_sorted(map.begin(), map.end()));
  for (std::size_t i = 0; i < map.size(); ++i) CHECK(m.vertices[i] == testing::flat_grid(3, 1.0).vertices[static_cast<std::size_t>(map[i])]);
}
