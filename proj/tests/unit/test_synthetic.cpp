#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <queue>
#include <set>

#include "facecom/errors.hpp"
#include "facecom/hierarchy.hpp"
#include "facecom/synthetic.hpp"

using namespace facecom;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Plain Bellman-Ford relaxation over edges, independent of the Dijkstra in
// the library.
std::vector<double> relaxed_distances(const TriMesh& m, int source) {
  const auto edges = mesh_edges(m);
  std::vector<double> d(m.vertices.size(), std::numeric_limits<double>::infinity());
  d[static_cast<std::size_t>(source)] = 0.0;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const Edge& e : edges) {
      const double w = (m.vertices[static_cast<std::size_t>(e.a)] - m.vertices[static_cast<std::size_t>(e.b)]).norm();
      auto& da = d[static_cast<std::size_t>(e.a)];
      auto& db = d[static_cast<std::size_t>(e.b)];
      if (da + w < db) {
        db = da + w;
        changed = true;
      }
      if (db + w < da) {
        da = db + w;
        changed = true;
      }
    }
  }
  return d;
}

}  // namespace

TEST_CASE("template shape") {
  const TriMesh t = make_template();
  CHECK(t.vertex_count() == 2562);
  CHECK(t.face_count() == 4920);
  Vec3 lo = t.vertices[0];
  Vec3 hi = lo;
  for (const Vec3& v : t.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  CHECK(hi.x() - lo.x() == doctest::Approx(150.0).epsilon(0.01));
  CHECK(hi.y() - lo.y() == doctest::Approx(200.0).epsilon(0.01));
  CHECK(hi.z() - lo.z() > 80.0);
  CHECK(hi.z() - lo.z() < 100.0);
  for (std::size_t f = 0; f < t.faces.size(); ++f) {
    CHECK(face_area(t, static_cast<int>(f)) > 0.0);
    CHECK(face_normal_unnormalized(t, static_cast<int>(f)).z() > 0.0);
  }
}

TEST_CASE("template is mirror symmetric") {
  const TriMesh t = make_template();
  for (int r = 0; r < kTemplateRows; ++r) {
    for (int c = 0; c < kTemplateColumns; ++c) {
      const Vec3& a = t.vertices[static_cast<std::size_t>(template_vertex(c, r))];
      const Vec3& b = t.vertices[static_cast<std::size_t>(template_vertex(kTemplateColumns - 1 - c, r))];
      CHECK(std::abs(a.x() + b.x()) < 1e-6);
      CHECK(std::abs(a.y() - b.y()) < 1e-6);
      CHECK(std::abs(a.z() - b.z()) < 1e-6);
    }
  }
  // Mirrored faces exist too.
  std::set<std::array<int, 3>> faces;
  for (Face f : t.faces) {
    std::sort(f.begin(), f.end());
    faces.insert(f);
  }
  for (const Face& f : t.faces) {
    Face m;
    for (int k = 0; k < 3; ++k) {
      const int v = f[static_cast<std::size_t>(k)];
      m[static_cast<std::size_t>(k)] = template_vertex(kTemplateColumns - 1 - v % kTemplateColumns, v / kTemplateColumns);
    }
    std::sort(m.begin(), m.end());
    CHECK(faces.count(m) == 1);
  }
}

TEST_CASE("template is stable across calls") {
  const TriMesh a = make_template();
  const TriMesh b = make_template();
  CHECK(a.vertices == b.vertices);
  CHECK(a.faces == b.faces);
}

TEST_CASE("identity at zero is the template") {
  IdentityParams g{};
  const TriMesh m = synth_identity(g);
  CHECK(m.vertices == make_template().vertices);
}

TEST_CASE("identity is not odd in g") {
  IdentityParams g{};
  for (int k = 0; k < kIdentityDims; ++k) g[static_cast<std::size_t>(k)] = 0.3 + 0.05 * k;
  IdentityParams neg = g;
  for (double& x : neg) x = -x;
  const TriMesh t = make_template();
  const TriMesh a = synth_identity(g);
  const TriMesh b = synth_identity(neg);
  double asym = 0.0;
  for (std::size_t i = 0; i < t.vertices.size(); ++i)
    asym = std::max(asym, ((a.vertices[i] - t.vertices[i]) + (b.vertices[i] - t.vertices[i])).norm());
  CHECK(asym > 0.1);
  CHECK(a.faces == t.faces);
}

TEST_CASE("identity displacement stays within 15 mm over the g-cube corners") {
  const TriMesh t = make_template();
  double worst = 0.0;
  for (int corner = 0; corner < (1 << kIdentityDims); ++corner) {
    IdentityParams g{};
    for (int k = 0; k < kIdentityDims; ++k) g[static_cast<std::size_t>(k)] = (corner >> k & 1) ? 1.0 : -1.0;
    for (const Vec3& d : identity_displacement(t, g)) worst = std::max(worst, d.norm());
  }
  CHECK(worst <= 15.0);
  CHECK(worst > 5.0);
}

TEST_CASE("identity rejects out of range parameters") {
  IdentityParams g{};
  g[3] = 1.5;
  CHECK_THROWS_AS(synth_identity(g), UsageError);
}

TEST_CASE("dataset split and determinism") {
  CHECK(held_out_count(512) == 26);
  CHECK(held_out_count(20) == 1);
  const Dataset a = make_dataset(512, 7);
  CHECK(a.train.size() == 486);
  CHECK(a.test.size() == 26);
  const Dataset small = make_dataset(20, 1);
  CHECK(small.train.size() == 19);
  CHECK(small.test.size() == 1);
  CHECK_THROWS_AS(make_dataset(19, 1), UsageError);
  const Dataset b = make_dataset(512, 7);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].g == b.entries[i].g);
    CHECK(a.entries[i].mesh.vertices == b.entries[i].mesh.vertices);
    for (double x : a.entries[i].g) {
      CHECK(x >= -1.0);
      CHECK(x <= 1.0);
    }
  }
  const Dataset c = make_dataset(512, 8);
  CHECK(c.entries[0].g != a.entries[0].g);
}

TEST_CASE("dataset files are byte identical under a fixed seed") {
  const fs::path root = fs::temp_directory_path() / "facecom_dataset_test";
  fs::remove_all(root);
  save_dataset(root / "a", make_dataset(24, 3));
  save_dataset(root / "b", make_dataset(24, 3));
  for (const auto& entry : fs::directory_iterator(root / "a"))
    CHECK(file_bytes(entry.path()) == file_bytes(root / "b" / entry.path().filename()));
  const Dataset back = load_dataset(root / "a");
  const Dataset orig = make_dataset(24, 3);
  CHECK(back.train == orig.train);
  CHECK(back.test == orig.test);
  CHECK(back.entries[5].g == orig.entries[5].g);
  CHECK(back.entries[5].mesh.vertices == orig.entries[5].mesh.vertices);
  CHECK_THROWS_AS(load_dataset(root / "missing"), DataError);
}

TEST_CASE("region defect limits") {
  const TriMesh t = make_template();
  const int tip = nose_tip_vertex(t);
  DefectSpec tiny;
  tiny.seed_vertex = tip;
  tiny.radius = 0.01;
  const Defect d = make_defect(t, tiny);
  CHECK(d.removed_faces.size() <= 6);
  for (int f : d.removed_faces) {
    const Face& face = t.faces[static_cast<std::size_t>(f)];
    CHECK(std::find(face.begin(), face.end(), tip) != face.end());
  }
  DefectSpec huge = tiny;
  huge.radius = 1000.0;
  CHECK_THROWS_AS(make_defect(t, huge), DataError);
  DefectSpec bad = tiny;
  bad.radius = -1.0;
  CHECK_THROWS_AS(make_defect(t, bad), UsageError);
}

TEST_CASE("nose region defect against an independent geodesic pass") {
  const TriMesh t = make_template();
  DefectSpec spec;
  spec.seed_vertex = nose_tip_vertex(t);
  spec.radius = 30.0;
  const Defect d = make_defect(t, spec);
  const auto vd = relaxed_distances(t, spec.seed_vertex);
  std::vector<bool> removed(t.faces.size(), false);
  for (int f : d.removed_faces) removed[static_cast<std::size_t>(f)] = true;
  for (std::size_t f = 0; f < t.faces.size(); ++f) {
    const Vec3 c = face_centroid(t, static_cast<int>(f));
    double g = std::numeric_limits<double>::infinity();
    for (int v : t.faces[f]) g = std::min(g, vd[static_cast<std::size_t>(v)] + (c - t.vertices[static_cast<std::size_t>(v)]).norm());
    if (removed[f]) {
      CHECK(g <= 30.0 + 1e-9);
    } else {
      CHECK(g > 30.0 - 1e-9);
    }
  }
  CHECK(d.removed_faces.size() > 50);
}

TEST_CASE("defect is a sub-mesh with a consistent index map") {
  const TriMesh t = synth_identity(IdentityParams{0.2, -0.5, 0.1, 0.9, -0.3, 0.4, 0.0, -0.7, 0.5, 0.5, -0.2, 0.8});
  DefectSpec spec;
  spec.seed_vertex = template_vertex(10, 20);
  spec.radius = 25.0;
  const Defect d = make_defect(t, spec);
  REQUIRE(d.index_map.size() == d.mesh.vertex_count());
  for (std::size_t i = 0; i < d.index_map.size(); ++i)
    CHECK(d.mesh.vertices[i] == t.vertices[static_cast<std::size_t>(d.index_map[i])]);
  std::set<std::array<int, 3>> source;
  for (const Face& f : t.faces) source.insert(f);
  for (const Face& f : d.mesh.faces) {
    const Face mapped{d.index_map[static_cast<std::size_t>(f[0])], d.index_map[static_cast<std::size_t>(f[1])],
                      d.index_map[static_cast<std::size_t>(f[2])]};
    CHECK(source.count(mapped) == 1);
  }
  CHECK(d.mesh.face_count() + d.removed_faces.size() == t.face_count());
}

TEST_CASE("fragments and keypoints") {
  const TriMesh t = make_template();
  DefectSpec frag;
  frag.kind = DefectKind::Fragments;
  frag.fragment_count = 3;
  frag.radius = 15.0;
  frag.seed = 9;
  const Defect a = make_defect(t, frag);
  const Defect b = make_defect(t, frag);
  CHECK(a.mesh.faces == b.mesh.faces);
  CHECK(a.mesh.face_count() > 0);
  CHECK(a.mesh.face_count() < t.face_count() / 2);

  DefectSpec share = frag;
  share.keep_fraction = 0.3;
  const Defect c = make_defect(t, share);
  const double kept = static_cast<double>(c.mesh.face_count()) / static_cast<double>(t.face_count());
  CHECK(kept >= 0.3);
  CHECK(kept < 0.33);

  DefectSpec keys;
  keys.kind = DefectKind::Keypoints;
  keys.landmarks = landmark_vertices(default_landmarks(t));
  const Defect k = make_defect(t, keys);
  CHECK(k.mesh.vertex_count() == kLandmarkCount);
  CHECK(k.mesh.face_count() == 0);
  for (std::size_t i = 0; i < k.index_map.size(); ++i)
    CHECK(k.mesh.vertices[i] == t.vertices[static_cast<std::size_t>(k.index_map[i])]);
}

TEST_CASE("jitter is optional and seeded") {
  const TriMesh t = make_template();
  DefectSpec spec;
  spec.seed_vertex = nose_tip_vertex(t);
  spec.radius = 20.0;
  spec.jitter_mm = 0.2;
  spec.seed = 4;
  const Defect a = make_defect(t, spec);
  const Defect b = make_defect(t, spec);
  CHECK(a.mesh.vertices == b.mesh.vertices);
  double moved = 0.0;
  for (std::size_t i = 0; i < a.index_map.size(); ++i)
    moved = std::max(moved, (a.mesh.vertices[i] - t.vertices[static_cast<std::size_t>(a.index_map[i])]).norm());
  CHECK(moved > 0.0);
  CHECK(moved < 2.0);
}

TEST_CASE("defect files round trip") {
  const TriMesh t = make_template();
  DefectSpec spec;
  spec.seed_vertex = nose_tip_vertex(t);
  spec.radius = 30.0;
  const Defect d = make_defect(t, spec);
  const fs::path dir = fs::temp_directory_path();
  save_defect(dir / "facecom_defect.ply", dir / "facecom_defect.json", d);
  const Defect back = load_defect(dir / "facecom_defect.ply", dir / "facecom_defect.json");
  CHECK(back.mesh.vertices == d.mesh.vertices);
  CHECK(back.mesh.faces == d.mesh.faces);
  CHECK(back.index_map == d.index_map);
  CHECK(back.removed_faces == d.removed_faces);
  CHECK(back.spec.radius == 30.0);
}

TEST_CASE("landmark asset matches the template") {
  const auto expected = default_landmarks(make_template());
  CHECK(expected.size() == kLandmarkCount);
  std::set<int> unique;
  for (const Landmark& l : expected) unique.insert(l.vertex);
  CHECK(unique.size() == kLandmarkCount);
  const auto asset = load_landmarks(FACECOM_ASSET_DIR "/landmarks.json");
  REQUIRE(asset.size() == expected.size());
  for (std::size_t i = 0; i < asset.size(); ++i) {
    CHECK(asset[i].name == expected[i].name);
    CHECK(asset[i].vertex == expected[i].vertex);
  }
}

TEST_CASE("template hierarchy") {
  const TriMesh t = make_template();
  const std::vector<int> targets{1200, 300, 75};
  const SamplingHierarchy h = build_hierarchy(t, targets);
  REQUIRE(h.size() == 4);
  ad::Matrix fine(static_cast<Eigen::Index>(t.vertex_count()), 3);
  for (std::size_t i = 0; i < t.vertices.size(); ++i) fine.row(static_cast<Eigen::Index>(i)) = t.vertices[i].transpose();
  const ad::Matrix back = h[0].up->multiply(h[0].down->multiply(fine));
  double err = 0.0;
  for (Eigen::Index r = 0; r < fine.rows(); ++r) err += (back.row(r) - fine.row(r)).norm();
  err /= static_cast<double>(fine.rows());
  CHECK(err < 0.05 * mean_edge_length(t));

  const TriMesh sub = loop_subdivide(t, 1);
  CHECK(sub.vertex_count() == t.vertex_count() + mesh_edges(t).size());
  CHECK(sub.face_count() == 4 * t.face_count());
}
