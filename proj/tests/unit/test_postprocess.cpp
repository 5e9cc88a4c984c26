#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "facecom/errors.hpp"
#include "facecom/postprocess.hpp"
#include "facecom/synthetic.hpp"
#include "support/shapes.hpp"

using namespace facecom;

namespace {

TriMesh lifted(TriMesh m, double dz) {
  for (Vec3& v : m.vertices) v.z() += dz;
  return m;
}

double max_move(const TriMesh& a, const TriMesh& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.vertices.size(); ++i) worst = std::max(worst, (a.vertices[i] - b.vertices[i]).norm());
  return worst;
}

// Largest displacement difference across edges joining MATCHED and BOUNDARY_EXT.
double seam_jump(const TriMesh& before, const TriMesh& after, const RegionLabels& labels) {
  double worst = 0.0;
  for (const Edge& e : mesh_edges(before)) {
    const RegionLabel la = labels.label[static_cast<std::size_t>(e.a)];
    const RegionLabel lb = labels.label[static_cast<std::size_t>(e.b)];
    const bool seam = (la == RegionLabel::Matched && lb == RegionLabel::BoundaryExt) ||
                      (lb == RegionLabel::Matched && la == RegionLabel::BoundaryExt);
    if (!seam) continue;
    const Vec3 da = after.vertices[static_cast<std::size_t>(e.a)] - before.vertices[static_cast<std::size_t>(e.a)];
    const Vec3 db = after.vertices[static_cast<std::size_t>(e.b)] - before.vertices[static_cast<std::size_t>(e.b)];
    worst = std::max(worst, (da - db).norm());
  }
  return worst;
}

const TriMesh& face() {
  static const TriMesh m = make_template();
  return m;
}

Defect nose_defect(double radius) {
  DefectSpec spec;
  spec.seed_vertex = nose_tip_vertex(face());
  spec.radius = radius;
  return make_defect(face(), spec);
}

}  // namespace

TEST_CASE("identification") {
  SUBCASE("complete defect and perfect fit: everything matched") {
    const RegionLabels l = identify_repaired(face(), face(), 1.0);
    CHECK(l.count(RegionLabel::Matched) == face().vertices.size());
  }
  SUBCASE("removed region is repaired") {
    const Defect d = nose_defect(30.0);
    const RegionLabels l = identify_repaired(face(), d.mesh, 1.0);
    std::vector<char> kept(face().vertices.size(), 0);
    for (int v : d.index_map) kept[static_cast<std::size_t>(v)] = 1;
    std::size_t removed = 0;
    for (std::size_t v = 0; v < kept.size(); ++v) {
      if (kept[v]) {
        CHECK(l.label[v] == RegionLabel::Matched);
        continue;
      }
      ++removed;
      CHECK(l.label[v] != RegionLabel::Matched);
    }
    CHECK(removed > 50);
    CHECK(l.count(RegionLabel::BoundaryExt) > 0);
  }
  SUBCASE("boundary extension is the ring band") {
    const Defect d = nose_defect(30.0);
    const RegionLabels l = identify_repaired(face(), d.mesh, 1.0, 2);
    CHECK(l.count(RegionLabel::Repaired) > 0);
    for (std::size_t v = 0; v < l.label.size(); ++v) {
      if (l.label[v] == RegionLabel::BoundaryExt) CHECK((l.ring[v] >= 1 && l.ring[v] <= 2));
      if (l.label[v] == RegionLabel::Matched) CHECK(l.ring[v] == 0);
      if (l.label[v] == RegionLabel::Repaired) CHECK(l.ring[v] == -1);
    }
  }
  SUBCASE("threshold zero keeps only vertices on the surface") {
    TriMesh fitted = testing::grid_plane(6, 10.0, 0.0);
    for (std::size_t v = 0; v < fitted.vertices.size(); v += 2) fitted.vertices[v].z() += 1e-3;
    const RegionLabels l = identify_repaired(fitted, testing::grid_plane(6, 10.0, 0.0), 0.0, 0);
    for (std::size_t v = 0; v < l.label.size(); ++v)
      CHECK((l.label[v] == RegionLabel::Matched) == (v % 2 == 1));
  }
  SUBCASE("points hovering past the open boundary are not matched") {
    const TriMesh defect = testing::grid_plane(4, 10.0, 0.0);
    TriMesh fitted = testing::grid_plane(8, 20.0, 0.0);
    const RegionLabels l = identify_repaired(fitted, defect, 1.0, 0);
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v) {
      const Vec3& p = fitted.vertices[v];
      const bool inside = std::abs(p.x()) <= 5.0 + 1e-12 && std::abs(p.y()) <= 5.0 + 1e-12;
      CHECK((l.label[v] == RegionLabel::Matched) == inside);
    }
  }
  SUBCASE("point-set defect matches mutual nearest vertices") {
    TriMesh points;
    points.vertices = {face().vertices[10], face().vertices[500], face().vertices[1200] + Vec3(0, 0, 5)};
    const RegionLabels l = identify_repaired(face(), points, 1.0, 1);
    CHECK(l.count(RegionLabel::Matched) == 2);
    CHECK(l.label[10] == RegionLabel::Matched);
    CHECK(l.label[500] == RegionLabel::Matched);
  }
}

TEST_CASE("projection") {
  const TriMesh defect = testing::grid_plane(10, 40.0, 0.0);
  SUBCASE("offset plane moves by the offset") {
    const TriMesh fitted = lifted(testing::grid_plane(6, 20.0, 0.0), 0.3);
    const RegionLabels l = identify_repaired(fitted, defect, 1.0);
    REQUIRE(l.count(RegionLabel::Matched) == fitted.vertices.size());
    const Projection p = project_matched(fitted, defect, l);
    CHECK(p.missed.empty());
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v) {
      CHECK(p.displacement[v].norm() == doctest::Approx(0.3).epsilon(1e-12));
      CHECK(std::abs(p.mesh.vertices[v].z()) < 1e-12);
    }
  }
  SUBCASE("already on the surface") {
    const TriMesh fitted = testing::grid_plane(6, 20.0, 0.0);
    const Projection p = project_matched(fitted, defect, identify_repaired(fitted, defect, 1.0));
    CHECK(max_move(p.mesh, fitted) < 1e-12);
  }
  SUBCASE("matched MD drops on a curved fit") {
    const Defect d = nose_defect(25.0);
    TriMesh fitted = face();
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v)
      fitted.vertices[v] += Vec3(0.1, -0.05, 0.3 * std::sin(0.1 * double(v)));
    const RegionLabels l = identify_repaired(fitted, d.mesh, 1.0);
    const Projection p = project_matched(fitted, d.mesh, l);
    CHECK(matched_md(p.mesh, d.mesh, l) < matched_md(fitted, d.mesh, l));
    for (std::size_t v = 0; v < l.label.size(); ++v)
      if (l.label[v] != RegionLabel::Matched) CHECK(p.displacement[v].norm() == 0.0);
  }
  SUBCASE("hits beyond the cap are misses") {
    const TriMesh fitted = lifted(testing::grid_plane(2, 10.0, 0.0), 0.8);
    RegionLabels l = identify_repaired(fitted, defect, 1.0);
    const Projection p = project_matched(fitted, defect, l, 0.5);
    CHECK(p.missed.size() == fitted.vertices.size());
    CHECK(max_move(p.mesh, fitted) == 0.0);
  }
}

TEST_CASE("boundary blending") {
  const Defect d = nose_defect(30.0);
  const RegionLabels l = identify_repaired(face(), d.mesh, 1.0);
  const std::vector<Vec3> zero(face().vertices.size(), Vec3::Zero());
  CHECK(max_move(blend_boundary(face(), l, zero, 8), face()) == 0.0);

  const Vec3 delta(0.0, 0.0, 0.4);
  TriMesh moved = face();
  std::vector<Vec3> disp = zero;
  for (std::size_t v = 0; v < disp.size(); ++v)
    if (l.label[v] == RegionLabel::Matched) {
      disp[v] = delta;
      moved.vertices[v] += delta;
    }
  const TriMesh blended = blend_boundary(moved, l, disp, 8);
  for (std::size_t v = 0; v < disp.size(); ++v) {
    const Vec3 m = blended.vertices[v] - face().vertices[v];
    if (l.label[v] == RegionLabel::BoundaryExt)
      CHECK((m - (1.0 - l.ring[v] / 4.0) * delta).norm() < 1e-12);
    if (l.label[v] == RegionLabel::Repaired) CHECK(m.norm() == 0.0);
  }
  CHECK(seam_jump(face(), blended, l) < seam_jump(face(), moved, l));

  RegionLabels none = l;
  std::fill(none.label.begin(), none.label.end(), RegionLabel::Repaired);
  CHECK_THROWS_AS(blend_boundary(face(), none, zero, 8), DataError);
}

TEST_CASE("outlier refinement") {
  const TriMesh flat = testing::grid_plane(10, 20.0, 0.0);
  RegionLabels all;
  all.label.assign(flat.vertices.size(), RegionLabel::Matched);
  all.ring.assign(flat.vertices.size(), 0);

  SUBCASE("no outliers is the identity") {
    RefineReport rep;
    const TriMesh out = refine_outliers(lifted(flat, 0.2), flat, all, 5, &rep);
    CHECK(max_move(out, lifted(flat, 0.2)) == 0.0);
    CHECK(rep.outliers.empty());
  }
  SUBCASE("a spike is pulled back to its neighbors") {
    TriMesh spiked = flat;
    const std::size_t centre = 60;
    spiked.vertices[centre].z() += 3.0;
    RefineReport rep;
    const TriMesh out = refine_outliers(spiked, flat, all, 5, &rep);
    CHECK(rep.outliers == std::vector<int>{60});
    // neighbor plane deviation is zero, so the spike must land on the plane
    CHECK(std::abs(out.vertices[centre].z()) <= 1.5 * 0.0 + 1e-12);
  }
  SUBCASE("repaired vertices are never moved") {
    TriMesh spiked = flat;
    spiked.vertices[60].z() += 3.0;
    RegionLabels l = all;
    l.label[60] = RegionLabel::Repaired;
    CHECK(max_move(refine_outliers(spiked, flat, l), spiked) == 0.0);
  }
  SUBCASE("flipped faces mark their corners") {
    TriMesh folded = flat;
    folded.vertices[60].x() += 3.5;  // past its neighbors: incident faces flip
    RefineReport rep;
    refine_outliers(folded, flat, all, 5, &rep);
    CHECK(std::find(rep.outliers.begin(), rep.outliers.end(), 60) != rep.outliers.end());
  }
}

TEST_CASE("pipeline") {
  SUBCASE("complete defect is nearly untouched") {
    const PostprocessResult r = postprocess_pipeline(face(), face(), PostprocessConfig{});
    CHECK(max_move(r.mesh, face()) < 1.0);
    CHECK(r.stages.back().matched_md < 1e-9);
  }
  SUBCASE("matched MD never increases and topology is kept") {
    const Defect d = nose_defect(30.0);
    TriMesh fitted = face();
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v)
      fitted.vertices[v] += Vec3(0.05 * std::cos(0.3 * double(v)), 0.0, 0.4 * std::sin(0.1 * double(v)));
    const PostprocessResult r = postprocess_pipeline(fitted, d.mesh, PostprocessConfig{});
    REQUIRE(r.stages.size() == 4);
    CHECK(r.stages[0].stage == "fitted");
    CHECK(r.stages[3].stage == "refined");
    for (std::size_t i = 1; i < r.stages.size(); ++i)
      CHECK(r.stages[i].matched_md <= r.stages[i - 1].matched_md + 1e-9);
    CHECK(r.mesh.faces == fitted.faces);
    CHECK(r.mesh.vertices.size() == fitted.vertices.size());
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v)
      if (r.labels.label[v] == RegionLabel::Repaired) CHECK(r.mesh.vertices[v] == fitted.vertices[v]);

    const PostprocessResult again = postprocess_pipeline(fitted, d.mesh, PostprocessConfig{});
    CHECK(again.mesh.vertices == r.mesh.vertices);
  }
  SUBCASE("keypoint defect") {
    std::vector<int> ids = landmark_vertices(default_landmarks(face()));
    DefectSpec spec;
    spec.kind = DefectKind::Keypoints;
    spec.landmarks = ids;
    const Defect d = make_defect(face(), spec);
    TriMesh fitted = face();
    for (Vec3& v : fitted.vertices) v.z() += 0.3;
    const PostprocessResult r = postprocess_pipeline(fitted, d.mesh, PostprocessConfig{});
    CHECK(r.labels.count(RegionLabel::Matched) == ids.size());
    CHECK(r.stages.back().matched_md < 1e-12);
  }
  SUBCASE("outputs") {
    const Defect d = nose_defect(20.0);
    const PostprocessResult r = postprocess_pipeline(face(), d.mesh, PostprocessConfig{});
    const auto dir = std::filesystem::temp_directory_path() / "facecom_post_test";
    std::filesystem::create_directories(dir);
    write_labels(dir / "labels.json", r.labels);
    write_stages(dir / "stages.csv", r.stages);
    std::ifstream js(dir / "labels.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j["labels"].size() == face().vertices.size());
    std::ifstream csv(dir / "stages.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "stage,matched_md");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);
    std::filesystem::remove_all(dir);
  }
}
