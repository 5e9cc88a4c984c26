#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "facecom/errors.hpp"
#include "facecom/guidance.hpp"
#include "facecom/synthetic.hpp"

using namespace facecom;

namespace {

TriMesh flat_triangle(double z) {
  TriMesh m;
  m.vertices = {{-40, -30, z}, {50, -20, z}, {0, 60, z}};
  m.faces = {{0, 1, 2}};
  return m;
}

// Nearest hit of the pixel ray against every face (Moller-Trumbore).
double ray_cast(const TriMesh& mesh, const Camera& cam, int px, int py) {
  const Vec3 o = cam.pixel_center(px, py);
  const Vec3 d = cam.view;
  double best = std::numeric_limits<double>::infinity();
  for (const Face& f : mesh.faces) {
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const Vec3 e1 = mesh.vertices[static_cast<std::size_t>(f[1])] - a;
    const Vec3 e2 = mesh.vertices[static_cast<std::size_t>(f[2])] - a;
    const Vec3 p = d.cross(e2);
    const double det = e1.dot(p);
    if (std::abs(det) < 1e-14) continue;
    const Vec3 s = o - a;
    const double u = s.dot(p) / det;
    if (u < 0.0 || u > 1.0) continue;
    const Vec3 q = s.cross(e1);
    const double v = d.dot(q) / det;
    if (v < 0.0 || u + v > 1.0) continue;
    best = std::min(best, e2.dot(q) / det);
  }
  return best;
}

const TriMesh& face_mesh() {
  static const TriMesh m = synth_identity({0.3, -0.5, 0.2, 0.8, -0.1, 0.4, -0.6, 0.1, 0.5, -0.3, 0.7, 0.2});
  return m;
}

// Pixels whose 8-neighbourhood is fully covered.
std::vector<std::uint8_t> interior(const DepthImage& img) {
  std::vector<std::uint8_t> in(img.size(), 0);
  for (int y = 1; y + 1 < img.height; ++y)
    for (int x = 1; x + 1 < img.width; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) all = all && img.valid[static_cast<std::size_t>((y + dy) * img.width + x + dx)];
      in[static_cast<std::size_t>(y * img.width + x)] = all;
    }
  return in;
}

double weighted_depth(const TriMesh& m, const Camera& cam, const std::vector<double>& w) {
  const DepthImage img = render_depth(m, cam);
  double s = 0.0;
  for (std::size_t k = 0; k < img.size(); ++k)
    if (w[k] != 0.0) s += w[k] * img.depth[k];
  return s;
}

}  // namespace

TEST_CASE("flat triangle renders at constant depth") {
  Camera cam;
  const DepthImage img = render_depth(flat_triangle(190.0), cam);
  CHECK(img.valid_count() > 100);
  for (std::size_t k = 0; k < img.size(); ++k) {
    if (img.valid[k])
      CHECK(std::abs(img.depth[k] - 10.0) < 1e-12);
    else
      CHECK(std::isnan(img.depth[k]));
  }
  CHECK_FALSE(img.valid[0]);  // top-left corner lies outside the triangle
}

TEST_CASE("empty mesh renders an all-invalid image") {
  const DepthImage img = render_depth(TriMesh{}, Camera{});
  CHECK(img.valid_count() == 0);
  CHECK(img.size() == 128u * 128u);
}

TEST_CASE("template framing") {
  const DepthImage img = render_depth(make_template(), Camera{});
  CHECK(img.covered_fraction() > 0.2);
  CHECK(img.covered_fraction() < 0.9);
}

TEST_CASE("depth agrees with an exhaustive ray cast") {
  Camera cam;
  const DepthImage img = render_depth(face_mesh(), cam);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> px(0, cam.width - 1);
  int hits = 0;
  double worst = 0.0;
  int disagreements = 0;
  for (int i = 0; i < 1000; ++i) {
    const int x = px(rng);
    const int y = px(rng);
    const std::size_t k = static_cast<std::size_t>(y * cam.width + x);
    const double oracle = ray_cast(face_mesh(), cam, x, y);
    if (std::isinf(oracle) != !img.valid[k]) {
      ++disagreements;
      continue;
    }
    if (!img.valid[k]) continue;
    ++hits;
    worst = std::max(worst, std::abs(oracle - img.depth[k]));
  }
  CHECK(disagreements == 0);
  CHECK(hits > 300);
  CHECK(worst < 1e-6);
}

TEST_CASE("rendering is bit-identical across calls") {
  const DepthImage a = render_depth(face_mesh(), Camera{});
  const DepthImage b = render_depth(face_mesh(), Camera{});
  CHECK(std::memcmp(a.depth.data(), b.depth.data(), a.depth.size() * sizeof(double)) == 0);
  CHECK(a.valid == b.valid);
  CHECK(a.face == b.face);
}

TEST_CASE("translation along the view shifts depth and gives barycentric gradients") {
  Camera cam;
  const TriMesh tri = flat_triangle(190.0);
  const DepthImage img = render_depth(tri, cam);
  const DepthImage moved = render_depth(flat_triangle(190.0 - 0.25), cam);
  for (std::size_t k = 0; k < img.size(); ++k)
    if (img.valid[k]) CHECK(std::abs(moved.depth[k] - img.depth[k] - 0.25) < 1e-12);

  const double n = static_cast<double>(img.valid_count());
  std::vector<double> up(img.size(), 0.0);
  Vec3 expected = Vec3::Zero();
  for (std::size_t k = 0; k < img.size(); ++k)
    if (img.valid[k]) {
      up[k] = 1.0 / n;
      expected += img.barycentric[k] / n;
    }
  const std::vector<Vec3> g = render_depth_backward(tri, cam, img, up);
  for (int i = 0; i < 3; ++i) CHECK((g[static_cast<std::size_t>(i)] - expected(i) * cam.view).norm() < 1e-12);
}

TEST_CASE("render backward matches finite differences on interior pixels") {
  Camera cam;
  const TriMesh& mesh = face_mesh();
  const DepthImage img = render_depth(mesh, cam);
  const std::vector<std::uint8_t> in = interior(img);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(img.size(), 0.0);
  for (std::size_t k = 0; k < img.size(); ++k)
    if (in[k]) w[k] = n(rng);
  const std::vector<Vec3> g = render_depth_backward(mesh, cam, img, w);

  // Vertices that own interior pixels.
  std::vector<int> candidates;
  for (std::size_t k = 0; k < img.size(); ++k)
    if (in[k]) candidates.push_back(mesh.faces[static_cast<std::size_t>(img.face[k])][0]);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const double h = 1e-4;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t v = static_cast<std::size_t>(candidates[pick(rng)]);
    TriMesh plus = mesh;
    TriMesh minus = mesh;
    plus.vertices[v] += h * cam.view;
    minus.vertices[v] -= h * cam.view;
    const double numeric = (weighted_depth(plus, cam, w) - weighted_depth(minus, cam, w)) / (2 * h);
    const double analytic = g[v].dot(cam.view);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric)));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("gradient of an all-invalid image is zero") {
  Camera cam;
  TriMesh far = flat_triangle(190.0);
  for (Vec3& v : far.vertices) v.x() += 1000.0;
  const DepthImage img = render_depth(far, cam);
  REQUIRE(img.valid_count() == 0);
  const auto g = render_depth_backward(far, cam, img, std::vector<double>(img.size(), 1.0));
  for (const Vec3& x : g) CHECK(x.isZero());
}

TEST_CASE("guidance loss values") {
  const DepthImage a = render_depth(face_mesh(), Camera{});
  CHECK(inp_loss(a, a) == 0.0);
  DepthImage b = a;
  for (std::size_t k = 0; k < b.size(); ++k)
    if (b.valid[k]) b.depth[k] += 0.7;
  std::size_t shared = 0;
  CHECK(inp_loss(a, b, &shared) == doctest::Approx(0.49).epsilon(1e-12));
  CHECK(shared == a.valid_count());
  DepthImage c = render_depth(make_template(), Camera{});
  CHECK(inp_loss(a, c) == inp_loss(c, a));
  CHECK_THROWS_AS(inp_loss(a, DepthImage::empty(128, 128)), NumericError);
}

TEST_CASE("guidance loss gradient through the renderer") {
  Camera cam;
  cam.width = cam.height = 48;
  const TriMesh& mesh = face_mesh();
  const DepthImage guide = render_depth(make_template(), cam);
  ad::Matrix x(static_cast<Eigen::Index>(mesh.vertices.size()), 3);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = mesh.vertices[i].transpose();
  // z coordinates (the view axis) of vertices around the nose.
  std::vector<Eigen::Index> coords;
  const int nose = nose_tip_vertex(make_template());
  for (int d = -2; d <= 2; ++d) {
    coords.push_back(x.rows() * 2 + nose + d);
    coords.push_back(x.rows() * 2 + nose + d * kTemplateColumns);
  }
  const double err = ad::grad_check(
      [&](ad::Tape&, ad::Var v) { return inp_loss(v, mesh.faces, cam, guide); }, x, 1e-5, coords);
  CHECK(err < 1e-3);
}

TEST_CASE("inpainting mask") {
  const DepthImage ref = render_depth(make_template(), Camera{});
  DepthImage obs = ref;
  for (std::size_t k = 0; k < obs.size(); k += 3) {
    obs.valid[k] = 0;
    obs.depth[k] = kNoDepth;
  }
  const auto mask = inpaint_mask(obs, ref);
  for (std::size_t k = 0; k < mask.size(); ++k) CHECK(mask[k] == (k % 3 == 0 && ref.valid[k] ? 1 : 0));
}

TEST_CASE("oracle and meanface providers") {
  Camera cam;
  const DepthImage truth = render_depth(face_mesh(), cam);
  const DepthImage observed = render_depth(make_template(), cam);
  const auto oracle = oracle_provider(face_mesh(), cam);
  const std::vector<std::uint8_t> none(observed.size(), 0);
  const std::vector<std::uint8_t> all(observed.size(), 1);
  const DepthImage same = oracle->inpaint(observed, none);
  CHECK(same.valid == observed.valid);
  for (std::size_t k = 0; k < same.size(); ++k)
    if (same.valid[k]) CHECK(same.depth[k] == observed.depth[k]);

  const DepthImage blank = DepthImage::empty(cam.width, cam.height);
  const DepthImage full = oracle->inpaint(blank, all);
  CHECK(full.valid == truth.valid);
  for (std::size_t k = 0; k < full.size(); ++k)
    if (full.valid[k]) CHECK(full.depth[k] == truth.depth[k]);

  DepthImage partial = observed;
  std::vector<std::uint8_t> mask(observed.size(), 0);
  for (std::size_t k = 0; k < partial.size(); k += 2) {
    partial.valid[k] = 0;
    partial.depth[k] = kNoDepth;
    mask[k] = 1;
  }
  const DepthImage mixed = oracle->inpaint(partial, mask);
  for (std::size_t k = 0; k < mixed.size(); ++k) {
    if (k % 2 == 0) {
      CHECK(mixed.valid[k] == truth.valid[k]);
      if (truth.valid[k]) CHECK(mixed.depth[k] == truth.depth[k]);
    } else if (observed.valid[k]) {
      CHECK(mixed.depth[k] == observed.depth[k]);
    }
  }
  const auto mean = meanface_provider(make_template(), cam);
  const DepthImage kept = mean->inpaint(truth, none);
  CHECK(kept.valid == truth.valid);
  for (std::size_t k = 0; k < kept.size(); ++k)
    if (kept.valid[k]) CHECK(kept.depth[k] == truth.depth[k]);
  CHECK(mean->name() == "meanface");
}

TEST_CASE("nearest-neighbour provider") {
  Camera cam;
  std::vector<DepthImage> renders{render_depth(make_template(), cam), render_depth(face_mesh(), cam),
                                  render_depth(face_mesh(), cam)};
  const DepthImage observed = renders[1];
  CHECK(nearest_render(renders, observed) == 1);  // exact match, tie with 2 resolved low
  const auto nn = nn_provider(renders);
  CHECK(nn->name() == "nn");
  CHECK_THROWS_AS(nn_provider({}), DataError);
  CHECK(make_provider("off", nullptr, nullptr, {}, cam) == nullptr);
  CHECK_THROWS_AS(make_provider("oracle", nullptr, nullptr, {}, cam), UsageError);
  CHECK_THROWS_AS(make_provider("diffusion", nullptr, nullptr, {}, cam), UsageError);
}

TEST_CASE("depth dumps") {
  const DepthImage img = render_depth(face_mesh(), Camera{});
  const auto dir = std::filesystem::temp_directory_path();
  write_depth_png(dir / "facecom_depth.png", img);
  std::ifstream in(dir / "facecom_depth.png", std::ios::binary);
  unsigned char header[26];
  in.read(reinterpret_cast<char*>(header), 26);
  CHECK(header[1] == 'P');
  CHECK(header[2] == 'N');
  CHECK(header[3] == 'G');
  CHECK(header[19] == 128);  // width, low byte
  CHECK(header[23] == 128);  // height, low byte
  CHECK(header[24] == 16);   // bit depth
  write_depth_raw(dir / "facecom_depth.f32", img);
  CHECK(std::filesystem::file_size(dir / "facecom_depth.f32") == img.size() * 4);
  const DepthImage back = read_depth_raw(dir / "facecom_depth.f32", 128, 128);
  CHECK(back.valid == img.valid);
  for (std::size_t k = 0; k < img.size(); ++k)
    if (img.valid[k]) CHECK(std::abs(back.depth[k] - img.depth[k]) < 1e-4);
  std::filesystem::remove(dir / "facecom_depth.png");
  std::filesystem::remove(dir / "facecom_depth.f32");
}
