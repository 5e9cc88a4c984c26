#include <doctest.h>

#include <filesystem>
#include <random>

#include "facecom/errors.hpp"
#include "facecom/generator.hpp"
#include "facecom/random.hpp"
#include "facecom/synthetic.hpp"
#include "support/shapes.hpp"

using namespace facecom;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

const SamplingHierarchy& small_hierarchy() {
  static const SamplingHierarchy h = build_hierarchy(testing::icosphere(2), std::vector<int>{120, 40});
  return h;
}

GeneratorConfig small_config(Variant v = Variant::Full) {
  GeneratorConfig c;
  c.variant = v;
  c.global_channels = {4, 6, 8};
  c.local_channels = {4, 4};
  c.heads = 3;
  c.global_latent = 8;
  c.local_latent = 6;
  c.latent = 10;
  c.seed = 7;
  return c;
}

// Direct evaluation of the FeaSt formula for one mesh.
Matrix feast_oracle(const Matrix& x, const std::vector<std::vector<int>>& adj, const Matrix& w, const Matrix& u,
                    const Matrix& c, const Matrix& b, int heads) {
  const Eigen::Index out = b.cols();
  Matrix y(x.rows(), out);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<int> nb = adj[static_cast<std::size_t>(i)];
    nb.push_back(static_cast<int>(i));
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(out);
    for (int j : nb) {
      Eigen::VectorXd logit(heads);
      for (int m = 0; m < heads; ++m) logit(m) = u.col(m).dot((x.row(j) - x.row(i)).transpose()) + c(0, m);
      const Eigen::VectorXd e = (logit.array() - logit.maxCoeff()).exp();
      const Eigen::VectorXd q = e / e.sum();
      for (int m = 0; m < heads; ++m) acc += q(m) * x.row(j) * w.middleCols(m * out, out);
    }
    y.row(i) = b + acc / static_cast<double>(nb.size());
  }
  return y;
}

struct FeastCase {
  int in;
  int out;
  int heads;
};

}  // namespace

TEST_CASE("feast matches direct evaluation in both evaluation orders") {
  const TriMesh mesh = testing::icosphere(1);
  const auto adj = vertex_adjacency(mesh);
  const Neighborhoods nb = Neighborhoods::with_self(adj);
  std::mt19937_64 rng(3);
  for (FeastCase fc : {FeastCase{3, 5, 4}, FeastCase{6, 2, 3}, FeastCase{4, 4, 1}}) {
    const Eigen::Index n = static_cast<Eigen::Index>(mesh.vertices.size());
    const Matrix x = random_matrix(2 * n, fc.in, rng);
    const Matrix w = random_matrix(fc.in, fc.out * fc.heads, rng);
    const Matrix u = random_matrix(fc.in, fc.heads, rng);
    const Matrix c = random_matrix(1, fc.heads, rng);
    const Matrix b = random_matrix(1, fc.out, rng);
    Tape tape;
    const Var y = feast_conv(tape.constant(x), nb, 2, tape.constant(w), tape.constant(u), tape.constant(c),
                             tape.constant(b), fc.heads);
    for (int s = 0; s < 2; ++s) {
      const Matrix expected = feast_oracle(x.middleRows(s * n, n), adj, w, u, c, b, fc.heads);
      CHECK((y.value().middleRows(s * n, n) - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("single head reduces to a plain neighbourhood mean") {
  const TriMesh mesh = testing::icosahedron();
  const auto adj = vertex_adjacency(mesh);
  const Neighborhoods nb = Neighborhoods::with_self(adj);
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(12, 3, rng);
  const Matrix w = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(1, 4, rng);
  Tape tape;
  const Var y = feast_conv(tape.constant(x), nb, 1, tape.constant(w), tape.constant(random_matrix(3, 1, rng)),
                           tape.constant(random_matrix(1, 1, rng)), tape.constant(b), 1);
  for (int i = 0; i < 12; ++i) {
    Eigen::RowVectorXd mean = x.row(i);
    for (int j : adj[static_cast<std::size_t>(i)]) mean += x.row(j);
    mean /= static_cast<double>(adj[static_cast<std::size_t>(i)].size() + 1);
    CHECK((y.value().row(i) - (mean * w + b)).norm() < 1e-12);
  }
}

TEST_CASE("constant input gives constant output") {
  const TriMesh mesh = testing::icosphere(1);
  const Neighborhoods nb = Neighborhoods::with_self(vertex_adjacency(mesh));
  Rng rng(11);
  FeastLayer layer = FeastLayer::make("l", 3, 5, 4, rng);
  Matrix x(static_cast<Eigen::Index>(mesh.vertices.size()), 3);
  x.rowwise() = Eigen::RowVector3d(0.3, -1.2, 2.0);
  Tape tape;
  const Var y = feast_forward(tape, tape.constant(x), nb, layer);
  for (Eigen::Index i = 1; i < y.rows(); ++i) CHECK((y.value().row(i) - y.value().row(0)).norm() < 1e-12);
}

TEST_CASE("attention weights form a simplex per edge") {
  const TriMesh mesh = testing::icosphere(1);
  const Neighborhoods nb = Neighborhoods::with_self(vertex_adjacency(mesh));
  Rng rng(12);
  FeastLayer layer = FeastLayer::make("l", 3, 2, 6, rng);
  std::mt19937_64 g(2);
  const Matrix q = feast_attention(random_matrix(static_cast<Eigen::Index>(mesh.vertices.size()), 3, g, 4.0), nb, layer);
  CHECK(q.rows() == nb.edge_count());
  CHECK(q.minCoeff() >= 0.0);
  for (Eigen::Index e = 0; e < q.rows(); ++e) CHECK(std::abs(q.row(e).sum() - 1.0) < 1e-12);
}

TEST_CASE("feast gradients match finite differences") {
  const TriMesh mesh = testing::icosahedron();
  const Neighborhoods nb = Neighborhoods::with_self(vertex_adjacency(mesh));
  for (FeastCase fc : {FeastCase{3, 5, 4}, FeastCase{5, 2, 3}}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(fc.in * 10 + fc.out));
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const Matrix x = random_matrix(24, fc.in, rng);
      const Matrix w = random_matrix(fc.in, fc.out * fc.heads, rng);
      const Matrix u = random_matrix(fc.in, fc.heads, rng);
      const Matrix c = random_matrix(1, fc.heads, rng);
      const Matrix b = random_matrix(1, fc.out, rng);
      const Matrix probe = random_matrix(24, fc.out, rng);
      auto loss = [&](Tape& t, Var y) { return ad::sum(ad::hadamard(y, t.constant(probe))); };
      auto run = [&](int which) {
        return [&, which](Tape& t, Var v) {
          Var xs = which == 0 ? v : t.constant(x);
          Var ws = which == 1 ? v : t.constant(w);
          Var us = which == 2 ? v : t.constant(u);
          Var cs = which == 3 ? v : t.constant(c);
          Var bs = which == 4 ? v : t.constant(b);
          return loss(t, feast_conv(xs, nb, 2, ws, us, cs, bs, fc.heads));
        };
      };
      worst = std::max(worst, ad::grad_check(run(0), x, 1e-5));
      worst = std::max(worst, ad::grad_check(run(1), w, 1e-5));
      worst = std::max(worst, ad::grad_check(run(2), u, 1e-5));
      worst = std::max(worst, ad::grad_check(run(3), c, 1e-5));
      worst = std::max(worst, ad::grad_check(run(4), b, 1e-5));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("feast rejects mismatched shapes") {
  const Neighborhoods nb = Neighborhoods::with_self(vertex_adjacency(testing::icosahedron()));
  Tape tape;
  CHECK_THROWS_AS(feast_conv(tape.constant(Matrix::Zero(11, 3)), nb, 1, tape.constant(Matrix::Zero(3, 4)),
                             tape.constant(Matrix::Zero(3, 2)), tape.constant(Matrix::Zero(1, 2)),
                             tape.constant(Matrix::Zero(1, 2)), 2),
                  NumericError);
}

TEST_CASE("regularizer value and gradient") {
  Tape tape;
  Matrix z(2, 2);
  z << 3.0, 4.0, 0.6, 0.8;
  CHECK(reg_loss(tape.constant(z)).scalar() == doctest::Approx(8.0).epsilon(1e-9));
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial)
    worst = std::max(worst, ad::grad_check([](Tape&, Var v) { return reg_loss(v); }, random_matrix(3, 5, rng), 1e-6));
  CHECK(worst < 1e-4);
}

TEST_CASE("variant names round-trip") {
  for (Variant v : {Variant::Full, Variant::GlobalOnly, Variant::LocalOnly}) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("both"), UsageError);
}

TEST_CASE("parameter counts agree with the built model") {
  for (Variant v : {Variant::Full, Variant::GlobalOnly, Variant::LocalOnly}) {
    GeneratorConfig cfg = small_config(v);
    cfg.width_scale = 1.7;
    const GeneratorModel model(small_hierarchy(), cfg);
    CHECK(model.parameter_count() == count_parameters(small_hierarchy(), cfg));
  }
}

TEST_CASE("variants are structurally distinct and parameter matched") {
  const SamplingHierarchy h = build_hierarchy(make_template(), std::vector<int>{1200, 300, 75});
  const GeneratorConfig base;
  const double full = static_cast<double>(count_parameters(h, base));
  for (Variant v : {Variant::GlobalOnly, Variant::LocalOnly}) {
    const GeneratorConfig matched = match_variant(h, base, v);
    CHECK(matched.variant == v);
    CHECK(std::abs(static_cast<double>(count_parameters(h, matched)) - full) / full < 0.10);
  }
  GeneratorModel global(small_hierarchy(), small_config(Variant::GlobalOnly));
  GeneratorModel local(small_hierarchy(), small_config(Variant::LocalOnly));
  GeneratorModel both(small_hierarchy(), small_config(Variant::Full));
  CHECK(global.has_global_path());
  CHECK_FALSE(global.has_local_path());
  CHECK(global.down_applications() == 2);
  CHECK_FALSE(local.has_global_path());
  CHECK(local.down_applications() == 0);
  CHECK(both.has_global_path());
  CHECK(both.has_local_path());
}

TEST_CASE("encode and decode shapes and determinism") {
  GeneratorModel a(small_hierarchy(), small_config());
  GeneratorModel b(small_hierarchy(), small_config());
  const TriMesh mesh = testing::bumpy_sphere(2, 0.05, 3);
  const Eigen::VectorXd za = a.encode_mesh(mesh);
  CHECK(za.size() == 10);
  CHECK(za == b.encode_mesh(mesh));
  const TriMesh da = a.decode_mesh(za);
  const TriMesh db = b.decode_mesh(za);
  CHECK(da.vertices == db.vertices);
  CHECK(da.faces == small_hierarchy().levels[0].mesh.faces);
  TriMesh wrong = testing::icosphere(1);
  CHECK_THROWS_AS(a.encode_mesh(wrong), DataError);
  CHECK_THROWS_AS(a.decode_mesh(Eigen::VectorXd::Zero(3)), DataError);
}

TEST_CASE("zero-initialized head decodes to the offset") {
  GeneratorModel model(small_hierarchy(), small_config());
  const TriMesh out = model.decode_mesh(sample_latent(10, 1));
  const TriMesh& t = small_hierarchy().levels[0].mesh;
  for (std::size_t i = 0; i < t.vertices.size(); ++i) CHECK(out.vertices[i] == t.vertices[i]);
}

TEST_CASE("decode-then-loss composite gradient") {
  GeneratorModel model(small_hierarchy(), small_config());
  // Give the zero-initialized head some weight so gradients reach z.
  std::mt19937_64 rng(9);
  for (ad::Parameter* p : model.parameters())
    if (p->name.rfind("dec/head", 0) == 0) p->value = random_matrix(p->value.rows(), p->value.cols(), rng, 0.3);
  const Matrix target = random_matrix(static_cast<Eigen::Index>(small_hierarchy().levels[0].mesh.vertices.size()), 3, rng);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix z = random_matrix(1, 10, rng, 0.5);
    worst = std::max(worst, ad::grad_check(
                                [&](Tape& t, Var v) {
                                  return ad::add(ad::mse(model.decode(t, v), t.constant(target)), reg_loss(v));
                                },
                                z, 1e-5));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("learning-rate halves every 50 epochs") {
  const TrainConfig cfg;
  CHECK(learning_rate(cfg, 0) == 1e-3);
  CHECK(learning_rate(cfg, 49) == 1e-3);
  CHECK(learning_rate(cfg, 50) == 5e-4);
  CHECK(learning_rate(cfg, 149) == 2.5e-4);
  CHECK(learning_rate(cfg, 150) == 1.25e-4);
}

namespace {

// Smoothly deformed spheres: random axis scaling plus one radial bump.
std::vector<TriMesh> small_dataset(int n) {
  std::vector<TriMesh> out;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (int i = 0; i < n; ++i) {
    TriMesh m = testing::icosphere(2);
    const Eigen::Vector3d axes(1.0 + u(rng), 1.0 + u(rng), 1.0 + u(rng));
    const Eigen::Vector3d centre = Eigen::Vector3d(u(rng), u(rng), 1.0).normalized();
    const double height = u(rng);
    for (Vec3& v : m.vertices) v = axes.cwiseProduct(v) * (1.0 + height * std::exp(-(v - centre).squaredNorm() / 0.3));
    out.push_back(std::move(m));
  }
  return out;
}

double coordinate_variance(const TriMesh& m) {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const Vec3& v : m.vertices) mean += v;
  mean /= static_cast<double>(m.vertices.size());
  double var = 0.0;
  for (const Vec3& v : m.vertices) var += (v - mean).squaredNorm();
  return var / (3.0 * static_cast<double>(m.vertices.size()));
}

}  // namespace

TEST_CASE("a single mesh is memorized") {
  GeneratorModel model(small_hierarchy(), small_config());
  const std::vector<TriMesh> data = small_dataset(1);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  train(model, data, cfg);
  const double err = reconstruction_error(model, data);
  CHECK(err * err < 0.01 * coordinate_variance(data[0]));
}

TEST_CASE("training lowers the loss and is deterministic") {
  const std::vector<TriMesh> data = small_dataset(6);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  cfg.seed = 2;
  GeneratorModel a(small_hierarchy(), small_config());
  GeneratorModel b(small_hierarchy(), small_config());
  std::vector<int> seen;
  const auto la = train(a, data, cfg, [&](const EpochStats& s) { seen.push_back(s.epoch); });
  const auto lb = train(b, data, cfg);
  REQUIRE(la.size() == 40);
  CHECK(seen.size() == 40);
  CHECK(la.back().l_mse < 0.5 * la.front().l_mse);
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i].l_mse == lb[i].l_mse);
    CHECK(la[i].l_reg == lb[i].l_reg);
  }
  CHECK(std::abs(a.latent_mean().norm() - 1.0) < 1e-12);
  CHECK(a.latent_mean() == b.latent_mean());
}

TEST_CASE("a larger regularizer weight pulls codes to the unit sphere") {
  const std::vector<TriMesh> data = small_dataset(6);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 3;
  cfg.lr = 3e-3;
  GeneratorModel weak(small_hierarchy(), small_config());
  GeneratorModel strong(small_hierarchy(), small_config());
  cfg.lambda = 0.0;
  const double reg_weak = train(weak, data, cfg).back().l_reg;
  cfg.lambda = 1.0;
  const double reg_strong = train(strong, data, cfg).back().l_reg;
  CHECK(reg_strong < reg_weak);
}

TEST_CASE("training rejects bad inputs") {
  GeneratorModel model(small_hierarchy(), small_config());
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(model, {}, cfg), DataError);
  CHECK_THROWS_AS(train(model, {testing::icosphere(1)}, cfg), DataError);
  cfg.precision = "float32";
  CHECK_THROWS_AS(train(model, small_dataset(1), cfg), UsageError);
}

TEST_CASE("samples lie on the unit sphere and are seeded") {
  const Eigen::VectorXd a = sample_latent(256, 4);
  CHECK(std::abs(a.norm() - 1.0) < 1e-12);
  CHECK(a == sample_latent(256, 4));
  CHECK(a != sample_latent(256, 5));
  GeneratorModel model(small_hierarchy(), small_config());
  CHECK(sample(model, 3).vertices == sample(model, 3).vertices);
}

TEST_CASE("checkpoint round trip") {
  GeneratorModel model(small_hierarchy(), small_config(Variant::LocalOnly));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  train(model, small_dataset(3), cfg);
  const auto path = std::filesystem::temp_directory_path() / "facecom_generator_roundtrip.fcpk";
  model.save(path, R"({"note": "x"})");
  GeneratorModel loaded = GeneratorModel::load(path);
  std::filesystem::remove(path);
  CHECK(loaded.config().variant == Variant::LocalOnly);
  CHECK(loaded.parameter_count() == model.parameter_count());
  CHECK(loaded.normalization_scale() == model.normalization_scale());
  CHECK(loaded.latent_mean() == model.latent_mean());
  const Eigen::VectorXd z = sample_latent(10, 8);
  CHECK(loaded.decode_mesh(z).vertices == model.decode_mesh(z).vertices);
  CHECK(loaded.hierarchy().levels.size() == 3);
}
