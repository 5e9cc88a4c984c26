#include <benchmark/benchmark.h>

#include "facecom/fitting.hpp"
#include "facecom/generator.hpp"
#include "facecom/guidance.hpp"
#include "facecom/hierarchy.hpp"
#include "facecom/metrics.hpp"
#include "facecom/postprocess.hpp"
#include "facecom/random.hpp"
#include "facecom/synthetic.hpp"

using namespace facecom;

namespace {

const TriMesh& face() {
  static const TriMesh m = make_template();
  return m;
}

const TriMesh& other_face() {
  static const TriMesh m = [] {
    IdentityParams g;
    g.fill(0.5);
    return synth_identity(g);
  }();
  return m;
}

const SamplingHierarchy& hierarchy() {
  static const SamplingHierarchy h = build_hierarchy(face(), std::vector<int>{1200, 300, 75});
  return h;
}

GeneratorModel& model() {
  static GeneratorModel m = [] {
    GeneratorModel g(hierarchy(), GeneratorConfig{});
    g.set_normalization(stack_vertices({&face()}), 1.0);
    return g;
  }();
  return m;
}

void BM_FeastLayer(benchmark::State& state) {
  const Neighborhoods nb = Neighborhoods::with_self(vertex_adjacency(face()));
  const int cin = static_cast<int>(state.range(0));
  const int cout = static_cast<int>(state.range(1));
  Rng rng(1);
  FeastLayer layer = FeastLayer::make("bench", cin, cout, 8, rng);
  ad::Matrix x(static_cast<Eigen::Index>(face().vertices.size()), cin);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var y = feast_forward(tape, tape.constant(x), nb, layer);
    tape.backward(ad::sum(y));
    benchmark::DoNotOptimize(layer.weight.grad.data());
  }
}
BENCHMARK(BM_FeastLayer)->Args({3, 16})->Args({16, 8})->Args({8, 8})->Unit(benchmark::kMillisecond);

void BM_DecodeBackward(benchmark::State& state) {
  GeneratorModel& m = model();
  ad::Parameter z("z", ad::Matrix(m.latent_mean().transpose()));
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var out = m.decode(tape, tape.param(z), false);
    tape.backward(ad::sumsq(out));
    benchmark::DoNotOptimize(z.grad.data());
  }
}
BENCHMARK(BM_DecodeBackward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  GeneratorModel& m = model();
  const ad::Matrix x = stack_vertices({&face()});
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var z = m.encode(tape, tape.constant(x), 1, true);
    tape.backward(ad::sumsq(m.decode(tape, z, true)));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_SurfaceQueries(benchmark::State& state) {
  const SurfaceIndex index(face());
  Rng rng(2);
  std::vector<Vec3> q;
  for (int i = 0; i < 1000; ++i) q.emplace_back(80 * rng.normal(), 80 * rng.normal(), 60 + 30 * rng.normal());
  for (auto _ : state)
    for (const Vec3& p : q) benchmark::DoNotOptimize(index.closest(p).distance);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(q.size()));
}
BENCHMARK(BM_SurfaceQueries)->Unit(benchmark::kMicrosecond);

void BM_FitLoss(benchmark::State& state) {
  const TriMesh target = other_face();
  for (auto _ : state) benchmark::DoNotOptimize(fit_loss(target, face(), 0.05));
}
BENCHMARK(BM_FitLoss)->Unit(benchmark::kMillisecond);

void BM_RenderDepth(benchmark::State& state) {
  const Camera cam;
  for (auto _ : state) benchmark::DoNotOptimize(render_depth(face(), cam).valid_count());
}
BENCHMARK(BM_RenderDepth)->Unit(benchmark::kMillisecond);

void BM_LoopSubdivide(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(loop_subdivide(face(), static_cast<int>(state.range(0))).faces.size());
}
BENCHMARK(BM_LoopSubdivide)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_Chamfer(benchmark::State& state) {
  const TriMesh gt = other_face();
  for (auto _ : state) benchmark::DoNotOptimize(chamfer_unidirectional(face(), gt, 50000));
}
BENCHMARK(BM_Chamfer)->Unit(benchmark::kMillisecond);

void BM_Postprocess(benchmark::State& state) {
  DefectSpec spec;
  spec.seed_vertex = nose_tip_vertex(face());
  spec.radius = 30.0;
  const Defect d = make_defect(face(), spec);
  TriMesh fitted = face();
  for (std::size_t v = 0; v < fitted.vertices.size(); ++v) fitted.vertices[v].z() += 0.3 * std::sin(0.1 * double(v));
  for (auto _ : state) benchmark::DoNotOptimize(postprocess_pipeline(fitted, d.mesh, PostprocessConfig{}).mesh);
}
BENCHMARK(BM_Postprocess)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
