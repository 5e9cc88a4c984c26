#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "common.hpp"
#include "facecom/errors.hpp"
#include "facecom/metrics.hpp"
#include "facecom/postprocess.hpp"
#include "facecom/random.hpp"
#include "facecom/synthetic.hpp"

namespace facecom::cli {

namespace {

using nlohmann::json;

PostprocessConfig post_config(const PostOptions& p) {
  PostprocessConfig c;
  c.threshold = p.threshold;
  c.rings = p.rings;
  c.k = p.k;
  c.max_projection = p.max_projection;
  return c;
}

struct CaseOutput {
  FitResult fit;
  PostprocessResult post;
};

CaseOutput run_completion(GeneratorModel& model, const TriMesh& defect, const CompleteOptions& o,
                          const GuidanceProvider* provider, const Camera& cam) {
  const Guidance guidance{provider, cam};
  CaseOutput out;
  out.fit = fit(model, defect, fit_config(o.fit), provider ? &guidance : nullptr);
  out.post = postprocess_pipeline(out.fit.fitted, defect, post_config(o.post));
  return out;
}

// Metrics that need only the output, the defect and optionally the truth.
json completion_metrics(const CaseOutput& c, const TriMesh& defect, const TriMesh* gt, int subdivision_faces,
                        const std::vector<int>* removed_vertices) {
  json j;
  const TriMesh& mesh = c.post.mesh;
  j["fit_loss_mm"] = c.fit.final_loss.l_fit;
  j["fit_total"] = c.fit.final_loss.total;
  j["restart"] = c.fit.restart;
  j["matched_md_pre"] = c.post.stages.front().matched_md;
  j["matched_md_post"] = c.post.stages.back().matched_md;
  j["refine_rejected"] = c.post.refine_rejected;
  j["matched"] = c.post.labels.count(RegionLabel::Matched);
  j["repaired"] = c.post.labels.count(RegionLabel::Repaired);
  j["boundary_ext"] = c.post.labels.count(RegionLabel::BoundaryExt);

  j["margin_rms_mm"] = nullptr;
  if (defect.has_faces()) {
    std::vector<bool> completed(mesh.vertices.size());
    for (std::size_t v = 0; v < completed.size(); ++v) completed[v] = c.post.labels.label[v] != RegionLabel::Matched;
    const TriMesh region = face_region(mesh, completed);
    if (!region.faces.empty()) {
      try {
        j["margin_rms_mm"] = margin_fitness(region, defect).rms;
      } catch (const DataError&) {
        // closed or empty margin: no value
      }
    }
  }
  j["cd_mm"] = nullptr;
  j["md_mm"] = nullptr;
  j["removed_md_mm"] = nullptr;
  if (gt) {
    j["cd_mm"] = chamfer_unidirectional(mesh, *gt, subdivision_faces);
    j["md_mm"] = mean_point_to_surface(mesh, *gt);
    if (removed_vertices && !removed_vertices->empty()) {
      std::vector<Vec3> pts;
      for (int v : *removed_vertices) pts.push_back(mesh.vertices[static_cast<std::size_t>(v)]);
      j["removed_md_mm"] = mean_point_to_surface(pts, *gt);
    }
  }
  return j;
}

void write_case_outputs(const std::filesystem::path& dir, const CaseOutput& c, const json& metrics) {
  ensure_directory(dir);
  save_mesh(c.post.mesh, dir / "out.ply");
  write_labels(dir / "labels.json", c.post.labels);
  write_stages(dir / "stages.csv", c.post.stages);
  write_fit_log(dir / "fit_log.csv", c.fit.trajectory);
  write_fit_result(dir / "fit_result.json", c.fit);
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
}

std::string csv_value(const json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) {
    std::ostringstream s;
    s.precision(10);
    s << v.get<double>();
    return s.str();
  }
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

const std::vector<std::string> kSummaryColumns{"case",           "cd_mm",           "md_mm",
                                               "margin_rms_mm",  "matched_md_pre",  "matched_md_post",
                                               "removed_md_mm",  "removed_fraction", "kind",
                                               "identity",       "radius",          "seed",
                                               "guidance",       "fit_loss_mm"};

void write_summary(const std::filesystem::path& path, const std::vector<json>& cases) {
  std::ostringstream out;
  for (std::size_t i = 0; i < kSummaryColumns.size(); ++i) out << (i ? "," : "") << kSummaryColumns[i];
  out << '\n';
  for (const json& c : cases) {
    for (std::size_t i = 0; i < kSummaryColumns.size(); ++i)
      out << (i ? "," : "") << (c.contains(kSummaryColumns[i]) ? csv_value(c[kSummaryColumns[i]]) : "");
    out << '\n';
  }
  write_text(path, out.str());
}

std::vector<int> removed_vertices(std::size_t vertex_count, const Defect& d) {
  std::vector<char> kept(vertex_count, 0);
  for (int v : d.index_map) kept[static_cast<std::size_t>(v)] = 1;
  std::vector<int> out;
  for (std::size_t v = 0; v < vertex_count; ++v)
    if (!kept[v]) out.push_back(static_cast<int>(v));
  return out;
}

}  // namespace

void complete_command(const CompleteOptions& o, const std::string& config_snapshot) {
  require_file(o.fit.input, "--input");
  require_file(o.fit.model, "--model");
  const TriMesh defect = load_mesh(o.fit.input);
  GeneratorModel model = GeneratorModel::load(o.fit.model);
  std::unique_ptr<TriMesh> gt;
  if (!o.fit.gt.empty()) {
    require_file(o.fit.gt, "--gt");
    gt = std::make_unique<TriMesh>(load_mesh(o.fit.gt));
  }
  const Camera cam;
  const auto provider = guidance_provider(o.fit, model, gt.get(), cam);
  ensure_directory(o.fit.out);
  write_text(o.fit.out / "config.ini", config_snapshot);
  const CaseOutput c = run_completion(model, defect, o, provider.get(), cam);
  json metrics = completion_metrics(c, defect, gt.get(), o.subdivision_faces, nullptr);
  metrics["guidance"] = o.fit.guidance;
  write_case_outputs(o.fit.out, c, metrics);
  std::cerr << "matched MD " << c.post.stages.front().matched_md << " -> " << c.post.stages.back().matched_md
            << " mm\n";
}

void evaluate_command(const EvaluateOptions& o) {
  if (!o.bench_dir.empty()) {
    if (!std::filesystem::is_directory(o.bench_dir / "cases"))
      throw DataError("no cases directory in " + o.bench_dir.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(o.bench_dir / "cases"))
      if (e.is_directory() && std::filesystem::exists(e.path() / "metrics.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<json> cases;
    for (const auto& d : dirs) {
      std::ifstream in(d / "metrics.json");
      cases.push_back(json::parse(in));
    }
    write_summary((o.out.empty() ? o.bench_dir : o.out) / "summary.csv", cases);
    std::cout << cases.size() << " cases summarised\n";
    return;
  }
  require_file(o.pred, "--pred");
  require_file(o.gt, "--gt");
  const TriMesh pred = load_mesh(o.pred);
  const TriMesh gt = load_mesh(o.gt);
  json j;
  j["cd_mm"] = chamfer_unidirectional(pred, gt, o.subdivision_faces);
  j["md_mm"] = mean_point_to_surface(pred, gt);
  if (!o.defect.empty()) {
    require_file(o.defect, "--defect");
    const TriMesh defect = load_mesh(o.defect);
    const RegionLabels labels = identify_repaired(pred, defect, PostprocessConfig{}.threshold);
    j["matched_md"] = matched_md(pred, defect, labels);
    std::vector<bool> completed(pred.vertices.size());
    for (std::size_t v = 0; v < completed.size(); ++v) completed[v] = labels.label[v] != RegionLabel::Matched;
    const TriMesh region = face_region(pred, completed);
    j["margin_rms_mm"] = region.faces.empty() ? json(nullptr) : json(margin_fitness(region, defect, o.margin_samples).rms);
  }
  const std::string text = j.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    ensure_directory(o.out);
    write_text(o.out / "metrics.json", text);
  }
}

struct BenchCase {
  std::string name;
  DefectKind kind = DefectKind::Region;
  int identity = 0;
  double radius = 0.0;
  int seed = 0;
  DefectSpec spec;
};

namespace {

std::vector<BenchCase> bench_grid(const BenchOptions& o, const Dataset& data, const TriMesh& templ) {
  if (o.seeds < 1 || o.identities < 1) throw UsageError("bench: seeds and identities must be positive");
  if (data.test.empty()) throw DataError("bench: the dataset has no test split");
  std::vector<int> ids(data.test.begin(), data.test.begin() + std::min<std::ptrdiff_t>(o.identities, data.test.size()));
  const auto boundary = boundary_vertices(templ);
  std::vector<int> interior;
  for (std::size_t v = 0; v < boundary.size(); ++v)
    if (!boundary[v]) interior.push_back(static_cast<int>(v));
  const std::vector<int> landmarks = landmark_vertices(default_landmarks(templ));

  std::vector<BenchCase> cases;
  for (const std::string& kind_name : o.kinds) {
    const DefectKind kind = parse_defect_kind(kind_name);
    const std::vector<double> radii = kind == DefectKind::Keypoints ? std::vector<double>{0.0} : o.radii;
    for (double radius : radii)
      for (int s = 0; s < o.seeds; ++s)
        for (int id : ids) {
          BenchCase c;
          c.kind = kind;
          c.identity = id;
          c.radius = radius;
          c.seed = s;
          c.spec.kind = kind;
          c.spec.radius = radius;
          c.spec.seed = o.seed * 1000003ULL + static_cast<std::uint64_t>(s) * 7919ULL + static_cast<std::uint64_t>(id);
          if (kind == DefectKind::Keypoints) c.spec.landmarks = landmarks;
          if (kind == DefectKind::Region) {
            if (o.seed_vertex == "nose") {
              c.spec.seed_vertex = nose_tip_vertex(templ);
            } else if (o.seed_vertex == "random") {
              Rng rng = Rng::stream(c.spec.seed, "bench-centre");
              c.spec.seed_vertex = interior[static_cast<std::size_t>(rng.uniform() * interior.size()) % interior.size()];
            } else {
              throw UsageError("--seed-vertex must be 'random' or 'nose'");
            }
          }
          std::ostringstream name;
          name << kind_name << "_r" << static_cast<int>(std::lround(radius)) << "_s" << s << "_"
               << identity_filename(id).substr(0, identity_filename(id).find('.'));
          c.name = name.str();
          cases.push_back(std::move(c));
        }
  }
  return cases;
}

}  // namespace

void bench_command(const BenchOptions& o, const std::string& config_snapshot) {
  require_file(o.model, "--model");
  require_file(o.data, "--data");
  const Dataset data = load_dataset(o.data);
  const GeneratorModel prototype = GeneratorModel::load(o.model);
  const TriMesh& templ = prototype.template_mesh();
  const std::vector<BenchCase> cases = bench_grid(o, data, templ);
  ensure_directory(o.out / "cases");
  write_text(o.out / "config.ini", config_snapshot);

  const Camera cam;
  std::vector<DepthImage> train_renders;
  if (o.complete.fit.guidance == "nn")
    for (int id : data.train) train_renders.push_back(render_depth(data.entries[static_cast<std::size_t>(id)].mesh, cam));
  const TriMesh mean = mean_face(prototype);

  std::vector<json> results(cases.size());
  std::vector<std::string> errors(cases.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    GeneratorModel model = prototype;
    for (std::size_t i = next++; i < cases.size(); i = next++) {
      const BenchCase& bc = cases[i];
      try {
        const TriMesh& gt = data.entries[static_cast<std::size_t>(bc.identity)].mesh;
        const Defect defect = make_defect(gt, bc.spec);
        const auto provider =
            make_provider(o.complete.fit.guidance, &gt, &mean, o.complete.fit.guidance == "nn" ? train_renders
                                                                                               : std::vector<DepthImage>{},
                          cam);
        CompleteOptions co = o.complete;
        co.fit.seed = bc.spec.seed;
        const CaseOutput c = run_completion(model, defect.mesh, co, provider.get(), cam);
        const std::vector<int> removed = removed_vertices(gt.vertices.size(), defect);
        json m = completion_metrics(c, defect.mesh, &gt, o.complete.subdivision_faces, &removed);
        m["case"] = bc.name;
        m["kind"] = to_string(bc.kind);
        m["identity"] = bc.identity;
        m["radius"] = bc.radius;
        m["seed"] = bc.seed;
        m["guidance"] = o.complete.fit.guidance;
        m["removed_fraction"] = removed_area_fraction(gt, defect);
        write_case_outputs(o.out / "cases" / bc.name, c, m);
        results[i] = std::move(m);
      } catch (const std::exception& e) {
        errors[i] = e.what();
        json m;
        m["case"] = bc.name;
        m["error"] = e.what();
        results[i] = std::move(m);
      }
      std::lock_guard<std::mutex> lock(log_mutex);
      std::cerr << "[" << (i + 1) << "/" << cases.size() << "] " << bc.name
                << (errors[i].empty() ? "" : " failed: " + errors[i]) << '\n';
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(o.workers > 0 ? static_cast<std::size_t>(o.workers) : hw, cases.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  write_summary(o.out / "summary.csv", results);
  std::vector<double> margins;
  for (const json& r : results)
    if (r.contains("margin_rms_mm") && r["margin_rms_mm"].is_number()) margins.push_back(r["margin_rms_mm"].get<double>());
  const MeanSd ms = mean_sd(margins);
  json b;
  b["cases"] = cases.size();
  b["failed"] = std::count_if(errors.begin(), errors.end(), [](const std::string& e) { return !e.empty(); });
  b["margin_fitness_mm"] = {{"mean", ms.mean}, {"sd", ms.sd}, {"count", margins.size()}};
  write_text(o.out / "bench.json", b.dump(2) + "\n");
  std::cout << "margin fitness " << ms.mean << " +- " << ms.sd << " mm over " << margins.size() << " cases\n";
}

}  // namespace facecom::cli
