#include <fstream>
#include <iostream>

#include "common.hpp"
#include "facecom/errors.hpp"
#include "facecom/synthetic.hpp"

namespace facecom::cli {

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void require_file(const std::filesystem::path& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!std::filesystem::exists(path)) throw DataError(what + " not found: " + path.string());
}

FitConfig fit_config(const FitOptions& o) {
  FitConfig cfg;
  cfg.steps = o.steps;
  cfg.restarts = o.restarts;
  cfg.lr = o.lr;
  cfg.trim_fraction = o.trim;
  cfg.reg_weight = o.reg_weight;
  cfg.guidance_weight = o.guidance_weight;
  cfg.seed = o.seed;
  return cfg;
}

TriMesh mean_face(const GeneratorModel& model) {
  return mesh_from_rows(model.normalization_mean(), 0, model.template_mesh());
}

std::unique_ptr<GuidanceProvider> guidance_provider(const FitOptions& o, const GeneratorModel& model,
                                                    const TriMesh* ground_truth, const Camera& cam) {
  if (o.guidance == "off") return nullptr;
  if (o.guidance == "oracle" && !ground_truth) throw UsageError("oracle guidance needs --gt");
  std::vector<DepthImage> renders;
  if (o.guidance == "nn") {
    require_file(o.guidance_data, "--guidance-data");
    const Dataset data = load_dataset(o.guidance_data);
    for (int id : data.train) renders.push_back(render_depth(data.entries[static_cast<std::size_t>(id)].mesh, cam));
  }
  const TriMesh mean = mean_face(model);
  return make_provider(o.guidance, ground_truth, &mean, std::move(renders), cam);
}

void fit_command(const FitOptions& o, const std::string& config_snapshot) {
  require_file(o.input, "--input");
  require_file(o.model, "--model");
  const TriMesh defect = load_mesh(o.input);
  GeneratorModel model = GeneratorModel::load(o.model);
  std::unique_ptr<TriMesh> gt;
  if (!o.gt.empty()) {
    require_file(o.gt, "--gt");
    gt = std::make_unique<TriMesh>(load_mesh(o.gt));
  }
  const Camera cam;
  const auto provider = guidance_provider(o, model, gt.get(), cam);
  const Guidance guidance{provider.get(), cam};

  ensure_directory(o.out);
  write_text(o.out / "config.ini", config_snapshot);
  const FitResult r = fit(model, defect, fit_config(o), provider ? &guidance : nullptr);
  write_fit_log(o.out / "fit_log.csv", r.trajectory);
  write_fit_result(o.out / "fit_result.json", r);
  save_mesh(r.fitted, o.out / "fitted.ply");
  for (const std::string& f : r.failures) std::cerr << "warning: " << f << '\n';
  std::cerr << "fit loss " << r.final_loss.l_fit << " mm (restart " << r.restart << ")\n";
}

}  // namespace facecom::cli
