#include <chrono>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "common.hpp"
#include "facecom/errors.hpp"
#include "facecom/hierarchy.hpp"
#include "facecom/synthetic.hpp"

namespace facecom::cli {

void make_dataset_command(const DatasetOptions& o) {
  if (o.n < 1) throw UsageError("--n must be positive");
  const Dataset data = make_dataset(o.n, o.seed);
  save_dataset(o.out, data);
  std::cout << "wrote " << data.entries.size() << " identities (" << data.train.size() << " train, "
            << data.test.size() << " test) to " << o.out.string() << '\n';
}

namespace {

SamplingHierarchy default_hierarchy(const std::vector<int>& targets, int knn) {
  return build_hierarchy(make_template(), targets, knn);
}

std::vector<TriMesh> split_meshes(const Dataset& data, const std::vector<int>& ids) {
  std::vector<TriMesh> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(data.entries[static_cast<std::size_t>(id)].mesh);
  return out;
}

GeneratorConfig generator_config(const ModelOptions& m, std::uint64_t seed) {
  GeneratorConfig c;
  c.global_channels = m.global_channels;
  c.local_channels = m.local_channels;
  c.heads = m.heads;
  c.global_latent = m.global_latent;
  c.local_latent = m.local_latent;
  c.latent = m.latent;
  c.seed = seed;
  return c;
}

}  // namespace

void hierarchy_command(const HierarchyOptions& o) {
  const SamplingHierarchy h = default_hierarchy(o.targets, o.knn);
  save_hierarchy(o.out, h);
  std::cout << "levels:";
  for (const MeshLevel& l : h.levels) std::cout << ' ' << l.mesh.vertices.size();
  std::cout << '\n';
}

struct TrainSummary {
  double train_error = 0.0;
  double heldout_error = 0.0;
  double l_mse = 0.0;
  double l_reg = 0.0;
  std::size_t parameters = 0;
  double width_scale = 1.0;
};

namespace {

TrainSummary train_one(const TrainOptions& o, Variant variant, const std::filesystem::path& out,
                       const std::string& config_snapshot) {
  require_file(o.data, "--data");
  const Dataset data = load_dataset(o.data);
  SamplingHierarchy h;
  if (o.hierarchy.empty()) {
    h = default_hierarchy(HierarchyOptions{}.targets, HierarchyOptions{}.knn);
  } else {
    require_file(o.hierarchy, "--hierarchy");
    h = load_hierarchy(o.hierarchy);
  }
  GeneratorConfig cfg = generator_config(o.model, o.seed);
  if (variant != Variant::Full) cfg = match_variant(h, cfg, variant);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.lr = o.lr;
  tc.lr_halving_epochs = o.lr_halving;
  tc.lambda = o.lambda;
  tc.seed = o.seed;

  ensure_directory(out);
  write_text(out / "config.ini", config_snapshot);
  GeneratorModel model(std::move(h), cfg);
  const std::vector<TriMesh> train_set = split_meshes(data, data.train);
  const std::vector<TriMesh> test_set = split_meshes(data, data.test);
  std::cerr << to_string(variant) << ": " << model.parameter_count() << " parameters, " << train_set.size()
            << " training meshes\n";
  const auto start = std::chrono::steady_clock::now();
  const auto log = train(model, train_set, tc, [&](const EpochStats& s) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "epoch " << s.epoch << " lr " << s.lr << " mse " << s.l_mse << " reg " << s.l_reg << " ("
              << static_cast<int>(sec) << " s)\n";
  });
  write_train_log(out / "train_log.csv", log);

  TrainSummary s;
  s.train_error = reconstruction_error(model, train_set);
  s.heldout_error = test_set.empty() ? 0.0 : reconstruction_error(model, test_set);
  s.l_mse = log.back().l_mse;
  s.l_reg = log.back().l_reg;
  s.parameters = model.parameter_count();
  s.width_scale = cfg.width_scale;

  nlohmann::json j;
  j["variant"] = to_string(variant);
  j["parameters"] = s.parameters;
  j["width_scale"] = s.width_scale;
  j["final_l_mse"] = s.l_mse;
  j["final_l_reg"] = s.l_reg;
  j["train_error_mm"] = s.train_error;
  j["heldout_error_mm"] = s.heldout_error;
  model.save(out / "model.pack", j.dump());
  write_text(out / "train.json", j.dump(2) + "\n");
  std::cerr << "held-out error " << s.heldout_error << " mm\n";
  return s;
}

}  // namespace

void train_command(const TrainOptions& o, const std::string& config_snapshot) {
  train_one(o, parse_variant(o.model.variant), o.out, config_snapshot);
}

void ablate_command(const AblateOptions& o, const std::string& config_snapshot) {
  if (o.variants.empty()) throw UsageError("--variants is empty");
  ensure_directory(o.train.out);
  std::string csv = "variant,parameters,width_scale,final_l_mse,final_l_reg,train_error_mm,heldout_error_mm\n";
  for (const std::string& name : o.variants) {
    const Variant v = parse_variant(name);
    const TrainSummary s = train_one(o.train, v, o.train.out / name, config_snapshot);
    std::ostringstream row;
    row.precision(10);
    row << name << ',' << s.parameters << ',' << s.width_scale << ',' << s.l_mse << ',' << s.l_reg << ','
        << s.train_error << ',' << s.heldout_error << '\n';
    csv += row.str();
  }
  write_text(o.train.out / "ablation.csv", csv);
}

}  // namespace facecom::cli
