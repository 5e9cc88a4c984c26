#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"
#include "facecom/errors.hpp"

using namespace facecom::cli;

namespace {

void add_model_options(CLI::App* app, ModelOptions& m) {
  app->add_option("--variant", m.variant, "full, global-only or local-only")->capture_default_str();
  app->add_option("--global-channels", m.global_channels, "channels per hierarchy level")->delimiter(',')
      ->capture_default_str();
  app->add_option("--local-channels", m.local_channels, "channels of the full-resolution convs")->delimiter(',')
      ->capture_default_str();
  app->add_option("--heads", m.heads)->capture_default_str();
  app->add_option("--global-latent", m.global_latent)->capture_default_str();
  app->add_option("--local-latent", m.local_latent)->capture_default_str();
  app->add_option("--latent", m.latent)->capture_default_str();
}

void add_train_options(CLI::App* app, TrainOptions& t) {
  app->add_option("--data", t.data, "dataset directory")->required();
  app->add_option("--hierarchy", t.hierarchy, "hierarchy pack (default: built from the template)");
  app->add_option("--out", t.out, "output directory")->required();
  add_model_options(app, t.model);
  app->add_option("--epochs", t.epochs)->capture_default_str();
  app->add_option("--batch", t.batch)->capture_default_str();
  app->add_option("--lr", t.lr)->capture_default_str();
  app->add_option("--lr-halving", t.lr_halving, "epochs per learning-rate halving")->capture_default_str();
  app->add_option("--lambda", t.lambda, "regularizer weight")->capture_default_str();
  app->add_option("--seed", t.seed)->capture_default_str();
}

void add_fit_options(CLI::App* app, FitOptions& f) {
  app->add_option("--input", f.input, "defect mesh or point cloud (PLY/OBJ)")->required();
  app->add_option("--model", f.model, "trained model pack")->required();
  app->add_option("--out", f.out, "output directory")->required();
  app->add_option("--trim", f.trim)->capture_default_str();
  app->add_option("--guidance", f.guidance, "off, oracle, meanface or nn")->capture_default_str();
  app->add_option("--guidance-data", f.guidance_data, "dataset directory for the nn provider");
  app->add_option("--gt", f.gt, "ground truth mesh (oracle guidance, metrics)");
  app->add_option("--guidance-weight", f.guidance_weight, "negative: default weight")->capture_default_str();
  app->add_option("--reg-weight", f.reg_weight)->capture_default_str();
  app->add_option("--steps", f.steps)->capture_default_str();
  app->add_option("--restarts", f.restarts)->capture_default_str();
  app->add_option("--fit-lr", f.lr)->capture_default_str();
  app->add_option("--seed", f.seed)->capture_default_str();
}

void add_post_options(CLI::App* app, PostOptions& p) {
  app->add_option("--threshold", p.threshold, "matched-region distance threshold (mm)")->capture_default_str();
  app->add_option("--rings", p.rings, "boundary extension width in edge rings")->capture_default_str();
  app->add_option("--knn", p.k, "matched neighbors used for blending")->capture_default_str();
  app->add_option("--max-projection", p.max_projection, "mm")->capture_default_str();
}

std::string snapshot(const CLI::App* sub) {
  return "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Face shape completion with a mesh autoencoder"};
  app.set_config("--config", "", "INI file; [section] names a subcommand, keys are long option names");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  DatasetOptions dataset;
  auto* ds = app.add_subcommand("make-dataset", "synthesize identities and the train/test split");
  ds->add_option("--n", dataset.n)->capture_default_str();
  ds->add_option("--seed", dataset.seed)->capture_default_str();
  ds->add_option("--out", dataset.out)->required();

  HierarchyOptions hierarchy;
  auto* hi = app.add_subcommand("hierarchy", "build the sampling hierarchy of the template");
  hi->add_option("--targets", hierarchy.targets, "face targets per coarser level")->delimiter(',')
      ->capture_default_str();
  hi->add_option("--knn", hierarchy.knn)->capture_default_str();
  hi->add_option("--out", hierarchy.out)->required();

  TrainOptions train;
  auto* tr = app.add_subcommand("train", "train the generator");
  add_train_options(tr, train);

  FitOptions fit;
  auto* fi = app.add_subcommand("fit", "fit the generator to a defect");
  add_fit_options(fi, fit);

  CompleteOptions complete;
  auto* co = app.add_subcommand("complete", "fit and post-process a defect");
  add_fit_options(co, complete.fit);
  add_post_options(co, complete.post);
  co->add_option("--subdivision-faces", complete.subdivision_faces)->capture_default_str();

  EvaluateOptions evaluate;
  auto* ev = app.add_subcommand("evaluate", "metrics for one completion or a bench directory");
  ev->add_option("--pred", evaluate.pred);
  ev->add_option("--gt", evaluate.gt);
  ev->add_option("--defect", evaluate.defect);
  ev->add_option("--bench-dir", evaluate.bench_dir);
  ev->add_option("--out", evaluate.out);
  ev->add_option("--subdivision-faces", evaluate.subdivision_faces)->capture_default_str();
  ev->add_option("--margin-samples", evaluate.margin_samples)->capture_default_str();

  AblateOptions ablate;
  auto* ab = app.add_subcommand("ablate", "train parameter-matched variants and compare");
  add_train_options(ab, ablate.train);
  ab->add_option("--variants", ablate.variants)->delimiter(',')->capture_default_str();

  BenchOptions bench;
  auto* be = app.add_subcommand("bench", "complete a grid of defects over the test split");
  be->add_option("--model", bench.model)->required();
  be->add_option("--data", bench.data)->required();
  be->add_option("--out", bench.out)->required();
  be->add_option("--kinds", bench.kinds, "region, fragments, keypoints")->delimiter(',')->capture_default_str();
  be->add_option("--radii", bench.radii, "mm")->delimiter(',')->capture_default_str();
  be->add_option("--seeds", bench.seeds)->capture_default_str();
  be->add_option("--identities", bench.identities, "held-out identities used")->capture_default_str();
  be->add_option("--seed-vertex", bench.seed_vertex, "random or nose")->capture_default_str();
  be->add_option("--guidance", bench.complete.fit.guidance)->capture_default_str();
  be->add_option("--guidance-weight", bench.complete.fit.guidance_weight)->capture_default_str();
  be->add_option("--steps", bench.complete.fit.steps)->capture_default_str();
  be->add_option("--restarts", bench.complete.fit.restarts)->capture_default_str();
  be->add_option("--trim", bench.complete.fit.trim)->capture_default_str();
  add_post_options(be, bench.complete.post);
  be->add_option("--subdivision-faces", bench.complete.subdivision_faces)->capture_default_str();
  be->add_option("--workers", bench.workers, "0: one per CPU")->capture_default_str();
  be->add_option("--seed", bench.seed)->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*ds) make_dataset_command(dataset);
    else if (*hi) hierarchy_command(hierarchy);
    else if (*tr) train_command(train, snapshot(tr));
    else if (*fi) fit_command(fit, snapshot(fi));
    else if (*co) complete_command(complete, snapshot(co));
    else if (*ev) evaluate_command(evaluate);
    else if (*ab) ablate_command(ablate, snapshot(ab));
    else if (*be) bench_command(bench, snapshot(be));
  } catch (const facecom::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const facecom::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const facecom::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
