#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace facecom::cli {

struct DatasetOptions {
  int n = 512;
  std::uint64_t seed = 7;
  std::filesystem::path out;
};

struct HierarchyOptions {
  std::vector<int> targets{1200, 300, 75};
  int knn = 6;
  std::filesystem::path out;
};

struct ModelOptions {
  std::string variant = "full";
  std::vector<int> global_channels{16, 32, 64, 128};
  std::vector<int> local_channels{8, 8};
  int heads = 8;
  int global_latent = 128;
  int local_latent = 64;
  int latent = 256;
};

struct TrainOptions {
  std::filesystem::path data;
  std::filesystem::path hierarchy;  // empty: build from the template
  std::filesystem::path out;
  ModelOptions model;
  int epochs = 200;
  int batch = 16;
  double lr = 1e-3;
  int lr_halving = 50;
  double lambda = 1e-3;
  std::uint64_t seed = 0;
};

struct FitOptions {
  std::filesystem::path input;
  std::filesystem::path model;
  std::filesystem::path out;
  double trim = 0.05;
  std::string guidance = "off";
  std::filesystem::path guidance_data;  // nn provider: dataset directory
  std::filesystem::path gt;             // ground truth: oracle guidance and metrics
  double guidance_weight = -1.0;
  double reg_weight = 1e-2;
  int steps = 400;
  int restarts = 3;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

struct PostOptions {
  double threshold = 1.0;
  int rings = 4;
  int k = 8;
  double max_projection = 5.0;
};

struct CompleteOptions {
  FitOptions fit;
  PostOptions post;
  int subdivision_faces = 50000;
};

struct EvaluateOptions {
  std::filesystem::path pred;
  std::filesystem::path gt;
  std::filesystem::path defect;
  std::filesystem::path bench_dir;  // summarise every case directory below
  std::filesystem::path out;
  int subdivision_faces = 50000;
  int margin_samples = 4;
};

struct AblateOptions {
  TrainOptions train;
  std::vector<std::string> variants{"full", "global-only", "local-only"};
};

struct BenchOptions {
  std::filesystem::path model;
  std::filesystem::path data;
  std::filesystem::path out;
  std::vector<std::string> kinds{"region"};
  std::vector<double> radii{15, 30, 45};
  int seeds = 5;
  int identities = 10;
  std::string seed_vertex = "random";  // "random" or "nose"
  CompleteOptions complete;
  int workers = 0;  // 0: hardware concurrency
  std::uint64_t seed = 0;
};

// Each returns normally on success and throws facecom errors otherwise.
void make_dataset_command(const DatasetOptions& o);
void hierarchy_command(const HierarchyOptions& o);
void train_command(const TrainOptions& o, const std::string& config_snapshot);
void fit_command(const FitOptions& o, const std::string& config_snapshot);
void complete_command(const CompleteOptions& o, const std::string& config_snapshot);
void evaluate_command(const EvaluateOptions& o);
void ablate_command(const AblateOptions& o, const std::string& config_snapshot);
void bench_command(const BenchOptions& o, const std::string& config_snapshot);

}  // namespace facecom::cli
