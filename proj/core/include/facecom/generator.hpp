#pragma once

// Mesh autoencoder: FeaStNet convolutions over a fixed sampling hierarchy,
// a global (pooled) and a local (full-resolution) path fused into a 256-d
// latent code, and a mirrored decoder.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "facecom/autodiff.hpp"
#include "facecom/hierarchy.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

class Rng;

// Neighbor lists in CSR form; every vertex lists itself among its neighbors.
struct Neighborhoods {
  std::vector<int> offsets;  // size N + 1
  std::vector<int> indices;

  static Neighborhoods with_self(const std::vector<std::vector<int>>& adjacency);
  int vertex_count() const { return static_cast<int>(offsets.size()) - 1; }
  int edge_count() const { return static_cast<int>(indices.size()); }
};

struct FeastLayer {
  int in_channels = 0;
  int out_channels = 0;
  int heads = 0;
  ad::Parameter weight;          // in x (heads * out), head m in columns [m*out, (m+1)*out)
  ad::Parameter attention;       // in x heads (u_m as columns)
  ad::Parameter attention_bias;  // 1 x heads (c_m)
  ad::Parameter bias;            // 1 x out

  // Glorot-uniform weights and attention vectors, zero biases.
  static FeastLayer make(const std::string& name, int in, int out, int heads, Rng& rng);
  static FeastLayer zeros(const std::string& name, int in, int out, int heads);
  std::vector<ad::Parameter*> parameters();
};

// y_i = b + 1/|N(i)| sum_{j in N(i)} sum_m q_m(x_i, x_j) W_m^T x_j with
// q = softmax_m(u_m^T (x_j - x_i) + c_m). x stacks `batch` meshes of
// nb.vertex_count() rows each.
ad::Var feast_conv(ad::Var x, const Neighborhoods& nb, int batch, ad::Var weight, ad::Var attention,
                   ad::Var attention_bias, ad::Var bias, int heads);
ad::Var feast_forward(ad::Tape& tape, ad::Var x, const Neighborhoods& nb, FeastLayer& layer, int batch = 1,
                      bool trainable = true);
// Attention weights per (edge, head) for a single mesh, rows in CSR order.
ad::Matrix feast_attention(const ad::Matrix& x, const Neighborhoods& nb, const FeastLayer& layer);

struct DenseLayer {
  ad::Parameter weight;  // in x out
  ad::Parameter bias;    // 1 x out

  static DenseLayer make(const std::string& name, int in, int out, Rng& rng);
  std::vector<ad::Parameter*> parameters();
};

// (||z_b|| - 1)^2 averaged over the rows of z, with ||z|| := sqrt(||z||^2 + 1e-12).
ad::Var reg_loss(ad::Var z);

enum class Variant { Full, GlobalOnly, LocalOnly };
std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct GeneratorConfig {
  Variant variant = Variant::Full;
  std::vector<int> global_channels{16, 32, 64, 128};  // one per hierarchy level
  std::vector<int> local_channels{8, 8};
  int heads = 8;
  int global_latent = 128;
  int local_latent = 64;
  int latent = 256;
  double width_scale = 1.0;  // multiplies every channel count
  std::uint64_t seed = 0;
};

// Parameter count of the model that GeneratorModel(h, cfg) would build.
std::size_t count_parameters(const SamplingHierarchy& h, const GeneratorConfig& cfg);

// Returns `base` switched to `variant` with width_scale chosen so that its
// parameter count is as close as possible to the full model built from `base`.
GeneratorConfig match_variant(const SamplingHierarchy& h, const GeneratorConfig& base, Variant variant);

class GeneratorModel {
 public:
  GeneratorModel(SamplingHierarchy hierarchy, GeneratorConfig cfg);

  const GeneratorConfig& config() const { return cfg_; }
  const SamplingHierarchy& hierarchy() const { return hierarchy_; }
  const TriMesh& template_mesh() const { return hierarchy_.levels.front().mesh; }
  int vertex_count() const { return static_cast<int>(template_mesh().vertices.size()); }
  int latent_dim() const { return cfg_.latent; }

  // Inputs are normalized as (X - mean) / scale; outputs are offset + scale * head.
  // Also resets the trainable output offset to `mean`.
  void set_normalization(const ad::Matrix& mean, double scale);
  const ad::Matrix& normalization_mean() const { return mean_; }
  double normalization_scale() const { return scale_; }

  // x stacks `batch` meshes ((batch * N) x 3); returns batch x latent.
  ad::Var encode(ad::Tape& tape, ad::Var x, int batch, bool trainable = false);
  // z is batch x latent; returns (batch * N) x 3.
  ad::Var decode(ad::Tape& tape, ad::Var z, bool trainable = false);

  Eigen::VectorXd encode_mesh(const TriMesh& mesh);
  TriMesh decode_mesh(const Eigen::VectorXd& z);

  std::vector<ad::Parameter*> parameters();
  std::size_t parameter_count() const;
  bool has_global_path() const { return cfg_.variant != Variant::LocalOnly; }
  bool has_local_path() const { return cfg_.variant != Variant::GlobalOnly; }
  // Number of down-transform applications in one encode.
  int down_applications() const;

  // Starting point for fitting: normalized mean of training encodings.
  const Eigen::VectorXd& latent_mean() const { return latent_mean_; }
  void set_latent_mean(const Eigen::VectorXd& z) { latent_mean_ = z; }

  void save(const std::filesystem::path& path, const std::string& extra_json = "{}") const;
  static GeneratorModel load(const std::filesystem::path& path);

 private:
  ad::Var stacked(ad::Tape& tape, const ad::Matrix& m, int batch);
  ad::Var stacked(ad::Tape& tape, ad::Var v, int batch);

  SamplingHierarchy hierarchy_;
  GeneratorConfig cfg_;
  std::vector<Neighborhoods> neighborhoods_;

  std::vector<FeastLayer> enc_global_;
  DenseLayer enc_global_dense_;
  std::vector<FeastLayer> enc_local_;
  DenseLayer enc_local_dense_;
  DenseLayer fuse_;
  DenseLayer split_;
  DenseLayer dec_global_dense_;
  std::vector<FeastLayer> dec_global_;
  DenseLayer dec_local_dense_;
  std::vector<FeastLayer> dec_local_;
  FeastLayer head_;
  ad::Parameter offset_;

  ad::Matrix mean_;
  double scale_ = 1.0;
  Eigen::VectorXd latent_mean_;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-3;
  int lr_halving_epochs = 50;
  double lambda = 1e-3;
  std::string precision = "float64";
  std::uint64_t seed = 0;
};

// lr * 0.5^floor(epoch / lr_halving_epochs), epochs counted from 0.
double learning_rate(const TrainConfig& cfg, int epoch);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double l_mse = 0.0;  // per-coordinate MSE in normalized units (mm^2 / scale^2)
  double l_reg = 0.0;
};

// Sets normalization from the data, then runs Adam on L_MSE + lambda L_reg.
// Samples within a batch run on one tape; the epoch order comes from the
// "shuffle" stream of cfg.seed. Stores the normalized mean of up to 16
// training encodings as the model's latent mean.
std::vector<EpochStats> train(GeneratorModel& model, const std::vector<TriMesh>& data, const TrainConfig& cfg,
                              const std::function<void(const EpochStats&)>& on_epoch = {});

void write_train_log(const std::filesystem::path& path, const std::vector<EpochStats>& log);

// Mean per-vertex L2 error of decode(encode(x)) over `data`, in mm.
double reconstruction_error(GeneratorModel& model, const std::vector<TriMesh>& data);

// z uniform on the unit sphere (normalized Gaussian from the "sample" stream).
Eigen::VectorXd sample_latent(int dim, std::uint64_t seed);
TriMesh sample(GeneratorModel& model, std::uint64_t seed);

// Row-stacks vertex positions of equal-size meshes.
ad::Matrix stack_vertices(const std::vector<const TriMesh*>& meshes);
TriMesh mesh_from_rows(const ad::Matrix& rows, Eigen::Index first_row, const TriMesh& topology);

}  // namespace facecom
