#pragma once

// Completion by fitting: find a latent code z and a rigid transform T such
// that T(decode(z)) explains the observed part of a scan.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facecom/autodiff.hpp"
#include "facecom/generator.hpp"
#include "facecom/guidance.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

// Per-point distances to a candidate surface with the closest faces frozen.
struct FitDistances {
  std::vector<SurfaceHit> hits;
  std::vector<std::uint8_t> kept;  // 0 for the trimmed (farthest) points
  std::size_t kept_count = 0;
};

// Number of points dropped by trimming: ceil(trim_fraction * n).
std::size_t trimmed_count(std::size_t n, double trim_fraction);

// Exact distances from every point to `candidate`, then marks the
// trimmed_count largest (ties: higher index trimmed first) as not kept.
FitDistances fit_distances(std::span<const Vec3> points, const TriMesh& candidate, double trim_fraction);

// Mean distance over the kept points. Throws UsageError when trimming
// removes every point or trim_fraction is outside [0, 1).
double fit_loss(const TriMesh& defect, const TriMesh& candidate, double trim_fraction);

// Tape version: `vertices` (N x 3) are the candidate positions on `faces`.
// The gradient flows through closest = sum_k b_k v_k with the closest face
// and barycentrics fixed.
ad::Var fit_loss(ad::Var vertices, const std::vector<Face>& faces, std::span<const Vec3> points,
                 double trim_fraction);

// R(rotation) v + translation for every row of `vertices`; rotation and
// translation are 1 x 3 axis-angle and offset rows.
ad::Var rigid_transform(ad::Var vertices, ad::Var rotation, ad::Var translation);

// Maps an axis-angle vector with |omega| > pi to the equivalent shorter one.
Vec3 short_rotation(const Vec3& omega);

struct InitReport {
  std::string chosen;  // "identity", "centroid", "pca0".."pca3" or "translation-only"
  double loss = 0.0;
};

// Pose taking `reference` onto `defect`. Candidates are the identity, the
// centroid shift, and the four proper rotations aligning principal axes; the
// one with the lowest untrimmed fit loss wins (ties: earlier candidate).
// With fewer than 3 points or a rank-deficient covariance only the centroid
// shift is returned.
RigidTransform init_transform(const TriMesh& defect, const TriMesh& reference, InitReport* report = nullptr);

struct FitConfig {
  int steps = 400;
  double lr = 0.05;
  double lr_final = 0.005;           // cosine decay target
  double rotation_lr_scale = 0.02;   // rad per unit lr
  double translation_lr_scale = 1.0; // mm per unit lr
  double trim_fraction = 0.05;
  double reg_weight = 1e-2;          // lambda_2
  double guidance_weight = -1.0;     // lambda_1; negative selects the default for the guidance mode
  std::string z_init = "mean";       // "mean" (model latent mean) or "unit" (e_0)
  std::string transform_init = "auto";  // "auto" (init_transform) or "identity"
  int restarts = 3;
  double restart_sigma = 0.3;
  std::uint64_t seed = 0;
};

inline constexpr double kDefaultGuidanceWeight = 1e-3;

// Cosine decay from cfg.lr at step 0 to cfg.lr_final at the last step.
double fit_learning_rate(const FitConfig& cfg, int step);

struct FitStep {
  double l_fit = 0.0;
  double l_inp = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
};

struct FitResult {
  Eigen::VectorXd z;
  RigidTransform transform;
  TriMesh fitted;  // apply_transform(decode(z), transform)
  std::vector<FitStep> trajectory;  // chosen restart, one entry per step
  FitStep final_loss;               // at the returned parameters
  int restart = 0;
  std::vector<double> restart_losses;   // NaN for restarts that diverged
  std::vector<std::string> failures;    // one message per diverged restart
  std::string init;                     // init_transform choice
};

struct Guidance {
  const GuidanceProvider* provider = nullptr;
  Camera camera;
};

// Joint Adam over z and T minimizing L_fit + lambda_1 L_inp + lambda_2 L_reg.
// Closest faces and the fit render are recomputed every step; the guidance
// image is computed once per fit. Returns the lowest-total state seen over
// all restarts. Throws NumericError when every restart diverges.
FitResult fit(GeneratorModel& model, const TriMesh& defect, const FitConfig& cfg, const Guidance* guidance = nullptr);

struct Registration {
  TriMesh mesh;
  std::vector<int> correspondence;  // template vertex i -> mesh vertex
};

Registration registration_output(const FitResult& result);

// step,l_fit,l_inp,l_reg,total
void write_fit_log(const std::filesystem::path& path, const std::vector<FitStep>& trajectory);
// z, transform, restart chosen and per-restart losses.
void write_fit_result(const std::filesystem::path& path, const FitResult& result);

}  // namespace facecom
