#include "facecom/fitting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "facecom/errors.hpp"
#include "facecom/random.hpp"

namespace facecom {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

std::size_t trimmed_count(std::size_t n, double trim_fraction) {
  if (!(trim_fraction >= 0.0 && trim_fraction < 1.0)) throw UsageError("trim fraction must lie in [0, 1)");
  return static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n) - 1e-9));
}

FitDistances fit_distances(std::span<const Vec3> points, const TriMesh& candidate, double trim_fraction) {
  if (points.empty()) throw DataError("fit loss: the input has no points");
  if (candidate.faces.empty()) throw DataError("fit loss: the candidate has no faces");
  const std::size_t drop = trimmed_count(points.size(), trim_fraction);
  if (drop >= points.size()) throw UsageError("fit loss: trimming removes every point");
  const SurfaceIndex index(candidate);
  FitDistances out;
  out.hits.reserve(points.size());
  for (const Vec3& p : points) out.hits.push_back(index.closest(p));
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.hits[a].distance != out.hits[b].distance) return out.hits[a].distance < out.hits[b].distance;
    return a < b;
  });
  out.kept.assign(points.size(), 1);
  for (std::size_t k = points.size() - drop; k < points.size(); ++k) out.kept[order[k]] = 0;
  out.kept_count = points.size() - drop;
  return out;
}

namespace {

double mean_kept(const FitDistances& d) {
  double total = 0.0;
  for (std::size_t i = 0; i < d.hits.size(); ++i)
    if (d.kept[i]) total += d.hits[i].distance;
  return total / static_cast<double>(d.kept_count);
}

}  // namespace

double fit_loss(const TriMesh& defect, const TriMesh& candidate, double trim_fraction) {
  return mean_kept(fit_distances(defect.vertices, candidate, trim_fraction));
}

Var fit_loss(Var vertices, const std::vector<Face>& faces, std::span<const Vec3> points, double trim_fraction) {
  if (vertices.cols() != 3) throw NumericError("fit loss: candidate vertices must be N x 3");
  TriMesh candidate;
  candidate.faces = faces;
  candidate.vertices.resize(static_cast<std::size_t>(vertices.rows()));
  for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    candidate.vertices[static_cast<std::size_t>(i)] = vertices.value().row(i).transpose();
  auto d = std::make_shared<FitDistances>(fit_distances(points, candidate, trim_fraction));
  Matrix out(1, 1);
  out(0, 0) = mean_kept(*d);
  std::vector<Vec3> pts(points.begin(), points.end());
  return vertices.tape()->record(
      {vertices}, std::move(out),
      [d, faces, pts = std::move(pts)](const Matrix& g, std::span<Matrix* const> gi) {
        if (!gi[0]) return;
        const double scale = g(0, 0) / static_cast<double>(d->kept_count);
        for (std::size_t i = 0; i < d->hits.size(); ++i) {
          const SurfaceHit& h = d->hits[i];
          if (!d->kept[i] || h.distance <= 0.0) continue;
          const Vec3 dir = (h.closest_point - pts[i]) / h.distance;
          const Face& f = faces[static_cast<std::size_t>(h.face_index)];
          for (int k = 0; k < 3; ++k)
            gi[0]->row(f[static_cast<std::size_t>(k)]) += (scale * h.barycentric(k)) * dir.transpose();
        }
      });
}

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

// dR/d omega_i for the Rodrigues map.
std::array<Mat3, 3> rotation_derivatives(const Vec3& omega) {
  std::array<Mat3, 3> d;
  const double theta2 = omega.squaredNorm();
  if (theta2 < 1e-16) {
    for (int i = 0; i < 3; ++i) d[static_cast<std::size_t>(i)] = skew(Vec3::Unit(i));
    return d;
  }
  const Mat3 r = axis_angle_to_matrix(omega);
  const Mat3 wx = skew(omega);
  for (int i = 0; i < 3; ++i) {
    const Vec3 col = omega.cross((Mat3::Identity() - r) * Vec3::Unit(i));
    d[static_cast<std::size_t>(i)] = (omega(i) * wx + skew(col)) * r / theta2;
  }
  return d;
}

}  // namespace

Var rigid_transform(Var vertices, Var rotation, Var translation) {
  if (vertices.cols() != 3 || rotation.rows() != 1 || rotation.cols() != 3 || translation.rows() != 1 ||
      translation.cols() != 3)
    throw NumericError("rigid transform: expected N x 3 vertices and 1 x 3 rotation and translation");
  const Vec3 omega = rotation.value().row(0).transpose();
  const Mat3 r = axis_angle_to_matrix(omega);
  Matrix out = vertices.value() * r.transpose();
  out.rowwise() += translation.value().row(0);
  const Matrix* v = &vertices.value();
  return vertices.tape()->record(
      {vertices, rotation, translation}, std::move(out),
      [v, r, omega](const Matrix& g, std::span<Matrix* const> gi) {
        if (gi[0]) gi[0]->noalias() += g * r;
        if (gi[1]) {
          const Mat3 m = g.transpose() * *v;
          const auto d = rotation_derivatives(omega);
          for (int i = 0; i < 3; ++i) (*gi[1])(0, i) += d[static_cast<std::size_t>(i)].cwiseProduct(m).sum();
        }
        if (gi[2]) gi[2]->row(0) += g.colwise().sum();
      });
}

Vec3 short_rotation(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta <= M_PI) return omega;
  const double wrapped = std::remainder(theta, 2.0 * M_PI);  // in [-pi, pi]
  return omega / theta * wrapped;
}

RigidTransform init_transform(const TriMesh& defect, const TriMesh& reference, InitReport* report) {
  if (defect.vertices.empty() || reference.vertices.empty()) throw DataError("init transform: empty input");
  const Vec3 cd = centroid(defect.vertices);
  const Vec3 cr = centroid(reference.vertices);
  auto covariance = [](const std::vector<Vec3>& pts, const Vec3& c) {
    Mat3 m = Mat3::Zero();
    for (const Vec3& p : pts) m += (p - c) * (p - c).transpose();
    return Mat3(m / static_cast<double>(pts.size()));
  };
  RigidTransform shift;
  shift.translation = cd - cr;
  const Eigen::SelfAdjointEigenSolver<Mat3> ed(covariance(defect.vertices, cd));
  const Eigen::SelfAdjointEigenSolver<Mat3> er(covariance(reference.vertices, cr));
  const bool degenerate = defect.vertices.size() < 3 || ed.eigenvalues()(0) <= 1e-9 * ed.eigenvalues()(2) ||
                          er.eigenvalues()(0) <= 1e-9 * er.eigenvalues()(2);
  if (degenerate) {
    if (report) {
      report->chosen = "translation-only";
      report->loss = std::numeric_limits<double>::quiet_NaN();
    }
    return shift;
  }

  std::vector<std::pair<std::string, RigidTransform>> candidates{{"identity", RigidTransform::identity()},
                                                                 {"centroid", shift}};
  const Mat3 a = ed.eigenvectors();
  const Mat3 b = er.eigenvectors();
  const double det = a.determinant() * b.determinant();
  int k = 0;
  for (double s0 : {1.0, -1.0})
    for (double s1 : {1.0, -1.0}) {
      const Eigen::Vector3d s(s0, s1, s0 * s1 * det);
      const Mat3 r = a * s.asDiagonal() * b.transpose();
      candidates.emplace_back("pca" + std::to_string(k++), RigidTransform::from_matrix(r, cd - r * cr));
    }
  std::size_t best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double loss = fit_loss(defect, apply_transform(reference, candidates[i].second), 0.0);
    if (loss < best_loss) {
      best_loss = loss;
      best = i;
    }
  }
  if (report) {
    report->chosen = candidates[best].first;
    report->loss = best_loss;
  }
  return candidates[best].second;
}

double fit_learning_rate(const FitConfig& cfg, int step) {
  if (cfg.steps <= 1) return cfg.lr;
  const double t = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(M_PI * t));
}

namespace {

struct State {
  Eigen::VectorXd z;
  Vec3 rotation;
  Vec3 translation;
  FitStep loss;
};

Matrix as_row(const Eigen::VectorXd& v) { return Matrix(v.transpose()); }

void validate(const FitConfig& cfg) {
  if (cfg.steps < 1) throw UsageError("fit: steps must be at least 1");
  if (cfg.restarts < 1) throw UsageError("fit: restarts must be at least 1");
  if (!(cfg.lr > 0.0) || !(cfg.lr_final > 0.0)) throw UsageError("fit: learning rates must be positive");
  if (cfg.reg_weight < 0.0) throw UsageError("fit: regularizer weight must be non-negative");
  if (cfg.rotation_lr_scale < 0.0 || cfg.translation_lr_scale < 0.0) throw UsageError("fit: lr scales must be non-negative");
  trimmed_count(1, cfg.trim_fraction);
  if (cfg.z_init != "mean" && cfg.z_init != "unit") throw UsageError("fit: z init must be 'mean' or 'unit'");
  if (cfg.transform_init != "auto" && cfg.transform_init != "identity")
    throw UsageError("fit: transform init must be 'auto' or 'identity'");
}

}  // namespace

FitResult fit(GeneratorModel& model, const TriMesh& defect, const FitConfig& cfg, const Guidance* guidance) {
  validate(cfg);
  if (defect.vertices.empty()) throw DataError("fit: the input has no vertices");
  const bool guided = guidance && guidance->provider;
  const double lambda_inp = guided ? (cfg.guidance_weight < 0.0 ? kDefaultGuidanceWeight : cfg.guidance_weight) : 0.0;
  const std::vector<Face>& faces = model.template_mesh().faces;

  Eigen::VectorXd z_base;
  if (cfg.z_init == "mean") {
    z_base = model.latent_mean();
  } else {
    z_base = Eigen::VectorXd::Zero(model.latent_dim());
    z_base(0) = 1.0;
  }
  const TriMesh reference = model.decode_mesh(z_base);
  FitResult result;
  RigidTransform t0;
  if (cfg.transform_init == "auto") {
    InitReport rep;
    t0 = init_transform(defect, reference, &rep);
    result.init = rep.chosen;
  } else {
    result.init = "identity";
  }

  DepthImage guide;
  bool use_guide = false;
  if (guided && lambda_inp > 0.0) {
    const Camera& cam = guidance->camera;
    const DepthImage observed = render_depth(defect, cam);
    const DepthImage initial = render_depth(apply_transform(reference, t0), cam);
    guide = guidance->provider->inpaint(observed, inpaint_mask(observed, initial));
    use_guide = guide.valid_count() > 0;
  }

  auto evaluate = [&](Tape& tape, Parameter& pz, Parameter& pr, Parameter& pt, FitStep& step) {
    const Var z = tape.param(pz);
    const Var fitted = rigid_transform(model.decode(tape, z, false), tape.param(pr), tape.param(pt));
    const Var l_fit = fit_loss(fitted, faces, defect.vertices, cfg.trim_fraction);
    const Var l_reg = reg_loss(z);
    Var total = ad::add(l_fit, ad::scale(l_reg, cfg.reg_weight));
    step.l_fit = l_fit.scalar();
    step.l_reg = l_reg.scalar();
    step.l_inp = 0.0;
    if (use_guide) {
      try {
        const Var l_inp = inp_loss(fitted, faces, guidance->camera, guide);
        step.l_inp = l_inp.scalar();
        total = ad::add(total, ad::scale(l_inp, lambda_inp));
      } catch (const NumericError&) {
        // The fit has moved out of the guidance image; no guidance this step.
      }
    }
    step.total = total.scalar();
    return total;
  };

  std::vector<State> best_states;
  std::vector<std::vector<FitStep>> trajectories;
  for (int r = 0; r < cfg.restarts; ++r) {
    Eigen::VectorXd z = z_base;
    if (r > 0) {
      Rng rng = Rng::stream(cfg.seed, "restart", static_cast<std::uint64_t>(r));
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) += cfg.restart_sigma * rng.normal();
      z.normalize();
    }
    Parameter pz("z", as_row(z));
    Parameter pr("rotation", Matrix(t0.rotation.transpose()));
    Parameter pt("translation", Matrix(t0.translation.transpose()));
    ad::AdamState sz, sr, st;
    State best;
    best.loss.total = std::numeric_limits<double>::infinity();
    std::vector<FitStep> trajectory;
    std::string failure;
    for (int step = 0; step <= cfg.steps; ++step) {
      Tape tape;
      FitStep losses;
      const Var total = evaluate(tape, pz, pr, pt, losses);
      if (!std::isfinite(losses.total)) {
        failure = "restart " + std::to_string(r) + ": non-finite loss at step " + std::to_string(step);
        break;
      }
      if (step < cfg.steps) trajectory.push_back(losses);
      if (losses.total < best.loss.total) {
        best.z = pz.value.row(0).transpose();
        best.rotation = pr.value.row(0).transpose();
        best.translation = pt.value.row(0).transpose();
        best.loss = losses;
      }
      if (step == cfg.steps) break;
      pz.zero_grad();
      pr.zero_grad();
      pt.zero_grad();
      tape.backward(total);
      const double lr = fit_learning_rate(cfg, step);
      Parameter* zp[] = {&pz};
      Parameter* rp[] = {&pr};
      Parameter* tp[] = {&pt};
      ad::adam_step(zp, sz, lr);
      ad::adam_step(rp, sr, lr * cfg.rotation_lr_scale);
      ad::adam_step(tp, st, lr * cfg.translation_lr_scale);
      pr.value.row(0) = short_rotation(pr.value.row(0).transpose()).transpose();
    }
    if (!failure.empty()) {
      result.failures.push_back(failure);
      best.loss.total = std::numeric_limits<double>::quiet_NaN();
    }
    result.restart_losses.push_back(best.loss.total);
    best_states.push_back(best);
    trajectories.push_back(std::move(trajectory));
  }

  int chosen = -1;
  for (int r = 0; r < cfg.restarts; ++r) {
    const double loss = result.restart_losses[static_cast<std::size_t>(r)];
    if (std::isnan(loss)) continue;
    if (chosen < 0 || loss < result.restart_losses[static_cast<std::size_t>(chosen)]) chosen = r;
  }
  if (chosen < 0) throw NumericError("fit diverged in every restart: " + result.failures.front());
  const State& s = best_states[static_cast<std::size_t>(chosen)];
  result.restart = chosen;
  result.z = s.z;
  result.transform.rotation = s.rotation;
  result.transform.translation = s.translation;
  result.final_loss = s.loss;
  result.trajectory = std::move(trajectories[static_cast<std::size_t>(chosen)]);
  result.fitted = apply_transform(model.decode_mesh(s.z), result.transform);
  return result;
}

Registration registration_output(const FitResult& result) {
  Registration reg;
  reg.mesh = result.fitted;
  reg.correspondence.resize(result.fitted.vertices.size());
  std::iota(reg.correspondence.begin(), reg.correspondence.end(), 0);
  return reg;
}

void write_fit_log(const std::filesystem::path& path, const std::vector<FitStep>& trajectory) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(10);
  out << "step,l_fit,l_inp,l_reg,total\n";
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const FitStep& s = trajectory[i];
    out << i << ',' << s.l_fit << ',' << s.l_inp << ',' << s.l_reg << ',' << s.total << '\n';
  }
}

void write_fit_result(const std::filesystem::path& path, const FitResult& result) {
  nlohmann::json j;
  j["z"] = std::vector<double>(result.z.data(), result.z.data() + result.z.size());
  j["transform"] = {{"rotation", {result.transform.rotation.x(), result.transform.rotation.y(), result.transform.rotation.z()}},
                    {"translation",
                     {result.transform.translation.x(), result.transform.translation.y(), result.transform.translation.z()}}};
  j["restart"] = result.restart;
  nlohmann::json losses = nlohmann::json::array();
  for (double l : result.restart_losses) losses.push_back(std::isnan(l) ? nlohmann::json(nullptr) : nlohmann::json(l));
  j["restart_losses"] = losses;
  j["failures"] = result.failures;
  j["init"] = result.init;
  j["final"] = {{"l_fit", result.final_loss.l_fit},
                {"l_inp", result.final_loss.l_inp},
                {"l_reg", result.final_loss.l_reg},
                {"total", result.final_loss.total}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace facecom
