#include "facecom/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/SVD>

#include "facecom/errors.hpp"
#include "facecom/hierarchy.hpp"

namespace facecom {

double chamfer_unidirectional(const TriMesh& pred, const TriMesh& gt, int target_faces) {
  if (pred.vertices.empty() || gt.vertices.empty()) throw DataError("chamfer: empty mesh");
  TriMesh dense = pred;
  for (int round = 0; round < 4 && dense.has_faces() && static_cast<int>(dense.faces.size()) < target_faces; ++round)
    dense = loop_subdivide(dense, 1);
  const KdTree tree(gt.vertices);
  double total = 0.0;
  for (const Vec3& p : dense.vertices) total += (tree.point(tree.nearest(p)) - p).norm();
  return total / static_cast<double>(dense.vertices.size());
}

double mean_point_to_surface(std::span<const Vec3> points, const TriMesh& gt) {
  if (points.empty()) throw DataError("MD: no points");
  if (gt.faces.empty()) throw DataError("MD: reference has no faces");
  const SurfaceIndex index(gt);
  double total = 0.0;
  for (const Vec3& p : points) total += index.closest(p).distance;
  return total / static_cast<double>(points.size());
}

double mean_point_to_surface(const TriMesh& pred, const TriMesh& gt) {
  return mean_point_to_surface(pred.vertices, gt);
}

MarginFitness margin_fitness(const TriMesh& region, const TriMesh& defect, int samples_per_edge) {
  if (samples_per_edge < 1) throw UsageError("margin fitness: samples per edge must be positive");
  if (defect.faces.empty()) throw DataError("margin fitness: defect has no faces");
  std::vector<Vec3> samples;
  for (const Edge& e : mesh_edges(region)) {
    if (e.face_count != 1) continue;
    const Vec3& a = region.vertices[static_cast<std::size_t>(e.a)];
    const Vec3& b = region.vertices[static_cast<std::size_t>(e.b)];
    for (int i = 0; i < samples_per_edge; ++i) samples.push_back(a + (b - a) * ((i + 0.5) / samples_per_edge));
  }
  if (samples.empty()) throw DataError("margin fitness: region has no boundary");
  const SurfaceIndex index(defect);
  double sq = 0.0;
  for (const Vec3& s : samples) {
    const double d = index.closest(s).distance;
    sq += d * d;
  }
  return {std::sqrt(sq / static_cast<double>(samples.size())), samples.size()};
}

TriMesh face_region(const TriMesh& mesh, const std::vector<bool>& vertex_flag) {
  if (vertex_flag.size() != mesh.vertices.size()) throw UsageError("face region: flag count mismatch");
  TriMesh out;
  out.vertices = mesh.vertices;
  for (const Face& f : mesh.faces)
    if (vertex_flag[static_cast<std::size_t>(f[0])] || vertex_flag[static_cast<std::size_t>(f[1])] ||
        vertex_flag[static_cast<std::size_t>(f[2])])
      out.faces.push_back(f);
  if (out.faces.empty()) return TriMesh{};
  compact_vertices(out);
  return out;
}

MeanSd mean_sd(const std::vector<double>& values) {
  MeanSd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() < 2) return r;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return r;
}

std::vector<double> error_map(const TriMesh& pred, const TriMesh& reference) {
  if (reference.faces.empty()) throw DataError("error map: reference has no faces");
  const SurfaceIndex index(reference);
  std::vector<double> out;
  out.reserve(pred.vertices.size());
  for (const Vec3& p : pred.vertices) out.push_back(index.closest(p).distance);
  return out;
}

void write_error_map_ply(const std::filesystem::path& path, const TriMesh& mesh, const std::vector<double>& error,
                         double max_mm) {
  if (error.size() != mesh.vertices.size()) throw UsageError("error map: value count mismatch");
  if (!(max_mm > 0.0)) throw UsageError("error map: color range must be positive");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "ply\nformat ascii 1.0\nelement vertex " << mesh.vertices.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float error"
         "\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face "
      << mesh.faces.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const double t = std::clamp(error[i] / max_mm, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(255.0 * t));
    const int g = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(2.0 * t - 1.0))));
    const int b = static_cast<int>(std::lround(255.0 * (1.0 - t)));
    const Vec3& v = mesh.vertices[i];
    out << v.x() << ' ' << v.y() << ' ' << v.z() << ' ' << error[i] << ' ' << r << ' ' << g << ' ' << b << '\n';
  }
  for (const Face& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

namespace {

Eigen::VectorXd flatten(const TriMesh& m) {
  Eigen::VectorXd x(3 * static_cast<Eigen::Index>(m.vertices.size()));
  for (std::size_t i = 0; i < m.vertices.size(); ++i) x.segment<3>(3 * static_cast<Eigen::Index>(i)) = m.vertices[i];
  return x;
}

}  // namespace

PcaModel fit_pca(const std::vector<TriMesh>& meshes, int rank) {
  if (meshes.empty()) throw DataError("PCA: no meshes");
  if (rank < 0) throw UsageError("PCA: rank must be non-negative");
  const Eigen::Index dim = 3 * static_cast<Eigen::Index>(meshes.front().vertices.size());
  Eigen::MatrixXd x(dim, static_cast<Eigen::Index>(meshes.size()));
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    if (meshes[i].vertices.size() != meshes.front().vertices.size()) throw DataError("PCA: vertex count mismatch");
    x.col(static_cast<Eigen::Index>(i)) = flatten(meshes[i]);
  }
  PcaModel pca;
  pca.mean = x.rowwise().mean();
  x.colwise() -= pca.mean;
  const Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU);
  const Eigen::Index r = std::min<Eigen::Index>(rank, svd.matrixU().cols());
  pca.basis = svd.matrixU().leftCols(r);
  return pca;
}

TriMesh pca_reconstruct(const PcaModel& pca, const TriMesh& mesh) {
  if (3 * static_cast<Eigen::Index>(mesh.vertices.size()) != pca.mean.size())
    throw DataError("PCA: vertex count mismatch");
  const Eigen::VectorXd x = flatten(mesh) - pca.mean;
  const Eigen::VectorXd y = pca.mean + pca.basis * (pca.basis.transpose() * x);
  TriMesh out = mesh;
  for (std::size_t i = 0; i < out.vertices.size(); ++i) out.vertices[i] = y.segment<3>(3 * static_cast<Eigen::Index>(i));
  return out;
}

double pca_reconstruction_error(const PcaModel& pca, const std::vector<TriMesh>& meshes) {
  if (meshes.empty()) throw DataError("PCA: no meshes");
  double total = 0.0;
  std::size_t count = 0;
  for (const TriMesh& m : meshes) {
    const TriMesh r = pca_reconstruct(pca, m);
    for (std::size_t i = 0; i < m.vertices.size(); ++i) total += (r.vertices[i] - m.vertices[i]).norm();
    count += m.vertices.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace facecom
