#pragma once

// Evaluation metrics for completed meshes and a linear (PCA) shape baseline.

#include <filesystem>
#include <string>
#include <vector>

#include "facecom/mesh.hpp"

namespace facecom {

// Loop-subdivides pred until it has at least target_faces faces (at most 4
// rounds), then averages the distance from each of its vertices to the
// nearest gt vertex. One-directional: pred -> gt.
double chamfer_unidirectional(const TriMesh& pred, const TriMesh& gt, int target_faces = 50000);

// Mean over pred vertices of the exact distance to the gt surface.
double mean_point_to_surface(const TriMesh& pred, const TriMesh& gt);
double mean_point_to_surface(std::span<const Vec3> points, const TriMesh& gt);

struct MarginFitness {
  double rms = 0.0;
  std::size_t samples = 0;
};

// RMS distance to the defect surface of samples_per_edge points per boundary
// edge of `region` (at fractions (i + 1/2) / samples_per_edge along each edge).
// Throws DataError for a closed region.
MarginFitness margin_fitness(const TriMesh& region, const TriMesh& defect, int samples_per_edge = 4);

// Faces of `mesh` with at least one corner flagged, as a compacted sub-mesh.
TriMesh face_region(const TriMesh& mesh, const std::vector<bool>& vertex_flag);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for fewer than two values
};
MeanSd mean_sd(const std::vector<double>& values);

// Per pred vertex distance to the reference surface.
std::vector<double> error_map(const TriMesh& pred, const TriMesh& reference);

// ASCII PLY with per-vertex colors on a fixed [0, max_mm] blue-to-red scale,
// so maps written with the same max_mm are comparable.
void write_error_map_ply(const std::filesystem::path& path, const TriMesh& mesh, const std::vector<double>& error,
                         double max_mm);

// Linear baseline: mean plus the leading principal directions of the
// stacked vertex coordinates.
struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;  // (3N) x rank, orthonormal columns
};

PcaModel fit_pca(const std::vector<TriMesh>& meshes, int rank);
TriMesh pca_reconstruct(const PcaModel& pca, const TriMesh& mesh);
// Mean per-vertex L2 error of projection onto the PCA subspace, in mm.
double pca_reconstruction_error(const PcaModel& pca, const std::vector<TriMesh>& meshes);

}  // namespace facecom
