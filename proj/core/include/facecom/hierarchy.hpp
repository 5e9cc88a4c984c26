#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "facecom/autodiff.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

// One resolution level. `down` maps this level's vertices to the next
// (coarser) level and `up` maps the coarser level back; both are absent on
// the coarsest level.
struct MeshLevel {
  TriMesh mesh;
  std::optional<ad::SparseMat> down;  // N_{i+1} x N_i
  std::optional<ad::SparseMat> up;    // N_i x N_{i+1}
  std::vector<std::vector<int>> adjacency;
};

struct SamplingHierarchy {
  std::vector<MeshLevel> levels;  // finest (template) first
  std::vector<int> face_targets;
  int k_nn = 6;

  std::size_t size() const { return levels.size(); }
  const MeshLevel& operator[](std::size_t i) const { return levels[i]; }
};

// Garland-Heckbert edge collapse down to at most `target_faces` faces.
// Collapses that flip a face normal or break edge-manifoldness are refused.
TriMesh qem_simplify(const TriMesh& mesh, int target_faces);

// Lawson-Hanson non-negative least squares: argmin ||A x - b||, x >= 0.
Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iterations = 100);

struct TransformReport {
  int fallback_rows = 0;       // rows that used inverse-distance weights
  double max_residual = 0.0;   // largest |row . source - target| over rows
};

// Row r expresses target vertex r as a convex combination of its k_nn nearest
// source vertices (NNLS with a sum-to-one row, renormalized). Rows whose NNLS
// residual exceeds 1e-6 keep whichever of NNLS and inverse-distance weights
// reproduces the target better.
ad::SparseMat build_transform(const TriMesh& source, const TriMesh& target, int k_nn,
                              TransformReport* report = nullptr);

// Repeated qem_simplify over strictly decreasing face targets. Coarse
// positions are then redefined as down * fine so that M_{i+1} = D_i M_i holds.
SamplingHierarchy build_hierarchy(const TriMesh& template_mesh, std::span<const int> level_face_targets,
                                  int k_nn = 6);

// Loop subdivision with the standard boundary rules; V' = V + E, F' = 4F.
TriMesh loop_subdivide(const TriMesh& mesh, int iterations);

// Stores the hierarchy as arrays named prefix + "...", so it can share a
// pack with other data (model checkpoints embed their hierarchy).
void append_hierarchy(ad::Pack& pack, const SamplingHierarchy& h, const std::string& prefix);
SamplingHierarchy read_hierarchy(const ad::Pack& pack, const std::string& prefix);

void save_hierarchy(const std::filesystem::path& path, const SamplingHierarchy& h);
SamplingHierarchy load_hierarchy(const std::filesystem::path& path);

}  // namespace facecom
