#pragma once

// Refinement of a fitted mesh against the defect it was fitted to: label the
// part that explains the defect, snap it onto the defect along normals, blend
// the seam, then smooth away projection outliers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facecom/mesh.hpp"

namespace facecom {

enum class RegionLabel : std::uint8_t { Matched, Repaired, BoundaryExt };
std::string to_string(RegionLabel label);

struct RegionLabels {
  std::vector<RegionLabel> label;
  // Edge-ring distance to the nearest MATCHED vertex (0 for MATCHED, -1 when
  // unreachable or farther than the boundary width).
  std::vector<int> ring;
  int rings = 4;

  std::size_t count(RegionLabel l) const;
};

struct PostprocessConfig {
  double threshold = 1.0;       // mm
  int rings = 4;                // boundary extension width r_b
  int k = 8;                    // matched neighbors used for blending
  double max_projection = 5.0;  // mm; farther ray hits count as misses
  int refine_iterations = 5;
};

// Defects without faces are point sets: a vertex is MATCHED when it is the
// mutual nearest neighbor of a defect point within the threshold.
RegionLabels identify_repaired(const TriMesh& fitted, const TriMesh& defect, double threshold, int rings = 4);

struct Projection {
  TriMesh mesh;
  std::vector<Vec3> displacement;  // per vertex, zero outside MATCHED
  std::vector<int> missed;         // MATCHED vertices without a ray hit
};

// Moves each MATCHED vertex to the nearer of the two normal-ray hits on the
// defect. Point-set defects snap to the matched point instead.
Projection project_matched(const TriMesh& fitted, const TriMesh& defect, const RegionLabels& labels,
                           double max_projection = 5.0);

// Adds to every BOUNDARY_EXT vertex the inverse-distance weighted mean
// displacement of its k nearest MATCHED vertices, times 1 - ring / rings.
TriMesh blend_boundary(const TriMesh& mesh, const RegionLabels& labels, const std::vector<Vec3>& displacement,
                       int k);

struct RefineReport {
  int iterations = 0;
  std::vector<int> outliers;  // distinct vertices repositioned, ascending
};

// `before` is the mesh prior to projection. Outliers are MATCHED or
// BOUNDARY_EXT vertices displaced by more than median + 3 MAD of the MATCHED
// displacements, or touching a face whose normal flipped; each pass moves
// them to the mean of their non-outlier neighbors.
TriMesh refine_outliers(const TriMesh& mesh, const TriMesh& before, const RegionLabels& labels,
                        int max_iterations = 5, RefineReport* report = nullptr);

// Mean distance from MATCHED vertices to the defect (surface, or points for a
// point set). Zero when nothing is matched.
double matched_md(const TriMesh& mesh, const TriMesh& defect, const RegionLabels& labels);

struct StageReport {
  std::string stage;
  double matched_md = 0.0;
};

struct PostprocessResult {
  TriMesh mesh;
  RegionLabels labels;
  std::vector<StageReport> stages;  // fitted, projected, blended, refined
  std::vector<int> missed;
  RefineReport refine;
  bool refine_rejected = false;  // the guard kept the blended mesh
};

// identify -> project -> blend -> refine. Refinement is kept only if it does
// not raise the matched-region MD. With no MATCHED vertex the fitted mesh is
// returned unchanged.
PostprocessResult postprocess_pipeline(const TriMesh& fitted, const TriMesh& defect, const PostprocessConfig& cfg);

void write_labels(const std::filesystem::path& path, const RegionLabels& labels);
void write_stages(const std::filesystem::path& path, const std::vector<StageReport>& stages);

}  // namespace facecom
