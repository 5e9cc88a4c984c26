#pragma once

// Parametric face-like meshes on a fixed template topology and defect
// construction for completion experiments.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facecom/mesh.hpp"

namespace facecom {

inline constexpr int kIdentityDims = 12;
inline constexpr int kTemplateColumns = 61;
inline constexpr int kTemplateRows = 42;

using IdentityParams = std::array<double, kIdentityDims>;

// Elliptic dome (150 x 200 mm footprint) with nose, brow, eye, lip, chin and
// cheek features; 61 x 42 grid vertices, bilaterally symmetric, facing +z.
TriMesh make_template();
int template_vertex(int column, int row);
// Vertex with the largest z (the nose tip by construction).
int nose_tip_vertex(const TriMesh& template_mesh);

// Template plus 8 linear blendshapes (g[0..7]) and RBF bumps whose amplitude
// and position depend on products of g[8..11]. Throws UsageError when any
// coordinate lies outside [-1, 1].
TriMesh synth_identity(const IdentityParams& g);
std::vector<Vec3> identity_displacement(const TriMesh& template_mesh, const IdentityParams& g);

struct DatasetEntry {
  int id = 0;
  IdentityParams g{};
  TriMesh mesh;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> entries;
  std::vector<int> train;  // ids
  std::vector<int> test;
};

inline constexpr int kDatasetFormatVersion = 1;

int held_out_count(int n);  // ceil(5% of n)
// g uniform in [-1, 1]^12 from the "dataset" substream; the last
// held_out_count(n) ids form the test split. Requires n >= 20.
Dataset make_dataset(int n, std::uint64_t seed);

// One PLY per identity (id_0000.ply, ...) plus manifest.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);
std::string identity_filename(int id);

enum class DefectKind { Region, Fragments, Keypoints };
std::string to_string(DefectKind kind);
DefectKind parse_defect_kind(const std::string& name);

struct DefectSpec {
  DefectKind kind = DefectKind::Region;
  int seed_vertex = -1;         // region centre
  double radius = 30.0;         // mm, region or fragment disk radius
  int fragment_count = 4;       // fragments: number of kept disks
  double keep_fraction = 0.0;   // fragments: if > 0, grow disks until this share of faces is kept
  std::uint64_t seed = 0;       // fragments: disk centres; jitter
  std::vector<int> landmarks;   // keypoints: vertex ids
  double jitter_mm = 0.0;       // optional Gaussian vertex noise, off by default
};

struct Defect {
  DefectSpec spec;
  TriMesh mesh;
  std::vector<int> index_map;     // surviving vertex -> source vertex
  std::vector<int> removed_faces; // source faces absent from the defect
};

// Graph geodesic distance (Dijkstra over edge lengths) from `source`.
std::vector<double> geodesic_distances(const TriMesh& mesh, int source);
// Geodesic distance of each face centroid: min over corners of
// d(corner) + |centroid - corner|.
std::vector<double> face_geodesic_distances(const TriMesh& mesh, const std::vector<double>& vertex_distance);

Defect make_defect(const TriMesh& mesh, const DefectSpec& spec);
// Share of the source surface area covered by removed faces.
double removed_area_fraction(const TriMesh& source, const Defect& defect);

void save_defect(const std::filesystem::path& mesh_path, const std::filesystem::path& json_path,
                 const Defect& defect);
Defect load_defect(const std::filesystem::path& mesh_path, const std::filesystem::path& json_path);

inline constexpr int kLandmarkCount = 32;
inline constexpr int kLandmarkFormatVersion = 1;

struct Landmark {
  std::string name;
  int vertex = 0;
};

// Nearest template vertices (in the x-y footprint) to 32 named anatomical points.
std::vector<Landmark> default_landmarks(const TriMesh& template_mesh);
std::vector<Landmark> load_landmarks(const std::filesystem::path& path);
void save_landmarks(const std::filesystem::path& path, const std::vector<Landmark>& landmarks);
std::vector<int> landmark_vertices(const std::vector<Landmark>& landmarks);

}  // namespace facecom
