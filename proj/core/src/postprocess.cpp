#include "facecom/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "facecom/errors.hpp"

namespace facecom {

std::string to_string(RegionLabel label) {
  switch (label) {
    case RegionLabel::Matched:
      return "matched";
    case RegionLabel::Repaired:
      return "repaired";
    case RegionLabel::BoundaryExt:
      return "boundary_ext";
  }
  return "repaired";
}

std::size_t RegionLabels::count(RegionLabel l) const {
  return static_cast<std::size_t>(std::count(label.begin(), label.end(), l));
}

namespace {

constexpr double kBaryZero = 1e-9;
constexpr double kTangentialTolerance = 1e-6;  // mm

// Sorted boundary edges (a < b) of a mesh.
std::vector<std::pair<int, int>> boundary_edges(const TriMesh& mesh) {
  std::vector<std::pair<int, int>> out;
  for (const Edge& e : mesh_edges(mesh))
    if (e.face_count == 1) out.emplace_back(e.a, e.b);
  return out;
}

bool is_boundary_edge(const std::vector<std::pair<int, int>>& edges, int a, int b) {
  return std::binary_search(edges.begin(), edges.end(), std::make_pair(std::min(a, b), std::max(a, b)));
}

// True when the closest point lies on the open boundary and p sits beyond it
// rather than straight above the surface.
bool past_boundary(const Vec3& p, const SurfaceHit& hit, const TriMesh& defect,
                   const std::vector<std::pair<int, int>>& edges, const std::vector<bool>& boundary_vertex) {
  const Face& f = defect.faces[static_cast<std::size_t>(hit.face_index)];
  int zeros = 0;
  int nonzero = -1;
  int zero = -1;
  for (int k = 0; k < 3; ++k) {
    if (hit.barycentric(k) <= kBaryZero) {
      ++zeros;
      zero = k;
    } else {
      nonzero = k;
    }
  }
  bool on_boundary = false;
  if (zeros == 1) {
    on_boundary = is_boundary_edge(edges, f[static_cast<std::size_t>((zero + 1) % 3)],
                                   f[static_cast<std::size_t>((zero + 2) % 3)]);
  } else if (zeros == 2) {
    on_boundary = boundary_vertex[static_cast<std::size_t>(f[static_cast<std::size_t>(nonzero)])];
  }
  if (!on_boundary) return false;
  const Vec3 n = face_normal_unnormalized(defect, hit.face_index).normalized();
  const Vec3 d = p - hit.closest_point;
  return (d - n * n.dot(d)).norm() > kTangentialTolerance;
}

void assign_rings(const TriMesh& fitted, RegionLabels& out) {
  const auto adj = vertex_adjacency(fitted);
  std::deque<int> queue;
  for (std::size_t v = 0; v < out.label.size(); ++v)
    if (out.label[v] == RegionLabel::Matched) {
      out.ring[v] = 0;
      queue.push_back(static_cast<int>(v));
    }
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop_front();
    const int r = out.ring[static_cast<std::size_t>(v)];
    if (r >= out.rings) continue;
    for (int w : adj[static_cast<std::size_t>(v)]) {
      if (out.ring[static_cast<std::size_t>(w)] >= 0) continue;
      out.ring[static_cast<std::size_t>(w)] = r + 1;
      out.label[static_cast<std::size_t>(w)] = RegionLabel::BoundaryExt;
      queue.push_back(w);
    }
  }
}

// For point-set defects: matched vertex -> defect point, -1 otherwise.
std::vector<int> mutual_matches(const TriMesh& fitted, const TriMesh& defect, double threshold) {
  std::vector<int> match(fitted.vertices.size(), -1);
  const KdTree fitted_tree(fitted.vertices);
  const KdTree defect_tree(defect.vertices);
  for (std::size_t q = 0; q < defect.vertices.size(); ++q) {
    const int v = fitted_tree.nearest(defect.vertices[q]);
    if (defect_tree.nearest(fitted.vertices[static_cast<std::size_t>(v)]) != static_cast<int>(q)) continue;
    if ((fitted.vertices[static_cast<std::size_t>(v)] - defect.vertices[q]).norm() <= threshold)
      match[static_cast<std::size_t>(v)] = static_cast<int>(q);
  }
  return match;
}

}  // namespace

RegionLabels identify_repaired(const TriMesh& fitted, const TriMesh& defect, double threshold, int rings) {
  if (fitted.vertices.empty() || defect.vertices.empty()) throw DataError("identify: empty mesh");
  if (rings < 0) throw UsageError("identify: boundary width must be non-negative");
  RegionLabels out;
  out.rings = rings;
  out.label.assign(fitted.vertices.size(), RegionLabel::Repaired);
  out.ring.assign(fitted.vertices.size(), -1);
  if (defect.faces.empty()) {
    const auto match = mutual_matches(fitted, defect, threshold);
    for (std::size_t v = 0; v < match.size(); ++v)
      if (match[v] >= 0) out.label[v] = RegionLabel::Matched;
  } else {
    const SurfaceIndex index(defect);
    const auto edges = boundary_edges(defect);
    const auto boundary = boundary_vertices(defect);
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v) {
      const Vec3& p = fitted.vertices[v];
      const SurfaceHit hit = index.closest(p);
      if (hit.distance <= threshold && !past_boundary(p, hit, defect, edges, boundary))
        out.label[v] = RegionLabel::Matched;
    }
  }
  assign_rings(fitted, out);
  return out;
}

namespace {

// Signed ray parameter of the hit of p + t d with triangle (a, b, c), or NaN.
double ray_triangle(const Vec3& p, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 h = d.cross(e2);
  const double det = e1.dot(h);
  if (std::abs(det) < 1e-14 * e1.norm() * e2.norm()) return std::numeric_limits<double>::quiet_NaN();
  const double inv = 1.0 / det;
  const Vec3 s = p - a;
  const double u = inv * s.dot(h);
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::numeric_limits<double>::quiet_NaN();
  const Vec3 q = s.cross(e1);
  const double w = inv * d.dot(q);
  if (w < -1e-12 || u + w > 1.0 + 1e-12) return std::numeric_limits<double>::quiet_NaN();
  return inv * e2.dot(q);
}

}  // namespace

Projection project_matched(const TriMesh& fitted, const TriMesh& defect, const RegionLabels& labels,
                           double max_projection) {
  if (labels.label.size() != fitted.vertices.size()) throw UsageError("project: labels do not match the mesh");
  Projection out;
  out.mesh = fitted;
  out.displacement.assign(fitted.vertices.size(), Vec3::Zero());

  if (defect.faces.empty()) {
    const auto match = mutual_matches(fitted, defect, std::numeric_limits<double>::infinity());
    for (std::size_t v = 0; v < fitted.vertices.size(); ++v) {
      if (labels.label[v] != RegionLabel::Matched) continue;
      if (match[v] < 0) {
        out.missed.push_back(static_cast<int>(v));
        continue;
      }
      const Vec3 target = defect.vertices[static_cast<std::size_t>(match[v])];
      if ((target - fitted.vertices[v]).norm() > max_projection) {
        out.missed.push_back(static_cast<int>(v));
        continue;
      }
      out.displacement[v] = target - fitted.vertices[v];
      out.mesh.vertices[v] = target;
    }
    return out;
  }

  const std::size_t nf = defect.faces.size();
  std::vector<Vec3> centre(nf);
  std::vector<double> radius(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    centre[f] = face_centroid(defect, static_cast<int>(f));
    double r = 0.0;
    for (int k = 0; k < 3; ++k) r = std::max(r, (defect.vertices[defect.faces[f][k]] - centre[f]).norm());
    radius[f] = r;
  }
  const VertexNormals normals = vertex_normals(fitted);
  for (std::size_t v = 0; v < fitted.vertices.size(); ++v) {
    if (labels.label[v] != RegionLabel::Matched) continue;
    if (!normals.valid[v]) {
      out.missed.push_back(static_cast<int>(v));
      continue;
    }
    const Vec3& p = fitted.vertices[v];
    const Vec3 n = normals.normals[v].normalized();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < nf; ++f) {
      const Vec3 c = centre[f] - p;
      const double along = c.dot(n);
      if (std::abs(along) > max_projection + radius[f]) continue;
      if ((c - along * n).squaredNorm() > radius[f] * radius[f] * (1.0 + 1e-9)) continue;
      const Face& face = defect.faces[f];
      const double t = ray_triangle(p, n, defect.vertices[face[0]], defect.vertices[face[1]], defect.vertices[face[2]]);
      if (std::isnan(t)) continue;
      if (std::abs(t) < std::abs(best) || (std::abs(t) == std::abs(best) && t > best)) best = t;
    }
    if (!(std::abs(best) <= max_projection)) {
      out.missed.push_back(static_cast<int>(v));
      continue;
    }
    out.displacement[v] = best * n;
    out.mesh.vertices[v] = p + best * n;
  }
  return out;
}

TriMesh blend_boundary(const TriMesh& mesh, const RegionLabels& labels, const std::vector<Vec3>& displacement,
                       int k) {
  if (labels.label.size() != mesh.vertices.size() || displacement.size() != mesh.vertices.size())
    throw UsageError("blend: labels or displacements do not match the mesh");
  if (k < 1) throw UsageError("blend: k must be positive");
  std::vector<int> matched;
  std::vector<Vec3> origin;
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
    if (labels.label[v] == RegionLabel::Matched) {
      matched.push_back(static_cast<int>(v));
      origin.push_back(mesh.vertices[v] - displacement[v]);
    }
  if (matched.empty()) throw DataError("blend: no matched vertices");
  const KdTree tree(origin);
  const int kk = std::min<int>(k, static_cast<int>(matched.size()));
  TriMesh out = mesh;
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    if (labels.label[v] != RegionLabel::BoundaryExt) continue;
    const double falloff = labels.rings > 0 ? 1.0 - static_cast<double>(labels.ring[v]) / labels.rings : 0.0;
    if (falloff <= 0.0) continue;
    Vec3 sum = Vec3::Zero();
    double wsum = 0.0;
    for (int i : tree.knn(mesh.vertices[v], kk)) {
      const double w = 1.0 / ((origin[static_cast<std::size_t>(i)] - mesh.vertices[v]).norm() + 1e-6);
      sum += w * displacement[static_cast<std::size_t>(matched[static_cast<std::size_t>(i)])];
      wsum += w;
    }
    out.vertices[v] += falloff * sum / wsum;
  }
  return out;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

}  // namespace

TriMesh refine_outliers(const TriMesh& mesh, const TriMesh& before, const RegionLabels& labels, int max_iterations,
                        RefineReport* report) {
  if (before.vertices.size() != mesh.vertices.size() || labels.label.size() != mesh.vertices.size())
    throw UsageError("refine: meshes and labels must match");
  const std::size_t n = mesh.vertices.size();
  const auto adj = vertex_adjacency(mesh);
  std::vector<Vec3> normal_before(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f)
    normal_before[f] = face_normal_unnormalized(before, static_cast<int>(f));

  TriMesh out = mesh;
  RefineReport rep;
  std::vector<char> ever(n, 0);
  for (int it = 0; it < max_iterations; ++it) {
    std::vector<double> disp(n);
    std::vector<double> matched_disp;
    for (std::size_t v = 0; v < n; ++v) {
      disp[v] = (out.vertices[v] - before.vertices[v]).norm();
      if (labels.label[v] == RegionLabel::Matched) matched_disp.push_back(disp[v]);
    }
    const double med = median(matched_disp);
    std::vector<double> dev;
    dev.reserve(matched_disp.size());
    for (double d : matched_disp) dev.push_back(std::abs(d - med));
    const double limit = med + 3.0 * median(dev) + 1e-6;

    std::vector<char> outlier(n, 0);
    for (std::size_t f = 0; f < out.faces.size(); ++f)
      if (face_normal_unnormalized(out, static_cast<int>(f)).dot(normal_before[f]) < 0.0)
        for (int v : out.faces[f]) outlier[static_cast<std::size_t>(v)] = 1;
    bool any = false;
    for (std::size_t v = 0; v < n; ++v) {
      if (labels.label[v] == RegionLabel::Repaired) {
        outlier[v] = 0;
        continue;
      }
      if (disp[v] > limit && !matched_disp.empty()) outlier[v] = 1;
      any = any || outlier[v];
    }
    if (!any) break;

    std::vector<Vec3> next = out.vertices;
    for (std::size_t v = 0; v < n; ++v) {
      if (!outlier[v]) continue;
      ever[v] = 1;
      Vec3 sum = Vec3::Zero();
      int count = 0;
      for (int w : adj[v])
        if (!outlier[static_cast<std::size_t>(w)]) {
          sum += out.vertices[static_cast<std::size_t>(w)];
          ++count;
        }
      if (count > 0) next[v] = sum / count;
    }
    out.vertices = std::move(next);
    rep.iterations = it + 1;
  }
  for (std::size_t v = 0; v < n; ++v)
    if (ever[v]) rep.outliers.push_back(static_cast<int>(v));
  if (report) *report = std::move(rep);
  return out;
}

double matched_md(const TriMesh& mesh, const TriMesh& defect, const RegionLabels& labels) {
  if (labels.label.size() != mesh.vertices.size()) throw UsageError("matched MD: labels do not match the mesh");
  double total = 0.0;
  std::size_t count = 0;
  if (defect.faces.empty()) {
    const KdTree tree(defect.vertices);
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
      if (labels.label[v] != RegionLabel::Matched) continue;
      total += (tree.point(tree.nearest(mesh.vertices[v])) - mesh.vertices[v]).norm();
      ++count;
    }
  } else {
    const SurfaceIndex index(defect);
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
      if (labels.label[v] != RegionLabel::Matched) continue;
      total += index.closest(mesh.vertices[v]).distance;
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

PostprocessResult postprocess_pipeline(const TriMesh& fitted, const TriMesh& defect, const PostprocessConfig& cfg) {
  PostprocessResult r;
  r.labels = identify_repaired(fitted, defect, cfg.threshold, cfg.rings);
  const double md_fit = matched_md(fitted, defect, r.labels);
  r.stages.push_back({"fitted", md_fit});
  if (r.labels.count(RegionLabel::Matched) == 0) {
    r.mesh = fitted;
    for (const char* s : {"projected", "blended", "refined"}) r.stages.push_back({s, md_fit});
    return r;
  }
  Projection proj = project_matched(fitted, defect, r.labels, cfg.max_projection);
  r.missed = proj.missed;
  r.stages.push_back({"projected", matched_md(proj.mesh, defect, r.labels)});
  TriMesh blended = blend_boundary(proj.mesh, r.labels, proj.displacement, cfg.k);
  const double md_blend = matched_md(blended, defect, r.labels);
  r.stages.push_back({"blended", md_blend});
  TriMesh refined = refine_outliers(blended, fitted, r.labels, cfg.refine_iterations, &r.refine);
  const double md_refine = matched_md(refined, defect, r.labels);
  if (md_refine <= md_blend) {
    r.mesh = std::move(refined);
    r.stages.push_back({"refined", md_refine});
  } else {
    r.refine_rejected = true;
    r.mesh = std::move(blended);
    r.stages.push_back({"refined", md_blend});
  }
  return r;
}

void write_labels(const std::filesystem::path& path, const RegionLabels& labels) {
  nlohmann::json j;
  std::vector<std::string> names;
  names.reserve(labels.label.size());
  for (RegionLabel l : labels.label) names.push_back(to_string(l));
  j["labels"] = names;
  j["ring"] = labels.ring;
  j["rings"] = labels.rings;
  j["counts"] = {{"matched", labels.count(RegionLabel::Matched)},
                 {"repaired", labels.count(RegionLabel::Repaired)},
                 {"boundary_ext", labels.count(RegionLabel::BoundaryExt)}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump() << '\n';
}

void write_stages(const std::filesystem::path& path, const std::vector<StageReport>& stages) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(10);
  out << "stage,matched_md\n";
  for (const StageReport& s : stages) out << s.stage << ',' << s.matched_md << '\n';
}

}  // namespace facecom
