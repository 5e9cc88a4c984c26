#include "facecom/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>

#include <Eigen/Dense>
#include <json.hpp>

#include "facecom/errors.hpp"

namespace facecom {

namespace {

using Quadric = Eigen::Matrix4d;

constexpr double kSingularCondition = 1e8;
constexpr double kBoundaryWeight = 1000.0;
constexpr double kMinNormalCos = 0.2;

Quadric plane_quadric(const Vec3& unit_normal, const Vec3& point, double weight) {
  Eigen::Vector4d p;
  p << unit_normal, -unit_normal.dot(point);
  return weight * p * p.transpose();
}

class EdgeCollapser {
 public:
  explicit EdgeCollapser(const TriMesh& mesh)
      : pos_(mesh.vertices),
        faces_(mesh.faces),
        face_alive_(mesh.faces.size(), true),
        vfaces_(mesh.vertices.size()),
        quadric_(mesh.vertices.size(), Quadric::Zero()),
        alive_(mesh.vertices.size(), true),
        boundary_(boundary_vertices(mesh)),
        stamp_(mesh.vertices.size(), 0),
        alive_faces_(static_cast<int>(mesh.faces.size())) {
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      for (int v : faces_[f]) vfaces_[static_cast<std::size_t>(v)].push_back(static_cast<int>(f));
      const Vec3 n = face_normal_unnormalized(mesh, static_cast<int>(f));
      const double area = 0.5 * n.norm();
      const Quadric q = plane_quadric(n.normalized(), pos_[static_cast<std::size_t>(faces_[f][0])], area);
      for (int v : faces_[f]) quadric_[static_cast<std::size_t>(v)] += q;
    }
    // Boundary edges get a perpendicular constraint plane so outlines survive.
    for (const Edge& e : mesh_edges(mesh)) {
      if (e.face_count != 1) continue;
      const int f = shared_faces(e.a, e.b).front();
      const Vec3 fn = face_normal_unnormalized(mesh, f).normalized();
      const Vec3 dir = pos_[static_cast<std::size_t>(e.b)] - pos_[static_cast<std::size_t>(e.a)];
      const Vec3 m = dir.cross(fn);
      if (m.norm() == 0.0) continue;
      const Quadric q = plane_quadric(m.normalized(), pos_[static_cast<std::size_t>(e.a)],
                                      kBoundaryWeight * dir.squaredNorm());
      quadric_[static_cast<std::size_t>(e.a)] += q;
      quadric_[static_cast<std::size_t>(e.b)] += q;
    }
  }

  TriMesh run(int target_faces) {
    for (const Edge& e : current_edges()) push(e.a, e.b);
    while (alive_faces_ > target_faces) {
      if (heap_.empty())
        throw DataError("qem_simplify: cannot reach " + std::to_string(target_faces) +
                        " faces without violating manifold/flip guards (stuck at " +
                        std::to_string(alive_faces_) + ")");
      const Candidate c = heap_.top();
      heap_.pop();
      if (!alive_[static_cast<std::size_t>(c.a)] || !alive_[static_cast<std::size_t>(c.b)]) continue;
      if (stamp_[static_cast<std::size_t>(c.a)] != c.stamp_a || stamp_[static_cast<std::size_t>(c.b)] != c.stamp_b)
        continue;
      if (!can_collapse(c.a, c.b, c.pos)) continue;
      collapse(c.a, c.b, c.pos);
    }
    return extract();
  }

 private:
  struct Candidate {
    double cost;
    int a;
    int b;
    int stamp_a;
    int stamp_b;
    Vec3 pos;
    // Min-heap on (cost, a, b).
    bool operator<(const Candidate& o) const {
      if (cost != o.cost) return cost > o.cost;
      if (a != o.a) return a > o.a;
      return b > o.b;
    }
  };

  std::vector<int> shared_faces(int a, int b) const {
    std::vector<int> out;
    for (int f : vfaces_[static_cast<std::size_t>(a)]) {
      if (!face_alive_[static_cast<std::size_t>(f)]) continue;
      const Face& fv = faces_[static_cast<std::size_t>(f)];
      if (fv[0] == b || fv[1] == b || fv[2] == b) out.push_back(f);
    }
    return out;
  }

  std::set<int> neighbors(int v) const {
    std::set<int> out;
    for (int f : vfaces_[static_cast<std::size_t>(v)]) {
      if (!face_alive_[static_cast<std::size_t>(f)]) continue;
      for (int u : faces_[static_cast<std::size_t>(f)])
        if (u != v) out.insert(u);
    }
    return out;
  }

  std::vector<Edge> current_edges() const {
    TriMesh tmp;
    tmp.vertices = pos_;
    for (std::size_t f = 0; f < faces_.size(); ++f)
      if (face_alive_[f]) tmp.faces.push_back(faces_[f]);
    return mesh_edges(tmp);
  }

  void push(int a, int b) {
    if (a > b) std::swap(a, b);
    const Quadric q = quadric_[static_cast<std::size_t>(a)] + quadric_[static_cast<std::size_t>(b)];
    const Mat3 m = q.topLeftCorner<3, 3>();
    const Vec3 rhs = -q.topRightCorner<3, 1>();
    Vec3 p = 0.5 * (pos_[static_cast<std::size_t>(a)] + pos_[static_cast<std::size_t>(b)]);
    const Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (sv(2) > 0.0 && sv(0) / sv(2) <= kSingularCondition) p = svd.solve(rhs);
    Eigen::Vector4d ph;
    ph << p, 1.0;
    const double cost = std::max(0.0, ph.dot(q * ph));
    heap_.push({cost, a, b, stamp_[static_cast<std::size_t>(a)], stamp_[static_cast<std::size_t>(b)], p});
  }

  bool can_collapse(int a, int b, const Vec3& p) const {
    const std::vector<int> shared = shared_faces(a, b);
    if (shared.empty() || shared.size() > 2) return false;
    if (shared.size() == 2 && boundary_[static_cast<std::size_t>(a)] && boundary_[static_cast<std::size_t>(b)])
      return false;

    // Link condition: common neighbors are exactly the opposite corners.
    std::set<int> opposite;
    for (int f : shared)
      for (int v : faces_[static_cast<std::size_t>(f)])
        if (v != a && v != b) opposite.insert(v);
    const std::set<int> na = neighbors(a);
    const std::set<int> nb = neighbors(b);
    std::vector<int> common;
    std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(common));
    if (common.size() != opposite.size()) return false;
    for (int v : common)
      if (!opposite.count(v)) return false;

    for (int v : {a, b}) {
      for (int f : vfaces_[static_cast<std::size_t>(v)]) {
        if (!face_alive_[static_cast<std::size_t>(f)]) continue;
        if (std::find(shared.begin(), shared.end(), f) != shared.end()) continue;
        const Face& fv = faces_[static_cast<std::size_t>(f)];
        Vec3 before[3];
        Vec3 after[3];
        for (int k = 0; k < 3; ++k) {
          before[k] = pos_[static_cast<std::size_t>(fv[static_cast<std::size_t>(k)])];
          after[k] = (fv[static_cast<std::size_t>(k)] == a || fv[static_cast<std::size_t>(k)] == b) ? p : before[k];
        }
        const Vec3 n0 = (before[1] - before[0]).cross(before[2] - before[0]);
        const Vec3 n1 = (after[1] - after[0]).cross(after[2] - after[0]);
        const double l0 = n0.norm();
        const double l1 = n1.norm();
        if (l1 <= 1e-12 || l0 == 0.0) return false;
        if (n0.dot(n1) < kMinNormalCos * l0 * l1) return false;
      }
    }
    return true;
  }

  void collapse(int a, int b, const Vec3& p) {
    const auto ua = static_cast<std::size_t>(a);
    const auto ub = static_cast<std::size_t>(b);
    pos_[ua] = p;
    quadric_[ua] += quadric_[ub];
    boundary_[ua] = boundary_[ua] || boundary_[ub];
    for (int f : vfaces_[ub]) {
      const auto uf = static_cast<std::size_t>(f);
      if (!face_alive_[uf]) continue;
      Face& fv = faces_[uf];
      if (fv[0] == a || fv[1] == a || fv[2] == a) {
        face_alive_[uf] = false;
        --alive_faces_;
        continue;
      }
      for (int& v : fv)
        if (v == b) v = a;
      vfaces_[ua].push_back(f);
    }
    alive_[ub] = false;
    vfaces_[ub].clear();
    std::vector<int> kept;
    for (int f : vfaces_[ua])
      if (face_alive_[static_cast<std::size_t>(f)]) kept.push_back(f);
    std::sort(kept.begin(), kept.end());
    kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
    vfaces_[ua] = std::move(kept);

    const std::set<int> ring = neighbors(a);
    ++stamp_[ua];
    for (int n : ring) ++stamp_[static_cast<std::size_t>(n)];
    std::set<std::pair<int, int>> todo;
    for (int n : ring) {
      todo.insert({std::min(a, n), std::max(a, n)});
      for (int m : neighbors(n)) todo.insert({std::min(n, m), std::max(n, m)});
    }
    for (const auto& [x, y] : todo) push(x, y);
  }

  TriMesh extract() const {
    TriMesh out;
    std::vector<int> remap(pos_.size(), -1);
    for (std::size_t v = 0; v < pos_.size(); ++v) {
      if (!alive_[v] || vfaces_[v].empty()) continue;
      remap[v] = static_cast<int>(out.vertices.size());
      out.vertices.push_back(pos_[v]);
    }
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      if (!face_alive_[f]) continue;
      Face nf;
      for (int k = 0; k < 3; ++k) nf[static_cast<std::size_t>(k)] = remap[static_cast<std::size_t>(faces_[f][static_cast<std::size_t>(k)])];
      out.faces.push_back(nf);
    }
    return out;
  }

  std::vector<Vec3> pos_;
  std::vector<Face> faces_;
  std::vector<bool> face_alive_;
  std::vector<std::vector<int>> vfaces_;
  std::vector<Quadric> quadric_;
  std::vector<bool> alive_;
  std::vector<bool> boundary_;
  std::vector<int> stamp_;
  int alive_faces_ = 0;
  std::priority_queue<Candidate> heap_;
};

std::vector<double> idw_weights(const TriMesh& source, const std::vector<int>& nn, const Vec3& t) {
  std::vector<double> w(nn.size());
  double total = 0.0;
  for (std::size_t i = 0; i < nn.size(); ++i) {
    w[i] = 1.0 / std::max((source.vertices[static_cast<std::size_t>(nn[i])] - t).norm(), 1e-12);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

double row_residual(const TriMesh& source, const std::vector<int>& nn, const std::vector<double>& w, const Vec3& t) {
  Vec3 r = -t;
  for (std::size_t i = 0; i < nn.size(); ++i) r += w[i] * source.vertices[static_cast<std::size_t>(nn[i])];
  return r.norm();
}

}  // namespace

TriMesh qem_simplify(const TriMesh& mesh, int target_faces) {
  if (target_faces < 4) throw UsageError("qem_simplify: target_faces must be >= 4");
  if (static_cast<int>(mesh.faces.size()) <= target_faces) return mesh;
  return EdgeCollapser(mesh).run(target_faces);
}

Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iterations) {
  const Eigen::Index n = a.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);
  const double tol = 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff());

  auto solve_passive = [&]() {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    Eigen::MatrixXd ap(a.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) ap.col(static_cast<Eigen::Index>(k)) = a.col(idx[k]);
    const Eigen::VectorXd sp = ap.colPivHouseholderQr().solve(b);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) s(idx[k]) = sp(static_cast<Eigen::Index>(k));
    return s;
  };

  for (int outer = 0; outer < max_iterations; ++outer) {
    const Eigen::VectorXd w = a.transpose() * (b - a * x);
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (passive[static_cast<std::size_t>(j)]) continue;
      if (w(j) > tol && (best < 0 || w(j) > w(best))) best = j;
    }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;
    for (int inner = 0; inner < max_iterations; ++inner) {
      const Eigen::VectorXd s = solve_passive();
      bool feasible = true;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0) feasible = false;
      if (feasible) {
        x = s;
        break;
      }
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0) alpha = std::min(alpha, x(j) / (x(j) - s(j)));
      }
      x += alpha * (s - x);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
    }
  }
  return x;
}

ad::SparseMat build_transform(const TriMesh& source, const TriMesh& target, int k_nn, TransformReport* report) {
  if (source.vertices.empty() || target.vertices.empty()) throw DataError("build_transform: empty mesh");
  if (k_nn < 1 || static_cast<std::size_t>(k_nn) > source.vertices.size())
    throw DataError("build_transform: k_nn exceeds source vertex count");
  const KdTree tree(source.vertices);
  TransformReport rep;
  std::vector<ad::SparseMat::Triplet> triplets;
  triplets.reserve(target.vertices.size() * static_cast<std::size_t>(k_nn));
  constexpr double kSumWeight = 1e4;

  for (std::size_t r = 0; r < target.vertices.size(); ++r) {
    const Vec3& t = target.vertices[r];
    const std::vector<int> nn = tree.knn(t, k_nn);
    if ((source.vertices[static_cast<std::size_t>(nn[0])] - t).norm() < 1e-12) {
      triplets.push_back({static_cast<int>(r), nn[0], 1.0});
      continue;
    }
    Eigen::MatrixXd a(4, k_nn);
    Eigen::VectorXd b(4);
    for (int j = 0; j < k_nn; ++j) {
      a.block<3, 1>(0, j) = source.vertices[static_cast<std::size_t>(nn[static_cast<std::size_t>(j)])] - t;
      a(3, j) = kSumWeight;
    }
    // Centering on t keeps the system well scaled: sum w (p - t) = 0.
    b << 0.0, 0.0, 0.0, kSumWeight;
    const Eigen::VectorXd x = nnls(a, b);
    std::vector<double> w(static_cast<std::size_t>(k_nn));
    double total = x.sum();
    for (int j = 0; j < k_nn; ++j) w[static_cast<std::size_t>(j)] = total > 0.0 ? x(j) / total : 0.0;
    double residual = total > 0.0 ? row_residual(source, nn, w, t) : std::numeric_limits<double>::infinity();
    if (residual > 1e-6) {
      const std::vector<double> alt = idw_weights(source, nn, t);
      const double alt_residual = row_residual(source, nn, alt, t);
      if (alt_residual < residual) {
        w = alt;
        residual = alt_residual;
        ++rep.fallback_rows;
      }
    }
    rep.max_residual = std::max(rep.max_residual, residual);
    for (int j = 0; j < k_nn; ++j) {
      if (w[static_cast<std::size_t>(j)] > 0.0)
        triplets.push_back({static_cast<int>(r), nn[static_cast<std::size_t>(j)], w[static_cast<std::size_t>(j)]});
    }
  }
  if (report) *report = rep;
  return ad::SparseMat(static_cast<int>(target.vertices.size()), static_cast<int>(source.vertices.size()),
                       std::move(triplets));
}

SamplingHierarchy build_hierarchy(const TriMesh& template_mesh, std::span<const int> level_face_targets, int k_nn) {
  if (level_face_targets.empty()) throw UsageError("build_hierarchy: no level targets");
  int prev = static_cast<int>(template_mesh.faces.size());
  for (int t : level_face_targets) {
    if (t >= prev) throw UsageError("build_hierarchy: face targets must be strictly decreasing");
    prev = t;
  }
  SamplingHierarchy h;
  h.face_targets.assign(level_face_targets.begin(), level_face_targets.end());
  h.k_nn = k_nn;
  h.levels.push_back(MeshLevel{template_mesh, std::nullopt, std::nullopt, vertex_adjacency(template_mesh)});
  for (int target : level_face_targets) {
    MeshLevel& fine = h.levels.back();
    TriMesh coarse = qem_simplify(fine.mesh, target);
    ad::SparseMat down = build_transform(fine.mesh, coarse, k_nn);
    ad::Matrix fine_pos(static_cast<Eigen::Index>(fine.mesh.vertices.size()), 3);
    for (std::size_t i = 0; i < fine.mesh.vertices.size(); ++i) fine_pos.row(static_cast<Eigen::Index>(i)) = fine.mesh.vertices[i].transpose();
    const ad::Matrix coarse_pos = down.multiply(fine_pos);
    for (std::size_t i = 0; i < coarse.vertices.size(); ++i) coarse.vertices[i] = coarse_pos.row(static_cast<Eigen::Index>(i)).transpose();
    if (static_cast<int>(coarse.vertices.size()) >= static_cast<int>(fine.mesh.vertices.size()))
      throw DataError("build_hierarchy: level did not reduce the vertex count");
    fine.up = build_transform(coarse, fine.mesh, k_nn);
    fine.down = std::move(down);
    MeshLevel next;
    next.adjacency = vertex_adjacency(coarse);
    next.mesh = std::move(coarse);
    h.levels.push_back(std::move(next));
  }
  return h;
}

TriMesh loop_subdivide(const TriMesh& mesh, int iterations) {
  TriMesh cur = mesh;
  for (int it = 0; it < iterations; ++it) {
    const std::vector<Edge> edges = mesh_edges(cur);
    std::map<std::pair<int, int>, int> edge_id;
    for (std::size_t e = 0; e < edges.size(); ++e) {
      if (edges[e].face_count > 2) throw DataError("loop_subdivide: non-manifold edge encountered");
      edge_id[{edges[e].a, edges[e].b}] = static_cast<int>(e);
    }
    auto key = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };

    // Opposite corners of each edge.
    std::vector<std::vector<int>> opposite(edges.size());
    for (const Face& f : cur.faces) {
      for (int k = 0; k < 3; ++k) {
        const int a = f[static_cast<std::size_t>(k)];
        const int b = f[static_cast<std::size_t>((k + 1) % 3)];
        const int c = f[static_cast<std::size_t>((k + 2) % 3)];
        opposite[static_cast<std::size_t>(edge_id.at(key(a, b)))].push_back(c);
      }
    }
    const std::size_t nv = cur.vertices.size();
    std::vector<std::vector<int>> nbrs(nv);
    std::vector<std::vector<int>> boundary_nbrs(nv);
    for (const Edge& e : edges) {
      nbrs[static_cast<std::size_t>(e.a)].push_back(e.b);
      nbrs[static_cast<std::size_t>(e.b)].push_back(e.a);
      if (e.face_count == 1) {
        boundary_nbrs[static_cast<std::size_t>(e.a)].push_back(e.b);
        boundary_nbrs[static_cast<std::size_t>(e.b)].push_back(e.a);
      }
    }

    TriMesh next;
    next.vertices.resize(nv + edges.size());
    for (std::size_t v = 0; v < nv; ++v) {
      const Vec3& p = cur.vertices[v];
      if (!boundary_nbrs[v].empty()) {
        if (boundary_nbrs[v].size() == 2) {
          next.vertices[v] = 0.75 * p + 0.125 * (cur.vertices[static_cast<std::size_t>(boundary_nbrs[v][0])] +
                                                 cur.vertices[static_cast<std::size_t>(boundary_nbrs[v][1])]);
        } else {
          next.vertices[v] = p;  // corner or non-manifold boundary vertex stays put
        }
        continue;
      }
      const std::size_t n = nbrs[v].size();
      if (n == 0) {
        next.vertices[v] = p;
        continue;
      }
      const double beta = n == 3 ? 3.0 / 16.0 : 3.0 / (8.0 * static_cast<double>(n));
      Vec3 s = Vec3::Zero();
      for (int u : nbrs[v]) s += cur.vertices[static_cast<std::size_t>(u)];
      next.vertices[v] = (1.0 - static_cast<double>(n) * beta) * p + beta * s;
    }
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const Vec3& a = cur.vertices[static_cast<std::size_t>(edges[e].a)];
      const Vec3& b = cur.vertices[static_cast<std::size_t>(edges[e].b)];
      if (opposite[e].size() == 2) {
        next.vertices[nv + e] = 0.375 * (a + b) + 0.125 * (cur.vertices[static_cast<std::size_t>(opposite[e][0])] +
                                                          cur.vertices[static_cast<std::size_t>(opposite[e][1])]);
      } else {
        next.vertices[nv + e] = 0.5 * (a + b);
      }
    }
    next.faces.reserve(cur.faces.size() * 4);
    for (const Face& f : cur.faces) {
      const int ab = static_cast<int>(nv) + edge_id.at(key(f[0], f[1]));
      const int bc = static_cast<int>(nv) + edge_id.at(key(f[1], f[2]));
      const int ca = static_cast<int>(nv) + edge_id.at(key(f[2], f[0]));
      next.faces.push_back({f[0], ab, ca});
      next.faces.push_back({f[1], bc, ab});
      next.faces.push_back({f[2], ca, bc});
      next.faces.push_back({ab, bc, ca});
    }
    cur = std::move(next);
  }
  return cur;
}

namespace {

ad::PackArray vertices_array(const std::string& name, const TriMesh& m) {
  ad::Matrix v(static_cast<Eigen::Index>(m.vertices.size()), 3);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = m.vertices[i].transpose();
  return ad::PackArray::from_matrix(name, v);
}

ad::PackArray faces_array(const std::string& name, const TriMesh& m) {
  std::vector<std::int64_t> f;
  f.reserve(m.faces.size() * 3);
  for (const Face& face : m.faces)
    for (int v : face) f.push_back(v);
  return ad::PackArray::from_ints(name, std::move(f), {static_cast<std::int64_t>(m.faces.size()), 3});
}

void push_sparse(ad::Pack& pack, const std::string& prefix, const ad::SparseMat& s) {
  std::vector<std::int64_t> rc;
  std::vector<double> w;
  for (const auto& t : s.triplets()) {
    rc.push_back(t.row);
    rc.push_back(t.col);
    w.push_back(t.weight);
  }
  const auto n = static_cast<std::int64_t>(s.nonzeros());
  pack.arrays.push_back(ad::PackArray::from_ints(prefix + "/index", std::move(rc), {n, 2}));
  ad::PackArray weights;
  weights.name = prefix + "/weight";
  weights.shape = {n, 1};
  weights.f64 = std::move(w);
  pack.arrays.push_back(std::move(weights));
}

ad::SparseMat read_sparse(const ad::Pack& pack, const std::string& prefix, int rows, int cols) {
  const auto& idx = pack.at(prefix + "/index");
  const auto& w = pack.at(prefix + "/weight");
  std::vector<ad::SparseMat::Triplet> t;
  for (std::size_t i = 0; i < w.f64.size(); ++i)
    t.push_back({static_cast<int>(idx.i64[2 * i]), static_cast<int>(idx.i64[2 * i + 1]), w.f64[i]});
  return ad::SparseMat(rows, cols, std::move(t));
}

}  // namespace

void append_hierarchy(ad::Pack& pack, const SamplingHierarchy& h, const std::string& prefix) {
  std::vector<std::int64_t> info{static_cast<std::int64_t>(h.levels.size()), h.k_nn};
  for (int t : h.face_targets) info.push_back(t);
  const auto n = static_cast<std::int64_t>(info.size());
  pack.arrays.push_back(ad::PackArray::from_ints(prefix + "info", std::move(info), {n}));
  for (std::size_t i = 0; i < h.levels.size(); ++i) {
    const std::string p = prefix + "level" + std::to_string(i);
    pack.arrays.push_back(vertices_array(p + "/vertices", h.levels[i].mesh));
    pack.arrays.push_back(faces_array(p + "/faces", h.levels[i].mesh));
    if (h.levels[i].down) push_sparse(pack, p + "/down", *h.levels[i].down);
    if (h.levels[i].up) push_sparse(pack, p + "/up", *h.levels[i].up);
  }
}

SamplingHierarchy read_hierarchy(const ad::Pack& pack, const std::string& prefix) {
  if (!pack.contains(prefix + "info")) throw DataError("pack holds no sampling hierarchy");
  const auto& info = pack.at(prefix + "info").i64;
  if (info.size() < 2) throw DataError("malformed hierarchy header");
  SamplingHierarchy h;
  const auto n = static_cast<std::size_t>(info[0]);
  h.k_nn = static_cast<int>(info[1]);
  for (std::size_t i = 2; i < info.size(); ++i) h.face_targets.push_back(static_cast<int>(info[i]));
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = prefix + "level" + std::to_string(i);
    MeshLevel level;
    const ad::Matrix v = pack.at(p + "/vertices").to_matrix();
    for (Eigen::Index r = 0; r < v.rows(); ++r) level.mesh.vertices.emplace_back(v(r, 0), v(r, 1), v(r, 2));
    const auto& f = pack.at(p + "/faces").i64;
    for (std::size_t k = 0; k + 2 < f.size(); k += 3)
      level.mesh.faces.push_back({static_cast<int>(f[k]), static_cast<int>(f[k + 1]), static_cast<int>(f[k + 2])});
    level.adjacency = vertex_adjacency(level.mesh);
    h.levels.push_back(std::move(level));
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const std::string p = prefix + "level" + std::to_string(i);
    const int fine = static_cast<int>(h.levels[i].mesh.vertices.size());
    const int coarse = static_cast<int>(h.levels[i + 1].mesh.vertices.size());
    h.levels[i].down = read_sparse(pack, p + "/down", coarse, fine);
    h.levels[i].up = read_sparse(pack, p + "/up", fine, coarse);
  }
  return h;
}

void save_hierarchy(const std::filesystem::path& path, const SamplingHierarchy& h) {
  ad::Pack pack;
  nlohmann::json meta;
  meta["kind"] = "sampling-hierarchy";
  meta["format_version"] = 1;
  meta["levels"] = h.levels.size();
  meta["k_nn"] = h.k_nn;
  meta["face_targets"] = h.face_targets;
  pack.metadata_json = meta.dump();
  append_hierarchy(pack, h, "");
  ad::write_pack(path, pack);
}

SamplingHierarchy load_hierarchy(const std::filesystem::path& path) {
  const ad::Pack pack = ad::read_pack(path);
  const auto meta = nlohmann::json::parse(pack.metadata_json);
  if (meta.value("kind", "") != "sampling-hierarchy") throw DataError("not a hierarchy file: " + path.string());
  return read_hierarchy(pack, "");
}

}  // namespace facecom
