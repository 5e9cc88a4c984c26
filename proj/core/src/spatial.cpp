#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>

#include "facecom/errors.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

namespace {

constexpr int kLeafSize = 4;

TrianglePoint on_segment(const Vec3& p, const Vec3& a, const Vec3& b, int ia, int ib) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  TrianglePoint out{a + t * ab, Vec3::Zero()};
  out.barycentric[ia] = 1.0 - t;
  out.barycentric[ib] = t;
  return out;
}

double box_distance2(const Eigen::AlignedBox3d& box, const Vec3& p) {
  return box.squaredExteriorDistance(p);
}

}  // namespace

// Region classification after Ericson, "Real-Time Collision Detection", 5.1.5.
TrianglePoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return {a, Vec3(1, 0, 0)};

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return {b, Vec3(0, 1, 0)};

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return {a + v * ab, Vec3(1.0 - v, v, 0.0)};
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return {c, Vec3(0, 0, 1)};

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return {a + w * ac, Vec3(1.0 - w, 0.0, w)};
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {b + w * (c - b), Vec3(0.0, 1.0 - w, w)};
  }

  const double sum = va + vb + vc;
  if (!(sum > 0.0)) {
    // Degenerate (collinear) triangle: best of the three edges.
    TrianglePoint best = on_segment(p, a, b, 0, 1);
    for (const TrianglePoint& cand : {on_segment(p, b, c, 1, 2), on_segment(p, c, a, 2, 0)}) {
      if ((cand.point - p).squaredNorm() < (best.point - p).squaredNorm()) best = cand;
    }
    return best;
  }
  const double v = vb / sum;
  const double w = vc / sum;
  const double u = 1.0 - v - w;
  return {u * a + v * b + w * c, Vec3(u, v, w)};
}

SurfaceIndex::SurfaceIndex(const TriMesh& mesh) : mesh_(mesh) {
  if (mesh_.faces.empty()) throw DataError("surface query on a mesh without faces");
  order_.resize(mesh_.faces.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * mesh_.faces.size() / kLeafSize + 2);
  build(0, static_cast<int>(order_.size()));
}

int SurfaceIndex::build(int begin, int end) {
  Node node;
  node.begin = begin;
  node.end = end;
  Eigen::AlignedBox3d centroid_box;
  for (int i = begin; i < end; ++i) {
    const Face& f = mesh_.faces[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
    for (int v : f) node.box.extend(mesh_.vertices[static_cast<std::size_t>(v)]);
    centroid_box.extend(face_centroid(mesh_, order_[static_cast<std::size_t>(i)]));
  }
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (end - begin <= kLeafSize) return id;

  int axis = 0;
  centroid_box.sizes().maxCoeff(&axis);
  const int mid = begin + (end - begin) / 2;
  std::vector<std::pair<double, int>> keys;
  keys.reserve(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) {
    const int f = order_[static_cast<std::size_t>(i)];
    keys.emplace_back(face_centroid(mesh_, f)[axis], f);
  }
  std::nth_element(keys.begin(), keys.begin() + (mid - begin), keys.end());
  for (int i = begin; i < end; ++i) order_[static_cast<std::size_t>(i)] = keys[static_cast<std::size_t>(i - begin)].second;

  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

SurfaceHit SurfaceIndex::closest(const Vec3& p) const {
  double best_d2 = std::numeric_limits<double>::infinity();
  int best_face = -1;
  TrianglePoint best_tp{Vec3::Zero(), Vec3::Zero()};

  std::vector<int> stack;
  stack.reserve(64);
  stack.push_back(0);
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    stack.pop_back();
    if (box_distance2(node.box, p) > best_d2) continue;
    if (node.left < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int fi = order_[static_cast<std::size_t>(i)];
        const Face& f = mesh_.faces[static_cast<std::size_t>(fi)];
        const TrianglePoint tp = closest_point_on_triangle(
            p, mesh_.vertices[static_cast<std::size_t>(f[0])], mesh_.vertices[static_cast<std::size_t>(f[1])],
            mesh_.vertices[static_cast<std::size_t>(f[2])]);
        const double d2 = (tp.point - p).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && fi < best_face)) {
          best_d2 = d2;
          best_face = fi;
          best_tp = tp;
        }
      }
      continue;
    }
    const Node& l = nodes_[static_cast<std::size_t>(node.left)];
    const Node& r = nodes_[static_cast<std::size_t>(node.right)];
    // Push the farther child first so the nearer one is processed next.
    if (box_distance2(l.box, p) <= box_distance2(r.box, p)) {
      stack.push_back(node.right);
      stack.push_back(node.left);
    } else {
      stack.push_back(node.left);
      stack.push_back(node.right);
    }
  }
  SurfaceHit hit;
  hit.distance = std::sqrt(best_d2);
  hit.closest_point = best_tp.point;
  hit.face_index = best_face;
  hit.barycentric = best_tp.barycentric;
  return hit;
}

SurfaceHit point_to_surface(const Vec3& p, const TriMesh& mesh) { return SurfaceIndex(mesh).closest(p); }

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (!points_.empty()) build(0, static_cast<int>(points_.size()), 0);
}

int KdTree::build(int begin, int end, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{});
  nodes_.back().begin = begin;
  nodes_.back().end = end;
  if (end - begin <= 8) return id;

  Eigen::AlignedBox3d box;
  for (int i = begin; i < end; ++i) box.extend(points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])]);
  int axis = 0;
  box.sizes().maxCoeff(&axis);
  (void)depth;
  const int mid = begin + (end - begin) / 2;
  auto first = order_.begin() + begin;
  std::nth_element(first, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
    const double pa = points_[static_cast<std::size_t>(a)][axis];
    const double pb = points_[static_cast<std::size_t>(b)][axis];
    return pa < pb || (pa == pb && a < b);
  });
  const double split = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(mid)])][axis];
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  Node& node = nodes_[static_cast<std::size_t>(id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

std::vector<int> KdTree::knn(const Vec3& q, int k) const {
  if (k < 0 || static_cast<std::size_t>(k) > points_.size())
    throw DataError("knn: k exceeds point count");
  if (k == 0) return {};
  using Entry = std::pair<double, int>;  // (d2, index); max-heap keeps the worst on top
  std::priority_queue<Entry> heap;
  auto worst = [&]() { return heap.size() < static_cast<std::size_t>(k) ? std::numeric_limits<double>::infinity() : heap.top().first; };

  struct Item {
    int node;
    double d2;  // lower bound on distance to the node's region
  };
  std::vector<Item> stack{{0, 0.0}};
  while (!stack.empty()) {
    const Item it = stack.back();
    stack.pop_back();
    if (it.d2 > worst()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(it.node)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[static_cast<std::size_t>(i)];
        const double d2 = (points_[static_cast<std::size_t>(idx)] - q).squaredNorm();
        const Entry e{d2, idx};
        if (heap.size() < static_cast<std::size_t>(k)) heap.push(e);
        else if (e < heap.top()) {
          heap.pop();
          heap.push(e);
        }
      }
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    stack.push_back({far, std::max(it.d2, diff * diff)});
    stack.push_back({near, it.d2});
  }
  std::vector<Entry> sorted;
  while (!heap.empty()) {
    sorted.push_back(heap.top());
    heap.pop();
  }
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> out;
  out.reserve(sorted.size());
  for (const auto& e : sorted) out.push_back(e.second);
  return out;
}

int KdTree::nearest(const Vec3& q) const {
  if (points_.empty()) throw DataError("nearest-point query on an empty point set");
  return knn(q, 1).front();
}

std::vector<std::vector<int>> knn_vertices(const TriMesh& source, std::span<const Vec3> queries, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > source.vertices.size())
    throw DataError("knn_vertices: k=" + std::to_string(k) + " exceeds vertex count " +
                    std::to_string(source.vertices.size()));
  const KdTree tree(source.vertices);
  std::vector<std::vector<int>> out;
  out.reserve(queries.size());
  for (const Vec3& q : queries) out.push_back(tree.knn(q, k));
  return out;
}

}  // namespace facecom
