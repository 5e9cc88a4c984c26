#include "facecom/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include <json.hpp>

#include "facecom/errors.hpp"
#include "facecom/random.hpp"

namespace facecom {

namespace {

constexpr double kHalfWidth = 75.0;
constexpr double kHalfHeight = 100.0;
constexpr double kDomeHeight = 65.0;

// Anisotropic Gaussian bump centred at (cx, cy).
double bump(double x, double y, double cx, double cy, double sx, double sy) {
  const double dx = (x - cx) / sx;
  const double dy = (y - cy) / sy;
  return std::exp(-0.5 * (dx * dx + dy * dy));
}

double mirrored_bump(double x, double y, double cx, double cy, double sx, double sy) {
  return bump(x, y, cx, cy, sx, sy) + bump(x, y, -cx, cy, sx, sy);
}

double template_height(double x, double y) {
  const double u = x / kHalfWidth;
  const double v = y / kHalfHeight;
  double z = kDomeHeight * (1.0 - u * u - v * v);
  z += 22.0 * bump(x, y, 0.0, -8.0, 9.0, 13.0);                                // nose
  z += 10.0 * std::exp(-0.5 * x * x / 25.0) * std::exp(-std::pow((y - 15.0) / 18.0, 2));  // bridge
  z += 6.0 * mirrored_bump(x, y, 30.0, 44.0, 14.0, 6.0);                       // brows
  z -= 8.0 * mirrored_bump(x, y, 32.0, 28.0, 10.0, 7.0);                       // eye sockets
  z += 4.0 * bump(x, y, 0.0, -40.0, 16.0, 4.0);                                // upper lip
  z += 3.5 * bump(x, y, 0.0, -50.0, 14.0, 4.0);                                // lower lip
  z += 5.0 * bump(x, y, 0.0, -76.0, 15.0, 10.0);                               // chin
  z += 5.0 * mirrored_bump(x, y, 42.0, -10.0, 16.0, 16.0);                     // cheeks
  return z;
}

double sign(double x) { return x < 0.0 ? -1.0 : (x > 0.0 ? 1.0 : 0.0); }

}  // namespace

int template_vertex(int column, int row) { return row * kTemplateColumns + column; }

TriMesh make_template() {
  TriMesh m;
  m.vertices.reserve(static_cast<std::size_t>(kTemplateColumns * kTemplateRows));
  const int mid = kTemplateColumns / 2;
  for (int r = 0; r < kTemplateRows; ++r) {
    const double v = 2.0 * r / (kTemplateRows - 1) - 1.0;
    for (int c = 0; c < kTemplateColumns; ++c) {
      // Mirror the column coordinate exactly so the template is symmetric bit for bit.
      const double u = c < mid ? -static_cast<double>(mid - c) / mid : static_cast<double>(c - mid) / mid;
      // Square-to-disk map keeps the footprint elliptic without pole singularities.
      const double x = kHalfWidth * u * std::sqrt(1.0 - 0.5 * v * v);
      const double y = kHalfHeight * v * std::sqrt(1.0 - 0.5 * u * u);
      m.vertices.emplace_back(x, y, template_height(x, y));
    }
  }
  for (int r = 0; r + 1 < kTemplateRows; ++r) {
    for (int c = 0; c + 1 < kTemplateColumns; ++c) {
      const int a = template_vertex(c, r);
      const int b = template_vertex(c + 1, r);
      const int d = template_vertex(c, r + 1);
      const int e = template_vertex(c + 1, r + 1);
      if (c < mid) {
        m.faces.push_back({a, b, d});
        m.faces.push_back({b, e, d});
      } else {
        m.faces.push_back({a, b, e});
        m.faces.push_back({a, e, d});
      }
    }
  }
  return m;
}

int nose_tip_vertex(const TriMesh& template_mesh) {
  int best = 0;
  for (std::size_t i = 1; i < template_mesh.vertices.size(); ++i)
    if (template_mesh.vertices[i].z() > template_mesh.vertices[static_cast<std::size_t>(best)].z())
      best = static_cast<int>(i);
  return best;
}

std::vector<Vec3> identity_displacement(const TriMesh& template_mesh, const IdentityParams& g) {
  for (double x : g)
    if (!std::isfinite(x) || x < -1.0 || x > 1.0)
      throw UsageError("identity parameters must lie in [-1, 1]");
  std::vector<Vec3> out(template_mesh.vertices.size(), Vec3::Zero());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec3& p = template_mesh.vertices[i];
    const double x = p.x();
    const double y = p.y();
    Vec3 d = Vec3::Zero();
    // Linear blendshapes.
    d += g[0] * 5.0 * bump(x, y, 0.0, -8.0, 10.0, 14.0) * Vec3(0.0, -0.4, 1.0);   // nose length
    d += g[1] * Vec3(0.35 * x * bump(x, y, 0.0, -5.0, 12.0, 18.0), 0.0, 0.0);     // nose width
    d += g[2] * Vec3(0.05 * x * (1.0 - 0.5 * std::pow(y / kHalfHeight, 2)), 0.0, 0.0);  // face width
    {
      const double jaw = std::exp(-std::pow((y + 55.0) / 22.0, 2));
      const double side = 0.3 + 0.7 * std::min(1.0, std::pow(x / 60.0, 2));
      d += g[3] * Vec3(0.04 * x * jaw, 0.0, 6.0 * jaw * side);                   // jaw depth
    }
    d += g[4] * mirrored_bump(x, y, 30.0, 44.0, 16.0, 9.0) * Vec3(0.0, 3.0, 2.0);  // brow height
    {
      const double cheek = mirrored_bump(x, y, 42.0, -10.0, 18.0, 18.0);
      d += g[5] * cheek * Vec3(2.0 * sign(x), 0.0, 5.0);                         // cheek fullness
    }
    d += g[6] * bump(x, y, 0.0, -76.0, 16.0, 12.0) * Vec3(0.0, -4.0, 4.0);        // chin
    {
      const double mouth = bump(x, y, 0.0, -45.0, 20.0, 8.0);
      d += g[7] * mouth * Vec3(0.06 * x, 0.0, 3.0);                              // mouth
    }
    // Interacting coordinates: amplitudes are products, centres move.
    const double a = g[8];
    const double b = g[9];
    const double c = g[10];
    const double e = g[11];
    d.z() += (4.0 * a * b + 2.5 * a * a) * bump(x, y, 20.0 * c, 10.0 + 10.0 * e, 14.0, 14.0);
    d.z() += 4.0 * c * e * bump(x, y, -35.0 + 10.0 * a, -25.0 + 10.0 * b, 12.0, 12.0);
    d.z() += (3.0 * a * e + 3.0 * b * c) * bump(x, y, 35.0 + 10.0 * e, -25.0 + 10.0 * c, 12.0, 12.0);
    d.x() += 3.0 * b * c * bump(x, y, 0.0, -8.0, 10.0, 14.0);
    out[i] = d;
  }
  return out;
}

TriMesh synth_identity(const IdentityParams& g) {
  TriMesh m = make_template();
  const std::vector<Vec3> d = identity_displacement(m, g);
  for (std::size_t i = 0; i < d.size(); ++i) m.vertices[i] += d[i];
  return m;
}

int held_out_count(int n) { return (n + 19) / 20; }

Dataset make_dataset(int n, std::uint64_t seed) {
  if (n < 20) throw UsageError("make_dataset: n must be at least 20");
  Dataset data;
  data.seed = seed;
  Rng rng = Rng::stream(seed, "dataset");
  const TriMesh base = make_template();
  for (int id = 0; id < n; ++id) {
    DatasetEntry entry;
    entry.id = id;
    for (double& x : entry.g) x = rng.uniform(-1.0, 1.0);
    entry.mesh = base;
    const std::vector<Vec3> d = identity_displacement(base, entry.g);
    for (std::size_t i = 0; i < d.size(); ++i) entry.mesh.vertices[i] += d[i];
    data.entries.push_back(std::move(entry));
  }
  const int test = held_out_count(n);
  for (int id = 0; id < n; ++id) (id < n - test ? data.train : data.test).push_back(id);
  return data;
}

std::string identity_filename(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id_%04d.ply", id);
  return buf;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "facecom-dataset";
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["seed"] = data.seed;
  manifest["n"] = data.entries.size();
  manifest["identity_dims"] = kIdentityDims;
  nlohmann::json ids = nlohmann::json::array();
  nlohmann::json gs = nlohmann::json::array();
  for (const DatasetEntry& e : data.entries) {
    save_mesh(e.mesh, dir / identity_filename(e.id), PlyEncoding::BinaryFloat64);
    ids.push_back(e.id);
    gs.push_back(std::vector<double>(e.g.begin(), e.g.end()));
  }
  manifest["ids"] = ids;
  manifest["g"] = gs;
  manifest["split"] = {{"train", data.train}, {"test", data.test}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest: " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset manifest: " + path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "facecom-dataset")
    throw DataError("not a dataset manifest: " + path.string());
  if (manifest.value("format_version", 0) != kDatasetFormatVersion)
    throw DataError("unsupported dataset format version in " + path.string());
  Dataset data;
  data.seed = manifest.at("seed").get<std::uint64_t>();
  const auto ids = manifest.at("ids").get<std::vector<int>>();
  const auto gs = manifest.at("g").get<std::vector<std::vector<double>>>();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    DatasetEntry e;
    e.id = ids[i];
    if (gs[i].size() != kIdentityDims) throw DataError("manifest g vector has wrong length");
    std::copy(gs[i].begin(), gs[i].end(), e.g.begin());
    e.mesh = load_mesh(dir / identity_filename(e.id));
    data.entries.push_back(std::move(e));
  }
  data.train = manifest.at("split").at("train").get<std::vector<int>>();
  data.test = manifest.at("split").at("test").get<std::vector<int>>();
  return data;
}

std::string to_string(DefectKind kind) {
  switch (kind) {
    case DefectKind::Region:
      return "region";
    case DefectKind::Fragments:
      return "fragments";
    case DefectKind::Keypoints:
      return "keypoints";
  }
  return "region";
}

DefectKind parse_defect_kind(const std::string& name) {
  if (name == "region") return DefectKind::Region;
  if (name == "fragments") return DefectKind::Fragments;
  if (name == "keypoints") return DefectKind::Keypoints;
  throw UsageError("unknown defect kind '" + name + "' (expected region, fragments or keypoints)");
}

std::vector<double> geodesic_distances(const TriMesh& mesh, int source) {
  if (source < 0 || static_cast<std::size_t>(source) >= mesh.vertices.size())
    throw UsageError("geodesic source vertex out of range");
  const auto adj = vertex_adjacency(mesh);
  std::vector<double> dist(mesh.vertices.size(), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  dist[static_cast<std::size_t>(source)] = 0.0;
  queue.push({0.0, source});
  while (!queue.empty()) {
    const auto [d, v] = queue.top();
    queue.pop();
    if (d > dist[static_cast<std::size_t>(v)]) continue;
    for (int u : adj[static_cast<std::size_t>(v)]) {
      const double nd = d + (mesh.vertices[static_cast<std::size_t>(u)] - mesh.vertices[static_cast<std::size_t>(v)]).norm();
      if (nd < dist[static_cast<std::size_t>(u)]) {
        dist[static_cast<std::size_t>(u)] = nd;
        queue.push({nd, u});
      }
    }
  }
  return dist;
}

std::vector<double> face_geodesic_distances(const TriMesh& mesh, const std::vector<double>& vertex_distance) {
  std::vector<double> out(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Vec3 c = face_centroid(mesh, static_cast<int>(f));
    double best = std::numeric_limits<double>::infinity();
    for (int v : mesh.faces[f])
      best = std::min(best, vertex_distance[static_cast<std::size_t>(v)] + (c - mesh.vertices[static_cast<std::size_t>(v)]).norm());
    out[f] = best;
  }
  return out;
}

namespace {

Defect finish_defect(const TriMesh& mesh, const DefectSpec& spec, const std::vector<bool>& keep_face) {
  Defect out;
  out.spec = spec;
  out.mesh.vertices = mesh.vertices;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    if (keep_face[f]) {
      out.mesh.faces.push_back(mesh.faces[f]);
    } else {
      out.removed_faces.push_back(static_cast<int>(f));
    }
  }
  if (out.mesh.faces.empty()) throw DataError("defect removes every face (empty result)");
  out.index_map = compact_vertices(out.mesh);
  return out;
}

std::vector<bool> fragment_mask(const TriMesh& mesh, const std::vector<std::vector<double>>& face_dist, double radius) {
  std::vector<bool> keep(mesh.faces.size(), false);
  for (const auto& fd : face_dist)
    for (std::size_t f = 0; f < fd.size(); ++f)
      if (fd[f] <= radius) keep[f] = true;
  return keep;
}

}  // namespace

Defect make_defect(const TriMesh& mesh, const DefectSpec& spec) {
  if (mesh.vertices.empty()) throw DataError("make_defect: empty mesh");
  Defect out;
  switch (spec.kind) {
    case DefectKind::Region: {
      if (!(spec.radius > 0.0)) throw UsageError("defect radius must be positive");
      const auto vd = geodesic_distances(mesh, spec.seed_vertex);
      const auto fd = face_geodesic_distances(mesh, vd);
      std::vector<bool> keep(mesh.faces.size());
      for (std::size_t f = 0; f < fd.size(); ++f) keep[f] = fd[f] > spec.radius;
      out = finish_defect(mesh, spec, keep);
      break;
    }
    case DefectKind::Fragments: {
      if (spec.fragment_count < 1) throw UsageError("fragments defect needs at least one disk");
      if (spec.keep_fraction < 0.0 || spec.keep_fraction >= 1.0)
        throw UsageError("keep_fraction must lie in (0, 1)");
      if (spec.keep_fraction == 0.0 && !(spec.radius > 0.0)) throw UsageError("defect radius must be positive");
      Rng rng = Rng::stream(spec.seed, "fragments");
      std::vector<std::vector<double>> fd;
      for (int k = 0; k < spec.fragment_count; ++k) {
        const int centre = static_cast<int>(rng.below(mesh.vertices.size()));
        fd.push_back(face_geodesic_distances(mesh, geodesic_distances(mesh, centre)));
      }
      double radius = spec.radius;
      if (spec.keep_fraction > 0.0) {
        const auto target = static_cast<std::size_t>(std::ceil(spec.keep_fraction * static_cast<double>(mesh.faces.size())));
        double lo = 0.0;
        double hi = 1.0;
        auto kept = [&](double r) {
          const auto m = fragment_mask(mesh, fd, r);
          return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
        };
        while (kept(hi) < target && hi < 1e6) hi *= 2.0;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          (kept(mid) >= target ? hi : lo) = mid;
        }
        radius = hi;
      }
      out = finish_defect(mesh, spec, fragment_mask(mesh, fd, radius));
      out.spec.radius = radius;
      break;
    }
    case DefectKind::Keypoints: {
      if (spec.landmarks.empty()) throw UsageError("keypoints defect needs landmark ids");
      out.spec = spec;
      for (int v : spec.landmarks) {
        if (v < 0 || static_cast<std::size_t>(v) >= mesh.vertices.size())
          throw UsageError("landmark id out of range");
        out.mesh.vertices.push_back(mesh.vertices[static_cast<std::size_t>(v)]);
        out.index_map.push_back(v);
      }
      for (std::size_t f = 0; f < mesh.faces.size(); ++f) out.removed_faces.push_back(static_cast<int>(f));
      break;
    }
  }
  if (spec.jitter_mm > 0.0) {
    Rng rng = Rng::stream(spec.seed, "jitter");
    for (Vec3& v : out.mesh.vertices)
      for (int k = 0; k < 3; ++k) v[k] += spec.jitter_mm * rng.normal();
  }
  return out;
}

double removed_area_fraction(const TriMesh& source, const Defect& defect) {
  double total = 0.0;
  for (std::size_t f = 0; f < source.faces.size(); ++f) total += face_area(source, static_cast<int>(f));
  double removed = 0.0;
  for (int f : defect.removed_faces) removed += face_area(source, f);
  return total > 0.0 ? removed / total : 0.0;
}

void save_defect(const std::filesystem::path& mesh_path, const std::filesystem::path& json_path, const Defect& defect) {
  save_mesh(defect.mesh, mesh_path, PlyEncoding::BinaryFloat64);
  nlohmann::json j;
  j["format"] = "facecom-defect";
  j["format_version"] = 1;
  j["kind"] = to_string(defect.spec.kind);
  j["seed_vertex"] = defect.spec.seed_vertex;
  j["radius_mm"] = defect.spec.radius;
  j["fragment_count"] = defect.spec.fragment_count;
  j["keep_fraction"] = defect.spec.keep_fraction;
  j["seed"] = defect.spec.seed;
  j["landmarks"] = defect.spec.landmarks;
  j["jitter_mm"] = defect.spec.jitter_mm;
  j["index_map"] = defect.index_map;
  j["removed_faces"] = defect.removed_faces;
  std::ofstream out(json_path);
  if (!out) throw DataError("cannot write defect description: " + json_path.string());
  out << j.dump() << "\n";
}

Defect load_defect(const std::filesystem::path& mesh_path, const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw DataError("cannot open defect description: " + json_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed defect description " + json_path.string() + ": " + e.what());
  }
  Defect d;
  d.spec.kind = parse_defect_kind(j.at("kind").get<std::string>());
  d.spec.seed_vertex = j.at("seed_vertex").get<int>();
  d.spec.radius = j.at("radius_mm").get<double>();
  d.spec.fragment_count = j.at("fragment_count").get<int>();
  d.spec.keep_fraction = j.at("keep_fraction").get<double>();
  d.spec.seed = j.at("seed").get<std::uint64_t>();
  d.spec.landmarks = j.at("landmarks").get<std::vector<int>>();
  d.spec.jitter_mm = j.at("jitter_mm").get<double>();
  d.index_map = j.at("index_map").get<std::vector<int>>();
  d.removed_faces = j.at("removed_faces").get<std::vector<int>>();
  d.mesh = load_mesh(mesh_path);
  if (d.mesh.vertices.size() != d.index_map.size())
    throw DataError("defect index map does not match " + mesh_path.string());
  return d;
}

std::vector<Landmark> default_landmarks(const TriMesh& template_mesh) {
  struct Named {
    const char* name;
    double x;
    double y;
  };
  static const Named points[] = {
      {"nose_tip", 0, -2},          {"nose_bridge_low", 0, 15},  {"nose_bridge_high", 0, 30},
      {"alar_right", -14, -12},      {"alar_left", 14, -12},      {"subnasale", 0, -22},
      {"eye_inner_right", -18, 28},  {"eye_inner_left", 18, 28},  {"eye_outer_right", -46, 28},
      {"eye_outer_left", 46, 28},    {"eye_top_right", -32, 36},  {"eye_top_left", 32, 36},
      {"eye_bottom_right", -32, 20}, {"eye_bottom_left", 32, 20}, {"brow_inner_right", -18, 45},
      {"brow_inner_left", 18, 45},   {"brow_mid_right", -32, 48}, {"brow_mid_left", 32, 48},
      {"brow_outer_right", -46, 45}, {"brow_outer_left", 46, 45}, {"mouth_right", -22, -45},
      {"mouth_left", 22, -45},       {"upper_lip", 0, -40},       {"lower_lip", 0, -50},
      {"chin", 0, -78},              {"jaw_upper_right", -60, -20}, {"jaw_upper_left", 60, -20},
      {"jaw_mid_right", -55, -45},   {"jaw_mid_left", 55, -45},   {"jaw_low_right", -35, -68},
      {"jaw_low_left", 35, -68},     {"forehead", 0, 70},
  };
  static_assert(sizeof(points) / sizeof(points[0]) == kLandmarkCount);
  std::vector<Landmark> out;
  for (const Named& p : points) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < template_mesh.vertices.size(); ++i) {
      const Vec3& v = template_mesh.vertices[i];
      const double d = std::hypot(v.x() - p.x, v.y() - p.y);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    out.push_back({p.name, best});
  }
  return out;
}

std::vector<Landmark> load_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open landmark file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed landmark file " + path.string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != kLandmarkFormatVersion)
    throw DataError("unsupported landmark format version in " + path.string());
  std::vector<Landmark> out;
  for (const auto& item : j.at("landmarks")) out.push_back({item.at("name").get<std::string>(), item.at("vertex").get<int>()});
  return out;
}

void save_landmarks(const std::filesystem::path& path, const std::vector<Landmark>& landmarks) {
  nlohmann::json j;
  j["format_version"] = kLandmarkFormatVersion;
  j["template"] = {{"columns", kTemplateColumns}, {"rows", kTemplateRows}};
  nlohmann::json list = nlohmann::json::array();
  for (const Landmark& l : landmarks) list.push_back({{"name", l.name}, {"vertex", l.vertex}});
  j["landmarks"] = list;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write landmark file: " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<int> landmark_vertices(const std::vector<Landmark>& landmarks) {
  std::vector<int> out;
  for (const Landmark& l : landmarks) out.push_back(l.vertex);
  return out;
}

}  // namespace facecom
