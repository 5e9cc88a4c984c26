#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "facecom/errors.hpp"
#include "facecom/mesh.hpp"

namespace facecom {

namespace {

static_assert(std::endian::native == std::endian::little, "PLY binary I/O assumes little-endian");

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

int parse_obj_index(const std::string& token, int vertex_count) {
  const std::string head = token.substr(0, token.find('/'));
  int idx = 0;
  const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
  if (ec != std::errc() || idx == 0) throw DataError("bad OBJ face index '" + token + "'");
  return idx > 0 ? idx - 1 : vertex_count + idx;
}

TriMesh read_obj(std::istream& in) {
  TriMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z())) throw DataError("bad OBJ vertex record: " + line);
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ls >> tok) poly.push_back(parse_obj_index(tok, static_cast<int>(mesh.vertices.size())));
      if (poly.size() < 3) throw DataError("OBJ face with fewer than 3 vertices: " + line);
      for (std::size_t k = 1; k + 1 < poly.size(); ++k) mesh.faces.push_back({poly[0], poly[k], poly[k + 1]});
    }
  }
  return mesh;
}

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

PlyType parse_ply_type(const std::string& s) {
  if (s == "char" || s == "int8") return PlyType::Int8;
  if (s == "uchar" || s == "uint8") return PlyType::UInt8;
  if (s == "short" || s == "int16") return PlyType::Int16;
  if (s == "ushort" || s == "uint16") return PlyType::UInt16;
  if (s == "int" || s == "int32") return PlyType::Int32;
  if (s == "uint" || s == "uint32") return PlyType::UInt32;
  if (s == "float" || s == "float32") return PlyType::Float32;
  if (s == "double" || s == "float64") return PlyType::Float64;
  throw DataError("unsupported PLY property type '" + s + "'");
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

template <typename T>
T read_raw(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated binary PLY");
  return v;
}

double read_binary_value(std::istream& in, PlyType t) {
  switch (t) {
    case PlyType::Int8: return read_raw<std::int8_t>(in);
    case PlyType::UInt8: return read_raw<std::uint8_t>(in);
    case PlyType::Int16: return read_raw<std::int16_t>(in);
    case PlyType::UInt16: return read_raw<std::uint16_t>(in);
    case PlyType::Int32: return read_raw<std::int32_t>(in);
    case PlyType::UInt32: return read_raw<std::uint32_t>(in);
    case PlyType::Float32: return read_raw<float>(in);
    case PlyType::Float64: return read_raw<double>(in);
  }
  return 0.0;
}

TriMesh read_ply(std::istream& in) {
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw DataError("missing PLY magic");
  bool binary = false;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw DataError("unsupported PLY format '" + fmt + "'");
    } else if (tag == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty()) throw DataError("PLY property before element");
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string ct, it;
        ls >> ct >> it >> p.name;
        p.is_list = true;
        p.count_type = parse_ply_type(ct);
        p.type = parse_ply_type(it);
      } else {
        p.type = parse_ply_type(type);
        ls >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (tag == "end_header") {
      break;
    }
  }

  TriMesh mesh;
  for (const PlyElement& e : elements) {
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    bool has_label = false;
    for (const auto& p : e.props) has_label = has_label || (is_vertex && p.name == "label");
    for (std::size_t i = 0; i < e.count; ++i) {
      Vec3 pos = Vec3::Zero();
      int label = 0;
      std::istringstream ls;
      if (!binary) {
        if (!std::getline(in, line)) throw DataError("truncated ascii PLY");
        ls.str(line);
      }
      auto scalar = [&](PlyType t) {
        if (binary) return read_binary_value(in, t);
        double v = 0.0;
        if (!(ls >> v)) throw DataError("malformed ascii PLY record");
        return v;
      };
      for (const auto& p : e.props) {
        if (p.is_list) {
          const auto n = static_cast<std::size_t>(scalar(p.count_type));
          std::vector<int> idx(n);
          for (auto& v : idx) v = static_cast<int>(scalar(p.type));
          if (is_face && (p.name == "vertex_indices" || p.name == "vertex_index")) {
            if (n < 3) throw DataError("PLY face with fewer than 3 vertices");
            for (std::size_t k = 1; k + 1 < n; ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
          }
        } else {
          const double v = scalar(p.type);
          if (is_vertex) {
            if (p.name == "x") pos.x() = v;
            else if (p.name == "y") pos.y() = v;
            else if (p.name == "z") pos.z() = v;
            else if (p.name == "label") label = static_cast<int>(v);
          }
        }
      }
      if (is_vertex) {
        mesh.vertices.push_back(pos);
        if (has_label) mesh.labels.push_back(label);
      }
    }
  }
  return mesh;
}

void write_obj(const TriMesh& mesh, std::ostream& out) {
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const Vec3& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const Face& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

void write_ply(const TriMesh& mesh, std::ostream& out, PlyEncoding encoding) {
  const bool labels = !mesh.labels.empty();
  const char* coord = encoding == PlyEncoding::BinaryFloat64 ? "double" : "float";
  out << "ply\n"
      << "format " << (encoding == PlyEncoding::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
      << "element vertex " << mesh.vertices.size() << '\n'
      << "property " << coord << " x\nproperty " << coord << " y\nproperty " << coord << " z\n";
  if (labels) out << "property int label\n";
  out << "element face " << mesh.faces.size() << '\n'
      << "property list uchar int vertex_indices\n"
      << "end_header\n";
  if (encoding == PlyEncoding::Ascii) {
    out.precision(std::numeric_limits<float>::max_digits10);
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const Vec3& v = mesh.vertices[i];
      out << static_cast<float>(v.x()) << ' ' << static_cast<float>(v.y()) << ' '
          << static_cast<float>(v.z());
      if (labels) out << ' ' << mesh.labels[i];
      out << '\n';
    }
    for (const Face& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    return;
  }
  auto put = [&out](const auto& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(value));
  };
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    for (int k = 0; k < 3; ++k) {
      if (encoding == PlyEncoding::BinaryFloat64) put(v[k]);
      else put(static_cast<float>(v[k]));
    }
    if (labels) put(static_cast<std::int32_t>(mesh.labels[i]));
  }
  for (const Face& f : mesh.faces) {
    put(static_cast<std::uint8_t>(3));
    for (int idx : f) put(static_cast<std::int32_t>(idx));
  }
}

}  // namespace

TriMesh load_mesh(const std::filesystem::path& path, LoadReport* report) {
  const std::string ext = lower_extension(path);
  if (ext != ".obj" && ext != ".ply") throw DataError("unsupported mesh format: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mesh file: " + path.string());
  TriMesh mesh = ext == ".obj" ? read_obj(in) : read_ply(in);
  const std::size_t dropped = drop_degenerate_faces(mesh);
  if (report) report->dropped_faces = dropped;
  if (mesh.vertices.empty()) throw DataError("mesh has no vertices: " + path.string());
  return mesh;
}

void save_mesh(const TriMesh& mesh, const std::filesystem::path& path, PlyEncoding encoding) {
  const std::string ext = lower_extension(path);
  if (ext != ".obj" && ext != ".ply") throw DataError("unsupported mesh format: " + path.string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write mesh file: " + path.string());
  if (ext == ".obj") write_obj(mesh, out);
  else write_ply(mesh, out, encoding);
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace facecom
