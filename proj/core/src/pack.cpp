#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "facecom/autodiff.hpp"
#include "facecom/errors.hpp"

namespace facecom::ad {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'P', 'K'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated pack file");
  return v;
}

}  // namespace

std::int64_t PackArray::element_count() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

PackArray PackArray::from_matrix(std::string name, const Matrix& m) {
  PackArray a;
  a.name = std::move(name);
  a.dtype = DType::F64;
  a.shape = {m.rows(), m.cols()};
  a.f64.assign(m.data(), m.data() + m.size());
  return a;
}

PackArray PackArray::from_ints(std::string name, std::vector<std::int64_t> values, std::vector<std::int64_t> shape) {
  PackArray a;
  a.name = std::move(name);
  a.dtype = DType::I64;
  a.shape = std::move(shape);
  a.i64 = std::move(values);
  if (a.element_count() != static_cast<std::int64_t>(a.i64.size()))
    throw DataError("pack array '" + a.name + "': shape does not match value count");
  return a;
}

Matrix PackArray::to_matrix() const {
  if (dtype != DType::F64 || shape.size() != 2) throw DataError("pack array '" + name + "' is not a f64 matrix");
  return Eigen::Map<const Matrix>(f64.data(), shape[0], shape[1]);
}

const PackArray& Pack::at(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw DataError("pack has no array named '" + name + "'");
}

bool Pack::contains(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

void write_pack(const std::filesystem::path& path, const Pack& pack) {
  nlohmann::json header;
  header["format"] = "facecom-pack";
  header["version"] = kPackVersion;
  header["metadata"] = nlohmann::json::parse(pack.metadata_json);
  std::uint64_t offset = 0;
  header["arrays"] = nlohmann::json::array();
  for (const PackArray& a : pack.arrays) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(a.element_count()) * 8;
    header["arrays"].push_back({{"name", a.name},
                                {"dtype", a.dtype == PackArray::DType::F64 ? "f64" : "i64"},
                                {"shape", a.shape},
                                {"offset", offset},
                                {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write pack: " + path.string());
  out.write(kMagic, 4);
  put(out, kPackVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const PackArray& a : pack.arrays) {
    if (a.dtype == PackArray::DType::F64) {
      if (static_cast<std::int64_t>(a.f64.size()) != a.element_count())
        throw DataError("pack array '" + a.name + "': shape does not match value count");
      out.write(reinterpret_cast<const char*>(a.f64.data()), static_cast<std::streamsize>(a.f64.size() * 8));
    } else {
      out.write(reinterpret_cast<const char*>(a.i64.data()), static_cast<std::streamsize>(a.i64.size() * 8));
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

Pack read_pack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open pack: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a facecom pack: " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kPackVersion) throw DataError("unsupported pack version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("truncated pack header");
  const nlohmann::json header = nlohmann::json::parse(text);
  Pack pack;
  pack.metadata_json = header.value("metadata", nlohmann::json::object()).dump();
  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("arrays")) {
    PackArray a;
    a.name = entry.at("name").get<std::string>();
    a.dtype = entry.at("dtype").get<std::string>() == "f64" ? PackArray::DType::F64 : PackArray::DType::I64;
    a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    const auto n = static_cast<std::size_t>(a.element_count());
    if (a.dtype == PackArray::DType::F64) {
      a.f64.resize(n);
      in.read(reinterpret_cast<char*>(a.f64.data()), static_cast<std::streamsize>(n * 8));
    } else {
      a.i64.resize(n);
      in.read(reinterpret_cast<char*>(a.i64.data()), static_cast<std::streamsize>(n * 8));
    }
    if (!in) throw DataError("truncated pack payload for '" + a.name + "'");
    pack.arrays.push_back(std::move(a));
  }
  return pack;
}

void save_parameters(const std::filesystem::path& path, std::span<const Parameter* const> params,
                     const std::string& metadata_json) {
  Pack pack;
  pack.metadata_json = metadata_json;
  for (const Parameter* p : params) pack.arrays.push_back(PackArray::from_matrix(p->name, p->value));
  write_pack(path, pack);
}

std::string load_parameters(const std::filesystem::path& path, std::span<Parameter* const> params) {
  const Pack pack = read_pack(path);
  std::unordered_map<std::string, const PackArray*> by_name;
  for (const auto& a : pack.arrays) by_name[a.name] = &a;
  for (Parameter* p : params) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter '" + p->name + "'");
    Matrix m = it->second->to_matrix();
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw DataError("checkpoint parameter '" + p->name + "' has a different shape");
    p->value = std::move(m);
    p->zero_grad();
  }
  return pack.metadata_json;
}

}  // namespace facecom::ad
