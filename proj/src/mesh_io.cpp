#include <cstring>
#include <fstream>
#include <sstream>

#include "scenediff/shape.hpp"

namespace sde::shape {

void write_obj(const std::string& path, const Mesh& m) {
  std::ofstream f(path);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f.precision(9);
  for (const auto& v : m.vertices) f << "v " << v[0] << " " << v[1] << " " << v[2] << "\n";
  for (const auto& t : m.tris)
    f << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
}

Mesh read_obj(const std::string& path) {
  std::ifstream f(path);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "'");
  Mesh m;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      float x, y, z;
      ss >> x >> y >> z;
      m.vertices.push_back({x, y, z});
    } else if (tag == "f") {
      std::array<int32_t, 3> idx{};
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        ss >> tok;
        // Accept "i", "i/t", "i/t/n", "i//n" forms.
        idx[size_t(k)] = int32_t(std::stol(tok.substr(0, tok.find('/')))) - 1;
        require(idx[size_t(k)] >= 0 && idx[size_t(k)] < int32_t(m.vertices.size()), ErrorCode::io,
                "obj: face index out of range in '" + path + "'");
      }
      m.tris.push_back(idx);
    }
  }
  return m;
}

namespace {

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void write_ply(const std::string& path, const Mesh& m) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f << "ply\nformat binary_little_endian 1.0\n";
  f << "element vertex " << m.vertices.size() << "\n";
  f << "property float x\nproperty float y\nproperty float z\n";
  f << "element face " << m.tris.size() << "\n";
  f << "property list uchar int vertex_indices\nend_header\n";
  for (const auto& v : m.vertices) {
    put(f, v[0]);
    put(f, v[1]);
    put(f, v[2]);
  }
  for (const auto& t : m.tris) {
    put<uint8_t>(f, 3);
    put(f, t[0]);
    put(f, t[1]);
    put(f, t[2]);
  }
}

void write_occ_grid(const std::string& path, const std::vector<float>& field, int res) {
  require(int64_t(field.size()) == int64_t(res) * res * res, ErrorCode::shape_mismatch,
          "occ grid: field size does not match res^3");
  std::ofstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f.write("OCC1", 4);
  for (int i = 0; i < 3; ++i) put(f, uint32_t(res));
  f.write(reinterpret_cast<const char*>(field.data()), std::streamsize(field.size() * 4));
}

std::vector<float> read_occ_grid(const std::string& path, int* res_out) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  require(std::memcmp(magic, "OCC1", 4) == 0, ErrorCode::io, "occ grid: bad magic in " + path);
  uint32_t rx = get<uint32_t>(f), ry = get<uint32_t>(f), rz = get<uint32_t>(f);
  require(rx == ry && ry == rz && rx >= 2, ErrorCode::io, "occ grid: bad extents");
  std::vector<float> field(size_t(rx) * ry * rz);
  f.read(reinterpret_cast<char*>(field.data()), std::streamsize(field.size() * 4));
  require(bool(f), ErrorCode::io, "occ grid: truncated file " + path);
  if (res_out) *res_out = int(rx);
  return field;
}

}  // namespace sde::shape
