#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <unordered_map>

#include "scenediff/shape.hpp"

namespace sde::shape {

namespace {

inline Vec3 corner_pos(int c) {
  return {double(c & 1), double((c >> 1) & 1), double((c >> 2) & 1)};
}

// The 256-case triangle table, generated once from first principles:
// segments on each cube face connect crossed face edges; the ambiguous
// (diagonally crossed) face always separates the two inside corners, a rule
// that depends only on the face samples and is therefore identical from both
// adjacent cubes, which makes shared-face edges pair up exactly.
struct McTables {
  int edge_c0[12], edge_c1[12], edge_axis[12];
  std::array<std::vector<std::array<uint8_t, 3>>, 256> tris;

  McTables() {
    int edge_id[8][3];
    int ne = 0;
    for (int c = 0; c < 8; ++c)
      for (int a = 0; a < 3; ++a) {
        edge_id[c][a] = -1;
        if (!((c >> a) & 1)) {
          edge_c0[ne] = c;
          edge_c1[ne] = c | (1 << a);
          edge_axis[ne] = a;
          edge_id[c][a] = ne++;
        }
      }

    // Faces: (axis, side) -> corner list and the face's edges.
    struct Face {
      std::vector<int> corners;
      std::vector<int> edges;
    };
    std::vector<Face> faces;
    for (int a = 0; a < 3; ++a)
      for (int s = 0; s < 2; ++s) {
        Face f;
        for (int c = 0; c < 8; ++c)
          if (((c >> a) & 1) == s) f.corners.push_back(c);
        for (int e = 0; e < ne; ++e) {
          bool c0in = ((edge_c0[e] >> a) & 1) == s;
          bool c1in = ((edge_c1[e] >> a) & 1) == s;
          if (c0in && c1in) f.edges.push_back(e);
        }
        faces.push_back(f);
      }

    for (int cfg = 0; cfg < 256; ++cfg) {
      auto inside = [&](int c) { return (cfg >> c) & 1; };
      bool crossed[12];
      for (int e = 0; e < 12; ++e) crossed[e] = inside(edge_c0[e]) != inside(edge_c1[e]);

      std::vector<std::array<int, 2>> segments;
      // Crossed-edge pairs sharing a face without being a segment there: a
      // fan diagonal on such a pair would lie in the face plane and collide
      // with the neighbor cube's triangulation.
      std::set<std::pair<int, int>> share_face, seg_set;
      for (const Face& f : faces) {
        std::vector<int> xe;
        for (int e : f.edges)
          if (crossed[e]) xe.push_back(e);
        for (size_t i = 0; i < xe.size(); ++i)
          for (size_t j = i + 1; j < xe.size(); ++j)
            share_face.insert({std::min(xe[i], xe[j]), std::max(xe[i], xe[j])});
        if (xe.size() == 2) {
          segments.push_back({xe[0], xe[1]});
        } else if (xe.size() == 4) {
          for (int c : f.corners) {
            if (!inside(c)) continue;
            std::array<int, 2> seg{-1, -1};
            int k = 0;
            for (int e : f.edges)
              if (edge_c0[e] == c || edge_c1[e] == c) seg[size_t(k++)] = e;
            segments.push_back(seg);
          }
        }
      }
      for (const auto& s : segments)
        seg_set.insert({std::min(s[0], s[1]), std::max(s[0], s[1])});
      auto dangerous = [&](int u, int v) {
        auto key = std::make_pair(std::min(u, v), std::max(u, v));
        return share_face.count(key) && !seg_set.count(key);
      };

      // Each crossed edge sits in exactly two segments; extract the cycles.
      std::vector<char> used(segments.size(), 0);
      for (size_t s0 = 0; s0 < segments.size(); ++s0) {
        if (used[s0]) continue;
        used[s0] = 1;
        std::vector<int> loop{segments[s0][0], segments[s0][1]};
        while (true) {
          int tail = loop.back();
          int next = -1;
          for (size_t si = 0; si < segments.size(); ++si) {
            if (used[si]) continue;
            if (segments[si][0] == tail || segments[si][1] == tail) {
              next = segments[si][0] == tail ? segments[si][1] : segments[si][0];
              used[si] = 1;
              break;
            }
          }
          if (next < 0) break;
          if (next == loop.front()) break;
          loop.push_back(next);
        }
        if (loop.size() < 3) continue;

        // Orient so the polygon normal points from inside toward outside.
        std::vector<Vec3> mid(loop.size());
        for (size_t i = 0; i < loop.size(); ++i)
          mid[i] = (corner_pos(edge_c0[loop[i]]) + corner_pos(edge_c1[loop[i]])) * 0.5;
        Vec3 normal{0, 0, 0};
        for (size_t i = 0; i < mid.size(); ++i)
          normal = normal + mid[i].cross(mid[(i + 1) % mid.size()]);
        Vec3 grad{0, 0, 0};
        for (int e : loop) {
          int in_c = inside(edge_c0[e]) ? edge_c0[e] : edge_c1[e];
          int out_c = inside(edge_c0[e]) ? edge_c1[e] : edge_c0[e];
          grad = grad + (corner_pos(out_c) - corner_pos(in_c));
        }
        if (normal.dot(grad) < 0) std::reverse(loop.begin(), loop.end());

        // Fan from a root whose diagonals avoid face-coplanar pairs; such a
        // root exists for every configuration.
        int L = int(loop.size());
        int root = 0;
        for (int r = 0; r < L; ++r) {
          bool ok = true;
          for (int i = 0; i < L && ok; ++i) {
            if (i == r || (i + 1) % L == r || (r + 1) % L == i) continue;
            ok = !dangerous(loop[size_t(r)], loop[size_t(i)]);
          }
          if (ok) {
            root = r;
            break;
          }
        }
        std::rotate(loop.begin(), loop.begin() + root, loop.end());

        for (size_t i = 1; i + 1 < loop.size(); ++i)
          tris[size_t(cfg)].push_back(
              {uint8_t(loop[0]), uint8_t(loop[i]), uint8_t(loop[i + 1])});
      }
    }
  }
};

const McTables& mc_tables() {
  static McTables t;
  return t;
}

}  // namespace

Mesh marching_cubes(const std::vector<float>& field, int res, double iso, const Vec3& origin,
                    double spacing) {
  require(res >= 2, ErrorCode::invalid_argument, "marching_cubes: res must be >= 2");
  require(int64_t(field.size()) == int64_t(res) * res * res, ErrorCode::shape_mismatch,
          "marching_cubes: field size does not match res^3");
  const McTables& tab = mc_tables();
  const double pad = iso - 1.0;  // everything beyond the grid is outside

  auto sample = [&](int x, int y, int z) -> double {
    if (x < 0 || y < 0 || z < 0 || x >= res || y >= res || z >= res) return pad;
    return field[size_t((z * res + y) * res + x)];
  };

  Mesh mesh;
  std::unordered_map<uint64_t, int32_t> edge_vertex;
  const int64_t D = res + 2;
  auto edge_key = [&](int x, int y, int z, int axis) {
    return uint64_t((((int64_t(x + 1) * D + (y + 1)) * D + (z + 1)) * 3) + axis);
  };

  std::array<int, 3> off;
  for (int cz = -1; cz < res; ++cz)
    for (int cy = -1; cy < res; ++cy)
      for (int cx = -1; cx < res; ++cx) {
        double v[8];
        int cfg = 0;
        for (int c = 0; c < 8; ++c) {
          v[c] = sample(cx + (c & 1), cy + ((c >> 1) & 1), cz + ((c >> 2) & 1));
          if (v[c] > iso) cfg |= 1 << c;
        }
        if (cfg == 0 || cfg == 255) continue;
        for (const auto& tri : tab.tris[size_t(cfg)]) {
          int32_t ids[3];
          for (int k = 0; k < 3; ++k) {
            int e = tri[size_t(k)];
            int c0 = tab.edge_c0[e];
            int axis = tab.edge_axis[e];
            off = {cx + (c0 & 1), cy + ((c0 >> 1) & 1), cz + ((c0 >> 2) & 1)};
            uint64_t key = edge_key(off[0], off[1], off[2], axis);
            auto it = edge_vertex.find(key);
            if (it != edge_vertex.end()) {
              ids[k] = it->second;
            } else {
              double v0 = v[c0];
              double v1 = v[tab.edge_c1[e]];
              double t = (iso - v0) / (v1 - v0);
              t = std::clamp(t, 0.0, 1.0);
              Vec3 gp{double(off[0]), double(off[1]), double(off[2])};
              if (axis == 0) gp.x += t;
              if (axis == 1) gp.y += t;
              if (axis == 2) gp.z += t;
              Vec3 wp = origin + gp * spacing;
              ids[k] = int32_t(mesh.vertices.size());
              mesh.vertices.push_back({float(wp.x), float(wp.y), float(wp.z)});
              edge_vertex.emplace(key, ids[k]);
            }
          }
          if (ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2]) continue;
          mesh.tris.push_back({ids[0], ids[1], ids[2]});
        }
      }
  return mesh;
}

bool mesh_is_watertight(const Mesh& m) {
  if (m.tris.empty()) return false;
  std::map<std::pair<int32_t, int32_t>, int> count;
  for (const auto& tr : m.tris)
    for (int k = 0; k < 3; ++k) {
      int32_t a = tr[size_t(k)], b = tr[size_t((k + 1) % 3)];
      count[{std::min(a, b), std::max(a, b)}]++;
    }
  for (const auto& [edge, n] : count)
    if (n != 2) return false;
  return true;
}

}  // namespace sde::shape
