#include "mc_tables.hpp"

#include <map>
#include <mutex>
#include <utility>

namespace headgen::geomio::mc {

namespace {

struct Face {
  std::array<int, 4> corners;  // cyclic order around the face
  std::array<int, 4> edges;    // edges[i] joins corners[i] and corners[(i+1)%4]
};

int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e) {
    if ((kEdgeCorners[e][0] == a && kEdgeCorners[e][1] == b) ||
        (kEdgeCorners[e][0] == b && kEdgeCorners[e][1] == a))
      return e;
  }
  return -1;
}

std::array<Face, 6> make_faces() {
  std::array<Face, 6> faces;
  int fi = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      Face f;
      const int uv[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
      for (int k = 0; k < 4; ++k) {
        int corner = side << axis;
        corner |= uv[k][0] << u;
        corner |= uv[k][1] << v;
        f.corners[k] = corner;
      }
      for (int k = 0; k < 4; ++k) f.edges[k] = edge_between(f.corners[k], f.corners[(k + 1) % 4]);
      faces[fi++] = f;
    }
  }
  return faces;
}

std::vector<std::array<int, 3>> build_case(int case_index, const std::array<Face, 6>& faces) {
  const auto inside = [&](int corner) { return (case_index >> corner) & 1; };
  const auto crossed = [&](int e) {
    return inside(kEdgeCorners[e][0]) != inside(kEdgeCorners[e][1]);
  };

  // partners[e] holds the two arc neighbours of edge e, one per adjacent face.
  std::array<std::array<int, 2>, 12> partners;
  std::array<int, 12> partner_count{};
  partner_count.fill(0);
  auto pair_edges = [&](int a, int b) {
    partners[a][partner_count[a]++] = b;
    partners[b][partner_count[b]++] = a;
  };

  for (const Face& f : faces) {
    std::vector<int> cut;
    for (int k = 0; k < 4; ++k)
      if (crossed(f.edges[k])) cut.push_back(k);
    if (cut.empty()) continue;
    if (cut.size() == 2) {
      pair_edges(f.edges[cut[0]], f.edges[cut[1]]);
    } else {
      // Ambiguous face (+,-,+,-): connect the two edges around each inside
      // corner, separating the inside corners. The rule is a function of the
      // face's signs only, so both incident cells trace the same arcs.
      for (int k = 0; k < 4; ++k) {
        if (!inside(f.corners[k])) continue;
        const int e_prev = f.edges[(k + 3) % 4];
        const int e_next = f.edges[k];
        pair_edges(e_prev, e_next);
      }
    }
  }

  std::vector<std::array<int, 3>> tris;
  std::array<bool, 12> used{};
  used.fill(false);
  for (int start = 0; start < 12; ++start) {
    if (!crossed(start) || used[start]) continue;
    std::vector<int> loop;
    int prev = -1, cur = start;
    while (true) {
      loop.push_back(cur);
      used[cur] = true;
      const int next = (partners[cur][0] == prev) ? partners[cur][1] : partners[cur][0];
      prev = cur;
      cur = next;
      if (cur == start) break;
    }
    for (size_t i = 1; i + 1 < loop.size(); ++i)
      tris.push_back({loop[0], static_cast<int>(loop[i]), static_cast<int>(loop[i + 1])});
  }
  return tris;
}

struct Tables {
  std::array<std::vector<std::array<int, 3>>, 256> cases;
  Tables() {
    const auto faces = make_faces();
    for (int c = 0; c < 256; ++c) cases[c] = build_case(c, faces);
  }
};

}  // namespace

const std::vector<std::array<int, 3>>& case_triangles(int case_index) {
  static const Tables tables;
  return tables.cases[case_index & 0xff];
}

}  // namespace headgen::geomio::mc
