#pragma once

#include <array>
#include <vector>

namespace headgen::geomio::mc {

// Cube corner c has offset (c&1, (c>>1)&1, (c>>2)&1). Edge order: four x-edges,
// four y-edges, four z-edges.
inline constexpr int kEdgeCorners[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                            {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                            {0, 4}, {1, 5}, {2, 6}, {3, 7}};

// Triangulation per 256 corner-sign cases, as triples of edge indices. The
// table is derived once at startup by tracing surface loops across cube faces;
// the face-pairing rule depends only on the face's corner signs, so adjacent
// cells always agree and extractions are watertight.
const std::vector<std::array<int, 3>>& case_triangles(int case_index);

}  // namespace headgen::geomio::mc
