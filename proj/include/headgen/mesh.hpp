#pragma once

#include "headgen/common.hpp"

namespace headgen {

// Triangle mesh with optional per-vertex color/normal attributes.
// Rows of `vertices` are points; colors are RGB in [0,1].
struct Mesh {
  Mat vertices;   // V x 3
  FaceMat faces;  // F x 3
  Mat colors;     // V x 3 or empty
  Mat normals;    // V x 3 or empty

  int vertex_count() const { return static_cast<int>(vertices.rows()); }
  int face_count() const { return static_cast<int>(faces.rows()); }
  bool has_colors() const { return colors.rows() == vertices.rows() && colors.rows() > 0; }
  bool has_normals() const { return normals.rows() == vertices.rows() && normals.rows() > 0; }

  void validate() const;  // indices in range, attribute shapes consistent
};

// Area-weighted vertex normals, normalized.
Mat compute_vertex_normals(const Mesh& mesh);

double mesh_surface_area(const Mesh& mesh);

// Number of undirected edges not shared by exactly two faces.
int boundary_edge_count(const Mesh& mesh);

void mesh_bbox(const Mesh& mesh, Vec3& lo, Vec3& hi);

}  // namespace headgen
