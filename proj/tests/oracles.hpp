#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (triple loops, O(n^2) scans, homogeneous 4x4 blends) and
// never share code with the library paths they check, except for the
// closest-point primitive whose tie rule is defined to be bitwise identical.

#include "headgen/geomio.hpp"
#include "headgen/headmodel.hpp"

namespace headgen::oracles {

// Eq-by-eq per-vertex summation of template + shape/pose/expression offsets.
Mat blend_shape_loops(const headmodel::TemplateModel& model, const headmodel::HeadParams& params);

// Per-point blend of homogeneous 4x4 skinning transforms.
Mat lbs_homogeneous(const Mat& points, const Mat& weights, const Mat& joints, const Vec& theta);

struct BruteClosest {
  double dist_sq;
  int triangle;
  Vec3 point;
  Vec3 bary;
};
// Scans every triangle; ties broken by lowest triangle index.
BruteClosest closest_triangle_scan(const Mesh& mesh, const Vec3& p);

// Parity of robust ray crossings, brute force over all triangles.
bool ray_parity_inside(const Mesh& mesh, const Vec3& p, uint64_t seed);

// O(n^2) point-cloud chamfer and f-score.
geomio::GeoMetrics chamfer_points_quadratic(const Mat& a, const Mat& b, double tau);

// O(n*m) mesh color distance with the same sampling as the library call.
double color_distance_quadratic(const Mesh& a, const Mesh& b, int samples, uint64_t seed);

}  // namespace headgen::oracles
