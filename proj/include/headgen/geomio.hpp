#pragma once

#include "headgen/headmodel.hpp"
#include "headgen/mesh.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace headgen::geomio {

// --- closest-point / ray acceleration ----------------------------------------

struct ClosestHit {
  double dist_sq = 0.0;
  int triangle = -1;
  Vec3 point = Vec3::Zero();
  Vec3 bary = Vec3::Zero();
};

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                               Vec3* bary = nullptr);

// Median-split AABB tree. Closest-triangle queries return exactly the same
// triangle as a brute-force scan with the tie rule "smallest distance, then
// lowest triangle index".
class TriangleBvh {
 public:
  TriangleBvh() = default;
  explicit TriangleBvh(const Mat& vertices, const FaceMat& faces);

  // Point cloud support: each point becomes a degenerate triangle.
  static TriangleBvh from_points(const Mat& points);

  ClosestHit closest(const Vec3& p) const;
  // All ray intersections with t in (t_min, t_max); returns hit count. If a
  // hit is nearly degenerate (edge-grazing), *robust is set false.
  int count_ray_crossings(const Vec3& origin, const Vec3& dir, bool* robust) const;
  // First hit along the ray, if any.
  std::optional<std::pair<double, int>> first_hit(const Vec3& origin, const Vec3& dir) const;

  bool empty() const { return nodes_.empty(); }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;   // internal children
    int begin = 0, end = 0;      // leaf triangle range
  };
  void build(int node, int begin, int end, int depth);
  double box_dist_sq(const Node& n, const Vec3& p) const;

  Mat verts_;
  FaceMat faces_;
  std::vector<int> order_;  // triangle indices, leaf ranges index into this
  std::vector<Node> nodes_;
};

// --- scans and ground-truth samples -------------------------------------------

struct SampleCounts {
  int near_surface = 4096;
  int uniform = 2048;
  int surface = 2048;
};

struct SampleSet {
  Mat points;          // M x 3 (near-surface + uniform), occupancy-labeled
  Vec occ;             // M, values in {0,1}
  Mat surface_points;  // S x 3
  Mat surface_colors;  // S x 3
  Mat surface_normals; // S x 3
  Vec3 bbox_lo = Vec3::Zero(), bbox_hi = Vec3::Zero();

  bool empty() const { return points.rows() == 0; }
};

struct Scan {
  Mesh mesh;
  headmodel::HeadParams params;  // fitted control parameters
  std::string subject_id;
  SampleSet samples;

  bool watertight() const { return boundary_edge_count(mesh) == 0; }
};

enum class InsideTest { WindingNumber, RayParity };

// Generalized winding number of the mesh at p (1 inside, 0 outside for
// watertight meshes).
double winding_number(const Mesh& mesh, const Vec3& p);

// Inside/outside labels. WindingNumber mode thresholds at 0.5 (w >= 0.5 =>
// inside). RayParity mode requires a watertight mesh and uses seeded ray
// directions with degenerate-hit rejection.
Vec label_occupancy(const Scan& scan, const Mat& points,
                    InsideTest mode = InsideTest::WindingNumber, int threads = 0);

// Area-uniform surface samples with barycentric attribute interpolation.
void sample_mesh_surface(const Mesh& mesh, int count, Rng& rng, Mat* points, Mat* colors,
                         Mat* normals);

// Mixture sampler: 50% near-surface (sigma = 0.01), 30% uniform in the 1.1x
// bbox, 20% on-surface with color/normal; deterministic per seed.
SampleSet sample_training_points(const Scan& scan, uint64_t seed, const SampleCounts& counts,
                                 int threads = 0);

// Sidecar cache keyed by (scan content hash, seed, counts).
uint64_t scan_content_hash(const Scan& scan);
SampleSet load_or_build_samples(Scan& scan, const std::string& sidecar_path, uint64_t seed,
                                const SampleCounts& counts, int threads = 0);

// --- isosurface extraction ------------------------------------------------------

using ScalarField = std::function<double(const Vec3&)>;
// Batched evaluator: rows of X are points, returns one value per row.
using BatchField = std::function<Vec(const Mat&)>;

// 0.5 level set of an occupancy field on a res^3 cell grid over [lo,hi],
// linear edge interpolation, 256-case table. Empty fields produce an empty
// mesh. Triangles are oriented with normals pointing toward occ < 0.5.
Mesh marching_cubes(const BatchField& field, const Vec3& lo, const Vec3& hi, int resolution);
Mesh marching_cubes(const ScalarField& field, const Vec3& lo, const Vec3& hi, int resolution);

// --- metrics ---------------------------------------------------------------------

struct GeoMetrics {
  double chamfer = 0.0;  // symmetric, canonical box units
  double fscore = 0.0;   // percent at the given tau
};

// Optional region mask: keep sampled points within `radius` of any row of
// `anchor_points`.
struct RegionFilter {
  Mat anchor_points;
  double radius = 0.05;
};

GeoMetrics chamfer_and_fscore(const Mesh& a, const Mesh& b, double tau, int samples = 10000,
                              uint64_t seed = 91, const RegionFilter* region = nullptr);

// Exact point-to-point mode used for small clouds; matches the O(n^2) oracle.
GeoMetrics chamfer_and_fscore_points(const Mat& a, const Mat& b, double tau);

// Symmetric per-channel mean absolute color difference against the nearest
// surface point's interpolated color, scaled x100.
double color_distance(const Mesh& a, const Mesh& b, int samples = 10000, uint64_t seed = 92,
                      const RegionFilter* region = nullptr);

// --- file IO ----------------------------------------------------------------------

enum class PlyFormat { Ascii, BinaryLittleEndian };

void write_ply(const std::string& path, const Mesh& mesh,
               PlyFormat format = PlyFormat::BinaryLittleEndian,
               const std::vector<std::string>& comments = {});
Mesh read_ply(const std::string& path, std::vector<std::string>* comments = nullptr);

void write_obj(const std::string& path, const Mesh& mesh);
Mesh read_obj(const std::string& path);

// Scan round-trip embeds params/subject in PLY comments.
void write_scan(const std::string& path, const Scan& scan,
                PlyFormat format = PlyFormat::BinaryLittleEndian);
Scan read_scan(const std::string& path);

}  // namespace headgen::geomio
