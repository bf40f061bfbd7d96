#pragma once

#include "headgen/canonical.hpp"
#include "headgen/deform.hpp"
#include "headgen/geomio.hpp"

#include <string>
#include <vector>

namespace headgen::render {

struct Camera {
  enum class Kind { Orthographic, Pinhole };
  Kind kind = Kind::Orthographic;
  Vec3 right = Vec3(1, 0, 0), up = Vec3(0, 1, 0), forward = Vec3(0, 0, -1);
  Vec3 center = Vec3(0, 0, 2);
  double half_extent = 0.7;  // orthographic half-width
  double focal = 2.0;        // pinhole: forward scale per unit image half-width
  int width = 128, height = 128;

  static Camera orthographic(const Vec3& center, const Vec3& forward, const Vec3& up_hint,
                             double half_extent, int width, int height);
  static Camera pinhole(const Vec3& center, const Vec3& forward, const Vec3& up_hint,
                        double focal, int width, int height);
  void validate() const;  // frame orthonormal within 1e-8
  void pixel_ray(int px, int py, Vec3* origin, Vec3* dir) const;
  // world point -> continuous pixel coords and view depth; false when behind
  bool project(const Vec3& p, double* px, double* py, double* depth) const;
};

// Fixed rig: front/left/right/back orthographic views.
std::vector<Camera> default_rig(int views, int resolution, double half_extent = 0.7);

inline constexpr double kBackground = 1.0;  // white

struct RenderOut {
  int width = 0, height = 0;
  Mat rgb;        // (H*W) x 3, background pixels carry kBackground
  Mat normal;     // (H*W) x 3 world-space unit normals, zero where empty
  Vec mask;       // H*W in {0,1}
  Vec depth;      // distance along the ray/forward axis
  Mat points;     // per-pixel surface points
  Mat canonical;  // per-pixel canonical correspondences

  int index(int px, int py) const { return py * width + px; }
};

// Occupancy field seen by the ray marcher. `RayState` is per-ray scratch so
// implementations can warm-start along t; pixels stay independent.
class FieldInterface {
 public:
  struct RayState {
    Vec3 canonical_guess = Vec3::Zero();
    bool has_guess = false;
  };
  struct Shade {
    Vec3 color = Vec3::Zero();
    Vec3 normal = Vec3(0, 0, 1);
    Vec3 canonical = Vec3::Zero();
  };
  virtual ~FieldInterface() = default;
  virtual double occupancy(RayState& state, const Vec3& x) const = 0;
  virtual Shade shade(RayState& state, const Vec3& surface_point) const = 0;
  virtual void bounds(Vec3* lo, Vec3* hi) const {
    *lo = Vec3(-1, -1, -1);
    *hi = Vec3(1, 1, 1);
  }
};

// Fixed stepping (128 samples) along each ray, then secant refinement of the
// occ = 0.5 crossing (5 iterations).
RenderOut render_field(const FieldInterface& field, const Camera& cam, int threads = 0);

// Rasterization of a mesh into the same layout (depth test, barycentric
// color/normal interpolation). Produces the I_gt / N_gt side of the 2D losses.
RenderOut render_scan(const geomio::Scan& scan, const Camera& cam);
RenderOut render_mesh(const Mesh& mesh, const Camera& cam);

// Canonical-space avatar (identity correspondence).
class CanonicalFieldAdapter : public FieldInterface {
 public:
  CanonicalFieldAdapter(const canonical::CanonicalEval& eval, const Vec& theta, const Vec& psi);
  double occupancy(RayState&, const Vec3& x) const override;
  Shade shade(RayState&, const Vec3& x) const override;

 private:
  const canonical::CanonicalEval* eval_;
  Vec theta_, psi_;
};

// Posed avatar: occupancy through the correspondence search, warm-started
// along each ray and seeded from the deformed canonical mesh.
class DeformedFieldAdapter : public FieldInterface {
 public:
  DeformedFieldAdapter(const canonical::CanonicalEval& eval, const deform::DeformModel& model,
                       const deform::PoseContext& ctx, const deform::DeformedFieldAccel* accel,
                       const CorrespondenceConfig& cfg = {});
  double occupancy(RayState&, const Vec3& x) const override;
  Shade shade(RayState&, const Vec3& x) const override;
  void bounds(Vec3* lo, Vec3* hi) const override;

 private:
  const canonical::CanonicalEval* eval_;
  const deform::DeformModel* model_;
  const deform::PoseContext* ctx_;
  const deform::DeformedFieldAccel* accel_;  // optional
  CorrespondenceConfig cfg_;
};

// --- png export -------------------------------------------------------------------

void write_png(const std::string& path, int width, int height, const Mat& rgb01);
// normals encoded (n+1)/2, empty pixels black
void write_normal_png(const std::string& path, const RenderOut& out);
void write_mask_png(const std::string& path, const RenderOut& out);
void write_rgb_png(const std::string& path, const RenderOut& out);

}  // namespace headgen::render
