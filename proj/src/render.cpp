#include "headgen/render.hpp"

#include <cmath>

namespace headgen::render {

namespace {

Vec3 orthonormal_up(const Vec3& forward, const Vec3& up_hint) {
  Vec3 up = up_hint - up_hint.dot(forward) * forward;
  const double n = up.norm();
  HG_CHECK_ARG(n > 1e-9, "up hint parallel to forward");
  return up / n;
}

}  // namespace

Camera Camera::orthographic(const Vec3& center, const Vec3& forward, const Vec3& up_hint,
                            double half_extent, int width, int height) {
  Camera c;
  c.kind = Kind::Orthographic;
  c.center = center;
  c.forward = forward.normalized();
  c.up = orthonormal_up(c.forward, up_hint);
  c.right = c.up.cross(c.forward).normalized() * -1.0;
  // right-handed frame with +x to the right of the image
  if (c.right.cross(c.up).dot(c.forward) < 0) c.right = -c.right;
  c.half_extent = half_extent;
  c.width = width;
  c.height = height;
  c.validate();
  return c;
}

Camera Camera::pinhole(const Vec3& center, const Vec3& forward, const Vec3& up_hint,
                       double focal, int width, int height) {
  Camera c = orthographic(center, forward, up_hint, 1.0, width, height);
  c.kind = Kind::Pinhole;
  c.focal = focal;
  c.validate();
  return c;
}

void Camera::validate() const {
  HG_CHECK_ARG(width > 0 && height > 0, "camera image size must be positive");
  HG_CHECK_ARG(std::abs(right.norm() - 1.0) < 1e-8 && std::abs(up.norm() - 1.0) < 1e-8 &&
                   std::abs(forward.norm() - 1.0) < 1e-8,
               "camera frame must be unit length");
  HG_CHECK_ARG(std::abs(right.dot(up)) < 1e-8 && std::abs(right.dot(forward)) < 1e-8 &&
                   std::abs(up.dot(forward)) < 1e-8,
               "camera frame must be orthogonal");
  HG_CHECK_ARG(half_extent > 0 && focal > 0, "camera scale must be positive");
}

void Camera::pixel_ray(int px, int py, Vec3* origin, Vec3* dir) const {
  const double aspect = static_cast<double>(height) / width;
  const double u = ((px + 0.5) / width) * 2.0 - 1.0;
  const double v = (1.0 - (py + 0.5) / height) * 2.0 - 1.0;  // +v is up
  if (kind == Kind::Orthographic) {
    *origin = center + u * half_extent * right + v * half_extent * aspect * up;
    *dir = forward;
  } else {
    *origin = center;
    *dir = (focal * forward + u * right + v * aspect * up).normalized();
  }
}

bool Camera::project(const Vec3& p, double* px, double* py, double* depth) const {
  const Vec3 rel = p - center;
  const double x = rel.dot(right), y = rel.dot(up), z = rel.dot(forward);
  const double aspect = static_cast<double>(height) / width;
  double u, v;
  if (kind == Kind::Orthographic) {
    u = x / half_extent;
    v = y / (half_extent * aspect);
    *depth = z;
  } else {
    if (z <= 1e-9) return false;
    u = focal * x / z;
    v = focal * y / (z * aspect);
    *depth = z;
  }
  *px = (u * 0.5 + 0.5) * width - 0.5;
  *py = (1.0 - (v * 0.5 + 0.5)) * height - 0.5;
  return true;
}

std::vector<Camera> default_rig(int views, int resolution, double half_extent) {
  HG_CHECK_ARG(views >= 1 && views <= 4, "rig supports 1..4 views");
  const Vec3 dirs[4] = {{0, 0, -1}, {-1, 0, 0}, {1, 0, 0}, {0, 0, 1}};  // front/left/right/back
  std::vector<Camera> rig;
  for (int i = 0; i < views; ++i)
    rig.push_back(Camera::orthographic(-2.0 * dirs[i], dirs[i], Vec3(0, 1, 0), half_extent,
                                       resolution, resolution));
  return rig;
}

// --- ray marcher -------------------------------------------------------------------

namespace {

bool ray_box_range(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi, double* t0,
                   double* t1) {
  double a = 0.0, b = std::numeric_limits<double>::max();
  for (int c = 0; c < 3; ++c) {
    if (std::abs(d[c]) < 1e-15) {
      if (o[c] < lo[c] || o[c] > hi[c]) return false;
      continue;
    }
    double ta = (lo[c] - o[c]) / d[c];
    double tb = (hi[c] - o[c]) / d[c];
    if (ta > tb) std::swap(ta, tb);
    a = std::max(a, ta);
    b = std::min(b, tb);
    if (a > b) return false;
  }
  *t0 = a;
  *t1 = b;
  return true;
}

}  // namespace

RenderOut render_field(const FieldInterface& field, const Camera& cam, int threads) {
  cam.validate();
  constexpr int kSteps = 128;
  constexpr int kSecant = 5;
  RenderOut out;
  out.width = cam.width;
  out.height = cam.height;
  const int n = cam.width * cam.height;
  out.rgb = Mat::Constant(n, 3, kBackground);
  out.normal = Mat::Zero(n, 3);
  out.mask = Vec::Zero(n);
  out.depth = Vec::Constant(n, std::numeric_limits<double>::infinity());
  out.points = Mat::Zero(n, 3);
  out.canonical = Mat::Zero(n, 3);

  Vec3 lo, hi;
  field.bounds(&lo, &hi);

  parallel_for(static_cast<size_t>(n), threads, [&](size_t idx) {
    const int px = static_cast<int>(idx) % cam.width;
    const int py = static_cast<int>(idx) / cam.width;
    Vec3 origin, dir;
    cam.pixel_ray(px, py, &origin, &dir);
    double t0, t1;
    if (!ray_box_range(origin, dir, lo, hi, &t0, &t1)) return;

    FieldInterface::RayState state;
    const double dt = (t1 - t0) / (kSteps - 1);
    double t_prev = t0;
    double f_prev = field.occupancy(state, origin + t0 * dir) - 0.5;
    if (f_prev >= 0.0) {
      // ray starts inside: treat the box entry point as the hit
      t_prev = t0;
    } else {
      bool found = false;
      for (int s = 1; s < kSteps; ++s) {
        const double t = t0 + s * dt;
        const double f = field.occupancy(state, origin + t * dir) - 0.5;
        if (f >= 0.0) {
          // secant refinement inside [t_prev, t]
          double ta = t_prev, fa = f_prev, tb = t, fb = f;
          for (int it = 0; it < kSecant; ++it) {
            if (fb == fa) break;
            const double tm = tb - fb * (tb - ta) / (fb - fa);
            const double tc = std::clamp(tm, std::min(ta, tb), std::max(ta, tb));
            const double fc = field.occupancy(state, origin + tc * dir) - 0.5;
            if ((fc >= 0.0) == (fb >= 0.0)) {
              tb = tc;
              fb = fc;
            } else {
              ta = tc;
              fa = fc;
            }
          }
          t_prev = (std::abs(fa) < std::abs(fb)) ? ta : tb;
          found = true;
          break;
        }
        t_prev = t;
        f_prev = f;
      }
      if (!found) return;
    }

    const Vec3 hit = origin + t_prev * dir;
    const auto shade = field.shade(state, hit);
    const int i = out.index(px, py);
    out.mask[i] = 1.0;
    out.depth[i] = t_prev;
    out.rgb.row(i) = shade.color.transpose();
    out.normal.row(i) = shade.normal.transpose();
    out.points.row(i) = hit.transpose();
    out.canonical.row(i) = shade.canonical.transpose();
  });
  return out;
}

// --- rasterizer --------------------------------------------------------------------

RenderOut render_mesh(const Mesh& mesh, const Camera& cam) {
  cam.validate();
  RenderOut out;
  out.width = cam.width;
  out.height = cam.height;
  const int n = cam.width * cam.height;
  out.rgb = Mat::Constant(n, 3, kBackground);
  out.normal = Mat::Zero(n, 3);
  out.mask = Vec::Zero(n);
  out.depth = Vec::Constant(n, std::numeric_limits<double>::infinity());
  out.points = Mat::Zero(n, 3);
  out.canonical = Mat::Zero(n, 3);
  if (mesh.vertex_count() == 0) return out;

  const Mat shading = mesh.has_normals() ? mesh.normals : compute_vertex_normals(mesh);
  for (int f = 0; f < mesh.face_count(); ++f) {
    const int i0 = mesh.faces(f, 0), i1 = mesh.faces(f, 1), i2 = mesh.faces(f, 2);
    double px0, py0, d0, px1, py1, d1, px2, py2, d2;
    if (!cam.project(mesh.vertices.row(i0).transpose(), &px0, &py0, &d0)) continue;
    if (!cam.project(mesh.vertices.row(i1).transpose(), &px1, &py1, &d1)) continue;
    if (!cam.project(mesh.vertices.row(i2).transpose(), &px2, &py2, &d2)) continue;
    const int min_x = std::max(0, static_cast<int>(std::floor(std::min({px0, px1, px2}))));
    const int max_x =
        std::min(cam.width - 1, static_cast<int>(std::ceil(std::max({px0, px1, px2}))));
    const int min_y = std::max(0, static_cast<int>(std::floor(std::min({py0, py1, py2}))));
    const int max_y =
        std::min(cam.height - 1, static_cast<int>(std::ceil(std::max({py0, py1, py2}))));
    const double area = (px1 - px0) * (py2 - py0) - (px2 - px0) * (py1 - py0);
    if (std::abs(area) < 1e-14) continue;
    for (int py = min_y; py <= max_y; ++py)
      for (int px = min_x; px <= max_x; ++px) {
        const double x = px, y = py;
        double w0 = ((px1 - x) * (py2 - y) - (px2 - x) * (py1 - y)) / area;
        double w1 = ((px2 - x) * (py0 - y) - (px0 - x) * (py2 - y)) / area;
        double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double depth = w0 * d0 + w1 * d1 + w2 * d2;
        const int i = out.index(px, py);
        if (depth >= out.depth[i]) continue;  // nearer fragment wins
        out.depth[i] = depth;
        out.mask[i] = 1.0;
        if (mesh.has_colors())
          out.rgb.row(i) = w0 * mesh.colors.row(i0) + w1 * mesh.colors.row(i1) +
                           w2 * mesh.colors.row(i2);
        else
          out.rgb.row(i).setConstant(0.7);
        Vec3 nrm =
            (w0 * shading.row(i0) + w1 * shading.row(i1) + w2 * shading.row(i2)).transpose();
        const double len = nrm.norm();
        if (len > 1e-20) nrm /= len;
        out.normal.row(i) = nrm.transpose();
        out.points.row(i) = w0 * mesh.vertices.row(i0) + w1 * mesh.vertices.row(i1) +
                            w2 * mesh.vertices.row(i2);
      }
  }
  return out;
}

RenderOut render_scan(const geomio::Scan& scan, const Camera& cam) {
  return render_mesh(scan.mesh, cam);
}

// --- field adapters -----------------------------------------------------------------

CanonicalFieldAdapter::CanonicalFieldAdapter(const canonical::CanonicalEval& eval,
                                             const Vec& theta, const Vec& psi)
    : eval_(&eval), theta_(theta), psi_(psi) {}

double CanonicalFieldAdapter::occupancy(RayState&, const Vec3& x) const {
  return eval_->occupancy_rows(x.transpose())[0];
}

FieldInterface::Shade CanonicalFieldAdapter::shade(RayState&, const Vec3& x) const {
  const auto s = eval_->sample(x, theta_, psi_);
  Shade out;
  out.color = s.color;
  out.normal = s.normal;
  out.canonical = x;
  return out;
}

DeformedFieldAdapter::DeformedFieldAdapter(const canonical::CanonicalEval& eval,
                                           const deform::DeformModel& model,
                                           const deform::PoseContext& ctx,
                                           const deform::DeformedFieldAccel* accel,
                                           const CorrespondenceConfig& cfg)
    : eval_(&eval), model_(&model), ctx_(&ctx), accel_(accel), cfg_(cfg) {}

void DeformedFieldAdapter::bounds(Vec3* lo, Vec3* hi) const {
  if (accel_ && accel_->deformed_mesh.vertex_count() > 0) {
    mesh_bbox(accel_->deformed_mesh, *lo, *hi);
    *lo -= Vec3::Constant(0.1);
    *hi += Vec3::Constant(0.1);
  } else {
    *lo = Vec3(-1.2, -1.2, -1.2);
    *hi = Vec3(1.2, 1.2, 1.2);
  }
}

double DeformedFieldAdapter::occupancy(RayState& state, const Vec3& x) const {
  deform::CorrespondenceResult corr;
  if (state.has_guess) {
    corr = deform::correspondence_from_guess(*model_, *ctx_, x, state.canonical_guess, cfg_);
  } else if (accel_) {
    const auto guess = accel_->canonical_guess(x);
    if (!guess) return 0.0;  // culled: far from the deformed surface
    corr = deform::correspondence_from_guess(*model_, *ctx_, x, *guess, cfg_);
  } else {
    corr = deform::canonical_correspondence(*model_, *ctx_, x, cfg_);
  }
  if (!corr.converged) {
    state.has_guess = false;
    return 0.0;
  }
  state.canonical_guess = corr.canonical;
  state.has_guess = true;
  return eval_->occupancy_rows(corr.canonical.transpose())[0];
}

FieldInterface::Shade DeformedFieldAdapter::shade(RayState& state, const Vec3& x) const {
  Shade out;
  const auto corr = state.has_guess
                        ? deform::correspondence_from_guess(*model_, *ctx_, x,
                                                            state.canonical_guess, cfg_)
                        : deform::canonical_correspondence(*model_, *ctx_, x, cfg_);
  if (!corr.converged) return out;
  const auto s = eval_->sample(corr.canonical, ctx_->theta, ctx_->psi);
  out.color = s.color;
  out.canonical = corr.canonical;
  // canonical normal carried to world space by the inverse-transpose jacobian
  Vec3 n = corr.jacobian.inverse().transpose() * s.normal;
  const double len = n.norm();
  out.normal = len > 1e-20 ? Vec3(n / len) : s.normal;
  return out;
}

}  // namespace headgen::render
