#include "headgen/headmodel.hpp"

#include "headgen/geomio.hpp"

#include <cmath>
#include <map>
#include <memory>

namespace headgen::headmodel {

namespace {

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct IcoMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
};

IcoMesh icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  IcoMesh m;
  const double pts[12][3] = {{-1, phi, 0}, {1, phi, 0},   {-1, -phi, 0}, {1, -phi, 0},
                             {0, -1, phi}, {0, 1, phi},   {0, -1, -phi}, {0, 1, -phi},
                             {phi, 0, -1}, {phi, 0, 1},   {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : pts) m.verts.push_back(Vec3(p[0], p[1], p[2]).normalized());
  m.faces = {{0, 11, 5},  {0, 5, 1},   {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},
             {5, 11, 4},  {11, 10, 2}, {10, 7, 6},  {7, 1, 8},  {3, 9, 4},   {3, 4, 2},
             {3, 2, 6},   {3, 6, 8},   {3, 8, 9},   {4, 9, 5},  {2, 4, 11},  {6, 2, 10},
             {8, 6, 7},   {9, 8, 1}};
  return m;
}

IcoMesh subdivide(const IcoMesh& in) {
  IcoMesh out;
  out.verts = in.verts;
  std::map<std::pair<int, int>, int> midpoint;
  auto mid = [&](int a, int b) {
    const auto key = std::minmax(a, b);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    const int idx = static_cast<int>(out.verts.size());
    out.verts.push_back(((in.verts[a] + in.verts[b]) * 0.5).normalized());
    midpoint[key] = idx;
    return idx;
  };
  for (const auto& f : in.faces) {
    const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

// Star-shaped radial head shell: ellipsoid base with chin, nose and occiput
// bumps. Star shape keeps the mesh watertight and self-intersection free.
Vec3 head_surface_point(const Vec3& dir) {
  const Vec3 semi(0.33, 0.44, 0.36);
  double inv = 0.0;
  for (int c = 0; c < 3; ++c) inv += (dir[c] / semi[c]) * (dir[c] / semi[c]);
  double r = 1.0 / std::sqrt(inv);
  const Vec3 chin_dir = Vec3(0, -0.55, 0.65).normalized();
  const Vec3 nose_dir = Vec3(0, -0.05, 1.0).normalized();
  const Vec3 back_dir = Vec3(0, 0.25, -1.0).normalized();
  double f = 1.0;
  f += 0.12 * compact_bump((dir - chin_dir).norm(), 0.55);
  f += 0.08 * compact_bump((dir - nose_dir).norm(), 0.32);
  f += 0.05 * compact_bump((dir - back_dir).norm(), 0.85);
  return 0.95 * r * f * dir;
}

void add_bump_column(Mat& basis, int col, const Mat& verts, const Vec3& center, double radius,
                     const Vec3& dir, double amp) {
  for (int v = 0; v < verts.rows(); ++v) {
    const double w = compact_bump((verts.row(v).transpose() - center).norm(), radius);
    if (w == 0.0) continue;
    for (int c = 0; c < 3; ++c) basis(3 * v + c, col) += amp * w * dir[c];
  }
}

}  // namespace

Mat TemplateModel::joints(const Vec& beta) const {
  HG_CHECK_ARG(beta.size() == n_beta(), "beta dimension mismatch");
  const int v = vertex_count();
  Vec flat(3 * v);
  for (int i = 0; i < v; ++i)
    for (int c = 0; c < 3; ++c) flat[3 * i + c] = template_vertices(i, c);
  flat += shape_bases * beta;
  Mat shaped(v, 3);
  for (int i = 0; i < v; ++i)
    for (int c = 0; c < 3; ++c) shaped(i, c) = flat[3 * i + c];
  return joint_regressor * shaped;
}

void TemplateModel::validate() const {
  const int v = vertex_count();
  HG_CHECK(v >= 12, "template too small");
  HG_CHECK(template_vertices.cwiseAbs().maxCoeff() <= 0.5 + 1e-9,
           "template must fit in the unit cube");
  HG_CHECK(shape_bases.rows() == 3 * v, "shape basis row count");
  HG_CHECK(expr_bases.rows() == 3 * v && expr_bases.cols() == kNumExpr, "expression basis shape");
  HG_CHECK(pose_bases.rows() == 3 * v && pose_bases.cols() == kPoseBasisDim, "pose basis shape");
  HG_CHECK(lbs_weights.rows() == v && lbs_weights.cols() == kNumJoints, "lbs weight shape");
  HG_CHECK(joint_regressor.rows() == kNumJoints && joint_regressor.cols() == v,
           "joint regressor shape");
  for (int i = 0; i < v; ++i) {
    HG_CHECK(std::abs(lbs_weights.row(i).sum() - 1.0) < 1e-6, "lbs weight row must sum to 1");
    HG_CHECK(lbs_weights.row(i).minCoeff() >= -1e-12, "lbs weights must be nonnegative");
  }
  for (int j = 0; j < kNumJoints; ++j)
    HG_CHECK(std::abs(joint_regressor.row(j).sum() - 1.0) < 1e-6,
             "joint regressor row must sum to 1");
  for (int f = 0; f < faces.rows(); ++f)
    for (int c = 0; c < 3; ++c)
      HG_CHECK(faces(f, c) >= 0 && faces(f, c) < v, "face index out of range");
  HG_CHECK(lip_upper >= 0 && lip_upper < v && lip_lower >= 0 && lip_lower < v,
           "lip landmarks unset");
  HG_CHECK(!facial_vertices.empty(), "facial vertex set unset");
}

TemplateModel generate_template_model(const ModelGenConfig& cfg) {
  HG_CHECK_ARG(cfg.subdivisions >= 2 && cfg.subdivisions <= 5, "subdivisions in [2,5]");
  HG_CHECK_ARG(cfg.n_beta >= 1, "n_beta >= 1");
  Rng rng(cfg.seed);

  IcoMesh ico = icosahedron();
  for (int s = 0; s < cfg.subdivisions; ++s) ico = subdivide(ico);
  const int v = static_cast<int>(ico.verts.size());

  TemplateModel m;
  m.seed = cfg.seed;
  m.template_vertices.resize(v, 3);
  for (int i = 0; i < v; ++i) m.template_vertices.row(i) = head_surface_point(ico.verts[i]);
  m.faces.resize(static_cast<int>(ico.faces.size()), 3);
  for (size_t f = 0; f < ico.faces.size(); ++f)
    for (int c = 0; c < 3; ++c) m.faces(static_cast<int>(f), c) = ico.faces[f][c];

  // Joint regressor: uniform weights over the 8 template vertices nearest to
  // each target location.
  const Vec3 joint_targets[kNumJoints] = {{0, -0.08, 0},
                                          {0, -0.36, -0.04},
                                          {0, -0.14, 0.06},
                                          {0.13, 0.06, 0.26},
                                          {-0.13, 0.06, 0.26}};
  m.joint_regressor = Mat::Zero(kNumJoints, v);
  for (int j = 0; j < kNumJoints; ++j) {
    std::vector<std::pair<double, int>> d(v);
    for (int i = 0; i < v; ++i)
      d[i] = {(m.template_vertices.row(i).transpose() - joint_targets[j]).norm(), i};
    std::partial_sort(d.begin(), d.begin() + 8, d.end());
    for (int k = 0; k < 8; ++k) m.joint_regressor(j, d[k].second) = 1.0 / 8.0;
  }
  const Mat joints0 = m.joint_regressor * m.template_vertices;

  // Skinning weights: neck carries the skull, jaw and eyes get compact
  // patches, global takes the neck base at the bottom of the shell.
  const Vec3 jaw_center(0, -0.26, 0.30);
  const Vec3 eye_centers[2] = {{0.14, 0.06, 0.30}, {-0.14, 0.06, 0.30}};
  m.lbs_weights.resize(v, kNumJoints);
  for (int i = 0; i < v; ++i) {
    const Vec3 p = m.template_vertices.row(i).transpose();
    double w_neck = 0.6;
    double w_global = 1.5 * smoothstep01((-0.30 - p.y()) / 0.10);
    double w_jaw = 1.6 * compact_bump((p - jaw_center).norm(), 0.30);
    double w_eye_l = 8.0 * compact_bump((p - eye_centers[0]).norm(), 0.09);
    double w_eye_r = 8.0 * compact_bump((p - eye_centers[1]).norm(), 0.09);
    Eigen::Matrix<double, 1, kNumJoints> row;
    row << w_global, w_neck, w_jaw, w_eye_l, w_eye_r;
    m.lbs_weights.row(i) = row / row.sum();
  }

  // Shape bases: three global stretches plus localized random bumps.
  m.shape_bases = Mat::Zero(3 * v, cfg.n_beta);
  for (int i = 0; i < v; ++i)
    for (int c = 0; c < 3; ++c) {
      if (cfg.n_beta > 0) m.shape_bases(3 * i + c, 0) = 0.05 * m.template_vertices(i, c);
      if (cfg.n_beta > 1 && c == 1) m.shape_bases(3 * i + c, 1) = 0.05 * m.template_vertices(i, c);
      if (cfg.n_beta > 2 && c == 2) m.shape_bases(3 * i + c, 2) = 0.05 * m.template_vertices(i, c);
    }
  for (int k = 3; k < cfg.n_beta; ++k) {
    const int bumps = 3;
    const double amp = 0.035 / std::sqrt(1.0 + 0.25 * (k - 3));
    for (int b = 0; b < bumps; ++b) {
      const Vec3 center = m.template_vertices.row(uniform_int(rng, 0, v - 1)).transpose();
      const double radius = uniform_real(rng, 0.18, 0.40);
      add_bump_column(m.shape_bases, k, m.template_vertices, center, radius,
                      random_unit_vector(rng), amp);
    }
  }

  // Expression bases concentrate on the face.
  std::vector<int> face_region;
  for (int i = 0; i < v; ++i)
    if (m.template_vertices(i, 2) > 0.10) face_region.push_back(i);
  m.expr_bases = Mat::Zero(3 * v, kNumExpr);
  add_bump_column(m.expr_bases, 0, m.template_vertices, Vec3(0, -0.20, 0.33), 0.18,
                  Vec3(0, -0.6, 0.3).normalized(), 0.030);
  for (int k = 0; k < kNumExpr; ++k) {
    const int bumps = (k == 0) ? 1 : 2;
    const double amp = 0.022 / std::sqrt(1.0 + 0.15 * k);
    for (int b = 0; b < bumps; ++b) {
      const int pick = face_region[static_cast<size_t>(uniform_int(
          rng, 0, static_cast<int>(face_region.size()) - 1))];
      const Vec3 center = m.template_vertices.row(pick).transpose();
      add_bump_column(m.expr_bases, k, m.template_vertices, center,
                      uniform_real(rng, 0.12, 0.25), random_unit_vector(rng), amp);
    }
  }

  // Pose correctives: 9 columns per non-global joint, supported near the
  // corresponding patch so distant vertices stay untouched.
  const Vec3 pose_centers[4] = {{0, -0.38, 0}, jaw_center, eye_centers[0], eye_centers[1]};
  const double pose_radius[4] = {0.30, 0.26, 0.10, 0.10};
  m.pose_bases = Mat::Zero(3 * v, kPoseBasisDim);
  for (int j = 0; j < 4; ++j)
    for (int e = 0; e < 9; ++e) {
      const int col = 9 * j + e;
      add_bump_column(m.pose_bases, col, m.template_vertices, pose_centers[j], pose_radius[j],
                      random_unit_vector(rng), 0.008);
    }

  for (int i = 0; i < v; ++i)
    if (m.template_vertices(i, 2) > 0.15) m.facial_vertices.push_back(i);

  auto nearest_vertex = [&](const Vec3& target) {
    int best = 0;
    double bd = std::numeric_limits<double>::max();
    for (int i = 0; i < v; ++i) {
      const double d = (m.template_vertices.row(i).transpose() - target).squaredNorm();
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    return best;
  };
  m.lip_upper = nearest_vertex(Vec3(0, -0.11, 0.40));
  m.lip_lower = nearest_vertex(Vec3(0, -0.25, 0.36));

  (void)joints0;
  m.validate();
  return m;
}

void save_template_model(const TemplateModel& m, const std::string& path) {
  BinaryWriter w(path);
  w.write_u32(0x4d484748u);  // "HGHM"
  w.write_u32(1u);
  w.write_u64(m.seed);
  w.write_matrix(m.template_vertices);
  w.write_u64(static_cast<uint64_t>(m.faces.rows()));
  for (int f = 0; f < m.faces.rows(); ++f)
    for (int c = 0; c < 3; ++c) w.write_i32(m.faces(f, c));
  w.write_matrix(m.shape_bases);
  w.write_matrix(m.expr_bases);
  w.write_matrix(m.pose_bases);
  w.write_matrix(m.lbs_weights);
  w.write_matrix(m.joint_regressor);
  w.write_u64(static_cast<uint64_t>(m.facial_vertices.size()));
  for (int i : m.facial_vertices) w.write_i32(i);
  w.write_i32(m.lip_upper);
  w.write_i32(m.lip_lower);
}

TemplateModel load_template_model(const std::string& path) {
  BinaryReader r(path);
  HG_CHECK(r.read_u32() == 0x4d484748u, "not a head model asset file");
  HG_CHECK(r.read_u32() == 1u, "unsupported head model version");
  TemplateModel m;
  m.seed = r.read_u64();
  m.template_vertices = r.read_matrix();
  const auto nf = r.read_u64();
  m.faces.resize(static_cast<int>(nf), 3);
  for (uint64_t f = 0; f < nf; ++f)
    for (int c = 0; c < 3; ++c) m.faces(static_cast<int>(f), c) = r.read_i32();
  m.shape_bases = r.read_matrix();
  m.expr_bases = r.read_matrix();
  m.pose_bases = r.read_matrix();
  m.lbs_weights = r.read_matrix();
  m.joint_regressor = r.read_matrix();
  const auto nfv = r.read_u64();
  m.facial_vertices.resize(nfv);
  for (auto& i : m.facial_vertices) i = r.read_i32();
  m.lip_upper = r.read_i32();
  m.lip_lower = r.read_i32();
  m.validate();
  return m;
}

// --- deformation --------------------------------------------------------------

Mat3 rodrigues(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) {
    Mat3 r = Mat3::Identity();
    r(0, 1) = -axis_angle.z();
    r(0, 2) = axis_angle.y();
    r(1, 0) = axis_angle.z();
    r(1, 2) = -axis_angle.x();
    r(2, 0) = -axis_angle.y();
    r(2, 1) = axis_angle.x();
    return r;
  }
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Vec3 rotation_log(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

Vec pose_coefficients(const Vec& theta) {
  HG_CHECK_ARG(theta.size() == kPoseDim, "theta must have dimension 15");
  Vec coeff(kPoseBasisDim);
  for (int j = 1; j < kNumJoints; ++j) {
    const Mat3 res = rodrigues(theta.segment<3>(3 * j)) - Mat3::Identity();
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) coeff[9 * (j - 1) + 3 * row + col] = res(row, col);
  }
  return coeff;
}

Mat blend_shape(const TemplateModel& model, const HeadParams& params) {
  HG_CHECK_ARG(params.beta.size() == model.n_beta(), "beta dimension mismatch");
  HG_CHECK_ARG(params.theta.size() == kPoseDim, "theta dimension mismatch");
  HG_CHECK_ARG(params.psi.size() == kNumExpr, "psi dimension mismatch");
  const int v = model.vertex_count();
  Vec flat = model.shape_bases * params.beta;
  flat += model.pose_bases * pose_coefficients(params.theta);
  flat += model.expr_bases * params.psi;
  Mat out(v, 3);
  for (int i = 0; i < v; ++i)
    for (int c = 0; c < 3; ++c) out(i, c) = model.template_vertices(i, c) + flat[3 * i + c];
  return out;
}

std::array<Mat34, kNumJoints> joint_transforms(const Mat& joints, const Vec& theta) {
  HG_CHECK_ARG(joints.rows() == kNumJoints && joints.cols() == 3, "joints must be 5x3");
  HG_CHECK_ARG(theta.size() == kPoseDim, "theta must have dimension 15");
  std::array<Mat34, kNumJoints> g;
  for (int j = 0; j < kNumJoints; ++j) {
    const Mat3 r = rodrigues(theta.segment<3>(3 * j));
    const Vec3 jp = joints.row(j).transpose();
    Mat34 local;
    if (kParents[j] < 0) {
      local << r, jp;
      g[j] = local;
    } else {
      const Vec3 offset = jp - joints.row(kParents[j]).transpose();
      local << r, offset;
      const Mat34& p = g[kParents[j]];
      Mat34 composed;
      composed.leftCols<3>() = p.leftCols<3>() * local.leftCols<3>();
      composed.col(3) = p.leftCols<3>() * local.col(3) + p.col(3);
      g[j] = composed;
    }
  }
  return g;
}

std::array<Mat34, kNumJoints> skinning_transforms(const Mat& joints, const Vec& theta) {
  auto g = joint_transforms(joints, theta);
  for (int j = 0; j < kNumJoints; ++j) {
    const Vec3 jp = joints.row(j).transpose();
    g[j].col(3) -= g[j].leftCols<3>() * jp;
  }
  return g;
}

Mat lbs_deform(const Mat& points, const Mat& weights, const Mat& joints, const Vec& theta) {
  HG_CHECK_ARG(points.cols() == 3, "points must be Nx3");
  HG_CHECK_ARG(weights.rows() == points.rows() && weights.cols() == kNumJoints,
               "weights must be Nx5");
  for (int i = 0; i < weights.rows(); ++i)
    HG_CHECK(std::abs(weights.row(i).sum() - 1.0) < 1e-6, "weight row must sum to 1");
  const auto a = skinning_transforms(joints, theta);
  Mat out = Mat::Zero(points.rows(), 3);
  for (int j = 0; j < kNumJoints; ++j) {
    Mat moved = points * a[j].leftCols<3>().transpose();
    moved.rowwise() += a[j].col(3).transpose();
    out += weights.col(j).asDiagonal() * moved;
  }
  return out;
}

Mesh flame_forward(const TemplateModel& model, const HeadParams& params) {
  Mesh mesh;
  const Mat shaped = blend_shape(model, params);
  const Mat joints = model.joints(params.beta);
  mesh.vertices = lbs_deform(shaped, model.lbs_weights, joints, params.theta);
  mesh.faces = model.faces;
  return mesh;
}

// --- nearest-surface transfer ---------------------------------------------------

struct PosedSurface {
  Mesh posed;
  geomio::TriangleBvh bvh;
  Mat weight_rows;  // V x 5
  Mat pose_rows;    // V x 108, row[v][3k+c] = pose_bases(3v+c, k)
  Mat expr_rows;    // V x 150
};

std::shared_ptr<const PosedSurface> make_posed_surface(const TemplateModel& model,
                                                       const HeadParams& params) {
  auto s = std::make_shared<PosedSurface>();
  s->posed = flame_forward(model, params);
  s->bvh = geomio::TriangleBvh(s->posed.vertices, s->posed.faces);
  const int v = model.vertex_count();
  s->weight_rows = model.lbs_weights;
  s->pose_rows.resize(v, 3 * kPoseBasisDim);
  s->expr_rows.resize(v, 3 * kNumExpr);
  for (int i = 0; i < v; ++i) {
    for (int k = 0; k < kPoseBasisDim; ++k)
      for (int c = 0; c < 3; ++c) s->pose_rows(i, 3 * k + c) = model.pose_bases(3 * i + c, k);
    for (int k = 0; k < kNumExpr; ++k)
      for (int c = 0; c < 3; ++c) s->expr_rows(i, 3 * k + c) = model.expr_bases(3 * i + c, k);
  }
  return s;
}

ComponentSample sample_components_at(const PosedSurface& surface, const Mat& query) {
  HG_CHECK_ARG(query.cols() == 3, "query must be Nx3");
  const int n = static_cast<int>(query.rows());
  ComponentSample out;
  out.weights.resize(n, kNumJoints);
  out.pose_basis.resize(n, 3 * kPoseBasisDim);
  out.expr_basis.resize(n, 3 * kNumExpr);
  out.distances.resize(n);
  out.triangles.resize(n);
  for (int i = 0; i < n; ++i) {
    const auto hit = surface.bvh.closest(query.row(i).transpose());
    const int i0 = surface.posed.faces(hit.triangle, 0);
    const int i1 = surface.posed.faces(hit.triangle, 1);
    const int i2 = surface.posed.faces(hit.triangle, 2);
    const Vec3 b = hit.bary;
    out.weights.row(i) = b[0] * surface.weight_rows.row(i0) + b[1] * surface.weight_rows.row(i1) +
                         b[2] * surface.weight_rows.row(i2);
    out.pose_basis.row(i) = b[0] * surface.pose_rows.row(i0) + b[1] * surface.pose_rows.row(i1) +
                            b[2] * surface.pose_rows.row(i2);
    out.expr_basis.row(i) = b[0] * surface.expr_rows.row(i0) + b[1] * surface.expr_rows.row(i1) +
                            b[2] * surface.expr_rows.row(i2);
    out.distances[i] = std::sqrt(hit.dist_sq);
    out.triangles[i] = hit.triangle;
  }
  return out;
}

ComponentSample sample_components_at(const TemplateModel& model, const HeadParams& params,
                                     const Mat& query) {
  return sample_components_at(*make_posed_surface(model, params), query);
}

// --- synthetic scans -------------------------------------------------------------

Mesh make_synthetic_scan_mesh(const TemplateModel& model, const HeadParams& params,
                              uint64_t texture_seed) {
  Mesh mesh = flame_forward(model, params);
  const int v = model.vertex_count();
  mesh.colors.resize(v, 3);
  const Vec3 skin(0.76, 0.60, 0.52);
  const Vec3 hair(0.24, 0.17, 0.12);
  for (int i = 0; i < v; ++i) {
    // Color is keyed on the template position so a subject's texture is
    // stable across expressions.
    const Vec3 tp = model.template_vertices.row(i).transpose();
    const double h = smoothstep01((tp.y() - 0.08) / 0.18) *
                     (1.0 - 0.7 * smoothstep01((tp.z() - 0.15) / 0.15));
    const double n1 = value_noise3(tp * 6.0, texture_seed, 2);
    const double n2 = value_noise3(tp * 14.0, splitmix64(texture_seed), 1);
    Vec3 base = (1.0 - h) * skin + h * hair;
    for (int c = 0; c < 3; ++c) {
      double col = base[c] * (1.0 + 0.18 * n1) + 0.06 * n2;
      mesh.colors(i, c) = std::clamp(col, 0.0, 1.0);
    }
  }
  mesh.normals = compute_vertex_normals(mesh);
  return mesh;
}

}  // namespace headgen::headmodel
