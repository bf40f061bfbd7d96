#pragma once

#include "headgen/common.hpp"
#include "headgen/mesh.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace headgen::headmodel {

// Joint order is fixed: global -> neck -> {jaw, left eye, right eye}.
inline constexpr int kNumJoints = 5;
inline constexpr int kPoseDim = 3 * kNumJoints;                 // axis-angle per joint
inline constexpr int kNumExpr = 50;
inline constexpr int kPoseBasisDim = 9 * (kNumJoints - 1);      // R(theta_j) - I residuals
inline constexpr std::array<int, kNumJoints> kParents = {-1, 0, 1, 1, 1};
inline constexpr int kJointGlobal = 0, kJointNeck = 1, kJointJaw = 2, kJointEyeL = 3,
                     kJointEyeR = 4;

// Control vector compatible with the 5-joint head rig: shape beta, pose theta
// (axis-angle radians), expression psi.
struct HeadParams {
  Vec beta;   // n_beta
  Vec theta;  // 15
  Vec psi;    // 50

  HeadParams() = default;
  explicit HeadParams(int n_beta)
      : beta(Vec::Zero(n_beta)), theta(Vec::Zero(kPoseDim)), psi(Vec::Zero(kNumExpr)) {}
};

// Per-vertex basis tensors are stored flattened: column k of a basis matrix is
// the V*3 offset vector with layout flat[3*v + c] = component c of vertex v.
struct TemplateModel {
  Mat template_vertices;  // V x 3, head fits in the unit cube centered at origin
  FaceMat faces;
  Mat shape_bases;        // 3V x n_beta
  Mat expr_bases;         // 3V x 50
  Mat pose_bases;         // 3V x 36
  Mat lbs_weights;        // V x 5, rows nonnegative, sum 1
  Mat joint_regressor;    // 5 x V, rows sum 1

  std::vector<int> facial_vertices;  // front-of-face region (metric masks)
  int lip_upper = -1, lip_lower = -1;
  uint64_t seed = 0;

  int vertex_count() const { return static_cast<int>(template_vertices.rows()); }
  int n_beta() const { return static_cast<int>(shape_bases.cols()); }

  // Rest joint locations for the given shape: J_reg * (template + B_S(beta)).
  Mat joints(const Vec& beta) const;  // 5 x 3

  void validate() const;
};

struct ModelGenConfig {
  int subdivisions = 3;   // icosphere level: 2 -> 162 verts, 3 -> 642, 4 -> 2562
  int n_beta = 100;
  uint64_t seed = 7;
};

TemplateModel generate_template_model(const ModelGenConfig& cfg);

void save_template_model(const TemplateModel& model, const std::string& path);
TemplateModel load_template_model(const std::string& path);

// --- core deformation ops ----------------------------------------------------

Mat3 rodrigues(const Vec3& axis_angle);
Vec3 rotation_log(const Mat3& r);

// Pose-corrective coefficients: flattened row-major R(theta_j) - I for the
// four non-global joints.
Vec pose_coefficients(const Vec& theta);

// T-bar + B_S(beta) + B_P(theta) + B_E(psi).
Mat blend_shape(const TemplateModel& model, const HeadParams& params);

// World transform per joint for the kinematic chain (rotation about each
// joint's rest location), as 3x4 affine matrices.
std::array<Mat34, kNumJoints> joint_transforms(const Mat& joints, const Vec& theta);

// Skinning transforms A_j = G_j * translate(-J_j); at theta = 0 every A_j is
// the identity.
std::array<Mat34, kNumJoints> skinning_transforms(const Mat& joints, const Vec& theta);

// Standard LBS: each point mapped by its weight-blended skinning transform.
// Weight rows must sum to 1.
Mat lbs_deform(const Mat& points, const Mat& weights, const Mat& joints, const Vec& theta);

Mesh flame_forward(const TemplateModel& model, const HeadParams& params);

// --- nearest-surface component transfer --------------------------------------

struct ComponentSample {
  Mat weights;      // N x 5   (barycentric rows of W_gt)
  Mat pose_basis;   // N x 108 (rows of P_gt, flat layout as in TemplateModel columns)
  Mat expr_basis;   // N x 150 (rows of E_gt)
  Vec distances;    // N       (distance to the posed surface)
  std::vector<int> triangles;  // closest triangle per query
};

// Opaque accelerated posed surface; queries match the brute-force closest
// triangle oracle exactly (ties broken by lowest triangle index).
struct PosedSurface;
std::shared_ptr<const PosedSurface> make_posed_surface(const TemplateModel& model,
                                                       const HeadParams& params);
ComponentSample sample_components_at(const PosedSurface& surface, const Mat& query);
ComponentSample sample_components_at(const TemplateModel& model, const HeadParams& params,
                                     const Mat& query);

// --- synthetic scans ----------------------------------------------------------

// Posed mesh with procedural per-vertex color and analytic vertex normals;
// deterministic in (params, texture_seed).
Mesh make_synthetic_scan_mesh(const TemplateModel& model, const HeadParams& params,
                              uint64_t texture_seed);

}  // namespace headgen::headmodel
