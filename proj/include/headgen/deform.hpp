#pragma once

#include "headgen/canonical.hpp"
#include "headgen/config.hpp"
#include "headgen/headmodel.hpp"
#include "headgen/nn.hpp"

#include <optional>

namespace headgen::deform {

// Learned per-point deformation components. Weights are post-softmax, so
// they form a convex combination for any network state.
struct DeformBundle {
  Eigen::Matrix<double, 3, headmodel::kNumExpr> expr_basis;
  Eigen::Matrix<double, 3, headmodel::kPoseBasisDim> pose_basis;
  Eigen::Matrix<double, headmodel::kNumJoints, 1> weights;
};

// Row-major batch layout matching the bases net heads and the ground-truth
// transfer: expr N x 150, pose N x 108, weights N x 5.
struct BundleRows {
  Mat expr, pose, weights;
};

struct DeformModel {
  nn::Mlp deshape;  // [x, beta] -> residual displacement (shape removal)
  nn::Mlp bases;    // x' -> 150 + 108 + 5 head values
  int n_beta = 0;
  Vec theta_canonical;  // pose defining canonical space (jaw slightly open)

  void collect_params(std::vector<nn::Tensor*>& out);
};

DeformModel make_deform_model(const ModelDims& dims);

// Everything about one (beta, theta, psi) that the deformation needs:
// skinning transforms at the target pose and at the canonical pose, plus
// pose coefficients measured relative to the canonical convention.
struct PoseContext {
  Vec beta, theta, psi;
  Mat joints;  // 5 x 3
  std::array<Mat34, headmodel::kNumJoints> bone_cur, bone_can;
  Vec pose_coeff_rel;  // 36
  nn::Tape::BlendConsts blend;
  bool at_canonical = false;  // theta == theta_canonical and psi == 0
};

PoseContext make_pose_context(const DeformModel& model,
                              const headmodel::TemplateModel& rig,
                              const headmodel::HeadParams& params);

// Behaviour switches for the ablation study. `gt_lookup` replaces the bases
// net with nearest-neighbour transfer from the subject's canonical surface.
struct DeformOptions {
  bool pure_lbs = false;  // drop the B_E/B_P offsets, skinning only
  const headmodel::PosedSurface* gt_lookup = nullptr;
};

// --- raw evaluation -------------------------------------------------------------

Vec3 remove_shape(const DeformModel& model, const Vec3& x_c, const Vec& beta);
Mat remove_shape_rows(const DeformModel& model, const Mat& x_c, const Vec& beta);

DeformBundle continuous_bases(const DeformModel& model, const Vec3& x_deshaped);
BundleRows continuous_bases_rows(const DeformModel& model, const Mat& x_deshaped);

// Canonical -> deformed: template-frame offsets from the predicted bases,
// then skinning with transforms measured relative to the canonical pose.
// Exactly the identity at the canonical pose convention.
Mat deform_points(const DeformModel& model, const PoseContext& ctx, const Mat& x_c,
                  const DeformOptions& opts = {});
Mat deform_points_with_bundles(const PoseContext& ctx, const Mat& x_c, const BundleRows& bundles,
                               bool pure_lbs = false);

// d deform / d x_c per point, via repeated input-gradient passes.
std::vector<Mat3> deform_jacobians(const DeformModel& model, const PoseContext& ctx,
                                   const Mat& x_c, const DeformOptions& opts = {});

// --- correspondence search ---------------------------------------------------------

struct CorrespondenceResult {
  bool converged = false;
  Vec3 canonical = Vec3::Zero();
  int iterations = 0;     // Broyden iterations of the winning candidate
  double residual = 0.0;  // |deform(x_c) - x_d|
  int candidate_count = 0;
  int bone = -1;
  Mat3 jacobian = Mat3::Identity();  // d deform / d x_c at the root
};

// Broyden search from one initialization per bone; winner is the smallest
// residual (ties to the lowest bone index), then Newton-polished.
CorrespondenceResult canonical_correspondence(const DeformModel& model, const PoseContext& ctx,
                                              const Vec3& x_d,
                                              const CorrespondenceConfig& cfg = {},
                                              const DeformOptions& opts = {});

// Same search warm-started from a caller-provided canonical guess, falling
// back to the full per-bone sweep when the guess fails.
CorrespondenceResult correspondence_from_guess(const DeformModel& model, const PoseContext& ctx,
                                               const Vec3& x_d, const Vec3& guess,
                                               const CorrespondenceConfig& cfg = {},
                                               const DeformOptions& opts = {});

std::vector<CorrespondenceResult> correspondences(const DeformModel& model,
                                                  const PoseContext& ctx, const Mat& x_d,
                                                  const CorrespondenceConfig& cfg = {},
                                                  const DeformOptions& opts = {},
                                                  int threads = 0);

// Multi-root rule alternative: keep the converged candidate with the highest
// occupancy instead of the smallest residual.
CorrespondenceResult canonical_correspondence_max_occ(
    const DeformModel& model, const PoseContext& ctx, const canonical::CanonicalEval& eval,
    const Vec3& x_d, const CorrespondenceConfig& cfg = {}, const DeformOptions& opts = {});

// --- deformed-space field ------------------------------------------------------------

// Canonical field evaluated at the correspondence; absent correspondence
// reads as empty space (occ = 0).
canonical::CanonicalSample deformed_field_eval(const canonical::CanonicalEval& eval,
                                               const DeformModel& model, const PoseContext& ctx,
                                               const Vec3& x_d,
                                               const CorrespondenceConfig& cfg = {},
                                               const DeformOptions& opts = {});

// Mesh-seeded accelerator for dense deformed-space queries (grids, rays):
// canonical marching-cubes mesh deformed forward provides per-query warm
// starts and a conservative empty-space cull.
struct DeformedFieldAccel {
  Mesh canonical_mesh;
  Mesh deformed_mesh;  // same topology, vertices pushed through deform_points
  geomio::TriangleBvh bvh;
  double cull_radius = 0.12;

  DeformedFieldAccel(const canonical::CanonicalEval& eval, const DeformModel& model,
                     const PoseContext& ctx, int mesh_resolution,
                     const DeformOptions& opts = {});
  // occupancy of the deformed field at x_d; pure cull for far points
  double occupancy(const DeformModel& model, const PoseContext& ctx,
                   const canonical::CanonicalEval& eval, const Vec3& x_d,
                   const CorrespondenceConfig& cfg = {}, const DeformOptions& opts = {}) const;
  std::optional<Vec3> canonical_guess(const Vec3& x_d) const;
};

// Deformed-space occupancy over a dense grid (for IoU measurements and
// deformed mesh extraction), parallel over points.
Vec deformed_occupancy_grid(const canonical::CanonicalEval& eval, const DeformModel& model,
                            const PoseContext& ctx, const DeformedFieldAccel& accel,
                            const Mat& query, const CorrespondenceConfig& cfg = {},
                            const DeformOptions& opts = {}, int threads = 0);

// --- training graph -------------------------------------------------------------------

struct DeformGraph {
  nn::Tape::NodeId x = -1;
  nn::Tape::NodeId deshaped = -1;
  nn::Tape::NodeId expr = -1;      // N x 150
  nn::Tape::NodeId pose = -1;      // N x 108
  nn::Tape::NodeId weights = -1;   // N x 5 post-softmax
  nn::Tape::NodeId out = -1;       // N x 3 deformed points
};

// Builds the differentiable deformation at `x_node`. With gt_lookup set the
// bundle nodes are constants (no bases-net parameters in the graph).
DeformGraph build_deform_graph(nn::Tape& tape, DeformModel& model, const PoseContext& ctx,
                               nn::Tape::NodeId x_node, const DeformOptions& opts = {});

}  // namespace headgen::deform
