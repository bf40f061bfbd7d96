#include "headgen/deform.hpp"

#include <cmath>

namespace headgen::deform {

namespace {

using headmodel::kNumExpr;
using headmodel::kNumJoints;
using headmodel::kPoseBasisDim;

constexpr int kExprCols = 3 * kNumExpr;       // 150
constexpr int kPoseCols = 3 * kPoseBasisDim;  // 108
constexpr int kHeadCols = kExprCols + kPoseCols + kNumJoints;

Vec3 apply34(const Mat34& a, const Vec3& p) { return a.leftCols<3>() * p + a.col(3); }

Vec3 apply34_inverse(const Mat34& a, const Vec3& p) {
  return a.leftCols<3>().transpose() * (p - a.col(3));
}

Mat softmax_rows_raw(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

// One point through the relative blend: unpose with the canonical blend,
// add template-frame offsets, pose with the current blend.
Vec3 blend_row(const PoseContext& ctx, const Eigen::Ref<const Eigen::RowVectorXd>& w,
               const Vec3& x, const Vec3& off) {
  Mat3 rc = Mat3::Zero(), ru = Mat3::Zero();
  Vec3 tc = Vec3::Zero(), tu = Vec3::Zero();
  for (int j = 0; j < kNumJoints; ++j) {
    rc += w[j] * ctx.bone_can[j].leftCols<3>();
    tc += w[j] * ctx.bone_can[j].col(3);
    ru += w[j] * ctx.bone_cur[j].leftCols<3>();
    tu += w[j] * ctx.bone_cur[j].col(3);
  }
  const Vec3 z = rc.inverse() * (x - tc);
  return ru * (z + off) + tu;
}

Vec3 offsets_for_row(const PoseContext& ctx, const Eigen::Ref<const Eigen::RowVectorXd>& expr,
                     const Eigen::Ref<const Eigen::RowVectorXd>& pose) {
  Vec3 off = Vec3::Zero();
  for (int k = 0; k < kNumExpr; ++k)
    if (ctx.psi[k] != 0.0)
      off += ctx.psi[k] * Vec3(expr[3 * k], expr[3 * k + 1], expr[3 * k + 2]);
  for (int k = 0; k < kPoseBasisDim; ++k)
    if (ctx.pose_coeff_rel[k] != 0.0)
      off += ctx.pose_coeff_rel[k] * Vec3(pose[3 * k], pose[3 * k + 1], pose[3 * k + 2]);
  return off;
}

BundleRows lookup_bundles(const headmodel::PosedSurface& surface, const Mat& x) {
  const auto sample = headmodel::sample_components_at(surface, x);
  BundleRows rows;
  rows.expr = sample.expr_basis;
  rows.pose = sample.pose_basis;
  rows.weights = sample.weights;
  return rows;
}

}  // namespace

void DeformModel::collect_params(std::vector<nn::Tensor*>& out) {
  deshape.collect_params(out);
  bases.collect_params(out);
}

DeformModel make_deform_model(const ModelDims& dims) {
  DeformModel m;
  m.n_beta = dims.n_beta;
  m.theta_canonical = Vec::Zero(headmodel::kPoseDim);
  m.theta_canonical[3 * headmodel::kJointJaw] = dims.jaw_canonical;
  Rng rng(mix_seed(dims.init_seed, 0xdef0));
  {
    nn::MlpSpec spec;
    spec.widths = {3 + dims.n_beta};
    for (int h : dims.deshape_hidden) spec.widths.push_back(h);
    spec.widths.push_back(3);
    spec.head_scale = 0.01;  // near-identity residual at init
    m.deshape = nn::make_mlp("deshape", spec, rng);
  }
  {
    nn::MlpSpec spec;
    spec.widths = {3};
    for (int h : dims.bases_hidden) spec.widths.push_back(h);
    spec.widths.push_back(kHeadCols);
    spec.head_scale = 0.01;  // near-zero offsets, near-uniform weights at init
    m.bases = nn::make_mlp("bases", spec, rng);
  }
  return m;
}

PoseContext make_pose_context(const DeformModel& model, const headmodel::TemplateModel& rig,
                              const headmodel::HeadParams& params) {
  HG_CHECK_ARG(params.beta.size() == model.n_beta, "beta dimension mismatch");
  HG_CHECK_ARG(params.theta.size() == headmodel::kPoseDim, "theta dimension mismatch");
  HG_CHECK_ARG(params.psi.size() == headmodel::kNumExpr, "psi dimension mismatch");
  PoseContext ctx;
  ctx.beta = params.beta;
  ctx.theta = params.theta;
  ctx.psi = params.psi;
  ctx.joints = rig.joints(params.beta);
  ctx.bone_cur = headmodel::skinning_transforms(ctx.joints, params.theta);
  ctx.bone_can = headmodel::skinning_transforms(ctx.joints, model.theta_canonical);
  ctx.pose_coeff_rel = headmodel::pose_coefficients(params.theta) -
                       headmodel::pose_coefficients(model.theta_canonical);
  for (int j = 0; j < kNumJoints; ++j) {
    ctx.blend.rot_cur.push_back(ctx.bone_cur[j].leftCols<3>());
    ctx.blend.tr_cur.push_back(ctx.bone_cur[j].col(3));
    ctx.blend.rot_can.push_back(ctx.bone_can[j].leftCols<3>());
    ctx.blend.tr_can.push_back(ctx.bone_can[j].col(3));
  }
  ctx.at_canonical = (params.theta - model.theta_canonical).cwiseAbs().maxCoeff() < 1e-15 &&
                     params.psi.cwiseAbs().maxCoeff() < 1e-15;
  return ctx;
}

// --- raw evaluation -------------------------------------------------------------------

Mat remove_shape_rows(const DeformModel& model, const Mat& x_c, const Vec& beta) {
  HG_CHECK_ARG(beta.size() == model.n_beta, "beta dimension mismatch");
  Mat in(x_c.rows(), 3 + beta.size());
  in << x_c, beta.transpose().replicate(x_c.rows(), 1);
  return x_c + model.deshape.forward_rows(in);
}

Vec3 remove_shape(const DeformModel& model, const Vec3& x_c, const Vec& beta) {
  return remove_shape_rows(model, x_c.transpose(), beta).row(0).transpose();
}

BundleRows continuous_bases_rows(const DeformModel& model, const Mat& x_deshaped) {
  const Mat heads = model.bases.forward_rows(x_deshaped);
  BundleRows rows;
  rows.expr = heads.leftCols(kExprCols);
  rows.pose = heads.middleCols(kExprCols, kPoseCols);
  rows.weights = softmax_rows_raw(heads.rightCols(kNumJoints));
  return rows;
}

DeformBundle continuous_bases(const DeformModel& model, const Vec3& x_deshaped) {
  const BundleRows rows = continuous_bases_rows(model, x_deshaped.transpose());
  DeformBundle b;
  for (int k = 0; k < kNumExpr; ++k)
    for (int c = 0; c < 3; ++c) b.expr_basis(c, k) = rows.expr(0, 3 * k + c);
  for (int k = 0; k < kPoseBasisDim; ++k)
    for (int c = 0; c < 3; ++c) b.pose_basis(c, k) = rows.pose(0, 3 * k + c);
  b.weights = rows.weights.row(0).transpose();
  return b;
}

Mat deform_points_with_bundles(const PoseContext& ctx, const Mat& x_c, const BundleRows& bundles,
                               bool pure_lbs) {
  const int n = static_cast<int>(x_c.rows());
  Mat out(n, 3);
  for (int i = 0; i < n; ++i) {
    const Vec3 off = pure_lbs
                         ? Vec3::Zero().eval()
                         : offsets_for_row(ctx, bundles.expr.row(i), bundles.pose.row(i));
    out.row(i) =
        blend_row(ctx, bundles.weights.row(i), x_c.row(i).transpose(), off).transpose();
  }
  return out;
}

Mat deform_points(const DeformModel& model, const PoseContext& ctx, const Mat& x_c,
                  const DeformOptions& opts) {
  const BundleRows bundles = opts.gt_lookup
                                 ? lookup_bundles(*opts.gt_lookup, x_c)
                                 : continuous_bases_rows(
                                       model, remove_shape_rows(model, x_c, ctx.beta));
  return deform_points_with_bundles(ctx, x_c, bundles, opts.pure_lbs);
}

std::vector<Mat3> deform_jacobians(const DeformModel& model, const PoseContext& ctx,
                                   const Mat& x_c, const DeformOptions& opts) {
  nn::Tape tape;
  auto x = tape.input(x_c);
  auto graph = build_deform_graph(tape, const_cast<DeformModel&>(model), ctx, x, opts);
  std::vector<Mat3> jac(x_c.rows());
  for (int r = 0; r < 3; ++r) {
    Mat seed = Mat::Zero(x_c.rows(), 3);
    seed.col(r).setOnes();
    tape.backward_seed(graph.out, seed);
    const Mat& g = tape.node_grad(x);
    for (int i = 0; i < x_c.rows(); ++i) jac[i].row(r) = g.row(i);
  }
  return jac;
}

// --- correspondence --------------------------------------------------------------------

namespace {

struct Candidate {
  bool converged = false;
  Vec3 root = Vec3::Zero();
  double residual = 0.0;
  int iterations = 0;
};

Candidate broyden_from(const DeformModel& model, const PoseContext& ctx, const Vec3& x_d,
                       const Vec3& init, const CorrespondenceConfig& cfg,
                       const DeformOptions& opts) {
  Candidate cand;
  auto deform1 = [&](const Vec3& x) -> Vec3 {
    return deform_points(model, ctx, x.transpose(), opts).row(0).transpose();
  };
  Vec3 x = init;
  Vec3 f = deform1(x) - x_d;
  double fn = f.norm();
  if (fn <= cfg.tol) {
    cand.converged = true;
    cand.root = x;
    cand.residual = fn;
    cand.iterations = 0;
    return cand;
  }
  Mat3 b_inv = Mat3::Identity();  // approximate inverse jacobian
  for (int it = 1; it <= cfg.max_iter; ++it) {
    const Vec3 dx = -b_inv * f;
    x += dx;
    const Vec3 f_new = deform1(x) - x_d;
    const Vec3 df = f_new - f;
    const Vec3 bdf = b_inv * df;
    const double denom = dx.dot(bdf);
    if (std::abs(denom) > 1e-14) b_inv += ((dx - bdf) * (dx.transpose() * b_inv)) / denom;
    f = f_new;
    fn = f.norm();
    if (fn <= cfg.tol) {
      cand.converged = true;
      cand.root = x;
      cand.residual = fn;
      cand.iterations = it;
      return cand;
    }
    if (fn > 4.0 || !std::isfinite(fn)) break;  // clearly diverged
  }
  cand.converged = false;
  cand.residual = fn;
  cand.root = x;
  return cand;
}

Mat3 jacobian_single(const DeformModel& model, const PoseContext& ctx, const Vec3& x,
                     const DeformOptions& opts) {
  return deform_jacobians(model, ctx, x.transpose(), opts)[0];
}

void polish_root(const DeformModel& model, const PoseContext& ctx, const Vec3& x_d,
                 const CorrespondenceConfig& cfg, const DeformOptions& opts,
                 CorrespondenceResult* res) {
  auto deform1 = [&](const Vec3& x) -> Vec3 {
    return deform_points(model, ctx, x.transpose(), opts).row(0).transpose();
  };
  Vec3 x = res->canonical;
  Vec3 f = deform1(x) - x_d;
  for (int it = 0; it < cfg.polish_iters; ++it) {
    const Mat3 jac = jacobian_single(model, ctx, x, opts);
    if (std::abs(jac.determinant()) < 1e-12) break;
    const Vec3 x_next = x - jac.inverse() * f;
    const Vec3 f_next = deform1(x_next) - x_d;
    if (f_next.norm() >= f.norm()) break;  // keep the best iterate
    x = x_next;
    f = f_next;
  }
  res->canonical = x;
  res->residual = f.norm();
  res->jacobian = jacobian_single(model, ctx, x, opts);
}

std::vector<Candidate> run_candidates(const DeformModel& model, const PoseContext& ctx,
                                      const Vec3& x_d, const CorrespondenceConfig& cfg,
                                      const DeformOptions& opts) {
  std::vector<Candidate> out(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) {
    // invert the per-bone rigid transform: x0 = can_j(cur_j^{-1}(x_d))
    const Vec3 init = apply34(ctx.bone_can[j], apply34_inverse(ctx.bone_cur[j], x_d));
    out[j] = broyden_from(model, ctx, x_d, init, cfg, opts);
  }
  return out;
}

}  // namespace

CorrespondenceResult canonical_correspondence(const DeformModel& model, const PoseContext& ctx,
                                              const Vec3& x_d, const CorrespondenceConfig& cfg,
                                              const DeformOptions& opts) {
  const auto candidates = run_candidates(model, ctx, x_d, cfg, opts);
  CorrespondenceResult res;
  double best_fail = std::numeric_limits<double>::max();
  for (int j = 0; j < kNumJoints; ++j) {
    const auto& c = candidates[j];
    if (c.converged) {
      res.candidate_count++;
      if (!res.converged || c.residual < res.residual ||
          (c.residual == res.residual && j < res.bone)) {
        res.converged = true;
        res.canonical = c.root;
        res.residual = c.residual;
        res.iterations = c.iterations;
        res.bone = j;
      }
    } else {
      best_fail = std::min(best_fail, c.residual);
    }
  }
  if (!res.converged) {
    res.residual = best_fail;
    res.iterations = cfg.max_iter;
    return res;
  }
  polish_root(model, ctx, x_d, cfg, opts, &res);
  return res;
}

CorrespondenceResult correspondence_from_guess(const DeformModel& model, const PoseContext& ctx,
                                               const Vec3& x_d, const Vec3& guess,
                                               const CorrespondenceConfig& cfg,
                                               const DeformOptions& opts) {
  const Candidate warm = broyden_from(model, ctx, x_d, guess, cfg, opts);
  if (warm.converged) {
    CorrespondenceResult res;
    res.converged = true;
    res.canonical = warm.root;
    res.residual = warm.residual;
    res.iterations = warm.iterations;
    res.candidate_count = 1;
    res.bone = -1;
    polish_root(model, ctx, x_d, cfg, opts, &res);
    return res;
  }
  return canonical_correspondence(model, ctx, x_d, cfg, opts);
}

std::vector<CorrespondenceResult> correspondences(const DeformModel& model,
                                                  const PoseContext& ctx, const Mat& x_d,
                                                  const CorrespondenceConfig& cfg,
                                                  const DeformOptions& opts, int threads) {
  std::vector<CorrespondenceResult> out(x_d.rows());
  parallel_for(static_cast<size_t>(x_d.rows()), threads, [&](size_t i) {
    out[i] = canonical_correspondence(model, ctx, x_d.row(static_cast<int>(i)).transpose(), cfg,
                                      opts);
  });
  return out;
}

CorrespondenceResult canonical_correspondence_max_occ(
    const DeformModel& model, const PoseContext& ctx, const canonical::CanonicalEval& eval,
    const Vec3& x_d, const CorrespondenceConfig& cfg, const DeformOptions& opts) {
  const auto candidates = run_candidates(model, ctx, x_d, cfg, opts);
  CorrespondenceResult res;
  double best_occ = -1.0;
  for (int j = 0; j < kNumJoints; ++j) {
    const auto& c = candidates[j];
    if (!c.converged) continue;
    res.candidate_count++;
    const double occ = eval.occupancy_rows(c.root.transpose())[0];
    if (occ > best_occ) {
      best_occ = occ;
      res.converged = true;
      res.canonical = c.root;
      res.residual = c.residual;
      res.iterations = c.iterations;
      res.bone = j;
    }
  }
  if (!res.converged) {
    res.iterations = cfg.max_iter;
    return res;
  }
  polish_root(model, ctx, x_d, cfg, opts, &res);
  return res;
}

// --- deformed-space field -----------------------------------------------------------

canonical::CanonicalSample deformed_field_eval(const canonical::CanonicalEval& eval,
                                               const DeformModel& model, const PoseContext& ctx,
                                               const Vec3& x_d, const CorrespondenceConfig& cfg,
                                               const DeformOptions& opts) {
  const auto corr = canonical_correspondence(model, ctx, x_d, cfg, opts);
  if (!corr.converged) return canonical::CanonicalSample{};  // empty space reads occ = 0
  return eval.sample(corr.canonical, ctx.theta, ctx.psi);
}

DeformedFieldAccel::DeformedFieldAccel(const canonical::CanonicalEval& eval,
                                       const DeformModel& model, const PoseContext& ctx,
                                       int mesh_resolution, const DeformOptions& opts) {
  canonical_mesh = geomio::marching_cubes(
      geomio::BatchField([&](const Mat& pts) { return eval.occupancy_rows(pts); }),
      Vec3(-1, -1, -1), Vec3(1, 1, 1), mesh_resolution);
  deformed_mesh = canonical_mesh;
  if (canonical_mesh.vertex_count() > 0) {
    deformed_mesh.vertices = deform_points(model, ctx, canonical_mesh.vertices, opts);
    bvh = geomio::TriangleBvh(deformed_mesh.vertices, deformed_mesh.faces);
  }
}

std::optional<Vec3> DeformedFieldAccel::canonical_guess(const Vec3& x_d) const {
  if (bvh.empty()) return std::nullopt;
  const auto hit = bvh.closest(x_d);
  if (hit.dist_sq > cull_radius * cull_radius) return std::nullopt;
  const int i0 = deformed_mesh.faces(hit.triangle, 0);
  const int i1 = deformed_mesh.faces(hit.triangle, 1);
  const int i2 = deformed_mesh.faces(hit.triangle, 2);
  return Vec3(hit.bary[0] * canonical_mesh.vertices.row(i0).transpose() +
              hit.bary[1] * canonical_mesh.vertices.row(i1).transpose() +
              hit.bary[2] * canonical_mesh.vertices.row(i2).transpose());
}

double DeformedFieldAccel::occupancy(const DeformModel& model, const PoseContext& ctx,
                                     const canonical::CanonicalEval& eval, const Vec3& x_d,
                                     const CorrespondenceConfig& cfg,
                                     const DeformOptions& opts) const {
  const auto guess = canonical_guess(x_d);
  if (!guess) return 0.0;  // conservative cull: far from the deformed surface
  const auto corr = correspondence_from_guess(model, ctx, x_d, *guess, cfg, opts);
  if (!corr.converged) return 0.0;
  return eval.occupancy_rows(corr.canonical.transpose())[0];
}

Vec deformed_occupancy_grid(const canonical::CanonicalEval& eval, const DeformModel& model,
                            const PoseContext& ctx, const DeformedFieldAccel& accel,
                            const Mat& query, const CorrespondenceConfig& cfg,
                            const DeformOptions& opts, int threads) {
  Vec out(query.rows());
  parallel_for(static_cast<size_t>(query.rows()), threads, [&](size_t i) {
    out[static_cast<Eigen::Index>(i)] =
        accel.occupancy(model, ctx, eval, query.row(static_cast<int>(i)).transpose(), cfg, opts);
  });
  return out;
}

// --- training graph --------------------------------------------------------------------

DeformGraph build_deform_graph(nn::Tape& tape, DeformModel& model, const PoseContext& ctx,
                               nn::Tape::NodeId x_node, const DeformOptions& opts) {
  DeformGraph g;
  g.x = x_node;
  const int n = tape.rows(x_node);

  nn::Tape::NodeId offsets;
  if (opts.gt_lookup) {
    // ablation path: components transferred from the rig, locally constant
    const BundleRows rows = lookup_bundles(*opts.gt_lookup, tape.value(x_node));
    g.expr = tape.constant(rows.expr);
    g.pose = tape.constant(rows.pose);
    g.weights = tape.constant(rows.weights);
    g.deshaped = x_node;
  } else {
    auto beta_rows = tape.constant(ctx.beta.transpose().replicate(n, 1));
    auto d_in = tape.concat_cols({x_node, beta_rows});
    auto residual = nn::mlp_graph(tape, model.deshape, d_in);
    g.deshaped = tape.add(x_node, residual);
    auto heads = nn::mlp_graph(tape, model.bases, g.deshaped);
    g.expr = tape.slice_cols(heads, 0, kExprCols);
    g.pose = tape.slice_cols(heads, kExprCols, kPoseCols);
    g.weights = tape.softmax_rows(tape.slice_cols(heads, kExprCols + kPoseCols, kNumJoints));
  }
  if (opts.pure_lbs) {
    offsets = tape.constant(Mat::Zero(n, 3));
  } else {
    auto off_e = tape.basis_offset(g.expr, ctx.psi);
    auto off_p = tape.basis_offset(g.pose, ctx.pose_coeff_rel);
    offsets = tape.add(off_e, off_p);
  }
  g.out = tape.lbs_blend(g.weights, x_node, offsets, ctx.blend);
  return g;
}

}  // namespace headgen::deform
