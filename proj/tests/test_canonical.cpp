#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "headgen/canonical.hpp"

using namespace headgen;
using namespace headgen::canonical;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.n_beta = 8;
  d.n_shape = 16;
  d.n_detail = 12;
  d.n_color = 12;
  d.n_feat = 8;
  d.vol_nodes = 5;
  d.vol_channels = 6;
  d.volgen_hidden = {24};
  d.geom_hidden = {24, 24};
  d.normal_hidden = {24};
  d.texture_hidden = {24};
  d.init_seed = 77;
  return d;
}

LatentTriplet random_codes(const ModelDims& dims, uint64_t seed) {
  Rng rng(seed);
  LatentTriplet t(dims);
  for (int i = 0; i < t.z_shape.size(); ++i) t.z_shape[i] = 0.3 * normal_real(rng);
  for (int i = 0; i < t.z_detail.size(); ++i) t.z_detail[i] = 0.3 * normal_real(rng);
  for (int i = 0; i < t.z_color.size(); ++i) t.z_color[i] = 0.3 * normal_real(rng);
  return t;
}

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-6});
}

}  // namespace

TEST_CASE("untrained geometry: ellipsoid prior puts the center inside, corners outside") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const auto codes = random_codes(dims, 5);
  const CanonicalEval eval(model, codes);
  CHECK(eval.occupancy_rows(Mat::Zero(1, 3))[0] > 0.5);
  Mat corner(1, 3);
  corner << 1, 1, 1;
  CHECK(eval.occupancy_rows(corner)[0] < 0.5);
}

TEST_CASE("geometry: repeated evaluation is bit-identical") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const CanonicalEval eval(model, random_codes(dims, 6));
  Mat pts(4, 3);
  Rng rng(7);
  for (int i = 0; i < pts.size(); ++i) pts(i / 3, i % 3) = uniform_real(rng, -0.8, 0.8);
  const Vec a = eval.occupancy_rows(pts);
  const Vec b = eval.occupancy_rows(pts);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("detail normal: unit length and conditioning sensitivity") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  auto codes = random_codes(dims, 8);
  const CanonicalEval eval(model, codes);
  Rng rng(9);
  Mat pts(16, 3);
  for (int i = 0; i < pts.size(); ++i) pts(i / 3, i % 3) = uniform_real(rng, -0.6, 0.6);
  const Mat f_s = eval.feature_rows(pts);
  Mat normals, f_n;
  eval.normals_rows(pts, f_s, &normals, &f_n);
  for (int i = 0; i < pts.rows(); ++i)
    CHECK(std::abs(normals.row(i).norm() - 1.0) < 1e-5);

  auto codes2 = codes;
  codes2.z_detail.setConstant(0.9);
  const CanonicalEval eval2(model, codes2);
  Mat normals2, f_n2;
  eval2.normals_rows(pts, f_s, &normals2, &f_n2);
  CHECK((normals - normals2).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("texture: outputs in [0,1]^3 and reacts to psi") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const CanonicalEval eval(model, random_codes(dims, 10));
  Rng rng(11);
  Mat pts(8, 3);
  for (int i = 0; i < pts.size(); ++i) pts(i / 3, i % 3) = uniform_real(rng, -0.6, 0.6);
  const Mat f_s = eval.feature_rows(pts);
  Mat normals, f_n;
  eval.normals_rows(pts, f_s, &normals, &f_n);
  Vec theta = Vec::Zero(headmodel::kPoseDim);
  Vec psi = Vec::Zero(headmodel::kNumExpr);
  for (int i = 0; i < psi.size(); ++i) psi[i] = normal_real(rng, 0.0, 0.5);
  const Mat colors = eval.colors_rows(pts, f_s, f_n, theta, psi);
  CHECK(colors.minCoeff() >= 0.0);
  CHECK(colors.maxCoeff() <= 1.0);

  Vec psi_perm = psi;
  std::swap(psi_perm[0], psi_perm[40]);
  std::swap(psi_perm[3], psi_perm[17]);
  const Mat colors_perm = eval.colors_rows(pts, f_s, f_n, theta, psi_perm);
  CHECK((colors - colors_perm).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("texture: blind to global rotation, sensitive to jaw pose") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const CanonicalEval eval(model, random_codes(dims, 12));
  Mat pt(1, 3);
  pt << 0.1, -0.2, 0.3;
  const Mat f_s = eval.feature_rows(pt);
  Mat normals, f_n;
  eval.normals_rows(pt, f_s, &normals, &f_n);
  Vec theta = Vec::Zero(headmodel::kPoseDim);
  const Vec psi = Vec::Zero(headmodel::kNumExpr);
  const Mat base = eval.colors_rows(pt, f_s, f_n, theta, psi);
  theta.segment<3>(0) << 0.5, -0.3, 0.2;  // global rotation is zeroed inside
  CHECK((eval.colors_rows(pt, f_s, f_n, theta, psi) - base).cwiseAbs().maxCoeff() == 0.0);
  theta[3 * headmodel::kJointJaw] = 0.4;
  CHECK((eval.colors_rows(pt, f_s, f_n, theta, psi) - base).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("canonical fields: geometry and normals ignore pose and expression") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const CanonicalEval eval(model, random_codes(dims, 13));
  const Vec3 x(0.05, 0.1, 0.2);
  Vec theta1 = Vec::Zero(headmodel::kPoseDim), theta2 = Vec::Zero(headmodel::kPoseDim);
  theta2[7] = 0.3;
  Vec psi1 = Vec::Zero(headmodel::kNumExpr), psi2 = Vec::Zero(headmodel::kNumExpr);
  psi2[4] = -0.8;
  const auto s1 = eval.sample(x, theta1, psi1);
  const auto s2 = eval.sample(x, theta2, psi2);
  CHECK(s1.occ == s2.occ);
  CHECK((s1.normal - s2.normal).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s1.f_s - s2.f_s).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s1.color - s2.color).cwiseAbs().maxCoeff() > 0.0);  // texture sees the jaw
}

TEST_CASE("geometry gradient w.r.t. the query point matches finite differences") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  const CanonicalEval eval(model, random_codes(dims, 14));
  Rng rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    Vec3 x;
    for (int c = 0; c < 3; ++c) x[c] = uniform_real(rng, -0.5, 0.5);
    const Vec3 grad = eval.occupancy_gradient(x);
    for (int c = 0; c < 3; ++c) {
      const double fd = nn::central_difference([&](double e) {
        Vec3 xp = x;
        xp[c] += e;
        return eval.occupancy_rows(xp.transpose())[0];
      });
      CHECK(rel_err(grad[c], fd) < 1e-3);
    }
  }
}

TEST_CASE("latents: interpolation endpoints, midpoint, and range check") {
  const auto dims = small_dims();
  const auto a = random_codes(dims, 16);
  const auto b = random_codes(dims, 17);
  const auto at0 = interpolate_latents(a, b, 0.0);
  CHECK((at0.z_shape - a.z_shape).cwiseAbs().maxCoeff() == 0.0);
  const auto at1 = interpolate_latents(a, b, 1.0);
  CHECK((at1.z_color - b.z_color).cwiseAbs().maxCoeff() == 0.0);
  const auto mid = interpolate_latents(a, b, 0.5);
  CHECK((mid.z_detail - 0.5 * (a.z_detail + b.z_detail)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(interpolate_latents(a, b, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(interpolate_latents(a, b, -0.1), std::invalid_argument);
}

TEST_CASE("sample_latents: reproducible, respects table statistics, degenerate table") {
  const auto dims = small_dims();
  LatentTable table = make_latent_table(dims, {"a", "b", "c", "d"}, 55);
  // spread the codes so the fit is non-trivial
  Rng spread(18);
  for (auto& e : table.entries) {
    for (int i = 0; i < e.z_shape.value.cols(); ++i)
      e.z_shape.value(0, i) = normal_real(spread, 0.0, 0.5);
  }
  Rng r1(99), r2(99);
  const auto s1 = sample_latents(table, r1);
  const auto s2 = sample_latents(table, r2);
  CHECK((s1.z_shape - s2.z_shape).cwiseAbs().maxCoeff() == 0.0);

  // norm of the centered draw stays within 4x the fitted spread
  Vec mean = Vec::Zero(dims.n_shape), var = Vec::Zero(dims.n_shape);
  for (const auto& e : table.entries) mean += e.z_shape.value.row(0).transpose();
  mean /= static_cast<double>(table.entries.size());
  for (const auto& e : table.entries)
    var += (e.z_shape.value.row(0).transpose() - mean).cwiseAbs2();
  var /= static_cast<double>(table.entries.size() - 1);
  Rng r3(123);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = sample_latents(table, r3);
    CHECK((s.z_shape - mean).norm() <= 4.0 * std::sqrt(var.sum()));
  }

  LatentTable single = make_latent_table(dims, {"only"}, 56);
  Rng r4(1);
  const auto s = sample_latents(single, r4);
  CHECK((s.z_shape - single.entries[0].z_shape.value.row(0).transpose()).cwiseAbs().maxCoeff() ==
        0.0);

  LatentTable empty;
  Rng r5(2);
  CHECK_THROWS_AS(sample_latents(empty, r5), UnavailableState);
}

TEST_CASE("geometry graph: gradients for params and the shape code match FD") {
  auto dims = small_dims();
  auto model = make_canonical_model(dims);
  nn::Tensor z_shape("z", Mat::Zero(1, dims.n_shape));
  Rng rng(19);
  for (int i = 0; i < dims.n_shape; ++i) z_shape.value(0, i) = 0.2 * normal_real(rng);
  Mat pts(5, 3);
  for (int i = 0; i < pts.size(); ++i) pts(i / 3, i % 3) = uniform_real(rng, -0.5, 0.5);
  Vec labels(5);
  for (int i = 0; i < 5; ++i) labels[i] = i % 2;

  auto loss_value = [&]() {
    LatentTriplet codes(dims);
    codes.z_shape = z_shape.value.row(0).transpose();
    CanonicalEval eval(model, codes);
    const Vec occ = eval.occupancy_rows(pts);
    double total = 0.0;
    for (int i = 0; i < 5; ++i) {
      const double p = std::clamp(occ[i], 1e-12, 1.0 - 1e-12);
      total += -(labels[i] * std::log(p) + (1 - labels[i]) * std::log(1 - p));
    }
    return total / 5;
  };

  nn::Tape tape;
  auto x = tape.constant(pts);
  auto g = build_geometry_graph(tape, model, z_shape, x);
  auto loss = tape.mean_bce_logit(g.occ_logit, labels);
  tape.backward(loss);
  CHECK(tape.scalar(loss) == doctest::Approx(loss_value()).epsilon(1e-10));

  std::vector<nn::Tensor*> params;
  model.collect_stage1_params(params);
  params.push_back(&z_shape);
  for (auto* t : params) {
    Rng probe_rng(mix_seed(20, fnv1a64(t->name.data(), t->name.size())));
    bool nonzero = false;
    for (int probe = 0; probe < 4; ++probe) {
      const int r = uniform_int(probe_rng, 0, static_cast<int>(t->value.rows()) - 1);
      const int c = uniform_int(probe_rng, 0, static_cast<int>(t->value.cols()) - 1);
      const double fd = nn::central_difference([&](double e) {
        const double keep = t->value(r, c);
        t->value(r, c) += e;
        const double v = loss_value();
        t->value(r, c) = keep;
        return v;
      });
      CHECK(rel_err(t->grad(r, c), fd) < 1e-3);
      if (std::abs(t->grad(r, c)) > 1e-12) nonzero = true;
    }
    (void)nonzero;
  }
  // auto-decoder requirement: code gradients are nonzero
  CHECK(z_shape.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("normal/texture graph: gradients for stage-2 params and codes match FD") {
  auto dims = small_dims();
  auto model = make_canonical_model(dims);
  nn::Tensor z_detail("zd", Mat::Zero(1, dims.n_detail));
  nn::Tensor z_color("zc", Mat::Zero(1, dims.n_color));
  Rng rng(21);
  for (int i = 0; i < dims.n_detail; ++i) z_detail.value(0, i) = 0.2 * normal_real(rng);
  for (int i = 0; i < dims.n_color; ++i) z_color.value(0, i) = 0.2 * normal_real(rng);
  Mat pts(4, 3);
  for (int i = 0; i < pts.size(); ++i) pts(i / 3, i % 3) = uniform_real(rng, -0.4, 0.4);
  Vec theta = Vec::Zero(headmodel::kPoseDim);
  theta[3 * headmodel::kJointJaw] = 0.15;
  Vec psi = Vec::Zero(headmodel::kNumExpr);
  psi[2] = 0.4;
  Mat n_gt(4, 3), c_gt(4, 3);
  for (int i = 0; i < 4; ++i) {
    Vec3 d;
    for (int c = 0; c < 3; ++c) d[c] = normal_real(rng);
    n_gt.row(i) = d.normalized().transpose();
    for (int c = 0; c < 3; ++c) c_gt(i, c) = uniform_real(rng);
  }

  LatentTriplet codes(dims);
  const CanonicalEval eval(model, codes);
  const Mat f_s = eval.feature_rows(pts);
  Mat fallback(4, 3);
  fallback.setZero();
  fallback.col(2).setOnes();

  auto loss_value = [&]() {
    LatentTriplet cc(dims);
    cc.z_detail = z_detail.value.row(0).transpose();
    cc.z_color = z_color.value.row(0).transpose();
    CanonicalEval ev(model, cc);
    Mat normals, f_n;
    ev.normals_rows(pts, f_s, &normals, &f_n);
    const Mat colors = ev.colors_rows(pts, f_s, f_n, theta, psi);
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
      total += (colors.row(i) - c_gt.row(i)).squaredNorm() / 4.0;
      total += (1.0 - n_gt.row(i).dot(normals.row(i))) / 4.0;
    }
    return total;
  };

  nn::Tape tape;
  auto x = tape.constant(pts);
  auto g = build_normal_texture_graph(tape, model, z_detail, z_color, x, f_s, fallback, theta,
                                      psi);
  auto color_term = tape.mean_sqnorm_diff(g.color, c_gt);
  auto normal_term = tape.mean_one_minus_dot(g.normal, n_gt);
  auto loss = tape.weighted_sum({{color_term, 1.0}, {normal_term, 1.0}});
  tape.backward(loss);
  CHECK(tape.scalar(loss) == doctest::Approx(loss_value()).epsilon(1e-10));

  std::vector<nn::Tensor*> params;
  model.collect_stage2_params(params);
  params.push_back(&z_detail);
  params.push_back(&z_color);
  for (auto* t : params) {
    Rng probe_rng(mix_seed(22, fnv1a64(t->name.data(), t->name.size())));
    for (int probe = 0; probe < 4; ++probe) {
      const int r = uniform_int(probe_rng, 0, static_cast<int>(t->value.rows()) - 1);
      const int c = uniform_int(probe_rng, 0, static_cast<int>(t->value.cols()) - 1);
      const double fd = nn::central_difference([&](double e) {
        const double keep = t->value(r, c);
        t->value(r, c) += e;
        const double v = loss_value();
        t->value(r, c) = keep;
        return v;
      });
      CHECK(rel_err(t->grad(r, c), fd) < 1e-3);
    }
  }
  CHECK(z_detail.grad.cwiseAbs().maxCoeff() > 0.0);
  CHECK(z_color.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("diagnostics: out-of-box queries are counted") {
  const auto dims = small_dims();
  const auto model = make_canonical_model(dims);
  EvalDiagnostics diag;
  const CanonicalEval eval(model, random_codes(dims, 23), &diag);
  Mat pts(2, 3);
  pts << 0.2, 0.2, 0.2, 1.6, 0.0, 0.0;
  eval.occupancy_rows(pts);
  CHECK(diag.outside_box.load() == 1);
}
