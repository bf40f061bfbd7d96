#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "headgen/nn.hpp"

using namespace headgen;
using namespace headgen::nn;

namespace {

// Relative error with an absolute floor for near-zero gradients.
double rel_err(double got, double want) {
  const double scale = std::max({std::abs(got), std::abs(want), 1e-6});
  return std::abs(got - want) / scale;
}

Mlp test_net(Act act, double beta, int skip, Rng& rng) {
  MlpSpec spec;
  spec.widths = {7, 12, 10, 4};
  spec.hidden_act = act;
  spec.hidden_beta = beta;
  spec.skip_layer = skip;
  return make_mlp("t", spec, rng);
}

}  // namespace

TEST_CASE("mlp: zero weights and biases with no activation give zero output") {
  Rng rng(1);
  MlpSpec spec;
  spec.widths = {4, 4};
  spec.hidden_act = Act::None;
  Mlp net = make_mlp("z", spec, rng);
  net.layers[0].weight.value.setZero();
  const Vec out = net.forward(Vec::Ones(4));
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp: identity-initialized linear layer returns its input") {
  Rng rng(2);
  MlpSpec spec;
  spec.widths = {5, 5};
  spec.hidden_act = Act::None;
  spec.output_act = Act::None;
  Mlp net = make_mlp("i", spec, rng);
  net.layers[0].weight.value = Mat::Identity(5, 5);
  Vec x(5);
  x << 1, -2, 3, 0.5, -0.25;
  CHECK((net.forward(x) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp: parameter_count matches (in+1)*out summed over layers") {
  Rng rng(3);
  MlpSpec spec;
  spec.widths = {7, 12, 10, 4};
  spec.skip_layer = 2;
  Mlp net = make_mlp("p", spec, rng);
  CHECK(net.parameter_count() == (7 + 1) * 12 + (12 + 1) * 10 + (10 + 7 + 1) * 4);
}

TEST_CASE("mlp forward/backward: gradients match central finite differences") {
  Rng rng(4);
  for (auto [act, beta] : std::vector<std::pair<Act, double>>{
           {Act::Softplus, 10.0}, {Act::Softplus, 100.0}, {Act::Sine, 1.0}}) {
    for (int skip : {-1, 1}) {
      Mlp net = test_net(act, beta, skip, rng);
      Vec x(4), cond(3);
      for (int i = 0; i < 4; ++i) x[i] = normal_real(rng, 0.0, 0.7);
      for (int i = 0; i < 3; ++i) cond[i] = normal_real(rng, 0.0, 0.7);

      auto fwd = mlp_forward(net, x, cond);
      Vec seed(4);
      for (int i = 0; i < 4; ++i) seed[i] = normal_real(rng);
      auto loss_at = [&](Vec xx, Vec cc) {
        Mlp copy = net;
        auto f = mlp_forward(copy, xx, cc);
        return seed.dot(f.output);
      };
      const auto grads = mlp_backward(fwd, seed);

      for (int i = 0; i < 4; ++i) {
        const double fd = central_difference([&](double e) {
          Vec xx = x;
          xx[i] += e;
          return loss_at(xx, cond);
        });
        CHECK(rel_err(grads.input[i], fd) < 1e-4);
      }
      for (int i = 0; i < 3; ++i) {
        const double fd = central_difference([&](double e) {
          Vec cc = cond;
          cc[i] += e;
          return loss_at(x, cc);
        });
        CHECK(rel_err(grads.condition[i], fd) < 1e-4);
      }
      // parameter gradients on a few probed weights
      for (int probe = 0; probe < 6; ++probe) {
        const int layer = uniform_int(rng, 0, static_cast<int>(net.layers.size()) - 1);
        auto& w = net.layers[layer].weight;
        const int r = uniform_int(rng, 0, static_cast<int>(w.value.rows()) - 1);
        const int c = uniform_int(rng, 0, static_cast<int>(w.value.cols()) - 1);
        const double fd = central_difference([&](double e) {
          Mlp copy = net;
          copy.layers[layer].weight.value(r, c) += e;
          auto f = mlp_forward(copy, x, cond);
          return seed.dot(f.output);
        });
        CHECK(rel_err(w.grad(r, c), fd) < 1e-4);
      }
      for (auto& layer : net.layers) {
        layer.weight.zero_grad();
        layer.bias.zero_grad();
      }
    }
  }
}

TEST_CASE("backward: constant output head passes no input gradient") {
  Rng rng(5);
  Mlp net = test_net(Act::Softplus, 10.0, -1, rng);
  net.layers.back().weight.value.setZero();
  Vec x = Vec::Ones(4), cond = Vec::Ones(3);
  auto fwd = mlp_forward(net, x, cond);
  const auto grads = mlp_backward(fwd, Vec::Ones(4));
  CHECK(grads.input.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: linear net gradient is the transposed weight action") {
  Rng rng(6);
  MlpSpec spec;
  spec.widths = {5, 3};
  spec.hidden_act = Act::None;
  Mlp net = make_mlp("l", spec, rng);
  Vec x(5);
  for (int i = 0; i < 5; ++i) x[i] = normal_real(rng);
  auto fwd = mlp_forward(net, x, Vec());
  Vec seed(3);
  seed << 1.0, -0.5, 2.0;
  const auto grads = mlp_backward(fwd, seed);
  const Vec expect = net.layers[0].weight.value.transpose() * seed;
  CHECK((grads.input - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("backward: a consumed tape is stale") {
  Rng rng(7);
  Mlp net = test_net(Act::Softplus, 10.0, -1, rng);
  auto fwd = mlp_forward(net, Vec::Ones(4), Vec::Ones(3));
  mlp_backward(fwd, Vec::Ones(4));
  CHECK_THROWS_AS(mlp_backward(fwd, Vec::Ones(4)), ContractViolation);
}

TEST_CASE("adam: zero gradient from a fresh state leaves parameters unchanged") {
  Tensor p("p", Mat::Constant(2, 3, 1.5));
  AdamState state;
  AdamConfig cfg;
  const Mat before = p.value;
  adam_step(p, state, cfg);
  CHECK((p.value - before).cwiseAbs().maxCoeff() == 0.0);
  CHECK(state.t == 1);
}

TEST_CASE("adam: constant gradient drives the step magnitude to lr") {
  Tensor p("p", Mat::Zero(1, 1));
  AdamState state;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  double prev = p.value(0, 0);
  double step = 0.0;
  for (int i = 0; i < 400; ++i) {
    p.grad.setConstant(3.7);  // arbitrary constant gradient
    adam_step(p, state, cfg);
    step = std::abs(p.value(0, 0) - prev);
    prev = p.value(0, 0);
  }
  CHECK(step == doctest::Approx(cfg.lr).epsilon(0.02));
}

TEST_CASE("adam: one scalar step from zero state matches the scalar reference") {
  const double g = -0.83, lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  // scalar reference, written out step by step
  const double m = (1 - b1) * g;
  const double v = (1 - b2) * g * g;
  const double m_hat = m / (1 - b1);
  const double v_hat = v / (1 - b2);
  const double expect = 0.0 - lr * m_hat / (std::sqrt(v_hat) + eps);

  Tensor p("p", Mat::Zero(1, 1));
  p.grad.setConstant(g);
  AdamState state;
  AdamConfig cfg;
  cfg.lr = lr;
  adam_step(p, state, cfg);
  CHECK(p.value(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("feature volume: lattice nodes sample exactly") {
  Rng rng(8);
  FeatureVolume vol;
  vol.spec.nodes = 5;
  vol.spec.channels = 4;
  vol.values = Mat(vol.spec.cell_count(), 4);
  for (int i = 0; i < vol.values.size(); ++i) vol.values(i / 4, i % 4) = normal_real(rng);
  const Mat centers = vol.spec.node_centers();
  for (int i = 0; i < centers.rows(); i += 7) {
    const Vec got = vol.sample(centers.row(i).transpose());
    CHECK((got.transpose() - vol.values.row(i)).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("feature volume: sampling is Lipschitz with the computed bound") {
  Rng rng(9);
  FeatureVolume vol;
  vol.spec.nodes = 6;
  vol.spec.channels = 3;
  vol.values = Mat(vol.spec.cell_count(), 3);
  for (int i = 0; i < vol.values.rows(); ++i)
    for (int c = 0; c < 3; ++c) vol.values(i, c) = normal_real(rng);
  const double bound = vol.lipschitz_bound();
  for (int trial = 0; trial < 300; ++trial) {
    Vec3 a, b;
    for (int c = 0; c < 3; ++c) a[c] = uniform_real(rng, -1.0, 1.0);
    for (int c = 0; c < 3; ++c) b[c] = a[c] + uniform_real(rng, -0.05, 0.05);
    const double lhs = (vol.sample(a) - vol.sample(b)).norm();
    CHECK(lhs <= bound * (a - b).norm() + 1e-12);
  }
}

TEST_CASE("tape ops: finite-difference check through a mixed graph") {
  Rng rng(10);
  // graph: softmax(W x) blended, trilerp conditioning, prior, bce --
  // exercises most custom ops in one pass.
  const int rows = 6;
  Mat xin(rows, 3);
  for (int i = 0; i < xin.size(); ++i) xin(i / 3, i % 3) = uniform_real(rng, -0.6, 0.6);

  GridSpec gspec;
  gspec.nodes = 4;
  gspec.channels = 2;
  Tensor grid("grid", Mat::Zero(gspec.cell_count(), 2));
  for (int i = 0; i < grid.value.rows(); ++i)
    for (int c = 0; c < 2; ++c) grid.value(i, c) = normal_real(rng, 0.0, 0.5);

  Tensor w("w", Mat::Zero(5, 5));
  for (int i = 0; i < 25; ++i) w.value(i / 5, i % 5) = normal_real(rng, 0.0, 0.4);
  Tensor b("b", Mat::Zero(1, 5));

  Tape::BlendConsts consts;
  for (int j = 0; j < 5; ++j) {
    consts.rot_cur.push_back(Mat3::Identity() + 0.2 * Mat3::Random());
    consts.rot_can.push_back(Mat3::Identity() + 0.1 * Mat3::Random());
    consts.tr_cur.push_back(0.3 * Vec3::Random());
    consts.tr_can.push_back(0.2 * Vec3::Random());
  }
  Vec coeff(4);
  coeff << 0.3, -0.2, 0.5, 0.1;
  Vec labels(rows);
  for (int i = 0; i < rows; ++i) labels[i] = (i % 2 == 0) ? 1.0 : 0.0;
  EllipsoidPrior prior;

  auto eval = [&](const Mat& x_val, bool want_grads, Mat* gx, Mat* gw,
                  Mat* ggrid) -> double {
    Tape tape;
    auto x = tape.input(x_val);
    auto wx = tape.concat_cols({x, tape.slice_cols(x, 0, 2)});  // 5 wide
    auto logits5 = tape.affine(wx, w, b);
    auto weights = tape.softmax_rows(logits5);
    auto feat = tape.trilerp(tape.param(grid), x, gspec);
    auto rows12 = tape.concat_cols({feat, x, feat, x, feat});  // 12 = 3*4 wide
    auto off = tape.basis_offset(rows12, coeff);
    auto moved = tape.lbs_blend(weights, x, off, consts);
    auto s = tape.slice_cols(moved, 0, 1);
    auto s2 = tape.add_quad_prior(s, x, prior);
    auto bce = tape.mean_bce_logit(s2, labels);
    auto nrm = tape.normalize_rows(moved, Mat::Zero(rows, 3));
    Mat dirs(rows, 3);
    dirs.setOnes();
    dirs /= std::sqrt(3.0);
    auto ndot = tape.mean_one_minus_dot(nrm, dirs);
    auto reg = tape.sqnorm(weights);
    auto loss = tape.weighted_sum({{bce, 1.0}, {ndot, 0.7}, {reg, 0.11}});
    const double value = tape.scalar(loss);
    if (want_grads) {
      tape.backward(loss);
      *gx = tape.node_grad(x);
      *gw = w.grad;
      *ggrid = grid.grad;
      w.zero_grad();
      grid.zero_grad();
    }
    return value;
  };

  Mat gx, gw, ggrid;
  eval(xin, true, &gx, &gw, &ggrid);
  for (int probe = 0; probe < 10; ++probe) {
    const int i = uniform_int(rng, 0, rows - 1), c = uniform_int(rng, 0, 2);
    const double fd = central_difference([&](double e) {
      Mat xp = xin;
      xp(i, c) += e;
      return eval(xp, false, nullptr, nullptr, nullptr);
    });
    CHECK(rel_err(gx(i, c), fd) < 2e-4);
  }
  for (int probe = 0; probe < 8; ++probe) {
    const int r = uniform_int(rng, 0, 4), c = uniform_int(rng, 0, 4);
    const double fd = central_difference([&](double e) {
      const double keep = w.value(r, c);
      w.value(r, c) += e;
      const double v = eval(xin, false, nullptr, nullptr, nullptr);
      w.value(r, c) = keep;
      return v;
    });
    CHECK(rel_err(gw(r, c), fd) < 2e-4);
  }
  for (int probe = 0; probe < 8; ++probe) {
    const int r = uniform_int(rng, 0, grid.value.rows() - 1), c = uniform_int(rng, 0, 1);
    const double fd = central_difference([&](double e) {
      const double keep = grid.value(r, c);
      grid.value(r, c) += e;
      const double v = eval(xin, false, nullptr, nullptr, nullptr);
      grid.value(r, c) = keep;
      return v;
    });
    CHECK(rel_err(ggrid(r, c), fd) < 2e-4);
  }
}

TEST_CASE("tape: implicit root backward matches finite differences") {
  // deform(x) = x + tanh-ish mlp(x); root solved outside the tape, gradients
  // w.r.t. the net parameters must flow through the implicit function theorem.
  Rng rng(11);
  MlpSpec spec;
  spec.widths = {3, 8, 3};
  spec.hidden_act = Act::Softplus;
  spec.hidden_beta = 4.0;
  spec.head_scale = 0.1;
  Mlp net = make_mlp("d", spec, rng);

  const Vec3 x_d(0.3, -0.2, 0.1);
  const Vec3 target(0.05, 0.0, -0.2);

  auto deform = [&](const Vec3& x) -> Vec3 { return x + net.forward(x); };
  auto solve_root = [&]() {
    Vec3 x = x_d;
    for (int it = 0; it < 80; ++it) {
      // forward-difference Newton on the tiny system
      const Vec3 f = deform(x) - x_d;
      Mat3 jac;
      const double h = 1e-7;
      for (int c = 0; c < 3; ++c) {
        Vec3 xp = x;
        xp[c] += h;
        jac.col(c) = (deform(xp) - deform(x)) / h;
      }
      x -= jac.inverse() * f;
      if (f.norm() < 1e-13) break;
    }
    return x;
  };

  auto loss_value = [&]() {
    const Vec3 root = solve_root();
    return (root - target).squaredNorm();
  };

  // analytic: tape with deform graph at the root + implicit node
  const Vec3 root = solve_root();
  Tape tape;
  auto xconst = tape.constant(root.transpose());
  auto dnet = mlp_graph(tape, net, xconst);
  auto dout = tape.add(xconst, dnet);
  // exact jacobian via repeated input-gradient passes
  Tape jt;
  auto jx = jt.input(root.transpose());
  auto jout = jt.add(jx, mlp_graph(jt, net, jx));
  Mat3 jac;
  for (int r = 0; r < 3; ++r) {
    Mat seed = Mat::Zero(1, 3);
    seed(0, r) = 1.0;
    jt.backward_seed(jout, seed);
    jac.row(r) = jt.node_grad(jx).row(0);
  }
  auto xc = tape.implicit_root(root.transpose(), {jac}, dout);
  auto loss = tape.mean_sqnorm_diff(xc, target.transpose());
  tape.backward(loss);

  for (int probe = 0; probe < 10; ++probe) {
    const int layer = uniform_int(rng, 0, 1);
    auto& w = net.layers[layer].weight;
    const int r = uniform_int(rng, 0, static_cast<int>(w.value.rows()) - 1);
    const int c = uniform_int(rng, 0, static_cast<int>(w.value.cols()) - 1);
    const double fd = central_difference(
        [&](double e) {
          const double keep = w.value(r, c);
          w.value(r, c) += e;
          const double v = loss_value();
          w.value(r, c) = keep;
          return v;
        },
        1e-5);
    CHECK(rel_err(w.grad(r, c), fd) < 1e-3);
  }
}

TEST_CASE("tape: forward values are deterministic") {
  Rng rng(12);
  Mlp net = test_net(Act::Softplus, 10.0, 1, rng);
  Vec x(4), cond(3);
  for (int i = 0; i < 4; ++i) x[i] = normal_real(rng);
  for (int i = 0; i < 3; ++i) cond[i] = normal_real(rng);
  auto a = mlp_forward(net, x, cond);
  auto b = mlp_forward(net, x, cond);
  CHECK((a.output - b.output).cwiseAbs().maxCoeff() == 0.0);
}
