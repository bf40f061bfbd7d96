#include "headgen/nn.hpp"

#include <cmath>

namespace headgen::nn {

namespace {

double softplus(double x, double beta) {
  const double bx = beta * x;
  if (bx > 30.0) return x;
  return std::log1p(std::exp(bx)) / beta;
}

double sigmoid_stable(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double act_value(double x, Act act, double beta) {
  switch (act) {
    case Act::None:
      return x;
    case Act::Relu:
      return x > 0 ? x : 0.0;
    case Act::Softplus:
      return softplus(x, beta);
    case Act::Sine:
      return std::sin(x);
    case Act::Sigmoid:
      return sigmoid_stable(x);
  }
  return x;
}

double act_deriv(double x, Act act, double beta) {
  switch (act) {
    case Act::None:
      return 1.0;
    case Act::Relu:
      return x > 0 ? 1.0 : 0.0;
    case Act::Softplus:
      return sigmoid_stable(beta * x);
    case Act::Sine:
      return std::cos(x);
    case Act::Sigmoid: {
      const double s = sigmoid_stable(x);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

struct TrilerpCoord {
  int base[3];
  double t[3];
  bool clamped[3];
};

TrilerpCoord trilerp_coord(const GridSpec& spec, const Vec3& p) {
  TrilerpCoord c;
  for (int a = 0; a < 3; ++a) {
    const double h = (spec.hi[a] - spec.lo[a]) / (spec.nodes - 1);
    const double u_raw = (p[a] - spec.lo[a]) / h;
    c.clamped[a] = u_raw <= 0.0 || u_raw >= spec.nodes - 1;
    const double u = std::clamp(u_raw, 0.0, static_cast<double>(spec.nodes - 1));
    int b = static_cast<int>(std::floor(u));
    b = std::min(b, spec.nodes - 2);
    c.base[a] = b;
    c.t[a] = u - b;
  }
  return c;
}

inline int grid_index(const GridSpec& spec, int ix, int iy, int iz) {
  return (ix * spec.nodes + iy) * spec.nodes + iz;
}

}  // namespace

Mat GridSpec::node_centers() const {
  Mat centers(cell_count(), 3);
  int k = 0;
  for (int ix = 0; ix < nodes; ++ix)
    for (int iy = 0; iy < nodes; ++iy)
      for (int iz = 0; iz < nodes; ++iz, ++k) {
        centers(k, 0) = lo.x() + ix * (hi.x() - lo.x()) / (nodes - 1);
        centers(k, 1) = lo.y() + iy * (hi.y() - lo.y()) / (nodes - 1);
        centers(k, 2) = lo.z() + iz * (hi.z() - lo.z()) / (nodes - 1);
      }
  return centers;
}

Vec FeatureVolume::sample(const Vec3& p) const {
  const auto c = trilerp_coord(spec, p);
  Vec out = Vec::Zero(spec.channels);
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double w = (dx ? c.t[0] : 1 - c.t[0]) * (dy ? c.t[1] : 1 - c.t[1]) *
                         (dz ? c.t[2] : 1 - c.t[2]);
        if (w == 0.0) continue;
        out += w * values.row(grid_index(spec, c.base[0] + dx, c.base[1] + dy, c.base[2] + dz))
                       .transpose();
      }
  return out;
}

Mat FeatureVolume::sample_rows(const Mat& points) const {
  Mat out(points.rows(), spec.channels);
  for (int i = 0; i < points.rows(); ++i)
    out.row(i) = sample(points.row(i).transpose()).transpose();
  return out;
}

double FeatureVolume::lipschitz_bound() const {
  double sum_sq = 0.0;
  for (int ch = 0; ch < spec.channels; ++ch) {
    for (int a = 0; a < 3; ++a) {
      const double h = (spec.hi[a] - spec.lo[a]) / (spec.nodes - 1);
      double max_diff = 0.0;
      for (int ix = 0; ix < spec.nodes; ++ix)
        for (int iy = 0; iy < spec.nodes; ++iy)
          for (int iz = 0; iz < spec.nodes; ++iz) {
            int jx = ix + (a == 0), jy = iy + (a == 1), jz = iz + (a == 2);
            if (jx >= spec.nodes || jy >= spec.nodes || jz >= spec.nodes) continue;
            max_diff = std::max(max_diff, std::abs(values(grid_index(spec, jx, jy, jz), ch) -
                                                   values(grid_index(spec, ix, iy, iz), ch)));
          }
      sum_sq += (max_diff / h) * (max_diff / h);
    }
  }
  return std::sqrt(sum_sq);
}

// --- MLP ---------------------------------------------------------------------------

int Mlp::parameter_count() const {
  int count = 0;
  for (const auto& layer : layers)
    count += static_cast<int>(layer.weight.value.size() + layer.bias.value.size());
  return count;
}

Mat Mlp::forward_rows(const Mat& x) const {
  HG_CHECK_ARG(x.cols() == input_dim, "mlp input width mismatch");
  Mat cur = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (static_cast<int>(i) == skip_layer) {
      Mat joined(cur.rows(), cur.cols() + x.cols());
      joined << cur, x;
      cur = std::move(joined);
    }
    const auto& l = layers[i];
    Mat pre = cur * l.weight.value.transpose();
    pre.rowwise() += l.bias.value.row(0);
    if (l.act == Act::None) {
      cur = std::move(pre);
    } else {
      cur = pre.unaryExpr([&](double v) { return act_value(v, l.act, l.act_beta); });
    }
  }
  return cur;
}

Vec Mlp::forward(const Vec& x) const {
  return forward_rows(x.transpose()).row(0).transpose();
}

void Mlp::collect_params(std::vector<Tensor*>& out) {
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

Mlp make_mlp(const std::string& name, const MlpSpec& spec, Rng& rng) {
  HG_CHECK_ARG(spec.widths.size() >= 2, "mlp needs input and output widths");
  Mlp net;
  net.input_dim = spec.widths.front();
  net.skip_layer = spec.skip_layer;
  const int n_layers = static_cast<int>(spec.widths.size()) - 1;
  for (int i = 0; i < n_layers; ++i) {
    int in = spec.widths[i];
    if (i == spec.skip_layer) in += net.input_dim;
    const int out = spec.widths[i + 1];
    const bool last = i == n_layers - 1;
    const double scale = (last ? spec.head_scale : 1.0) / std::sqrt(static_cast<double>(in));
    Mat w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = scale * normal_real(rng);
    MlpLayer layer;
    layer.weight = Tensor(name + ".w" + std::to_string(i), std::move(w));
    layer.bias = Tensor(name + ".b" + std::to_string(i), Mat::Zero(1, out));
    layer.act = last ? spec.output_act : spec.hidden_act;
    layer.act_beta = spec.hidden_beta;
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// --- tape ----------------------------------------------------------------------------

Tape::NodeId Tape::push(Mat value, bool needs_grad, std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::add_grad(NodeId id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

const Mat& Tape::node_grad(NodeId id) const {
  HG_CHECK(nodes_[id].has_grad, "node has no gradient from the last backward pass");
  return nodes_[id].grad;
}

double Tape::scalar(NodeId id) const {
  HG_CHECK(nodes_[id].value.size() == 1, "node is not a scalar");
  return nodes_[id].value(0, 0);
}

void Tape::clear_grads() {
  for (auto& n : nodes_) n.has_grad = false;
}

void Tape::sweep(NodeId root, const Mat& seed) {
  clear_grads();
  nodes_[root].grad = seed;
  nodes_[root].has_grad = true;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.back) n.back(*this, i);
  }
}

void Tape::backward(NodeId root, double seed) {
  HG_CHECK(nodes_[root].value.size() == 1, "backward root must be scalar");
  Mat s(1, 1);
  s(0, 0) = seed;
  backward_matrix(root, s);
}

void Tape::backward_matrix(NodeId node, const Mat& seed) {
  HG_CHECK(!consumed_, "stale tape: parameter gradients were already accumulated");
  accumulate_params_ = true;
  sweep(node, seed);
  accumulate_params_ = false;
  consumed_ = true;
}

void Tape::backward_seed(NodeId node, const Mat& seed) {
  accumulate_params_ = false;
  sweep(node, seed);
}

Tape::NodeId Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }

Tape::NodeId Tape::input(Mat v) { return push(std::move(v), true, nullptr); }

Tape::NodeId Tape::param(Tensor& t) {
  Tensor* tp = &t;
  return push(t.value, true, [tp](Tape& tape, int id) {
    if (tape.accumulate_params_) tp->grad += tape.nodes_[id].grad;
  });
}

Tape::NodeId Tape::affine(NodeId x, Tensor& weight, Tensor& bias) {
  HG_CHECK_ARG(nodes_[x].value.cols() == weight.value.cols(), "affine width mismatch");
  Mat y = nodes_[x].value * weight.value.transpose();
  y.rowwise() += bias.value.row(0);
  Tensor *w = &weight, *b = &bias;
  return push(std::move(y), true, [x, w, b](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    if (t.accumulate_params_) {
      w->grad.noalias() += g.transpose() * t.nodes_[x].value;
      b->grad.row(0) += g.colwise().sum();
    }
    if (t.nodes_[x].needs_grad) t.add_grad(x, g * w->value);
  });
}

Tape::NodeId Tape::activation(NodeId x, Act act, double beta) {
  if (act == Act::None) return x;
  Mat y = nodes_[x].value.unaryExpr([&](double v) { return act_value(v, act, beta); });
  return push(std::move(y), true, [x, act, beta](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    const Mat d =
        t.nodes_[x].value.unaryExpr([&](double v) { return act_deriv(v, act, beta); });
    t.add_grad(x, g.cwiseProduct(d));
  });
}

Tape::NodeId Tape::sigmoid(NodeId x) {
  Mat y = nodes_[x].value.unaryExpr([](double v) { return sigmoid_stable(v); });
  const NodeId id = push(std::move(y), true, nullptr);
  nodes_[id].back = [x, id](Tape& t, int) {
    const Mat& y_val = t.nodes_[id].value;
    const Mat d = y_val.cwiseProduct(Mat::Ones(y_val.rows(), y_val.cols()) - y_val);
    t.add_grad(x, t.nodes_[id].grad.cwiseProduct(d));
  };
  return id;
}

Tape::NodeId Tape::softmax_rows(NodeId x) {
  const Mat& v = nodes_[x].value;
  Mat y(v.rows(), v.cols());
  for (int i = 0; i < v.rows(); ++i) {
    const double m = v.row(i).maxCoeff();
    Eigen::RowVectorXd e = (v.row(i).array() - m).exp();
    y.row(i) = e / e.sum();
  }
  const NodeId id = push(std::move(y), true, nullptr);
  nodes_[id].back = [x, id](Tape& t, int) {
    const Mat& y_val = t.nodes_[id].value;
    const Mat& g = t.nodes_[id].grad;
    Mat dx(y_val.rows(), y_val.cols());
    for (int i = 0; i < y_val.rows(); ++i) {
      const double dot = g.row(i).dot(y_val.row(i));
      dx.row(i) = y_val.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    t.add_grad(x, dx);
  };
  return id;
}

Tape::NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  HG_CHECK_ARG(!parts.empty(), "concat of nothing");
  const int rows = static_cast<int>(nodes_[parts[0]].value.rows());
  int cols = 0;
  for (NodeId p : parts) {
    HG_CHECK_ARG(nodes_[p].value.rows() == rows, "concat row mismatch");
    cols += static_cast<int>(nodes_[p].value.cols());
  }
  Mat y(rows, cols);
  int at = 0;
  std::vector<std::pair<NodeId, std::pair<int, int>>> spans;
  for (NodeId p : parts) {
    const int w = static_cast<int>(nodes_[p].value.cols());
    y.middleCols(at, w) = nodes_[p].value;
    spans.push_back({p, {at, w}});
    at += w;
  }
  return push(std::move(y), true, [spans](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    for (const auto& [p, span] : spans)
      if (t.nodes_[p].needs_grad) t.add_grad(p, g.middleCols(span.first, span.second));
  });
}

Tape::NodeId Tape::slice_cols(NodeId x, int start, int count) {
  Mat y = nodes_[x].value.middleCols(start, count);
  const int total = static_cast<int>(nodes_[x].value.cols());
  return push(std::move(y), true, [x, start, count, total](Tape& t, int id) {
    Mat g = Mat::Zero(t.nodes_[id].grad.rows(), total);
    g.middleCols(start, count) = t.nodes_[id].grad;
    t.add_grad(x, g);
  });
}

Tape::NodeId Tape::broadcast_rows(NodeId row, int rows) {
  HG_CHECK_ARG(nodes_[row].value.rows() == 1, "broadcast source must be a single row");
  Mat y = nodes_[row].value.replicate(rows, 1);
  return push(std::move(y), true, [row](Tape& t, int id) {
    t.add_grad(row, t.nodes_[id].grad.colwise().sum());
  });
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  Mat y = nodes_[a].value + nodes_[b].value;
  return push(std::move(y), true, [a, b](Tape& t, int id) {
    t.add_grad(a, t.nodes_[id].grad);
    t.add_grad(b, t.nodes_[id].grad);
  });
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  Mat y = nodes_[a].value - nodes_[b].value;
  return push(std::move(y), true, [a, b](Tape& t, int id) {
    t.add_grad(a, t.nodes_[id].grad);
    t.add_grad(b, -t.nodes_[id].grad);
  });
}

Tape::NodeId Tape::scale(NodeId a, double s) {
  Mat y = nodes_[a].value * s;
  return push(std::move(y), true,
              [a, s](Tape& t, int id) { t.add_grad(a, t.nodes_[id].grad * s); });
}

Tape::NodeId Tape::add_const(NodeId a, const Mat& c) {
  Mat y = nodes_[a].value + c;
  return push(std::move(y), true,
              [a](Tape& t, int id) { t.add_grad(a, t.nodes_[id].grad); });
}

Tape::NodeId Tape::trilerp(NodeId grid, NodeId query, const GridSpec& spec) {
  const Mat& g = nodes_[grid].value;
  const Mat& q = nodes_[query].value;
  HG_CHECK_ARG(g.rows() == spec.cell_count() && g.cols() == spec.channels,
               "grid shape mismatch");
  HG_CHECK_ARG(q.cols() == 3, "query must be Nx3");
  const int n = static_cast<int>(q.rows());
  auto coords = std::make_shared<std::vector<TrilerpCoord>>(n);
  Mat y = Mat::Zero(n, spec.channels);
  for (int i = 0; i < n; ++i) {
    const auto c = trilerp_coord(spec, q.row(i).transpose());
    (*coords)[i] = c;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          const double w = (dx ? c.t[0] : 1 - c.t[0]) * (dy ? c.t[1] : 1 - c.t[1]) *
                           (dz ? c.t[2] : 1 - c.t[2]);
          if (w == 0.0) continue;
          y.row(i) += w * g.row(grid_index(spec, c.base[0] + dx, c.base[1] + dy, c.base[2] + dz));
        }
  }
  return push(std::move(y), true, [grid, query, spec, coords](Tape& t, int id) {
    const Mat& gout = t.nodes_[id].grad;
    const Mat& gvals = t.nodes_[grid].value;
    const int n = static_cast<int>(gout.rows());
    const bool need_grid = t.nodes_[grid].needs_grad;
    const bool need_query = t.nodes_[query].needs_grad;
    Mat ggrid = need_grid ? Mat::Zero(gvals.rows(), gvals.cols()) : Mat();
    Mat gquery = need_query ? Mat::Zero(n, 3) : Mat();
    for (int i = 0; i < n; ++i) {
      const auto& c = (*coords)[i];
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
          for (int dz = 0; dz < 2; ++dz) {
            const int idx =
                grid_index(spec, c.base[0] + dx, c.base[1] + dy, c.base[2] + dz);
            const double wx = dx ? c.t[0] : 1 - c.t[0];
            const double wy = dy ? c.t[1] : 1 - c.t[1];
            const double wz = dz ? c.t[2] : 1 - c.t[2];
            if (need_grid) ggrid.row(idx) += (wx * wy * wz) * gout.row(i);
            if (need_query) {
              const double vg = gout.row(i).dot(gvals.row(idx));
              const double sx = dx ? 1.0 : -1.0, sy = dy ? 1.0 : -1.0, sz = dz ? 1.0 : -1.0;
              for (int a = 0; a < 3; ++a) {
                if (c.clamped[a]) continue;
                const double h = (spec.hi[a] - spec.lo[a]) / (spec.nodes - 1);
                double dw = 0.0;
                if (a == 0) dw = sx * wy * wz;
                if (a == 1) dw = wx * sy * wz;
                if (a == 2) dw = wx * wy * sz;
                gquery(i, a) += vg * dw / h;
              }
            }
          }
    }
    if (need_grid) t.add_grad(grid, ggrid);
    if (need_query) t.add_grad(query, gquery);
  });
}

Tape::NodeId Tape::add_quad_prior(NodeId logits, NodeId query, const EllipsoidPrior& prior) {
  const Mat& s = nodes_[logits].value;
  const Mat& q = nodes_[query].value;
  HG_CHECK_ARG(s.cols() == 1 && q.rows() == s.rows(), "prior shape mismatch");
  Mat y = s;
  for (int i = 0; i < q.rows(); ++i) y(i, 0) += prior(q.row(i).transpose());
  return push(std::move(y), true, [logits, query, prior](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    t.add_grad(logits, g);
    if (t.nodes_[query].needs_grad) {
      const Mat& q = t.nodes_[query].value;
      Mat gq(q.rows(), 3);
      for (int i = 0; i < q.rows(); ++i)
        for (int c = 0; c < 3; ++c)
          gq(i, c) = g(i, 0) * prior.gain * (-2.0 * q(i, c) / (prior.axes[c] * prior.axes[c]));
      t.add_grad(query, gq);
    }
  });
}

Tape::NodeId Tape::basis_offset(NodeId rows, const Vec& coeff) {
  const Mat& r = nodes_[rows].value;
  const int k = static_cast<int>(coeff.size());
  HG_CHECK_ARG(r.cols() == 3 * k, "basis row width must be 3*coeff");
  Mat y = Mat::Zero(r.rows(), 3);
  for (int j = 0; j < k; ++j)
    if (coeff[j] != 0.0) y += coeff[j] * r.middleCols(3 * j, 3);
  return push(std::move(y), true, [rows, coeff, k](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    Mat gr = Mat::Zero(g.rows(), 3 * k);
    for (int j = 0; j < k; ++j)
      if (coeff[j] != 0.0) gr.middleCols(3 * j, 3) = coeff[j] * g;
    t.add_grad(rows, gr);
  });
}

Tape::NodeId Tape::lbs_blend(NodeId weights, NodeId x, NodeId offsets,
                             const BlendConsts& consts) {
  const Mat& w = nodes_[weights].value;
  const Mat& xv = nodes_[x].value;
  const Mat& off = nodes_[offsets].value;
  const int n = static_cast<int>(xv.rows());
  const int joints = static_cast<int>(consts.rot_cur.size());
  HG_CHECK_ARG(w.rows() == n && w.cols() == joints, "blend weight shape mismatch");
  HG_CHECK_ARG(off.rows() == n && off.cols() == 3, "blend offset shape mismatch");

  struct Aux {
    std::vector<Vec3> z, y;
    std::vector<Mat3> can_inv, cur;
  };
  auto aux = std::make_shared<Aux>();
  aux->z.resize(n);
  aux->y.resize(n);
  aux->can_inv.resize(n);
  aux->cur.resize(n);
  Mat out(n, 3);
  for (int i = 0; i < n; ++i) {
    Mat3 rc = Mat3::Zero(), ru = Mat3::Zero();
    Vec3 tc = Vec3::Zero(), tu = Vec3::Zero();
    for (int j = 0; j < joints; ++j) {
      rc += w(i, j) * consts.rot_can[j];
      tc += w(i, j) * consts.tr_can[j];
      ru += w(i, j) * consts.rot_cur[j];
      tu += w(i, j) * consts.tr_cur[j];
    }
    const Mat3 rc_inv = rc.inverse();
    const Vec3 z = rc_inv * (xv.row(i).transpose() - tc);
    const Vec3 y = z + off.row(i).transpose();
    out.row(i) = (ru * y + tu).transpose();
    aux->z[i] = z;
    aux->y[i] = y;
    aux->can_inv[i] = rc_inv;
    aux->cur[i] = ru;
  }
  return push(std::move(out), true, [weights, x, offsets, consts, aux](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    const int n = static_cast<int>(g.rows());
    const int joints = static_cast<int>(consts.rot_cur.size());
    const bool need_w = t.nodes_[weights].needs_grad;
    const bool need_x = t.nodes_[x].needs_grad;
    const bool need_off = t.nodes_[offsets].needs_grad;
    Mat gw = need_w ? Mat::Zero(n, joints) : Mat();
    Mat gx = need_x ? Mat::Zero(n, 3) : Mat();
    Mat goff = need_off ? Mat::Zero(n, 3) : Mat();
    for (int i = 0; i < n; ++i) {
      const Vec3 gi = g.row(i).transpose();
      const Vec3 gy = aux->cur[i].transpose() * gi;
      const Vec3 q = aux->can_inv[i].transpose() * gy;
      if (need_off) goff.row(i) = gy.transpose();
      if (need_x) gx.row(i) = q.transpose();
      if (need_w) {
        for (int j = 0; j < joints; ++j) {
          const double direct = gi.dot(consts.rot_cur[j] * aux->y[i] + consts.tr_cur[j]);
          const double via_z = q.dot(consts.rot_can[j] * aux->z[i] + consts.tr_can[j]);
          gw(i, j) = direct - via_z;
        }
      }
    }
    if (need_w) t.add_grad(weights, gw);
    if (need_x) t.add_grad(x, gx);
    if (need_off) t.add_grad(offsets, goff);
  });
}

Tape::NodeId Tape::implicit_root(const Mat& roots, const std::vector<Mat3>& jacobians,
                                 NodeId deform_out) {
  HG_CHECK_ARG(roots.cols() == 3, "roots must be Nx3");
  HG_CHECK_ARG(static_cast<int>(jacobians.size()) == roots.rows(), "one jacobian per root");
  HG_CHECK_ARG(nodes_[deform_out].value.rows() == roots.rows(),
               "deform graph row count mismatch");
  auto inv_t = std::make_shared<std::vector<Mat3>>();
  inv_t->reserve(jacobians.size());
  for (const auto& j : jacobians) {
    if (std::abs(j.determinant()) < 1e-12)
      inv_t->push_back(Mat3::Zero());  // fold: drop the implicit term for this row
    else
      inv_t->push_back(j.inverse().transpose());
  }
  return push(roots, true, [inv_t, deform_out](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    Mat seed(g.rows(), 3);
    for (int i = 0; i < g.rows(); ++i)
      seed.row(i) = (-((*inv_t)[i] * g.row(i).transpose())).transpose();
    t.add_grad(deform_out, seed);
  });
}

Tape::NodeId Tape::normalize_rows(NodeId x, const Mat& fallback, int* fallback_count) {
  const Mat& v = nodes_[x].value;
  HG_CHECK_ARG(v.cols() == 3, "normalize_rows expects Nx3");
  constexpr double kEps = 1e-12;
  auto norms = std::make_shared<Vec>(v.rows());
  Mat y(v.rows(), 3);
  for (int i = 0; i < v.rows(); ++i) {
    const double len = v.row(i).norm();
    (*norms)[i] = len;
    if (len < kEps) {
      y.row(i) = fallback.row(i);
      if (fallback_count) (*fallback_count)++;
    } else {
      y.row(i) = v.row(i) / len;
    }
  }
  const NodeId id = push(std::move(y), true, nullptr);
  nodes_[id].back = [x, id, norms](Tape& t, int) {
    const Mat& g = t.nodes_[id].grad;
    const Mat& y_val = t.nodes_[id].value;
    Mat gx = Mat::Zero(g.rows(), 3);
    for (int i = 0; i < g.rows(); ++i) {
      const double len = (*norms)[i];
      if (len < kEps) continue;  // fallback rows pass no gradient
      const double dot = g.row(i).dot(y_val.row(i));
      gx.row(i) = (g.row(i) - dot * y_val.row(i)) / len;
    }
    t.add_grad(x, gx);
  };
  return id;
}

Tape::NodeId Tape::rowwise_matvec(const std::vector<Mat3>& mats, NodeId x) {
  const Mat& v = nodes_[x].value;
  HG_CHECK_ARG(static_cast<int>(mats.size()) == v.rows(), "one matrix per row");
  auto ms = std::make_shared<std::vector<Mat3>>(mats);
  Mat y(v.rows(), 3);
  for (int i = 0; i < v.rows(); ++i) y.row(i) = ((*ms)[i] * v.row(i).transpose()).transpose();
  return push(std::move(y), true, [x, ms](Tape& t, int id) {
    const Mat& g = t.nodes_[id].grad;
    Mat gx(g.rows(), 3);
    for (int i = 0; i < g.rows(); ++i)
      gx.row(i) = ((*ms)[i].transpose() * g.row(i).transpose()).transpose();
    t.add_grad(x, gx);
  });
}

Tape::NodeId Tape::mean_bce_logit(NodeId logits, const Vec& labels) {
  const Mat& s = nodes_[logits].value;
  HG_CHECK_ARG(s.cols() == 1 && s.rows() == labels.size(), "bce shape mismatch");
  const int n = static_cast<int>(s.rows());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = s(i, 0);
    const double sp = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    total += sp - labels[i] * v;
  }
  Mat y(1, 1);
  y(0, 0) = total / n;
  return push(std::move(y), true, [logits, labels, n](Tape& t, int id) {
    const double g = t.nodes_[id].grad(0, 0);
    const Mat& s = t.nodes_[logits].value;
    Mat gs(n, 1);
    for (int i = 0; i < n; ++i) gs(i, 0) = g * (sigmoid_stable(s(i, 0)) - labels[i]) / n;
    t.add_grad(logits, gs);
  });
}

Tape::NodeId Tape::mean_sqnorm_diff(NodeId x, const Mat& target) {
  const Mat& v = nodes_[x].value;
  HG_CHECK_ARG(v.rows() == target.rows() && v.cols() == target.cols(),
               "sqnorm target shape mismatch");
  const int n = static_cast<int>(v.rows());
  Mat y(1, 1);
  y(0, 0) = (v - target).squaredNorm() / n;
  return push(std::move(y), true, [x, target, n](Tape& t, int id) {
    const double g = t.nodes_[id].grad(0, 0);
    t.add_grad(x, (2.0 * g / n) * (t.nodes_[x].value - target));
  });
}

Tape::NodeId Tape::mean_one_minus_dot(NodeId x, const Mat& dirs) {
  const Mat& v = nodes_[x].value;
  HG_CHECK_ARG(v.rows() == dirs.rows() && v.cols() == dirs.cols(), "dot shape mismatch");
  const int n = static_cast<int>(v.rows());
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += 1.0 - v.row(i).dot(dirs.row(i));
  Mat y(1, 1);
  y(0, 0) = total / n;
  return push(std::move(y), true, [x, dirs, n](Tape& t, int id) {
    const double g = t.nodes_[id].grad(0, 0);
    t.add_grad(x, (-g / n) * dirs);
  });
}

Tape::NodeId Tape::sqnorm(NodeId x) {
  Mat y(1, 1);
  y(0, 0) = nodes_[x].value.squaredNorm();
  return push(std::move(y), true, [x](Tape& t, int id) {
    t.add_grad(x, 2.0 * t.nodes_[id].grad(0, 0) * t.nodes_[x].value);
  });
}

Tape::NodeId Tape::mean_all(NodeId x) {
  Mat y(1, 1);
  y(0, 0) = nodes_[x].value.mean();
  const double inv = 1.0 / nodes_[x].value.size();
  return push(std::move(y), true, [x, inv](Tape& t, int id) {
    const double g = t.nodes_[id].grad(0, 0);
    t.add_grad(x, Mat::Constant(t.nodes_[x].value.rows(), t.nodes_[x].value.cols(), g * inv));
  });
}

Tape::NodeId Tape::weighted_sum(const std::vector<std::pair<NodeId, double>>& terms) {
  HG_CHECK_ARG(!terms.empty(), "weighted_sum of nothing");
  double total = 0.0;
  for (const auto& [id, w] : terms) {
    HG_CHECK_ARG(nodes_[id].value.size() == 1, "weighted_sum expects scalar terms");
    total += w * nodes_[id].value(0, 0);
  }
  Mat y(1, 1);
  y(0, 0) = total;
  return push(std::move(y), true, [terms](Tape& t, int id) {
    const double g = t.nodes_[id].grad(0, 0);
    Mat one(1, 1);
    for (const auto& [nid, w] : terms) {
      one(0, 0) = g * w;
      t.add_grad(nid, one);
    }
  });
}

Tape::NodeId mlp_graph(Tape& tape, const Mlp& net, Tape::NodeId x) {
  Tape::NodeId cur = x;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    if (static_cast<int>(i) == net.skip_layer) cur = tape.concat_cols({cur, x});
    const auto& l = net.layers[i];
    cur = tape.affine(cur, const_cast<Tensor&>(l.weight), const_cast<Tensor&>(l.bias));
    if (l.act != Act::None) cur = tape.activation(cur, l.act, l.act_beta);
  }
  return cur;
}

MlpForward mlp_forward(Mlp& net, const Vec& x, const Vec& condition) {
  HG_CHECK_ARG(x.size() + condition.size() == net.input_dim,
               "input plus condition must match mlp input width");
  MlpForward f;
  f.tape = std::make_shared<Tape>();
  f.x = f.tape->input(x.transpose());
  Tape::NodeId in = f.x;
  if (condition.size() > 0) {
    f.condition = f.tape->input(condition.transpose());
    in = f.tape->concat_cols({f.x, f.condition});
  }
  f.out = mlp_graph(*f.tape, net, in);
  f.output = f.tape->value(f.out).row(0).transpose();
  return f;
}

MlpGrads mlp_backward(MlpForward& fwd, const Vec& output_grad) {
  HG_CHECK_ARG(output_grad.size() == fwd.output.size(), "output grad size mismatch");
  fwd.tape->backward_matrix(fwd.out, output_grad.transpose());
  MlpGrads g;
  g.input = fwd.tape->node_grad(fwd.x).row(0).transpose();
  if (fwd.condition >= 0) g.condition = fwd.tape->node_grad(fwd.condition).row(0).transpose();
  return g;
}

// --- optimizer ---------------------------------------------------------------------

void adam_step(Tensor& p, AdamState& state, const AdamConfig& cfg) {
  HG_CHECK_ARG(p.grad.rows() == p.value.rows() && p.grad.cols() == p.value.cols(),
               "gradient shape mismatch");
  if (state.m.size() == 0) {
    state.m = Mat::Zero(p.value.rows(), p.value.cols());
    state.v = Mat::Zero(p.value.rows(), p.value.cols());
    state.t = 0;
  }
  state.t++;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * p.grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Mat m_hat = state.m / bc1;
  const Mat v_hat = state.v / bc2;
  p.value -= cfg.lr * m_hat.cwiseQuotient(v_hat.cwiseSqrt() + Mat::Constant(v_hat.rows(), v_hat.cols(), cfg.eps));
}

double central_difference(const std::function<double(double)>& f, double eps) {
  return (f(eps) - f(-eps)) / (2.0 * eps);
}

}  // namespace headgen::nn
