#include "headgen/canonical.hpp"

#include <cmath>

namespace headgen::canonical {

int LatentTable::find(const std::string& subject_id) const {
  for (size_t i = 0; i < entries.size(); ++i)
    if (entries[i].subject_id == subject_id) return static_cast<int>(i);
  return -1;
}

LatentTriplet LatentTable::triplet(int index) const {
  HG_CHECK_ARG(index >= 0 && index < static_cast<int>(entries.size()), "latent index");
  LatentTriplet t;
  const auto& e = entries[index];
  t.subject_id = e.subject_id;
  t.z_shape = e.z_shape.value.row(0).transpose();
  t.z_detail = e.z_detail.value.row(0).transpose();
  t.z_color = e.z_color.value.row(0).transpose();
  return t;
}

LatentTable make_latent_table(const ModelDims& dims, const std::vector<std::string>& subjects,
                              uint64_t seed) {
  LatentTable table;
  Rng rng(seed);
  auto draw = [&](int n) {
    Mat v(1, n);
    for (int i = 0; i < n; ++i) v(0, i) = 0.01 * normal_real(rng);
    return v;
  };
  for (const auto& id : subjects) {
    LatentEntry e;
    e.subject_id = id;
    e.z_shape = nn::Tensor("z_shape." + id, draw(dims.n_shape));
    e.z_detail = nn::Tensor("z_detail." + id, draw(dims.n_detail));
    e.z_color = nn::Tensor("z_color." + id, draw(dims.n_color));
    table.entries.push_back(std::move(e));
  }
  return table;
}

namespace {

void gaussian_fit(const std::vector<Vec>& rows, Vec* mean, Vec* stddev) {
  const int n = static_cast<int>(rows.size());
  const auto d = rows[0].size();
  *mean = Vec::Zero(d);
  for (const auto& r : rows) *mean += r;
  *mean /= n;
  *stddev = Vec::Zero(d);
  if (n > 1) {
    for (const auto& r : rows) *stddev += (r - *mean).cwiseAbs2();
    *stddev = (*stddev / (n - 1)).cwiseSqrt();
  }
}

Vec draw_gaussian(const Vec& mean, const Vec& stddev, Rng& rng) {
  Vec out(mean.size());
  for (int i = 0; i < mean.size(); ++i) out[i] = mean[i] + stddev[i] * normal_real(rng);
  return out;
}

}  // namespace

LatentTriplet sample_latents(const LatentTable& table, Rng& rng) {
  if (table.empty()) throw UnavailableState("latent table is empty; train a model first");
  std::vector<Vec> shapes, details, colors;
  for (size_t i = 0; i < table.entries.size(); ++i) {
    const auto t = table.triplet(static_cast<int>(i));
    shapes.push_back(t.z_shape);
    details.push_back(t.z_detail);
    colors.push_back(t.z_color);
  }
  LatentTriplet out;
  Vec mean, stddev;
  gaussian_fit(shapes, &mean, &stddev);
  out.z_shape = draw_gaussian(mean, stddev, rng);
  gaussian_fit(details, &mean, &stddev);
  out.z_detail = draw_gaussian(mean, stddev, rng);
  gaussian_fit(colors, &mean, &stddev);
  out.z_color = draw_gaussian(mean, stddev, rng);
  out.subject_id = "sampled";
  return out;
}

LatentTriplet interpolate_latents(const LatentTriplet& a, const LatentTriplet& b, double t) {
  HG_CHECK_ARG(t >= 0.0 && t <= 1.0, "interpolation parameter must be in [0,1]");
  HG_CHECK_ARG(a.z_shape.size() == b.z_shape.size() && a.z_detail.size() == b.z_detail.size() &&
                   a.z_color.size() == b.z_color.size(),
               "latent dimension mismatch");
  LatentTriplet out;
  out.z_shape = (1.0 - t) * a.z_shape + t * b.z_shape;
  out.z_detail = (1.0 - t) * a.z_detail + t * b.z_detail;
  out.z_color = (1.0 - t) * a.z_color + t * b.z_color;
  out.subject_id = "interp";
  return out;
}

// --- model ------------------------------------------------------------------------

void CanonicalModel::collect_stage1_params(std::vector<nn::Tensor*>& out) {
  volgen.collect_params(out);
  geom_trunk.collect_params(out);
  geom_head.collect_params(out);
}

void CanonicalModel::collect_stage2_params(std::vector<nn::Tensor*>& out) {
  normal_net.collect_params(out);
  texture_net.collect_params(out);
}

CanonicalModel make_canonical_model(const ModelDims& dims) {
  CanonicalModel m;
  m.dims = dims;
  m.vol_spec.nodes = dims.vol_nodes;
  m.vol_spec.channels = dims.vol_channels;

  Rng rng(mix_seed(dims.init_seed, 0xca0e));
  {
    nn::MlpSpec spec;
    spec.widths = {3 + dims.n_shape};
    for (int h : dims.volgen_hidden) spec.widths.push_back(h);
    spec.widths.push_back(dims.vol_channels);
    spec.head_scale = 0.3;
    m.volgen = nn::make_mlp("volgen", spec, rng);
  }
  {
    nn::MlpSpec spec;
    spec.widths = {3 + dims.vol_channels};
    for (int h : dims.geom_hidden) spec.widths.push_back(h);
    spec.widths.push_back(dims.n_feat);
    spec.hidden_beta = 100.0;  // occupancy net keeps a sharp softplus
    spec.output_act = nn::Act::Softplus;  // feature layer keeps the trunk activation
    m.geom_trunk = nn::make_mlp("geom", spec, rng);
  }
  {
    nn::MlpSpec spec;
    spec.widths = {dims.n_feat, 1};
    spec.head_scale = 0.1;
    m.geom_head = nn::make_mlp("occ_head", spec, rng);
  }
  {
    nn::MlpSpec spec;
    spec.widths = {3 + dims.n_detail + dims.n_feat};
    for (int h : dims.normal_hidden) spec.widths.push_back(h);
    spec.widths.push_back(3 + dims.n_feat);
    spec.head_scale = 0.5;
    m.normal_net = nn::make_mlp("normal", spec, rng);
  }
  {
    nn::MlpSpec spec;
    spec.widths = {3 + dims.n_color + 2 * dims.n_feat + headmodel::kPoseDim +
                   headmodel::kNumExpr};
    for (int h : dims.texture_hidden) spec.widths.push_back(h);
    spec.widths.push_back(3);
    spec.output_act = nn::Act::Sigmoid;
    spec.head_scale = 0.5;
    m.texture_net = nn::make_mlp("texture", spec, rng);
  }
  return m;
}

Vec texture_pose(const Vec& theta) {
  HG_CHECK_ARG(theta.size() == headmodel::kPoseDim, "theta must be 15-dimensional");
  Vec t = theta;
  t.segment<3>(0).setZero();
  return t;
}

nn::FeatureVolume build_feature_volume(const CanonicalModel& model, const Vec& z_shape) {
  HG_CHECK_ARG(z_shape.size() == model.dims.n_shape, "z_shape dimension mismatch");
  nn::FeatureVolume vol;
  vol.spec = model.vol_spec;
  const Mat centers = vol.spec.node_centers();
  Mat in(centers.rows(), 3 + z_shape.size());
  in << centers, z_shape.transpose().replicate(centers.rows(), 1);
  vol.values = model.volgen.forward_rows(in);
  return vol;
}

// --- evaluator -----------------------------------------------------------------------

CanonicalEval::CanonicalEval(const CanonicalModel& model, LatentTriplet codes,
                             EvalDiagnostics* diagnostics)
    : model_(&model), codes_(std::move(codes)), diagnostics_(diagnostics) {
  vol_ = build_feature_volume(model, codes_.z_shape);
}

void CanonicalEval::occupancy_and_features(const Mat& x, Vec* occ, Mat* f_s) const {
  HG_CHECK_ARG(x.cols() == 3, "points must be Nx3");
  if (diagnostics_) {
    for (int i = 0; i < x.rows(); ++i)
      if (x.row(i).cwiseAbs().maxCoeff() > 1.0) diagnostics_->outside_box++;
  }
  const Mat feat_vol = vol_.sample_rows(x);
  Mat in(x.rows(), 3 + feat_vol.cols());
  in << x, feat_vol;
  const Mat features = model_->geom_trunk.forward_rows(in);
  if (f_s) *f_s = features;
  if (occ) {
    const Mat logit = model_->geom_head.forward_rows(features);
    occ->resize(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
      const double s = logit(i, 0) + model_->prior(x.row(i).transpose());
      (*occ)[i] = 1.0 / (1.0 + std::exp(-std::clamp(s, -500.0, 500.0)));
    }
  }
}

Vec CanonicalEval::occupancy_rows(const Mat& x) const {
  Vec occ;
  occupancy_and_features(x, &occ, nullptr);
  return occ;
}

Mat CanonicalEval::feature_rows(const Mat& x) const {
  Mat f;
  occupancy_and_features(x, nullptr, &f);
  return f;
}

Vec3 CanonicalEval::occupancy_gradient(const Vec3& x) const {
  nn::Tape tape;
  auto xn = tape.input(x.transpose());
  auto grid = tape.constant(vol_.values);
  auto feat = tape.trilerp(grid, xn, vol_.spec);
  auto in = tape.concat_cols({xn, feat});
  auto trunk = nn::mlp_graph(tape, model_->geom_trunk, in);
  auto logit = nn::mlp_graph(tape, model_->geom_head, trunk);
  auto with_prior = tape.add_quad_prior(logit, xn, model_->prior);
  auto occ = tape.sigmoid(with_prior);
  tape.backward_seed(occ, Mat::Ones(1, 1));
  return tape.node_grad(xn).row(0).transpose();
}

void CanonicalEval::normals_rows(const Mat& x, const Mat& f_s, Mat* normals, Mat* f_n) const {
  const int n = static_cast<int>(x.rows());
  Mat in(n, 3 + codes_.z_detail.size() + f_s.cols());
  in << x, codes_.z_detail.transpose().replicate(n, 1), f_s;
  const Mat out = model_->normal_net.forward_rows(in);
  if (normals) {
    normals->resize(n, 3);
    for (int i = 0; i < n; ++i) {
      const Vec3 raw = out.row(i).head<3>().transpose();
      const double len = raw.norm();
      if (len < 1e-12) {
        // outward direction of the occupancy field
        if (diagnostics_) diagnostics_->normal_fallbacks++;
        Vec3 g = -occupancy_gradient(x.row(i).transpose());
        const double gl = g.norm();
        normals->row(i) = (gl > 1e-20 ? (g / gl) : Vec3(0, 0, 1)).transpose();
      } else {
        normals->row(i) = (raw / len).transpose();
      }
    }
  }
  if (f_n) *f_n = out.rightCols(out.cols() - 3);
}

Mat CanonicalEval::colors_rows(const Mat& x, const Mat& f_s, const Mat& f_n, const Vec& theta,
                               const Vec& psi) const {
  const int n = static_cast<int>(x.rows());
  const Vec tpose = texture_pose(theta);
  Mat in(n, 3 + codes_.z_color.size() + f_s.cols() + f_n.cols() + tpose.size() + psi.size());
  in << x, codes_.z_color.transpose().replicate(n, 1), f_s, f_n,
      tpose.transpose().replicate(n, 1), psi.transpose().replicate(n, 1);
  return model_->texture_net.forward_rows(in);
}

CanonicalSample CanonicalEval::sample(const Vec3& x, const Vec& theta, const Vec& psi) const {
  CanonicalSample s;
  Vec occ;
  Mat f_s;
  Mat xr = x.transpose();
  occupancy_and_features(xr, &occ, &f_s);
  s.occ = occ[0];
  s.f_s = f_s.row(0).transpose();
  Mat normals, f_n;
  normals_rows(xr, f_s, &normals, &f_n);
  s.normal = normals.row(0).transpose();
  s.f_n = f_n.row(0).transpose();
  s.color = colors_rows(xr, f_s, f_n, theta, psi).row(0).transpose();
  return s;
}

std::pair<double, Vec> geometry(const CanonicalModel& model, const Vec3& x_c,
                                const Vec& z_shape) {
  LatentTriplet codes(model.dims);
  codes.z_shape = z_shape;
  const CanonicalEval eval(model, codes);
  Vec occ;
  Mat f_s;
  eval.occupancy_and_features(x_c.transpose(), &occ, &f_s);
  return {occ[0], f_s.row(0).transpose()};
}

std::pair<Vec3, Vec> detail_normal(const CanonicalEval& eval, const Vec3& x_c, const Vec& f_s) {
  Mat normals, f_n;
  eval.normals_rows(x_c.transpose(), f_s.transpose(), &normals, &f_n);
  return {normals.row(0).transpose(), f_n.row(0).transpose()};
}

Vec3 texture(const CanonicalEval& eval, const Vec3& x_c, const Vec& f_s, const Vec& f_n,
             const Vec& theta, const Vec& psi) {
  return eval.colors_rows(x_c.transpose(), f_s.transpose(), f_n.transpose(), theta, psi)
      .row(0)
      .transpose();
}

// --- graphs ---------------------------------------------------------------------------

GeometryGraph build_geometry_graph(nn::Tape& tape, CanonicalModel& model, nn::Tensor& z_shape,
                                   nn::Tape::NodeId x) {
  GeometryGraph g;
  const Mat centers = model.vol_spec.node_centers();
  auto centers_node = tape.constant(centers);
  auto z_node = tape.param(z_shape);
  auto z_rows = tape.broadcast_rows(z_node, static_cast<int>(centers.rows()));
  auto vol_in = tape.concat_cols({centers_node, z_rows});
  g.grid = nn::mlp_graph(tape, model.volgen, vol_in);

  auto feat_vol = tape.trilerp(g.grid, x, model.vol_spec);
  auto in = tape.concat_cols({x, feat_vol});
  g.features = nn::mlp_graph(tape, model.geom_trunk, in);
  auto logit = nn::mlp_graph(tape, model.geom_head, g.features);
  g.occ_logit = tape.add_quad_prior(logit, x, model.prior);
  return g;
}

GeometryGraph build_geometry_graph_frozen(nn::Tape& tape, const CanonicalModel& model,
                                          const nn::FeatureVolume& vol, nn::Tape::NodeId x) {
  GeometryGraph g;
  g.grid = tape.constant(vol.values);
  auto feat_vol = tape.trilerp(g.grid, x, vol.spec);
  auto in = tape.concat_cols({x, feat_vol});
  g.features = nn::mlp_graph(tape, model.geom_trunk, in);
  auto logit = nn::mlp_graph(tape, model.geom_head, g.features);
  g.occ_logit = tape.add_quad_prior(logit, x, model.prior);
  return g;
}

NormalTextureGraph build_normal_texture_graph(nn::Tape& tape, CanonicalModel& model,
                                              nn::Tensor& z_detail, nn::Tensor& z_color,
                                              nn::Tape::NodeId x, const Mat& f_s_const,
                                              const Mat& normal_fallback, const Vec& theta,
                                              const Vec& psi) {
  NormalTextureGraph g;
  const int n = tape.rows(x);
  auto f_s = tape.constant(f_s_const);
  auto zd = tape.broadcast_rows(tape.param(z_detail), n);
  auto n_in = tape.concat_cols({x, zd, f_s});
  auto n_out = nn::mlp_graph(tape, model.normal_net, n_in);
  g.normal_raw = tape.slice_cols(n_out, 0, 3);
  g.f_n = tape.slice_cols(n_out, 3, model.dims.n_feat);
  g.normal = tape.normalize_rows(g.normal_raw, normal_fallback);

  const Vec tpose = texture_pose(theta);
  auto zc = tape.broadcast_rows(tape.param(z_color), n);
  auto pose_rows = tape.constant(tpose.transpose().replicate(n, 1));
  auto psi_rows = tape.constant(psi.transpose().replicate(n, 1));
  auto t_in = tape.concat_cols({x, zc, f_s, g.f_n, pose_rows, psi_rows});
  g.color = nn::mlp_graph(tape, model.texture_net, t_in);
  return g;
}

}  // namespace headgen::canonical
