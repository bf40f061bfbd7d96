#pragma once

#include "headgen/common.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace headgen::nn {

enum class Act { None, Relu, Softplus, Sine, Sigmoid };

// Trainable matrix with an accumulated gradient. Biases and latent codes are
// stored as 1 x n rows.
struct Tensor {
  std::string name;
  Mat value;
  Mat grad;

  Tensor() = default;
  Tensor(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }
  void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
};

// --- feature volume -----------------------------------------------------------

// Lattice of `nodes`^3 feature vectors over [lo,hi]; rows of a value matrix
// are ordered (ix*nodes + iy)*nodes + iz.
struct GridSpec {
  int nodes = 8;
  Vec3 lo = Vec3(-1, -1, -1);
  Vec3 hi = Vec3(1, 1, 1);
  int channels = 32;
  int cell_count() const { return nodes * nodes * nodes; }
  Mat node_centers() const;  // cell_count x 3
};

struct FeatureVolume {
  GridSpec spec;
  Mat values;  // cell_count x channels

  // Trilinear sampling with edge clamping; exact at lattice nodes.
  Vec sample(const Vec3& p) const;
  Mat sample_rows(const Mat& points) const;
  // Valid Lipschitz constant for sample() over the grid domain.
  double lipschitz_bound() const;
};

// Fixed analytic logit prior so the untrained occupancy's 0.5 level set is a
// centered ellipsoid: prior(p) = gain * (1 - sum_c (p_c / axes_c)^2).
struct EllipsoidPrior {
  double gain = 6.0;
  Vec3 axes = Vec3(0.38, 0.48, 0.42);
  double operator()(const Vec3& p) const {
    double q = 0.0;
    for (int c = 0; c < 3; ++c) q += (p[c] / axes[c]) * (p[c] / axes[c]);
    return gain * (1.0 - q);
  }
};

// --- MLP ------------------------------------------------------------------------

struct MlpLayer {
  Tensor weight;  // out x in
  Tensor bias;    // 1 x out
  Act act = Act::None;
  double act_beta = 1.0;
};

struct Mlp {
  std::vector<MlpLayer> layers;
  int input_dim = 0;
  int skip_layer = -1;  // layer whose input re-concatenates the network input

  int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().bias.value.cols()); }
  int parameter_count() const;

  Mat forward_rows(const Mat& x) const;
  Vec forward(const Vec& x) const;
  void collect_params(std::vector<Tensor*>& out);
};

struct MlpSpec {
  std::vector<int> widths;  // input, hidden..., output
  Act hidden_act = Act::Softplus;
  double hidden_beta = 10.0;
  Act output_act = Act::None;
  int skip_layer = -1;
  double head_scale = 1.0;  // extra scale on the final layer's init
};

// Scaled-Gaussian fan-in init, biases zero.
Mlp make_mlp(const std::string& name, const MlpSpec& spec, Rng& rng);

// --- reverse-mode tape ------------------------------------------------------------

// Dynamic graph over row-batched matrices. Rows are independent samples for
// every op except the explicit reductions, so per-point Jacobians can be read
// out with repeated input-gradient passes.
class Tape {
 public:
  using NodeId = int;

  NodeId constant(Mat v);
  NodeId input(Mat v);
  NodeId param(Tensor& t);

  NodeId affine(NodeId x, Tensor& weight, Tensor& bias);
  NodeId activation(NodeId x, Act act, double beta = 1.0);
  NodeId sigmoid(NodeId x);
  NodeId softmax_rows(NodeId x);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId slice_cols(NodeId x, int start, int count);
  NodeId broadcast_rows(NodeId row, int rows);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_const(NodeId a, const Mat& c);
  NodeId trilerp(NodeId grid, NodeId query, const GridSpec& spec);
  NodeId add_quad_prior(NodeId logits, NodeId query, const EllipsoidPrior& prior);
  // out[:,c] = sum_k coeff[k] * rows[:, 3k+c]
  NodeId basis_offset(NodeId rows, const Vec& coeff);

  struct BlendConsts {
    // per joint: current-pose and canonical-pose world transforms
    std::vector<Mat3> rot_cur, rot_can;
    std::vector<Vec3> tr_cur, tr_can;
  };
  // Per row: blend both transform sets with weights w, then map
  // out = Bcur * (Bcan^{-1} x + off). Identity when the two sets coincide and
  // off = 0, for any w.
  NodeId lbs_blend(NodeId weights, NodeId x, NodeId offsets, const BlendConsts& consts);

  // Root of deform(x) = x_d found outside the tape. Backward applies the
  // implicit function theorem: seeds -J^{-T} grad through `deform_out`, the
  // deform graph evaluated at the (constant) root.
  NodeId implicit_root(const Mat& roots, const std::vector<Mat3>& jacobians, NodeId deform_out);

  NodeId normalize_rows(NodeId x, const Mat& fallback, int* fallback_count = nullptr);
  NodeId rowwise_matvec(const std::vector<Mat3>& mats, NodeId x);

  NodeId mean_bce_logit(NodeId logits, const Vec& labels);
  NodeId mean_sqnorm_diff(NodeId x, const Mat& target);
  NodeId mean_one_minus_dot(NodeId x, const Mat& dirs);
  NodeId sqnorm(NodeId x);
  NodeId mean_all(NodeId x);
  NodeId weighted_sum(const std::vector<std::pair<NodeId, double>>& terms);

  const Mat& value(NodeId id) const { return nodes_[id].value; }
  double scalar(NodeId id) const;
  int rows(NodeId id) const { return static_cast<int>(nodes_[id].value.rows()); }

  // Full reverse sweep from a scalar; accumulates parameter gradients once.
  // A second accumulating sweep on the same tape is a contract violation.
  void backward(NodeId root, double seed = 1.0);
  // Accumulating sweep with an arbitrary seed matrix on any node.
  void backward_matrix(NodeId node, const Mat& seed);
  // Input-gradient-only sweep with an arbitrary seed; repeatable, never
  // touches parameter gradients.
  void backward_seed(NodeId node, const Mat& seed);

  const Mat& node_grad(NodeId id) const;
  bool has_grad(NodeId id) const { return nodes_[id].has_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool needs_grad = true;
    std::function<void(Tape&, int)> back;
  };
  NodeId push(Mat value, bool needs_grad, std::function<void(Tape&, int)> back);
  void add_grad(NodeId id, const Mat& g);
  void sweep(NodeId root, const Mat& seed);
  void clear_grads();

  std::vector<Node> nodes_;
  bool accumulate_params_ = false;
  bool consumed_ = false;
  friend struct TapeOps;
};

// Builds the layer stack on a tape; `x` must already include any condition
// columns. Returns the output node.
Tape::NodeId mlp_graph(Tape& tape, const Mlp& net, Tape::NodeId x);

// Spec-shaped convenience wrapper: forward with condition concatenation,
// keeping the tape for one backward call.
struct MlpForward {
  std::shared_ptr<Tape> tape;
  Tape::NodeId out = -1, x = -1, condition = -1;
  Vec output;
};
MlpForward mlp_forward(Mlp& net, const Vec& x, const Vec& condition);
struct MlpGrads {
  Vec input;
  Vec condition;
};
MlpGrads mlp_backward(MlpForward& fwd, const Vec& output_grad);

// --- optimizer ----------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Mat m, v;
  int64_t t = 0;
};

// Standard Adam update from p.grad; state is created on first use.
void adam_step(Tensor& p, AdamState& state, const AdamConfig& cfg);

// Central finite-difference directional derivative helper used by gradient
// checks throughout the test suites.
double central_difference(const std::function<double(double)>& f, double eps = 1e-4);

}  // namespace headgen::nn
