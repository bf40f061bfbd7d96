#pragma once

#include "headgen/config.hpp"
#include "headgen/headmodel.hpp"
#include "headgen/nn.hpp"

#include <atomic>
#include <string>
#include <vector>

namespace headgen::canonical {

// Per-subject codes for the auto-decoder.
struct LatentTriplet {
  Vec z_shape, z_detail, z_color;
  std::string subject_id;

  LatentTriplet() = default;
  LatentTriplet(const ModelDims& dims)
      : z_shape(Vec::Zero(dims.n_shape)),
        z_detail(Vec::Zero(dims.n_detail)),
        z_color(Vec::Zero(dims.n_color)) {}
};

struct CanonicalSample {
  double occ = 0.0;   // in [0,1]
  Vec f_s;            // shape feature
  Vec3 normal = Vec3(0, 0, 1);  // unit
  Vec f_n;            // normal feature
  Vec3 color = Vec3::Zero();    // rgb in [0,1]^3
};

// Trainable per-subject code storage (tensor-backed so codes take gradients).
struct LatentEntry {
  std::string subject_id;
  nn::Tensor z_shape, z_detail, z_color;  // 1 x n rows
};

struct LatentTable {
  std::vector<LatentEntry> entries;

  int find(const std::string& subject_id) const;
  LatentTriplet triplet(int index) const;
  bool empty() const { return entries.empty(); }
};

LatentTable make_latent_table(const ModelDims& dims, const std::vector<std::string>& subjects,
                              uint64_t seed);

// Gaussian fit (diagonal) to the learned code table.
LatentTriplet sample_latents(const LatentTable& table, Rng& rng);
LatentTriplet interpolate_latents(const LatentTriplet& a, const LatentTriplet& b, double t);

struct EvalDiagnostics {
  std::atomic<long> outside_box{0};
  std::atomic<long> normal_fallbacks{0};
};

// The three canonical networks plus the feature-volume generator.
struct CanonicalModel {
  nn::Mlp volgen;      // [3 + n_shape] per lattice node -> vol_channels
  nn::Mlp geom_trunk;  // [3 + vol_channels] -> ... -> n_feat (f_s)
  nn::Mlp geom_head;   // n_feat -> occupancy logit (before the analytic prior)
  nn::Mlp normal_net;  // [3 + n_detail + n_feat] -> 3 + n_feat
  nn::Mlp texture_net; // [3 + n_color + 2 n_feat + 15 + 50] -> rgb (sigmoid)
  nn::GridSpec vol_spec;
  nn::EllipsoidPrior prior;
  ModelDims dims;

  void collect_stage1_params(std::vector<nn::Tensor*>& out);  // volgen + geometry
  void collect_stage2_params(std::vector<nn::Tensor*>& out);  // normal + texture
};

CanonicalModel make_canonical_model(const ModelDims& dims);

// Pose vector passed to the texture net: global rotation zeroed so texture
// cannot encode world orientation.
Vec texture_pose(const Vec& theta);

// Feature volume for one shape code.
nn::FeatureVolume build_feature_volume(const CanonicalModel& model, const Vec& z_shape);

// Read-only evaluation of the canonical fields for one subject. Safe for
// concurrent use; training mutates parameters only between evaluations.
class CanonicalEval {
 public:
  CanonicalEval(const CanonicalModel& model, LatentTriplet codes,
                EvalDiagnostics* diagnostics = nullptr);

  // occupancy in [0,1]; surface is the 0.5 level set
  Vec occupancy_rows(const Mat& x) const;
  Mat feature_rows(const Mat& x) const;  // f_s
  void occupancy_and_features(const Mat& x, Vec* occ, Mat* f_s) const;

  // (unit normal, f_n); raw zero vectors fall back to the occupancy gradient
  void normals_rows(const Mat& x, const Mat& f_s, Mat* normals, Mat* f_n) const;
  Mat colors_rows(const Mat& x, const Mat& f_s, const Mat& f_n, const Vec& theta,
                  const Vec& psi) const;

  // full per-point evaluation (geometry -> normal -> texture)
  CanonicalSample sample(const Vec3& x, const Vec& theta, const Vec& psi) const;

  Vec3 occupancy_gradient(const Vec3& x) const;

  const nn::FeatureVolume& volume() const { return vol_; }
  const LatentTriplet& codes() const { return codes_; }
  const CanonicalModel& model() const { return *model_; }

 private:
  const CanonicalModel* model_;
  LatentTriplet codes_;
  nn::FeatureVolume vol_;
  EvalDiagnostics* diagnostics_;
};

// Spec-shaped single-point ops (build the feature volume per call; use
// CanonicalEval for hot paths).
std::pair<double, Vec> geometry(const CanonicalModel& model, const Vec3& x_c, const Vec& z_shape);
std::pair<Vec3, Vec> detail_normal(const CanonicalEval& eval, const Vec3& x_c, const Vec& f_s);
Vec3 texture(const CanonicalEval& eval, const Vec3& x_c, const Vec& f_s, const Vec& f_n,
             const Vec& theta, const Vec& psi);

// Graph pieces used by training losses. The returned occupancy node is the
// logit (prior included); apply BCE directly on it.
struct GeometryGraph {
  nn::Tape::NodeId grid = -1;       // feature volume values (cells x channels)
  nn::Tape::NodeId features = -1;   // f_s rows
  nn::Tape::NodeId occ_logit = -1;  // N x 1
};
// `x` rows are canonical points; `z_shape` is the subject's code tensor.
GeometryGraph build_geometry_graph(nn::Tape& tape, CanonicalModel& model, nn::Tensor& z_shape,
                                   nn::Tape::NodeId x);
// Variant with a precomputed constant feature volume (stage 2, frozen G).
GeometryGraph build_geometry_graph_frozen(nn::Tape& tape, const CanonicalModel& model,
                                          const nn::FeatureVolume& vol, nn::Tape::NodeId x);

struct NormalTextureGraph {
  nn::Tape::NodeId normal_raw = -1;  // N x 3, before normalization
  nn::Tape::NodeId normal = -1;      // N x 3, unit rows
  nn::Tape::NodeId f_n = -1;
  nn::Tape::NodeId color = -1;       // N x 3 in [0,1]
};
NormalTextureGraph build_normal_texture_graph(nn::Tape& tape, CanonicalModel& model,
                                              nn::Tensor& z_detail, nn::Tensor& z_color,
                                              nn::Tape::NodeId x, const Mat& f_s_const,
                                              const Mat& normal_fallback, const Vec& theta,
                                              const Vec& psi);

}  // namespace headgen::canonical
