#pragma once

#include "headgen/common.hpp"
#include "headgen/geomio.hpp"

#include <string>
#include <vector>

namespace headgen {

// Network and latent dimensions shared by the canonical and deformation
// modules. Defaults are the full-size configuration; tests and desk-scale
// runs shrink them through config files.
struct ModelDims {
  int n_beta = 100;
  int n_shape = 64;   // z_shape
  int n_detail = 64;  // z_detail
  int n_color = 64;   // z_color
  int n_feat = 32;    // f_s / f_n width
  int vol_nodes = 8;
  int vol_channels = 32;
  std::vector<int> volgen_hidden = {48};
  std::vector<int> geom_hidden = {64, 64};
  std::vector<int> normal_hidden = {64, 64};
  std::vector<int> texture_hidden = {64, 64};
  std::vector<int> bases_hidden = {96, 96};
  std::vector<int> deshape_hidden = {48, 48};
  double jaw_canonical = 0.1;  // canonical mouth-open convention, radians
  uint64_t init_seed = 404;
};

struct SyntheticDataConfig {
  int subjects = 8;
  int expressions = 5;
  int subdivisions = 3;
  uint64_t model_seed = 7;
  double beta_scale = 1.0;
  double psi_scale = 0.6;
  double jaw_min = 0.0;
  double jaw_max = 0.3;
  double neck_scale = 0.08;
  geomio::SampleCounts counts;
};

struct CorrespondenceConfig {
  int max_iter = 30;
  double tol = 1e-5;
  int polish_iters = 2;
  bool select_max_occupancy = false;  // alternative multi-root rule
};

enum class Ablation { None, HeadFs, FDef, NoLbsLoss };

std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

struct TrainConfig {
  // stage 1
  int epochs1 = 50;
  int batch_scans1 = 4;
  int points_per_scan = 256;
  int deshape_verts = 96;
  double lr1 = 1e-3;
  // stage 2
  int epochs2 = 30;
  int batch_scans2 = 2;
  int surface_points_per_scan = 192;
  double lr2 = 1e-3;
  // shared
  double lr_latent = 1e-3;
  double lambda_d = 10.0;
  double lambda_l = 1.0;
  double lambda_r = 1e-3;
  double lambda_p = 1.0;
  double lambda_e = 1.0;
  double lambda_c = 1.0;
  double lambda_n = 1.0;
  double lambda_inner = 1.0;  // inner weights of the color/normal/reg losses
  bool aux_first_epoch = true;
  int aux_points = 48;
  Ablation ablation = Ablation::None;
  // stage-2 image supervision rig
  int image_views = 2;
  int image_resolution = 48;
  int cache_mesh_resolution = 56;
  int probe_points = 512;  // fixed probe set for the bases-MSE metric
};

struct FitConfig {
  int iterations = 400;
  double lr = 5e-3;
  int points_per_iter = 384;
  int fit_points = 2048;
  int fit_surface_points = 512;
  double lambda_c = 1.0;
  double lambda_n = 1.0;
  double lambda_reg_shape = 1e-3;
  double lambda_reg_detail = 1e-3;
  double lambda_reg_color = 1e-3;
  int eval_resolution = 96;
  double face_radius = 0.05;
  double metric_tau = 0.05;
  int metric_samples = 10000;
};

struct RenderRigConfig {
  int views = 4;
  int resolution = 128;
};

struct PipelineConfig {
  ModelDims dims;
  SyntheticDataConfig data;
  TrainConfig train;
  FitConfig fit;
  CorrespondenceConfig correspondence;
  RenderRigConfig render;
  uint64_t seed = 1234;
  int threads = 0;

  std::string to_json() const;                     // pretty, stable key order
  static PipelineConfig from_json(const std::string& text);
  static PipelineConfig load(const std::string& path);
  void save(const std::string& path) const;
  // dotted-key override, e.g. "train.epochs1=10" or "dims.n_beta=8"
  void apply_override(const std::string& assignment);
};

}  // namespace headgen
