#include "headgen/config.hpp"

#include <json.hpp>

#include <fstream>

namespace headgen {

using nlohmann::json;

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::None:
      return "none";
    case Ablation::HeadFs:
      return "head_fs";
    case Ablation::FDef:
      return "f_def";
    case Ablation::NoLbsLoss:
      return "no_lbs_loss";
  }
  return "none";
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "none") return Ablation::None;
  if (name == "head_fs") return Ablation::HeadFs;
  if (name == "f_def") return Ablation::FDef;
  if (name == "no_lbs_loss") return Ablation::NoLbsLoss;
  throw std::invalid_argument("unknown ablation: " + name);
}

namespace {

json dims_to_json(const ModelDims& d) {
  return json{{"n_beta", d.n_beta},
              {"n_shape", d.n_shape},
              {"n_detail", d.n_detail},
              {"n_color", d.n_color},
              {"n_feat", d.n_feat},
              {"vol_nodes", d.vol_nodes},
              {"vol_channels", d.vol_channels},
              {"volgen_hidden", d.volgen_hidden},
              {"geom_hidden", d.geom_hidden},
              {"normal_hidden", d.normal_hidden},
              {"texture_hidden", d.texture_hidden},
              {"bases_hidden", d.bases_hidden},
              {"deshape_hidden", d.deshape_hidden},
              {"jaw_canonical", d.jaw_canonical},
              {"init_seed", d.init_seed}};
}

ModelDims dims_from_json(const json& j) {
  ModelDims d;
  d.n_beta = j.value("n_beta", d.n_beta);
  d.n_shape = j.value("n_shape", d.n_shape);
  d.n_detail = j.value("n_detail", d.n_detail);
  d.n_color = j.value("n_color", d.n_color);
  d.n_feat = j.value("n_feat", d.n_feat);
  d.vol_nodes = j.value("vol_nodes", d.vol_nodes);
  d.vol_channels = j.value("vol_channels", d.vol_channels);
  d.volgen_hidden = j.value("volgen_hidden", d.volgen_hidden);
  d.geom_hidden = j.value("geom_hidden", d.geom_hidden);
  d.normal_hidden = j.value("normal_hidden", d.normal_hidden);
  d.texture_hidden = j.value("texture_hidden", d.texture_hidden);
  d.bases_hidden = j.value("bases_hidden", d.bases_hidden);
  d.deshape_hidden = j.value("deshape_hidden", d.deshape_hidden);
  d.jaw_canonical = j.value("jaw_canonical", d.jaw_canonical);
  d.init_seed = j.value("init_seed", d.init_seed);
  return d;
}

json full_json(const PipelineConfig& c) {
  json j;
  j["dims"] = dims_to_json(c.dims);
  j["data"] = {{"subjects", c.data.subjects},
               {"expressions", c.data.expressions},
               {"subdivisions", c.data.subdivisions},
               {"model_seed", c.data.model_seed},
               {"beta_scale", c.data.beta_scale},
               {"psi_scale", c.data.psi_scale},
               {"jaw_min", c.data.jaw_min},
               {"jaw_max", c.data.jaw_max},
               {"neck_scale", c.data.neck_scale},
               {"counts",
                {{"near_surface", c.data.counts.near_surface},
                 {"uniform", c.data.counts.uniform},
                 {"surface", c.data.counts.surface}}}};
  j["train"] = {{"epochs1", c.train.epochs1},
                {"batch_scans1", c.train.batch_scans1},
                {"points_per_scan", c.train.points_per_scan},
                {"deshape_verts", c.train.deshape_verts},
                {"lr1", c.train.lr1},
                {"epochs2", c.train.epochs2},
                {"batch_scans2", c.train.batch_scans2},
                {"surface_points_per_scan", c.train.surface_points_per_scan},
                {"lr2", c.train.lr2},
                {"lr_latent", c.train.lr_latent},
                {"lambda_d", c.train.lambda_d},
                {"lambda_l", c.train.lambda_l},
                {"lambda_r", c.train.lambda_r},
                {"lambda_p", c.train.lambda_p},
                {"lambda_e", c.train.lambda_e},
                {"lambda_c", c.train.lambda_c},
                {"lambda_n", c.train.lambda_n},
                {"lambda_inner", c.train.lambda_inner},
                {"aux_first_epoch", c.train.aux_first_epoch},
                {"aux_points", c.train.aux_points},
                {"ablation", ablation_name(c.train.ablation)},
                {"image_views", c.train.image_views},
                {"image_resolution", c.train.image_resolution},
                {"cache_mesh_resolution", c.train.cache_mesh_resolution},
                {"probe_points", c.train.probe_points}};
  j["fit"] = {{"iterations", c.fit.iterations},
              {"lr", c.fit.lr},
              {"points_per_iter", c.fit.points_per_iter},
              {"fit_points", c.fit.fit_points},
              {"fit_surface_points", c.fit.fit_surface_points},
              {"lambda_c", c.fit.lambda_c},
              {"lambda_n", c.fit.lambda_n},
              {"lambda_reg_shape", c.fit.lambda_reg_shape},
              {"lambda_reg_detail", c.fit.lambda_reg_detail},
              {"lambda_reg_color", c.fit.lambda_reg_color},
              {"eval_resolution", c.fit.eval_resolution},
              {"face_radius", c.fit.face_radius},
              {"metric_tau", c.fit.metric_tau},
              {"metric_samples", c.fit.metric_samples}};
  j["correspondence"] = {{"max_iter", c.correspondence.max_iter},
                         {"tol", c.correspondence.tol},
                         {"polish_iters", c.correspondence.polish_iters},
                         {"select_max_occupancy", c.correspondence.select_max_occupancy}};
  j["render"] = {{"views", c.render.views}, {"resolution", c.render.resolution}};
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  return j;
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("dims")) c.dims = dims_from_json(j["dims"]);
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data.subjects = d.value("subjects", c.data.subjects);
    c.data.expressions = d.value("expressions", c.data.expressions);
    c.data.subdivisions = d.value("subdivisions", c.data.subdivisions);
    c.data.model_seed = d.value("model_seed", c.data.model_seed);
    c.data.beta_scale = d.value("beta_scale", c.data.beta_scale);
    c.data.psi_scale = d.value("psi_scale", c.data.psi_scale);
    c.data.jaw_min = d.value("jaw_min", c.data.jaw_min);
    c.data.jaw_max = d.value("jaw_max", c.data.jaw_max);
    c.data.neck_scale = d.value("neck_scale", c.data.neck_scale);
    if (d.contains("counts")) {
      const auto& cc = d["counts"];
      c.data.counts.near_surface = cc.value("near_surface", c.data.counts.near_surface);
      c.data.counts.uniform = cc.value("uniform", c.data.counts.uniform);
      c.data.counts.surface = cc.value("surface", c.data.counts.surface);
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.train.epochs1 = t.value("epochs1", c.train.epochs1);
    c.train.batch_scans1 = t.value("batch_scans1", c.train.batch_scans1);
    c.train.points_per_scan = t.value("points_per_scan", c.train.points_per_scan);
    c.train.deshape_verts = t.value("deshape_verts", c.train.deshape_verts);
    c.train.lr1 = t.value("lr1", c.train.lr1);
    c.train.epochs2 = t.value("epochs2", c.train.epochs2);
    c.train.batch_scans2 = t.value("batch_scans2", c.train.batch_scans2);
    c.train.surface_points_per_scan =
        t.value("surface_points_per_scan", c.train.surface_points_per_scan);
    c.train.lr2 = t.value("lr2", c.train.lr2);
    c.train.lr_latent = t.value("lr_latent", c.train.lr_latent);
    c.train.lambda_d = t.value("lambda_d", c.train.lambda_d);
    c.train.lambda_l = t.value("lambda_l", c.train.lambda_l);
    c.train.lambda_r = t.value("lambda_r", c.train.lambda_r);
    c.train.lambda_p = t.value("lambda_p", c.train.lambda_p);
    c.train.lambda_e = t.value("lambda_e", c.train.lambda_e);
    c.train.lambda_c = t.value("lambda_c", c.train.lambda_c);
    c.train.lambda_n = t.value("lambda_n", c.train.lambda_n);
    c.train.lambda_inner = t.value("lambda_inner", c.train.lambda_inner);
    c.train.aux_first_epoch = t.value("aux_first_epoch", c.train.aux_first_epoch);
    c.train.aux_points = t.value("aux_points", c.train.aux_points);
    c.train.ablation = ablation_from_name(t.value("ablation", std::string("none")));
    c.train.image_views = t.value("image_views", c.train.image_views);
    c.train.image_resolution = t.value("image_resolution", c.train.image_resolution);
    c.train.cache_mesh_resolution =
        t.value("cache_mesh_resolution", c.train.cache_mesh_resolution);
    c.train.probe_points = t.value("probe_points", c.train.probe_points);
  }
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    c.fit.iterations = f.value("iterations", c.fit.iterations);
    c.fit.lr = f.value("lr", c.fit.lr);
    c.fit.points_per_iter = f.value("points_per_iter", c.fit.points_per_iter);
    c.fit.fit_points = f.value("fit_points", c.fit.fit_points);
    c.fit.fit_surface_points = f.value("fit_surface_points", c.fit.fit_surface_points);
    c.fit.lambda_c = f.value("lambda_c", c.fit.lambda_c);
    c.fit.lambda_n = f.value("lambda_n", c.fit.lambda_n);
    c.fit.lambda_reg_shape = f.value("lambda_reg_shape", c.fit.lambda_reg_shape);
    c.fit.lambda_reg_detail = f.value("lambda_reg_detail", c.fit.lambda_reg_detail);
    c.fit.lambda_reg_color = f.value("lambda_reg_color", c.fit.lambda_reg_color);
    c.fit.eval_resolution = f.value("eval_resolution", c.fit.eval_resolution);
    c.fit.face_radius = f.value("face_radius", c.fit.face_radius);
    c.fit.metric_tau = f.value("metric_tau", c.fit.metric_tau);
    c.fit.metric_samples = f.value("metric_samples", c.fit.metric_samples);
  }
  if (j.contains("correspondence")) {
    const auto& r = j["correspondence"];
    c.correspondence.max_iter = r.value("max_iter", c.correspondence.max_iter);
    c.correspondence.tol = r.value("tol", c.correspondence.tol);
    c.correspondence.polish_iters = r.value("polish_iters", c.correspondence.polish_iters);
    c.correspondence.select_max_occupancy =
        r.value("select_max_occupancy", c.correspondence.select_max_occupancy);
  }
  if (j.contains("render")) {
    c.render.views = j["render"].value("views", c.render.views);
    c.render.resolution = j["render"].value("resolution", c.render.resolution);
  }
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  return c;
}

}  // namespace

std::string PipelineConfig::to_json() const { return full_json(*this).dump(2) + "\n"; }

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  return config_from_json(json::parse(text));
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  return from_json(read_text_file(path));
}

void PipelineConfig::save(const std::string& path) const { write_text_file(path, to_json()); }

void PipelineConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  HG_CHECK_ARG(eq != std::string::npos, "override must be key=value: " + assignment);
  std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  std::string pointer = "/";
  for (char ch : key) pointer += (ch == '.') ? '/' : ch;
  json j = full_json(*this);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;  // plain string
  }
  try {
    j.at(json::json_pointer(pointer));  // key must already exist
  } catch (const json::exception&) {
    throw std::invalid_argument("unknown config key: " + key);
  }
  j[json::json_pointer(pointer)] = parsed;
  *this = config_from_json(j);
}

}  // namespace headgen
