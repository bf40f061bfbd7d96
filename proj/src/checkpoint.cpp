#include "headgen/checkpoint.hpp"

#include <json.hpp>

#include <filesystem>

namespace headgen {

std::vector<nn::Tensor*> AvatarModel::stage1_tensors() {
  std::vector<nn::Tensor*> out;
  canon.collect_stage1_params(out);
  def.collect_params(out);
  return out;
}

std::vector<nn::Tensor*> AvatarModel::stage2_tensors() {
  std::vector<nn::Tensor*> out;
  canon.collect_stage2_params(out);
  return out;
}

std::vector<nn::Tensor*> AvatarModel::all_tensors() {
  std::vector<nn::Tensor*> out = stage1_tensors();
  canon.collect_stage2_params(out);
  for (auto& e : latents.entries) {
    out.push_back(&e.z_shape);
    out.push_back(&e.z_detail);
    out.push_back(&e.z_color);
  }
  return out;
}

AvatarModel make_avatar_model(const ModelDims& dims, headmodel::TemplateModel rig,
                              const std::vector<std::string>& subjects, uint64_t latent_seed) {
  HG_CHECK_ARG(rig.n_beta() == dims.n_beta, "rig and dims disagree on n_beta");
  AvatarModel m;
  m.dims = dims;
  m.rig = std::move(rig);
  m.canon = canonical::make_canonical_model(dims);
  m.def = deform::make_deform_model(dims);
  m.latents = canonical::make_latent_table(dims, subjects, latent_seed);
  return m;
}

namespace {

constexpr uint32_t kParamsMagic = 0x52504748u;  // "HGPR"
constexpr uint32_t kLatentMagic = 0x544c4748u;  // "HGLT"
constexpr uint32_t kOptimMagic = 0x444f4748u;   // "HGOD"

void write_tensors(BinaryWriter& w, const std::vector<nn::Tensor*>& tensors) {
  w.write_u32(static_cast<uint32_t>(tensors.size()));
  for (const auto* t : tensors) {
    w.write_string(t->name);
    w.write_matrix(t->value);
  }
}

void read_tensors_into(BinaryReader& r, const std::vector<nn::Tensor*>& tensors) {
  const uint32_t count = r.read_u32();
  HG_CHECK(count == tensors.size(), "checkpoint manifest: tensor count mismatch");
  for (auto* t : tensors) {
    const std::string name = r.read_string();
    HG_CHECK(name == t->name, "checkpoint manifest: expected tensor " + t->name + ", found " +
                                  name);
    Mat value = r.read_matrix();
    HG_CHECK(value.rows() == t->value.rows() && value.cols() == t->value.cols(),
             "checkpoint manifest: shape mismatch for " + t->name);
    t->value = std::move(value);
    t->zero_grad();
  }
}

}  // namespace

void save_checkpoint(const std::string& dir, const AvatarModel& model,
                     const PipelineConfig& config, const CheckpointState& state,
                     const OptimStates* optim) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  config.save((fs::path(dir) / "config.json").string());
  {
    nlohmann::json j{{"stage1_done", state.stage1_done},
                     {"stage2_done", state.stage2_done},
                     {"epochs1", state.epochs1},
                     {"epochs2", state.epochs2}};
    write_text_file((fs::path(dir) / "state.json").string(), j.dump(2) + "\n");
  }
  headmodel::save_template_model(model.rig, (fs::path(dir) / "rig.bin").string());
  {
    BinaryWriter w((fs::path(dir) / "params.bin").string());
    w.write_u32(kParamsMagic);
    w.write_u32(1u);
    auto& m = const_cast<AvatarModel&>(model);
    std::vector<nn::Tensor*> nets = m.stage1_tensors();
    const auto s2 = m.stage2_tensors();
    nets.insert(nets.end(), s2.begin(), s2.end());
    write_tensors(w, nets);
  }
  {
    BinaryWriter w((fs::path(dir) / "latents.bin").string());
    w.write_u32(kLatentMagic);
    w.write_u32(1u);
    w.write_u32(static_cast<uint32_t>(model.latents.entries.size()));
    for (const auto& e : model.latents.entries) {
      w.write_string(e.subject_id);
      w.write_matrix(e.z_shape.value);
      w.write_matrix(e.z_detail.value);
      w.write_matrix(e.z_color.value);
    }
  }
  if (optim) {
    BinaryWriter w((fs::path(dir) / "optim.bin").string());
    w.write_u32(kOptimMagic);
    w.write_u32(1u);
    w.write_u32(static_cast<uint32_t>(optim->size()));
    for (const auto& [name, s] : *optim) {
      w.write_string(name);
      w.write_u64(static_cast<uint64_t>(s.t));
      w.write_matrix(s.m);
      w.write_matrix(s.v);
    }
  }
}

bool checkpoint_exists(const std::string& dir) {
  namespace fs = std::filesystem;
  return fs::exists(fs::path(dir) / "params.bin") && fs::exists(fs::path(dir) / "config.json");
}

AvatarModel load_checkpoint(const std::string& dir, PipelineConfig* config_out,
                            CheckpointState* state_out, OptimStates* optim_out) {
  namespace fs = std::filesystem;
  HG_CHECK_ARG(checkpoint_exists(dir), "no checkpoint at " + dir);
  const PipelineConfig config = PipelineConfig::load((fs::path(dir) / "config.json").string());
  if (config_out) *config_out = config;
  CheckpointState state;
  {
    const auto j = nlohmann::json::parse(read_text_file((fs::path(dir) / "state.json").string()));
    state.stage1_done = j.value("stage1_done", false);
    state.stage2_done = j.value("stage2_done", false);
    state.epochs1 = j.value("epochs1", 0);
    state.epochs2 = j.value("epochs2", 0);
  }
  if (state_out) *state_out = state;

  auto rig = headmodel::load_template_model((fs::path(dir) / "rig.bin").string());

  // subject list from the latent table
  std::vector<std::string> subjects;
  {
    BinaryReader r((fs::path(dir) / "latents.bin").string());
    HG_CHECK(r.read_u32() == kLatentMagic, "bad latent table file");
    HG_CHECK(r.read_u32() == 1u, "unsupported latent table version");
    const uint32_t count = r.read_u32();
    for (uint32_t i = 0; i < count; ++i) {
      subjects.push_back(r.read_string());
      r.read_matrix();
      r.read_matrix();
      r.read_matrix();
    }
  }
  AvatarModel model = make_avatar_model(config.dims, std::move(rig), subjects, 0);
  {
    BinaryReader r((fs::path(dir) / "params.bin").string());
    HG_CHECK(r.read_u32() == kParamsMagic, "bad params file");
    HG_CHECK(r.read_u32() == 1u, "unsupported params version");
    std::vector<nn::Tensor*> nets = model.stage1_tensors();
    const auto s2 = model.stage2_tensors();
    nets.insert(nets.end(), s2.begin(), s2.end());
    read_tensors_into(r, nets);
  }
  {
    BinaryReader r((fs::path(dir) / "latents.bin").string());
    r.read_u32();
    r.read_u32();
    const uint32_t count = r.read_u32();
    HG_CHECK(count == model.latents.entries.size(), "latent table count changed");
    for (uint32_t i = 0; i < count; ++i) {
      auto& e = model.latents.entries[i];
      HG_CHECK(r.read_string() == e.subject_id, "latent table order changed");
      e.z_shape.value = r.read_matrix();
      e.z_detail.value = r.read_matrix();
      e.z_color.value = r.read_matrix();
      e.z_shape.zero_grad();
      e.z_detail.zero_grad();
      e.z_color.zero_grad();
    }
  }
  if (optim_out) {
    optim_out->clear();
    const auto path = fs::path(dir) / "optim.bin";
    if (fs::exists(path)) {
      BinaryReader r(path.string());
      HG_CHECK(r.read_u32() == kOptimMagic, "bad optimizer state file");
      HG_CHECK(r.read_u32() == 1u, "unsupported optimizer state version");
      const uint32_t count = r.read_u32();
      for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.read_string();
        nn::AdamState s;
        s.t = static_cast<int64_t>(r.read_u64());
        s.m = r.read_matrix();
        s.v = r.read_matrix();
        (*optim_out)[name] = std::move(s);
      }
    }
  }
  return model;
}

uint64_t tensors_hash(const std::vector<const nn::Tensor*>& tensors) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* t : tensors) {
    h = fnv1a64(t->name.data(), t->name.size(), h);
    h = hash_matrix(t->value, h);
  }
  return h;
}

uint64_t stage1_params_hash(AvatarModel& model) {
  const auto tensors = model.stage1_tensors();
  std::vector<const nn::Tensor*> c(tensors.begin(), tensors.end());
  return tensors_hash(c);
}

uint64_t stage2_params_hash(AvatarModel& model) {
  const auto tensors = model.stage2_tensors();
  std::vector<const nn::Tensor*> c(tensors.begin(), tensors.end());
  return tensors_hash(c);
}

}  // namespace headgen
