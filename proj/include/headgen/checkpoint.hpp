#pragma once

#include "headgen/canonical.hpp"
#include "headgen/config.hpp"
#include "headgen/deform.hpp"
#include "headgen/headmodel.hpp"

#include <map>
#include <string>

namespace headgen {

// Everything a trained pipeline consists of: the rig asset, the canonical
// networks, the deformation networks, and the per-subject latent table.
struct AvatarModel {
  headmodel::TemplateModel rig;
  canonical::CanonicalModel canon;
  deform::DeformModel def;
  canonical::LatentTable latents;
  ModelDims dims;

  std::vector<nn::Tensor*> stage1_tensors();  // nets only, codes handled per subject
  std::vector<nn::Tensor*> stage2_tensors();
  std::vector<nn::Tensor*> all_tensors();     // nets + all latent codes
};

AvatarModel make_avatar_model(const ModelDims& dims, headmodel::TemplateModel rig,
                              const std::vector<std::string>& subjects, uint64_t latent_seed);

struct CheckpointState {
  bool stage1_done = false;
  bool stage2_done = false;
  int epochs1 = 0;
  int epochs2 = 0;
};

using OptimStates = std::map<std::string, nn::AdamState>;

// Directory layout: config.json, state.json, rig.bin, params.bin,
// latents.bin, optim.bin, metrics.jsonl (written by the trainer).
void save_checkpoint(const std::string& dir, const AvatarModel& model,
                     const PipelineConfig& config, const CheckpointState& state,
                     const OptimStates* optim = nullptr);
AvatarModel load_checkpoint(const std::string& dir, PipelineConfig* config = nullptr,
                            CheckpointState* state = nullptr, OptimStates* optim = nullptr);
bool checkpoint_exists(const std::string& dir);

// Content hash over every network parameter (stage-separation checks).
uint64_t tensors_hash(const std::vector<const nn::Tensor*>& tensors);
uint64_t stage1_params_hash(AvatarModel& model);
uint64_t stage2_params_hash(AvatarModel& model);

}  // namespace headgen
