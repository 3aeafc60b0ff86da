#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pfsm/data.hpp"
#include "pfsm/losses.hpp"
#include "pfsm/metrics.hpp"
#include "pfsm/segmodel.hpp"

namespace pfsm {

struct FedConfig {
  int rounds = 15;
  int local_epochs_personalized = 1;
  int local_epochs_global = 1;
  int batch_size = 4;
  double learning_rate = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double train_fraction = 0.9;
  LossWeights loss_weights;
  std::uint64_t seed = 42;

  void validate() const;
};

// A/B: classic FedAvg of one model (everything trainable is averaged).
// C: one local model per client; experts stay private, the rest is averaged.
// D/E: personalized model + global model per client, with distillation.
// Ours: personalized LoRA-MoE model distilled from a plain-LoRA global model.
enum class Preset { A, B, C, D, E, Ours };

std::string preset_name(Preset p);
Preset preset_from_name(const std::string& s);
const std::vector<Preset>& all_presets();

struct PresetTraits {
  Variant client_variant = Variant::lora;
  Variant global_variant = Variant::lora;
  bool personalized = false;  // any client state that survives aggregation
  bool distillation = false;  // stage-1 loss carries the kd term
  bool dual_model = false;    // separate personalized and global models
};

PresetTraits preset_traits(Preset p);

struct StepLoss {
  double ce = 0.0;
  double lmoe = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

struct TrainTrace {
  std::vector<StepLoss> steps;
  StepLoss mean() const;
};

struct ClientState {
  std::string client_id;
  int n_train = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
  SegModel personalized_model;  // the only model for single-model presets
  SegModel global_model;        // meaningful only when traits.dual_model
};

struct ServerState {
  int round_index = 0;
  ModelConfig global_cfg;       // architecture of the aggregated model
  std::uint64_t model_seed = 0;
  ParamMap aggregated_global;
};

ClientState make_client(const DatasetSpec& spec, const ModelConfig& model_cfg,
                        const PresetTraits& traits, const FedConfig& cfg);
ServerState make_server(const ModelConfig& model_cfg, const PresetTraits& traits,
                        std::uint64_t model_seed);

// The parameter names a client uploads under the given traits: the model's
// global_shared set when any state is personalized, every trainable
// parameter otherwise.
std::set<std::string> upload_name_set(const SegModel& model, const PresetTraits& traits);

// Stage 1 (dual-model presets): train the personalized model on the local
// split with ce + lambda_lmoe * balance + lambda_kd * kd against the frozen
// teacher. Nothing is uploaded from this stage.
TrainTrace client_personalized_update(ClientState& client, const SegModel* teacher,
                                      const FedConfig& cfg, const PresetTraits& traits,
                                      int round);

struct GlobalUpdateResult {
  ParamMap payload;
  TrainTrace trace;
};

// Stage 2: load the incoming aggregate, train the shared model (plain ce,
// plus the balance term when the model routes), and extract the upload set.
// Throws ProtocolError if a local-private name ever appears in the payload
// of a personalized preset.
GlobalUpdateResult client_global_update(ClientState& client, const ParamMap& incoming,
                                        const FedConfig& cfg, const PresetTraits& traits,
                                        int round);

struct ClientPayload {
  std::string client_id;
  int n_train = 0;
  ParamMap params;
};

// n_train-weighted average, accumulated in ascending client_id order so the
// result does not depend on arrival order.
ParamMap server_aggregate(const std::vector<ClientPayload>& payloads);

struct ClientRoundStats {
  std::string client_id;
  StepLoss personalized_loss;  // stage-1 means (stage-2 for single-model presets)
  double global_loss = 0.0;    // stage-2 mean total
  double dice_personalized = 0.0;
  double iou_personalized = 0.0;
  double dice_global = 0.0;
  double iou_global = 0.0;
  std::uint64_t payload_up_bytes = 0;
  std::uint64_t payload_down_bytes = 0;
  double agg_weight = 0.0;
};

struct RoundReport {
  int round = 0;
  std::vector<ClientRoundStats> clients;
  std::vector<std::string> payload_names;
};

// One full round: personalized stage, global stage, aggregation, then
// evaluation of every client against its own test split. `threads` > 1
// runs clients concurrently; results are identical for any thread count.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const FedConfig& cfg, const PresetTraits& traits, int threads);

struct ExperimentReport {
  Preset preset = Preset::Ours;
  std::vector<RoundReport> rounds;
  std::vector<EvalResult> final_personalized;
  std::vector<EvalResult> final_global;
  EvalResult unseen;
  double mean_personalized_dice = 0.0;
  double mean_personalized_iou = 0.0;
  double mean_global_dice = 0.0;
  double mean_global_iou = 0.0;
  std::uint64_t total_payload_up_bytes = 0;
  ParamMap final_global_params;  // full aggregate model, base included
  bool frozen_base_intact = false;
  std::vector<std::uint64_t> frozen_hash_before;
  std::vector<std::uint64_t> frozen_hash_after;
};

ExperimentReport run_experiment(
    Preset preset, const FedConfig& cfg, const ModelConfig& model_cfg,
    const std::vector<DatasetSpec>& client_specs, const DatasetSpec& unseen_spec,
    int threads, const std::function<void(const RoundReport&)>& on_round = {});

}  // namespace pfsm
