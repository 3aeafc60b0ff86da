#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pfsm/adapters.hpp"
#include "pfsm/nn.hpp"
#include "pfsm/tensor.hpp"

namespace pfsm {

enum class Variant { base, lora, lora_moe };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 32;
  int depth = 2;
  int heads = 2;
  int mask_scale = 4;
  Variant variant = Variant::lora;
  int rank = 4;
  double alpha = 16.0;
  int experts = 4;
  int top_k = 2;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int mask_size() const { return image_size / mask_scale; }
  void validate() const;
};

struct ForwardOut {
  Tensor logits;   // (mask, mask)
  Tensor moe_aux;  // scalar; mean balance penalty over hooks, 0 without MoE
};

// Who owns which weights in the federation.
struct ParamPartition {
  std::set<std::string> frozen;         // encoder base, never trained
  std::set<std::string> global_shared;  // LoRA A/B + decoder, aggregated
  std::set<std::string> local_private;  // gates + experts, never uploaded
};

// Frozen ViT-style patch encoder with adapter hooks on the Q and V
// projections of every block, plus a small conv decoder from the patch grid
// to a one-channel logit map. The prompt pathway is a fixed zero embedding.
class SegModel {
 public:
  SegModel() = default;

  // Deterministic: every parameter is drawn from the stream
  // (seed, "init/<param name>"), so two builds with equal (config, seed)
  // match bitwise. trainable=false builds a frozen shell (teacher / eval).
  static SegModel build(const ModelConfig& config, std::uint64_t seed,
                        bool trainable = true);

  ForwardOut forward(const Tensor& image) const;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  bool trainable() const { return trainable_; }

  const ParamMap& base_params() const { return base_; }
  const ParamMap& adapter_params() const { return adapter_; }
  const ParamMap& decoder_params() const { return decoder_; }
  ParamMap trainable_params() const;  // adapters + decoder
  ParamMap all_params() const;

  ParamPartition partition() const;

  // Copy values in by name; names must exist and shapes must match.
  void load_params(const ParamMap& values);
  ParamMap extract(const std::set<std::string>& names) const;
  SegModel clone(bool trainable) const;

 private:
  struct Block {
    LayerNormParams ln1, ln2;
    AttentionWeights attn;
    Linear fc1, fc2;
    std::optional<LoraAdapter> q_lora, v_lora;
    std::optional<LmoeAdapter> q_lmoe, v_lmoe;
  };

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  bool trainable_ = true;

  Linear patch_proj_;
  Tensor prompt_embed_;
  std::vector<Block> blocks_;
  LayerNormParams encoder_ln_;
  Conv2dLayer dec1_, dec2_, dec_out_;
  int up1_ = 1, up2_ = 1;

  ParamMap base_, adapter_, decoder_;
};

ParamPartition partition_params(const SegModel& model);

struct CostReport {
  std::uint64_t trainable_params = 0;
  std::uint64_t transfer_params = 0;
  std::uint64_t forward_flops = 0;
};

// Analytic parameter/FLOP accounting for one forward pass on one image.
// Matmuls count 2*n*m*p, convs 2*co*ci*k^2*h*w; rearrangements are free.
CostReport count_params_flops(const SegModel& model);

struct TransferTableRow {
  std::string model;
  std::uint64_t forward_flops = 0;
  std::uint64_t params = 0;
};

// Communication table: full fine-tune vs adapter schemes. "ours" shares the
// LoRA/decoder set only, whatever the client-side variant carries.
std::vector<TransferTableRow> transfer_table(const ModelConfig& config);

// Binary checkpoint: "PFSM", version byte, u32 count, then per entry
// u32 name length, name bytes, u8 rank, u32 dims, little-endian f64 data.
void save_checkpoint(const ParamMap& params, const std::string& path);
ParamMap load_checkpoint(const std::string& path);
std::uint64_t checkpoint_bytes(const ParamMap& params);

// FNV-1a over names, shapes and raw value bytes; order-independent input
// (map order is already sorted by name).
std::uint64_t param_hash(const ParamMap& params);

}  // namespace pfsm
