#include "pfsm/segmodel.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pfsm {

namespace {

constexpr int kMlpRatio = 4;
constexpr char kMagic[4] = {'P', 'F', 'S', 'M'};
constexpr std::uint8_t kVersion = 1;

std::string block_prefix(int i) { return "block" + std::to_string(i) + "."; }

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::lora: return "lora";
    case Variant::lora_moe: return "lora_moe";
  }
  throw ValidationError("variant_name: bad variant");
}

Variant variant_from_name(const std::string& s) {
  if (s == "base") return Variant::base;
  if (s == "lora") return Variant::lora;
  if (s == "lora_moe") return Variant::lora_moe;
  throw ConfigError("unknown variant '" + s + "'");
}

void ModelConfig::validate() const {
  if (image_size <= 0) throw ConfigError("model.image_size must be positive");
  if (patch_size <= 0) throw ConfigError("model.patch_size must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("model.image_size must be divisible by patch_size");
  if (embed_dim <= 0) throw ConfigError("model.embed_dim must be positive");
  if (heads <= 0) throw ConfigError("model.heads must be positive");
  if (embed_dim % heads != 0)
    throw ConfigError("model.embed_dim must be divisible by heads");
  if (embed_dim % 4 != 0)
    throw ConfigError("model.embed_dim must be divisible by 4 (decoder halving)");
  if (depth <= 0) throw ConfigError("model.depth must be positive");
  if (mask_scale <= 0) throw ConfigError("model.mask_scale must be positive");
  if (image_size % mask_scale != 0)
    throw ConfigError("model.image_size must be divisible by mask_scale");
  if (patch_size % mask_scale != 0)
    throw ConfigError("model.patch_size must be divisible by mask_scale");
  int up = patch_size / mask_scale;
  if (up != 1 && up != 2 && up != 4)
    throw ConfigError("model: patch_size / mask_scale must be 1, 2 or 4");
  if (rank <= 0 || rank >= embed_dim)
    throw ConfigError("model.rank must lie in [1, embed_dim)");
  if (alpha <= 0) throw ConfigError("model.alpha must be positive");
  if (experts <= 0) throw ConfigError("model.experts must be positive");
  if (top_k <= 0 || top_k > experts)
    throw ConfigError("model.top_k must lie in [1, experts]");
  if (variant == Variant::lora_moe) {
    for (int s : expert_scales(experts))
      if (grid() % s != 0)
        throw ConfigError("model: expert scale must divide the patch grid");
  }
}

SegModel SegModel::build(const ModelConfig& config, std::uint64_t seed,
                         bool trainable) {
  config.validate();
  SegModel m;
  m.cfg_ = config;
  m.seed_ = seed;
  m.trainable_ = trainable;
  const int d = config.embed_dim;
  const int p = config.patch_size;

  auto stream = [seed](const std::string& name) {
    return make_stream(seed, "init/" + name);
  };
  auto reg = [](ParamMap& map, const std::string& name, const Tensor& t) {
    map.emplace(name, t);
  };

  {
    auto s = stream("patch_embed.weight");
    m.patch_proj_ = Linear::create(p * p, d, s, false);
    reg(m.base_, "patch_embed.weight", m.patch_proj_.weight);
    reg(m.base_, "patch_embed.bias", m.patch_proj_.bias);
  }
  m.prompt_embed_ = Tensor::zeros({d}, false);
  reg(m.base_, "prompt.embed", m.prompt_embed_);

  for (int i = 0; i < config.depth; ++i) {
    Block b;
    std::string pre = block_prefix(i);
    b.ln1 = LayerNormParams::create(d, false);
    reg(m.base_, pre + "ln1.gamma", b.ln1.gamma);
    reg(m.base_, pre + "ln1.beta", b.ln1.beta);

    const char* proj_names[4] = {"q", "k", "v", "out"};
    Linear* projs[4] = {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.out};
    for (int j = 0; j < 4; ++j) {
      std::string base_name = pre + "attn." + proj_names[j];
      auto s = stream(base_name + ".weight");
      *projs[j] = Linear::create(d, d, s, false);
      reg(m.base_, base_name + ".weight", projs[j]->weight);
      reg(m.base_, base_name + ".bias", projs[j]->bias);
    }
    b.attn.heads = config.heads;

    b.ln2 = LayerNormParams::create(d, false);
    reg(m.base_, pre + "ln2.gamma", b.ln2.gamma);
    reg(m.base_, pre + "ln2.beta", b.ln2.beta);

    {
      auto s = stream(pre + "mlp.fc1.weight");
      b.fc1 = Linear::create(d, kMlpRatio * d, s, false);
      reg(m.base_, pre + "mlp.fc1.weight", b.fc1.weight);
      reg(m.base_, pre + "mlp.fc1.bias", b.fc1.bias);
    }
    {
      auto s = stream(pre + "mlp.fc2.weight");
      b.fc2 = Linear::create(kMlpRatio * d, d, s, false);
      reg(m.base_, pre + "mlp.fc2.weight", b.fc2.weight);
      reg(m.base_, pre + "mlp.fc2.bias", b.fc2.bias);
    }

    // Adapter hooks wrap the Q and V projections only. The LoRA pair keeps
    // the same wire names in both adapter variants so payloads line up.
    for (const char* target : {"q", "v"}) {
      std::string hook = pre + "attn." + target + ".";
      if (config.variant == Variant::lora) {
        auto s = stream(hook + "lora.A");
        LoraAdapter a = LoraAdapter::create(d, d, config.rank, config.alpha,
                                            hook + "lora", s, trainable);
        reg(m.adapter_, hook + "lora.A", a.A);
        reg(m.adapter_, hook + "lora.B", a.B);
        (std::string(target) == "q" ? b.q_lora : b.v_lora) = std::move(a);
      } else if (config.variant == Variant::lora_moe) {
        auto s = stream(hook + "lora.A");
        LmoeAdapter a =
            LmoeAdapter::create(d, d, config.rank, config.alpha, config.experts,
                                config.top_k, hook + "lmoe", s, trainable);
        reg(m.adapter_, hook + "lora.A", a.A);
        reg(m.adapter_, hook + "lora.B", a.B);
        reg(m.adapter_, hook + "lmoe.gate", a.gate_weights);
        for (int e = 0; e < config.experts; ++e) {
          std::string en = hook + "lmoe.expert" + std::to_string(e) + ".";
          reg(m.adapter_, en + "kernel", a.experts[e].kernel);
          reg(m.adapter_, en + "bias", a.experts[e].bias);
        }
        (std::string(target) == "q" ? b.q_lmoe : b.v_lmoe) = std::move(a);
      }
    }
    m.blocks_.push_back(std::move(b));
  }

  m.encoder_ln_ = LayerNormParams::create(d, false);
  reg(m.base_, "encoder_ln.gamma", m.encoder_ln_.gamma);
  reg(m.base_, "encoder_ln.beta", m.encoder_ln_.beta);

  int up = config.patch_size / config.mask_scale;
  m.up1_ = up >= 2 ? 2 : 1;
  m.up2_ = up / m.up1_;
  {
    auto s = stream("decoder.conv1.kernel");
    m.dec1_ = Conv2dLayer::create(d, d / 2, 3, 1, s, trainable);
    reg(m.decoder_, "decoder.conv1.kernel", m.dec1_.kernel);
    reg(m.decoder_, "decoder.conv1.bias", m.dec1_.bias);
  }
  {
    auto s = stream("decoder.conv2.kernel");
    m.dec2_ = Conv2dLayer::create(d / 2, d / 4, 3, 1, s, trainable);
    reg(m.decoder_, "decoder.conv2.kernel", m.dec2_.kernel);
    reg(m.decoder_, "decoder.conv2.bias", m.dec2_.bias);
  }
  {
    auto s = stream("decoder.out.kernel");
    m.dec_out_ = Conv2dLayer::create(d / 4, 1, 1, 0, s, trainable);
    reg(m.decoder_, "decoder.out.kernel", m.dec_out_.kernel);
    reg(m.decoder_, "decoder.out.bias", m.dec_out_.bias);
  }
  return m;
}

ForwardOut SegModel::forward(const Tensor& image) const {
  if (image.shape() != Shape{1, cfg_.image_size, cfg_.image_size})
    throw ShapeError("SegModel::forward: image must be (1, " +
                     std::to_string(cfg_.image_size) + ", " +
                     std::to_string(cfg_.image_size) + ")");
  const int g = cfg_.grid();
  std::vector<Tensor> aux;

  Tensor tok = patch_proj_.forward(patchify(image, cfg_.patch_size));
  tok = add_bias(tok, prompt_embed_);

  for (const Block& b : blocks_) {
    ProjHook q_hook, v_hook;
    auto lora_hook = [](const LoraAdapter& a) {
      return [&a](const Tensor& x, const Linear& base) {
        return add_bias(lora_forward(a, base.weight, x), base.bias);
      };
    };
    auto lmoe_hook = [g, &aux](const LmoeAdapter& a) {
      return [g, &aux, &a](const Tensor& x, const Linear& base) {
        LmoeResult r = lmoe_forward(a, base.weight, x, g, g);
        aux.push_back(load_balance_loss(r.gate_probs, r.decisions));
        return add_bias(r.output, base.bias);
      };
    };
    if (b.q_lora) q_hook = lora_hook(*b.q_lora);
    if (b.v_lora) v_hook = lora_hook(*b.v_lora);
    if (b.q_lmoe) q_hook = lmoe_hook(*b.q_lmoe);
    if (b.v_lmoe) v_hook = lmoe_hook(*b.v_lmoe);

    Tensor attn_out = multi_head_attention(b.ln1.forward(tok), b.attn, q_hook, v_hook);
    tok = add(tok, attn_out);
    Tensor mlp = b.fc2.forward(relu(b.fc1.forward(b.ln2.forward(tok))));
    tok = add(tok, mlp);
  }
  tok = encoder_ln_.forward(tok);

  Tensor x = tokens_to_grid(tok, g, g);
  x = resample(relu(dec1_.forward(x)), ResampleMode::nearest_up, up1_);
  x = resample(relu(dec2_.forward(x)), ResampleMode::nearest_up, up2_);
  Tensor logits = dec_out_.forward(x);

  ForwardOut out;
  out.logits = reshape(logits, {cfg_.mask_size(), cfg_.mask_size()});
  if (aux.empty()) {
    out.moe_aux = Tensor::scalar(0.0);
  } else {
    Tensor acc = aux[0];
    for (std::size_t i = 1; i < aux.size(); ++i) acc = add(acc, aux[i]);
    out.moe_aux = scale(acc, 1.0 / static_cast<double>(aux.size()));
  }
  return out;
}

ParamMap SegModel::trainable_params() const {
  ParamMap out = adapter_;
  out.insert(decoder_.begin(), decoder_.end());
  return out;
}

ParamMap SegModel::all_params() const {
  ParamMap out = base_;
  out.insert(adapter_.begin(), adapter_.end());
  out.insert(decoder_.begin(), decoder_.end());
  return out;
}

ParamPartition SegModel::partition() const { return partition_params(*this); }

ParamPartition partition_params(const SegModel& model) {
  ParamPartition part;
  for (const auto& [name, t] : model.base_params()) part.frozen.insert(name);
  for (const auto& [name, t] : model.adapter_params()) {
    if (name.find(".lmoe.") != std::string::npos)
      part.local_private.insert(name);
    else
      part.global_shared.insert(name);
  }
  for (const auto& [name, t] : model.decoder_params()) part.global_shared.insert(name);
  return part;
}

void SegModel::load_params(const ParamMap& values) {
  for (const auto& [name, src] : values) {
    ParamMap* maps[3] = {&base_, &adapter_, &decoder_};
    Tensor* dst = nullptr;
    for (ParamMap* map : maps) {
      auto it = map->find(name);
      if (it != map->end()) {
        dst = &it->second;
        break;
      }
    }
    if (!dst) throw ProtocolError("load_params: unknown parameter '" + name + "'");
    if (dst->shape() != src.shape())
      throw ProtocolError("load_params: shape mismatch for '" + name + "'");
    dst->raw_values() = src.values();
  }
}

ParamMap SegModel::extract(const std::set<std::string>& names) const {
  ParamMap all = all_params();
  ParamMap out;
  for (const std::string& name : names) {
    auto it = all.find(name);
    if (it == all.end())
      throw ProtocolError("extract: unknown parameter '" + name + "'");
    out.emplace(name, it->second.detach());
  }
  return out;
}

SegModel SegModel::clone(bool trainable) const {
  SegModel copy = build(cfg_, seed_, trainable);
  copy.load_params(all_params());
  return copy;
}

CostReport count_params_flops(const SegModel& model) {
  const ModelConfig& c = model.config();
  CostReport r;
  for (const auto& [n, t] : model.adapter_params()) r.trainable_params += t.numel();
  for (const auto& [n, t] : model.decoder_params()) r.trainable_params += t.numel();
  ParamMap all = model.all_params();
  for (const std::string& name : model.partition().global_shared)
    r.transfer_params += all.at(name).numel();

  const std::uint64_t t = c.tokens();
  const std::uint64_t d = c.embed_dim;
  const std::uint64_t hd = d / c.heads;
  const std::uint64_t g = c.grid();
  const std::uint64_t m = c.mask_size();

  std::uint64_t f = 2 * t * (std::uint64_t)(c.patch_size * c.patch_size) * d;
  std::uint64_t per_block = 4 * 2 * t * d * d              // q,k,v,out
                            + (std::uint64_t)c.heads * 2 * (2 * t * t * hd)  // scores, apply
                            + 2 * (2 * t * d * (kMlpRatio * d));             // mlp
  if (c.variant != Variant::base) {
    std::uint64_t hook = 2 * t * d * c.rank + 2 * t * (std::uint64_t)c.rank * d;
    if (c.variant == Variant::lora_moe) {
      hook += 2 * t * (std::uint64_t)c.rank * c.experts;  // gate
      for (int s : expert_scales(c.experts)) {
        std::uint64_t side = g / s;
        hook += 2 * (std::uint64_t)c.rank * c.rank * 9 * side * side;
      }
    }
    per_block += 2 * hook;  // q and v
  }
  f += (std::uint64_t)c.depth * per_block;

  int up = c.patch_size / c.mask_scale;
  int up1 = up >= 2 ? 2 : 1;
  f += 2 * (d / 2) * d * 9 * g * g;
  f += 2 * (d / 4) * (d / 2) * 9 * (g * up1) * (g * up1);
  f += 2 * 1 * (d / 4) * 1 * m * m;
  r.forward_flops = f;
  return r;
}

std::vector<TransferTableRow> transfer_table(const ModelConfig& config) {
  std::vector<TransferTableRow> rows;
  auto make = [&](Variant v) {
    ModelConfig c = config;
    c.variant = v;
    return SegModel::build(c, 0, false);
  };
  SegModel base = make(Variant::base);
  SegModel lora = make(Variant::lora);
  SegModel moe = make(Variant::lora_moe);

  std::uint64_t total = 0;
  for (const auto& [n, t] : base.all_params()) total += t.numel();

  TransferTableRow full{"full", count_params_flops(base).forward_flops, total};
  CostReport lr = count_params_flops(lora);
  CostReport mr = count_params_flops(moe);
  rows.push_back(full);
  rows.push_back({"lora", lr.forward_flops, lr.transfer_params});
  rows.push_back({"lora_moe", mr.forward_flops, mr.trainable_params});
  rows.push_back({"ours", mr.forward_flops, mr.transfer_params});
  return rows;
}

// ---- checkpoint io ----

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double d) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t off = 0;

  void need(std::size_t n, const char* what) {
    if (off + n > buf.size())
      throw FormatError(std::string("checkpoint: truncated ") + what +
                        " at byte offset " + std::to_string(off));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[off++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(off, n);
    off += n;
    return s;
  }
};

}  // namespace

std::uint64_t checkpoint_bytes(const ParamMap& params) {
  std::uint64_t n = 4 + 1 + 4;
  for (const auto& [name, t] : params)
    n += 4 + name.size() + 1 + 4 * t.shape().size() + 8 * static_cast<std::uint64_t>(t.numel());
  return n;
}

void save_checkpoint(const ParamMap& params, const std::string& path) {
  std::string buf;
  buf.reserve(checkpoint_bytes(params));
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    buf.push_back(static_cast<char>(t.shape().size()));
    for (int dim : t.shape()) put_u32(buf, static_cast<std::uint32_t>(dim));
    for (double v : t.values()) put_f64(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("checkpoint: short write to '" + path + "'");
}

ParamMap load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf};
  std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic at byte offset 0");
  std::uint8_t version = r.u8("version");
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  std::uint32_t count = r.u32("entry count");
  ParamMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = r.u32("name length");
    std::string name = r.bytes(name_len, "name");
    std::uint8_t rank = r.u8("rank");
    Shape shape;
    std::size_t numel = 1;
    for (int k = 0; k < rank; ++k) {
      std::uint32_t dim = r.u32("dimension");
      if (dim == 0)
        throw FormatError("checkpoint: zero dimension at byte offset " +
                          std::to_string(r.off - 4));
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    std::vector<double> data(numel);
    for (std::size_t k = 0; k < numel; ++k) data[k] = r.f64("value");
    out.emplace(std::move(name), Tensor::from_vector(std::move(shape), std::move(data)));
  }
  if (r.off != buf.size())
    throw FormatError("checkpoint: trailing bytes at byte offset " + std::to_string(r.off));
  return out;
}

std::uint64_t param_hash(const ParamMap& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix_byte = [&h](unsigned char b) {
    h ^= b;
    h *= 0x100000001b3ull;
  };
  for (const auto& [name, t] : params) {
    for (unsigned char c : name) mix_byte(c);
    mix_byte(0);
    for (int dim : t.shape())
      for (int i = 0; i < 4; ++i) mix_byte((static_cast<std::uint32_t>(dim) >> (8 * i)) & 0xff);
    for (double v : t.values()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix_byte((bits >> (8 * i)) & 0xff);
    }
  }
  return h;
}

}  // namespace pfsm
