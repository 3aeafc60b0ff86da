#include "pfsm/federation.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

#include "pfsm/errors.hpp"
#include "pfsm/optim.hpp"
#include "pfsm/rng.hpp"

namespace pfsm {

namespace {

// Static strided partition: client i goes to thread i % T. Each client's
// work only touches its own state and rng streams, so the schedule cannot
// change any result, only the wall time.
void parallel_over_clients(std::size_t n, int threads,
                           const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t t_count = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex err_mu;
  pool.reserve(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (std::size_t i = t; i < n; i += t_count) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     const std::string& client_id, char stage,
                                     int round, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::string label = "shuffle/" + client_id + "/" + stage + "/r" + std::to_string(round) +
                      "/e" + std::to_string(epoch);
  Pcg32 rng = make_stream(seed, label);
  rng.shuffle(idx);
  return idx;
}

// Minibatch Adam over the model's trainable set. The teacher, when present,
// only supplies logits; it never receives gradients.
TrainTrace train_local(SegModel& model, const std::vector<Sample>& data,
                       const FedConfig& cfg, const LossWeights& weights,
                       const SegModel* teacher, int epochs, const std::string& client_id,
                       char stage, int round) {
  TrainTrace trace;
  if (data.empty() || epochs <= 0) return trace;
  Adam opt(model.trainable_params(), cfg.learning_rate, cfg.beta1, cfg.beta2);
  Tensor no_teacher;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto order = epoch_order(data.size(), cfg.seed, client_id, stage, round, epoch);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      opt.zero_grad();
      Tensor batch_total;
      StepLoss step;
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = data[order[b]];
        ForwardOut out = model.forward(s.image);
        Tensor teacher_logits = no_teacher;
        if (weights.lambda_kd > 0.0 && teacher != nullptr) {
          teacher_logits = teacher->forward(s.image).logits;
        }
        PersonalizedLossParts parts = personalized_loss_parts(
            out.logits, s.downsampled_mask, teacher_logits, out.moe_aux, weights);
        step.ce += parts.ce.item();
        step.lmoe += parts.lmoe.item();
        step.kd += parts.kd.item();
        batch_total = batch_total.defined() ? add(batch_total, parts.total) : parts.total;
      }
      double inv = 1.0 / static_cast<double>(end - start);
      Tensor batch_loss = scale(batch_total, inv);
      backward(batch_loss);
      opt.step();
      step.ce *= inv;
      step.lmoe *= inv;
      step.kd *= inv;
      step.total = batch_loss.item();
      trace.steps.push_back(step);
    }
  }
  return trace;
}

void check_covers(const ParamMap& params, const std::set<std::string>& required,
                  const char* what) {
  for (const auto& name : required) {
    if (params.find(name) == params.end()) {
      throw ProtocolError(std::string(what) + " is missing parameter \"" + name + "\"");
    }
  }
}

}  // namespace

void FedConfig::validate() const {
  if (rounds <= 0) throw ValidationError("rounds must be positive");
  if (local_epochs_personalized <= 0 || local_epochs_global <= 0) {
    throw ValidationError("local epoch counts must be positive");
  }
  if (batch_size <= 0) throw ValidationError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("adam betas must lie in [0, 1)");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("train_fraction must be in (0, 1)");
  }
  loss_weights.validate();
}

std::string preset_name(Preset p) {
  switch (p) {
    case Preset::A: return "A";
    case Preset::B: return "B";
    case Preset::C: return "C";
    case Preset::D: return "D";
    case Preset::E: return "E";
    case Preset::Ours: return "ours";
  }
  throw ValidationError("unknown preset value");
}

Preset preset_from_name(const std::string& s) {
  if (s == "A" || s == "a") return Preset::A;
  if (s == "B" || s == "b") return Preset::B;
  if (s == "C" || s == "c") return Preset::C;
  if (s == "D" || s == "d") return Preset::D;
  if (s == "E" || s == "e") return Preset::E;
  if (s == "ours" || s == "Ours" || s == "OURS") return Preset::Ours;
  throw ValidationError("unknown preset \"" + s + "\" (expected A, B, C, D, E or ours)");
}

const std::vector<Preset>& all_presets() {
  static const std::vector<Preset> order = {Preset::A,  Preset::B, Preset::C,
                                            Preset::D,  Preset::E, Preset::Ours};
  return order;
}

PresetTraits preset_traits(Preset p) {
  PresetTraits t;
  switch (p) {
    case Preset::A:
      t = {Variant::lora, Variant::lora, false, false, false};
      break;
    case Preset::B:
      t = {Variant::lora_moe, Variant::lora_moe, false, false, false};
      break;
    case Preset::C:
      t = {Variant::lora_moe, Variant::lora_moe, true, false, false};
      break;
    case Preset::D:
      t = {Variant::lora, Variant::lora, true, true, true};
      break;
    case Preset::E:
      t = {Variant::lora_moe, Variant::lora_moe, true, true, true};
      break;
    case Preset::Ours:
      t = {Variant::lora_moe, Variant::lora, true, true, true};
      break;
  }
  return t;
}

StepLoss TrainTrace::mean() const {
  StepLoss m;
  if (steps.empty()) return m;
  for (const auto& s : steps) {
    m.ce += s.ce;
    m.lmoe += s.lmoe;
    m.kd += s.kd;
    m.total += s.total;
  }
  double inv = 1.0 / static_cast<double>(steps.size());
  m.ce *= inv;
  m.lmoe *= inv;
  m.kd *= inv;
  m.total *= inv;
  return m;
}

ClientState make_client(const DatasetSpec& spec, const ModelConfig& model_cfg,
                        const PresetTraits& traits, const FedConfig& cfg) {
  ClientState c;
  c.client_id = spec.client_id;
  auto samples = generate_client(spec, model_cfg.image_size, model_cfg.mask_scale);
  auto parts = split(samples, cfg.train_fraction, spec.seed);
  c.train = std::move(parts.first);
  c.test = std::move(parts.second);
  c.n_train = static_cast<int>(c.train.size());

  ModelConfig personal_cfg = model_cfg;
  personal_cfg.variant = traits.client_variant;
  c.personalized_model = SegModel::build(personal_cfg, cfg.seed, true);
  if (traits.dual_model) {
    ModelConfig global_cfg = model_cfg;
    global_cfg.variant = traits.global_variant;
    c.global_model = SegModel::build(global_cfg, cfg.seed, true);
  }
  return c;
}

ServerState make_server(const ModelConfig& model_cfg, const PresetTraits& traits,
                        std::uint64_t model_seed) {
  ServerState s;
  s.global_cfg = model_cfg;
  s.global_cfg.variant = traits.dual_model ? traits.global_variant : traits.client_variant;
  s.model_seed = model_seed;
  SegModel reference = SegModel::build(s.global_cfg, model_seed, true);
  s.aggregated_global = reference.extract(upload_name_set(reference, traits));
  return s;
}

std::set<std::string> upload_name_set(const SegModel& model, const PresetTraits& traits) {
  if (traits.personalized) return model.partition().global_shared;
  std::set<std::string> names;
  for (const auto& [name, p] : model.trainable_params()) names.insert(name);
  return names;
}

TrainTrace client_personalized_update(ClientState& client, const SegModel* teacher,
                                      const FedConfig& cfg, const PresetTraits& traits,
                                      int round) {
  if (!traits.dual_model) {
    throw ProtocolError("personalized stage only exists for dual-model presets");
  }
  LossWeights w = cfg.loss_weights;
  if (!traits.distillation) w.lambda_kd = 0.0;
  if (w.lambda_kd > 0.0 && teacher == nullptr) {
    throw ProtocolError("distillation preset needs a teacher model");
  }
  return train_local(client.personalized_model, client.train, cfg, w, teacher,
                     cfg.local_epochs_personalized, client.client_id, 'p', round);
}

GlobalUpdateResult client_global_update(ClientState& client, const ParamMap& incoming,
                                        const FedConfig& cfg, const PresetTraits& traits,
                                        int round) {
  SegModel& model = traits.dual_model ? client.global_model : client.personalized_model;
  check_covers(incoming, upload_name_set(model, traits), "incoming aggregate");
  model.load_params(incoming);

  // plain segmentation objective; the balance term is kept alive for routed
  // models so the shared experts cannot collapse, and is exactly zero for
  // plain-LoRA models
  LossWeights w = cfg.loss_weights;
  w.lambda_kd = 0.0;
  GlobalUpdateResult r;
  r.trace = train_local(model, client.train, cfg, w, nullptr, cfg.local_epochs_global,
                        client.client_id, 'g', round);
  r.payload = model.extract(upload_name_set(model, traits));

  if (traits.personalized) {
    const auto private_names = model.partition().local_private;
    for (const auto& [name, p] : r.payload) {
      if (private_names.count(name) != 0) {
        throw ProtocolError("local-private parameter \"" + name +
                            "\" leaked into an upload payload");
      }
    }
  }
  return r;
}

ParamMap server_aggregate(const std::vector<ClientPayload>& payloads) {
  if (payloads.empty()) throw ProtocolError("nothing to aggregate");
  std::vector<const ClientPayload*> order;
  order.reserve(payloads.size());
  for (const auto& p : payloads) order.push_back(&p);
  std::sort(order.begin(), order.end(), [](const ClientPayload* a, const ClientPayload* b) {
    return a->client_id < b->client_id;
  });

  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i]->n_train <= 0) {
      throw ProtocolError("client " + order[i]->client_id + " has no training samples");
    }
    if (i > 0 && order[i]->client_id == order[i - 1]->client_id) {
      throw ProtocolError("duplicate client_id \"" + order[i]->client_id + "\" in payloads");
    }
    total += static_cast<double>(order[i]->n_train);
  }

  const ParamMap& first = order[0]->params;
  for (const auto* p : order) {
    if (p->params.size() != first.size()) {
      throw ProtocolError("payload key sets differ between clients");
    }
    for (const auto& [name, t] : first) {
      auto it = p->params.find(name);
      if (it == p->params.end()) {
        throw ProtocolError("client " + p->client_id + " payload is missing \"" + name + "\"");
      }
      if (it->second.shape() != t.shape()) {
        throw ProtocolError("shape mismatch for \"" + name + "\" in client " + p->client_id);
      }
    }
  }

  ParamMap out;
  for (const auto& [name, t] : first) {
    std::vector<double> acc(t.values().size(), 0.0);
    for (const auto* p : order) {
      double w = static_cast<double>(p->n_train) / total;
      const auto& v = p->params.at(name).values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * v[i];
    }
    out.emplace(name, Tensor::from_vector(t.shape(), std::move(acc)));
  }
  return out;
}

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const FedConfig& cfg, const PresetTraits& traits, int threads) {
  if (clients.empty()) throw ProtocolError("round needs at least one client");
  const ParamMap snapshot = server.aggregated_global;
  const int round = server.round_index;

  std::vector<TrainTrace> personal_traces(clients.size());
  if (traits.dual_model) {
    // frozen teacher shared by every client: the round-start aggregate
    SegModel teacher = SegModel::build(server.global_cfg, server.model_seed, false);
    check_covers(snapshot, upload_name_set(teacher, traits), "teacher aggregate");
    teacher.load_params(snapshot);
    parallel_over_clients(clients.size(), threads, [&](std::size_t i) {
      personal_traces[i] =
          client_personalized_update(clients[i], &teacher, cfg, traits, round);
    });
  }

  std::vector<GlobalUpdateResult> updates(clients.size());
  parallel_over_clients(clients.size(), threads, [&](std::size_t i) {
    updates[i] = client_global_update(clients[i], snapshot, cfg, traits, round);
  });

  std::vector<ClientPayload> payloads;
  payloads.reserve(clients.size());
  double total_n = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    payloads.push_back({clients[i].client_id, clients[i].n_train, updates[i].payload});
    total_n += static_cast<double>(clients[i].n_train);
  }
  server.aggregated_global = server_aggregate(payloads);
  server.round_index = round + 1;

  SegModel aggregate_eval = SegModel::build(server.global_cfg, server.model_seed, false);
  aggregate_eval.load_params(server.aggregated_global);

  RoundReport report;
  report.round = round;
  for (const auto& [name, t] : updates[0].payload) report.payload_names.push_back(name);
  std::uint64_t down_bytes = checkpoint_bytes(snapshot);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ClientRoundStats st;
    st.client_id = clients[i].client_id;
    st.personalized_loss =
        traits.dual_model ? personal_traces[i].mean() : updates[i].trace.mean();
    st.global_loss = updates[i].trace.mean().total;

    const SegModel& personal_view =
        traits.personalized ? clients[i].personalized_model : aggregate_eval;
    EvalResult ep = evaluate(personal_view, clients[i].test, clients[i].client_id,
                             ModelKind::personalized);
    EvalResult eg = evaluate(aggregate_eval, clients[i].test, clients[i].client_id,
                             ModelKind::global_model);
    st.dice_personalized = ep.dice;
    st.iou_personalized = ep.iou;
    st.dice_global = eg.dice;
    st.iou_global = eg.iou;
    st.payload_up_bytes = checkpoint_bytes(updates[i].payload);
    st.payload_down_bytes = down_bytes;
    st.agg_weight = static_cast<double>(clients[i].n_train) / total_n;
    report.clients.push_back(std::move(st));
  }
  return report;
}

ExperimentReport run_experiment(Preset preset, const FedConfig& cfg,
                                const ModelConfig& model_cfg,
                                const std::vector<DatasetSpec>& client_specs,
                                const DatasetSpec& unseen_spec, int threads,
                                const std::function<void(const RoundReport&)>& on_round) {
  cfg.validate();
  model_cfg.validate();
  if (client_specs.empty()) throw ValidationError("experiment needs at least one client spec");

  PresetTraits traits = preset_traits(preset);
  ServerState server = make_server(model_cfg, traits, cfg.seed);
  std::vector<ClientState> clients;
  clients.reserve(client_specs.size());
  for (const auto& spec : client_specs) {
    clients.push_back(make_client(spec, model_cfg, traits, cfg));
  }

  ExperimentReport report;
  report.preset = preset;
  for (const auto& c : clients) {
    report.frozen_hash_before.push_back(param_hash(c.personalized_model.base_params()));
  }

  for (int r = 0; r < cfg.rounds; ++r) {
    RoundReport rr = run_round(server, clients, cfg, traits, threads);
    for (const auto& st : rr.clients) report.total_payload_up_bytes += st.payload_up_bytes;
    if (on_round) on_round(rr);
    report.rounds.push_back(std::move(rr));
  }

  SegModel aggregate_eval = SegModel::build(server.global_cfg, server.model_seed, false);
  aggregate_eval.load_params(server.aggregated_global);
  report.final_global_params = aggregate_eval.all_params();
  for (auto& c : clients) {
    const SegModel& personal_view = traits.personalized ? c.personalized_model : aggregate_eval;
    report.final_personalized.push_back(
        evaluate(personal_view, c.test, c.client_id, ModelKind::personalized));
    report.final_global.push_back(
        evaluate(aggregate_eval, c.test, c.client_id, ModelKind::global_model));
  }
  auto unseen_samples =
      generate_client(unseen_spec, model_cfg.image_size, model_cfg.mask_scale);
  report.unseen = evaluate(aggregate_eval, unseen_samples, unseen_spec.client_id,
                           ModelKind::global_model);

  double n = static_cast<double>(clients.size());
  for (const auto& e : report.final_personalized) {
    report.mean_personalized_dice += e.dice / n;
    report.mean_personalized_iou += e.iou / n;
  }
  for (const auto& e : report.final_global) {
    report.mean_global_dice += e.dice / n;
    report.mean_global_iou += e.iou / n;
  }

  report.frozen_base_intact = true;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    report.frozen_hash_after.push_back(param_hash(clients[i].personalized_model.base_params()));
    if (report.frozen_hash_after[i] != report.frozen_hash_before[i]) {
      report.frozen_base_intact = false;
    }
  }
  return report;
}

}  // namespace pfsm
