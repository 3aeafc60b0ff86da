#include "pfsm/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "pfsm/errors.hpp"
#include "pfsm/gradcheck.hpp"

namespace pfsm {

namespace {

namespace fs = std::filesystem;

// removes everything registered unless release() was reached
class ArtifactGuard {
 public:
  ~ArtifactGuard() {
    if (armed_) {
      for (const auto& p : paths_) {
        std::error_code ec;
        fs::remove(p, ec);
      }
    }
  }
  void track(const fs::path& p) { paths_.push_back(p); }
  void release() { armed_ = false; }

 private:
  std::vector<fs::path> paths_;
  bool armed_ = true;
};

// shortest decimal form that parses back to the same double
std::string fmt_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

nlohmann::json round_to_json(const RoundReport& rr, Preset preset) {
  nlohmann::json j;
  j["schema"] = kRoundLogSchema;
  j["preset"] = preset_name(preset);
  j["round"] = rr.round;
  j["payload_names"] = rr.payload_names;
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& st : rr.clients) {
    nlohmann::json c;
    c["id"] = st.client_id;
    c["ce"] = st.personalized_loss.ce;
    c["lmoe"] = st.personalized_loss.lmoe;
    c["kd"] = st.personalized_loss.kd;
    c["loss_personalized"] = st.personalized_loss.total;
    c["loss_global"] = st.global_loss;
    c["dice_personalized"] = st.dice_personalized;
    c["iou_personalized"] = st.iou_personalized;
    c["dice_global"] = st.dice_global;
    c["iou_global"] = st.iou_global;
    c["bytes_up"] = st.payload_up_bytes;
    c["bytes_down"] = st.payload_down_bytes;
    c["weight"] = st.agg_weight;
    clients.push_back(std::move(c));
  }
  j["clients"] = std::move(clients);
  return j;
}

void log_round(std::ostream& log, Preset preset, const RoundReport& rr, int rounds_total) {
  double loss_p = 0, loss_g = 0, dice_p = 0, dice_g = 0;
  double n = static_cast<double>(rr.clients.size());
  for (const auto& st : rr.clients) {
    loss_p += st.personalized_loss.total / n;
    loss_g += st.global_loss / n;
    dice_p += st.dice_personalized / n;
    dice_g += st.dice_global / n;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "[%s] round %d/%d loss_p=%.4f loss_g=%.4f dice_p=%.4f dice_g=%.4f",
                preset_name(preset).c_str(), rr.round + 1, rounds_total, loss_p, loss_g,
                dice_p, dice_g);
  log << buf << std::endl;
}

// long-format rows for one finished experiment: per-client personalized and
// global rows, the two averages, then the unseen domain
std::vector<CsvRow> experiment_rows(const ExperimentReport& rep) {
  std::map<std::string, std::uint64_t> up_by_client;
  for (const auto& rr : rep.rounds) {
    for (const auto& st : rr.clients) up_by_client[st.client_id] += st.payload_up_bytes;
  }
  std::string preset = preset_name(rep.preset);
  std::vector<CsvRow> rows;
  int n_total_p = 0, n_total_g = 0;
  for (std::size_t i = 0; i < rep.final_personalized.size(); ++i) {
    rows.push_back({preset, rep.final_personalized[i],
                    up_by_client[rep.final_personalized[i].client_id]});
    n_total_p += rep.final_personalized[i].n_samples;
  }
  for (const auto& e : rep.final_global) {
    rows.push_back({preset, e, up_by_client[e.client_id]});
    n_total_g += e.n_samples;
  }
  EvalResult avg_p{"average", ModelKind::personalized, rep.mean_personalized_dice,
                   rep.mean_personalized_iou, n_total_p};
  EvalResult avg_g{"average", ModelKind::global_model, rep.mean_global_dice,
                   rep.mean_global_iou, n_total_g};
  rows.push_back({preset, avg_p, rep.total_payload_up_bytes});
  rows.push_back({preset, avg_g, rep.total_payload_up_bytes});
  rows.push_back({preset, rep.unseen, rep.total_payload_up_bytes});
  return rows;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw FormatError("short write to " + path.string());
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

std::string results_csv_header() {
  return std::string("# schema=") + kResultsCsvSchema +
         "\npreset,client,model,dice,iou,n_samples,payload_up_bytes\n";
}

std::string results_csv_line(const CsvRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%s,%d,%llu", row.preset.c_str(),
                row.result.client_id.c_str(), model_kind_name(row.result.model_kind).c_str(),
                fmt_double(row.result.dice).c_str(), fmt_double(row.result.iou).c_str(),
                row.result.n_samples,
                static_cast<unsigned long long>(row.payload_up_bytes));
  return buf;
}

CsvRow parse_results_csv_line(const std::string& line) {
  auto fields = split_fields(line, ',');
  if (fields.size() != 7) {
    throw FormatError("results row has " + std::to_string(fields.size()) +
                      " fields, expected 7: " + line);
  }
  CsvRow row;
  row.preset = fields[0];
  row.result.client_id = fields[1];
  if (fields[2] == "personalized") row.result.model_kind = ModelKind::personalized;
  else if (fields[2] == "global") row.result.model_kind = ModelKind::global_model;
  else throw FormatError("unknown model kind \"" + fields[2] + "\" in results row");
  char* end = nullptr;
  row.result.dice = std::strtod(fields[3].c_str(), &end);
  if (end == nullptr || *end != '\0') throw FormatError("bad dice value: " + fields[3]);
  row.result.iou = std::strtod(fields[4].c_str(), &end);
  if (end == nullptr || *end != '\0') throw FormatError("bad iou value: " + fields[4]);
  row.result.n_samples = static_cast<int>(std::strtol(fields[5].c_str(), &end, 10));
  if (end == nullptr || *end != '\0') throw FormatError("bad n_samples value: " + fields[5]);
  row.payload_up_bytes = std::strtoull(fields[6].c_str(), &end, 10);
  if (end == nullptr || *end != '\0') throw FormatError("bad payload bytes: " + fields[6]);
  return row;
}

int threads_from_env() {
  const char* raw = std::getenv("PFSM_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(raw, &end, 10);
  if (end == nullptr || *end != '\0' || v < 0) {
    throw ConfigError(std::string("PFSM_THREADS must be a non-negative integer, got \"") +
                      raw + "\"");
  }
  return v <= 1 ? 1 : static_cast<int>(v);
}

int cmd_run(const ExperimentConfig& cfg, int threads, std::ostream& log) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  ArtifactGuard guard;
  fs::path ndjson_path = fs::path(cfg.out_dir) / "rounds.ndjson";
  fs::path csv_path = fs::path(cfg.out_dir) / "results.csv";
  fs::path ckpt_path = fs::path(cfg.out_dir) / "global.pfsm";
  guard.track(ndjson_path);
  guard.track(csv_path);
  guard.track(ckpt_path);

  std::ofstream ndjson(ndjson_path, std::ios::binary | std::ios::trunc);
  if (!ndjson) throw FormatError("cannot open " + ndjson_path.string() + " for writing");

  ExperimentReport rep = run_experiment(
      cfg.preset, cfg.fed, cfg.model, cfg.clients, cfg.unseen, threads,
      [&](const RoundReport& rr) {
        ndjson << round_to_json(rr, cfg.preset).dump() << "\n";
        log_round(log, cfg.preset, rr, cfg.fed.rounds);
      });
  ndjson.close();
  if (!ndjson) throw FormatError("short write to " + ndjson_path.string());

  std::string csv = results_csv_header();
  for (const auto& row : experiment_rows(rep)) csv += results_csv_line(row) + "\n";
  write_text_file(csv_path, csv);
  save_checkpoint(rep.final_global_params, ckpt_path.string());

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "done: mean dice personalized=%.4f global=%.4f unseen=%.4f uploaded=%llu bytes",
                rep.mean_personalized_dice, rep.mean_global_dice, rep.unseen.dice,
                static_cast<unsigned long long>(rep.total_payload_up_bytes));
  log << buf << std::endl;
  guard.release();
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, int threads, std::ostream& log) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  ArtifactGuard guard;
  fs::path csv_path = fs::path(cfg.out_dir) / "results.csv";
  guard.track(csv_path);

  std::string csv = results_csv_header();
  for (Preset preset : all_presets()) {
    fs::path ndjson_path =
        fs::path(cfg.out_dir) / ("rounds_" + preset_name(preset) + ".ndjson");
    guard.track(ndjson_path);
    std::ofstream ndjson(ndjson_path, std::ios::binary | std::ios::trunc);
    if (!ndjson) throw FormatError("cannot open " + ndjson_path.string() + " for writing");

    ExperimentReport rep = run_experiment(
        preset, cfg.fed, cfg.model, cfg.clients, cfg.unseen, threads,
        [&](const RoundReport& rr) {
          ndjson << round_to_json(rr, preset).dump() << "\n";
          log_round(log, preset, rr, cfg.fed.rounds);
        });
    ndjson.close();
    if (!ndjson) throw FormatError("short write to " + ndjson_path.string());
    for (const auto& row : experiment_rows(rep)) csv += results_csv_line(row) + "\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "[%s] mean dice personalized=%.4f global=%.4f unseen=%.4f",
                  preset_name(preset).c_str(), rep.mean_personalized_dice, rep.mean_global_dice,
                  rep.unseen.dice);
    log << buf << std::endl;
  }
  write_text_file(csv_path, csv);
  guard.release();
  return 0;
}

int cmd_gradcheck(std::ostream& log) {
  auto reports = run_gradcheck_suite();
  bool all_passed = true;
  for (const auto& r : reports) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "gradcheck %-32s max_rel=%.3e tol=%.0e %s",
                  r.op_name.c_str(), r.max_rel_error, r.tolerance,
                  r.passed ? "PASS" : "FAIL");
    log << buf << std::endl;
    all_passed = all_passed && r.passed;
  }
  log << (all_passed ? "gradient checks passed" : "gradient checks FAILED") << std::endl;
  return all_passed ? 0 : 1;
}

int cmd_gendata(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out_dir);
  std::vector<DatasetSpec> specs = cfg.clients;
  specs.push_back(cfg.unseen);
  for (const auto& spec : specs) {
    auto samples = generate_client(spec, cfg.model.image_size, cfg.model.mask_scale);
    std::string dir = out_dir + "/" + spec.client_id;
    write_dataset(spec, samples, dir);
    log << "wrote " << samples.size() << " samples to " << dir << std::endl;
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const ExperimentConfig& cfg, std::ostream& log) {
  ParamMap params = load_checkpoint(checkpoint_path);
  Variant variant = Variant::base;
  for (const auto& [name, p] : params) {
    if (name.find(".lmoe.") != std::string::npos) {
      variant = Variant::lora_moe;
      break;
    }
    if (name.find(".lora.") != std::string::npos) variant = Variant::lora;
  }
  ModelConfig mc = cfg.model;
  mc.variant = variant;
  SegModel model = SegModel::build(mc, cfg.seed, false);
  model.load_params(params);

  auto [spec, samples] = read_dataset(data_dir, mc.mask_scale);
  EvalResult r = evaluate(model, samples, spec.client_id, ModelKind::global_model);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "client=%s variant=%s n=%d dice=%.6f iou=%.6f",
                r.client_id.c_str(), variant_name(variant).c_str(), r.n_samples, r.dice,
                r.iou);
  log << buf << std::endl;
  return 0;
}

}  // namespace pfsm
