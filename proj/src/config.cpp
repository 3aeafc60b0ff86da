#include "pfsm/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "pfsm/errors.hpp"

namespace pfsm {

namespace {

struct Value {
  enum class Kind { string, integer, floating, boolean } kind = Kind::string;
  std::string s;
  long long i = 0;
  double d = 0.0;
  bool b = false;
};

struct ParseCtx {
  std::string source;
  int line = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
  }
};

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

Value parse_value(const std::string& raw, const ParseCtx& ctx) {
  Value v;
  if (raw.empty()) ctx.fail("missing value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') ctx.fail("unterminated string");
    v.kind = Value::Kind::string;
    v.s = raw.substr(1, raw.size() - 2);
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = Value::Kind::boolean;
    v.b = raw == "true";
    return v;
  }
  char* end = nullptr;
  errno = 0;
  long long i = std::strtoll(raw.c_str(), &end, 10);
  if (errno == 0 && end != nullptr && *end == '\0') {
    v.kind = Value::Kind::integer;
    v.i = i;
    v.d = static_cast<double>(i);
    return v;
  }
  errno = 0;
  double d = std::strtod(raw.c_str(), &end);
  if (errno == 0 && end != nullptr && *end == '\0') {
    v.kind = Value::Kind::floating;
    v.d = d;
    return v;
  }
  ctx.fail("cannot parse value \"" + raw + "\"");
}

long long as_int(const Value& v, const ParseCtx& ctx) {
  if (v.kind != Value::Kind::integer) ctx.fail("expected an integer");
  return v.i;
}

std::uint64_t as_u64(const Value& v, const ParseCtx& ctx) {
  if (v.kind != Value::Kind::integer || v.i < 0) ctx.fail("expected a non-negative integer");
  return static_cast<std::uint64_t>(v.i);
}

double as_double(const Value& v, const ParseCtx& ctx) {
  if (v.kind != Value::Kind::integer && v.kind != Value::Kind::floating) {
    ctx.fail("expected a number");
  }
  return v.d;
}

std::string as_string(const Value& v, const ParseCtx& ctx) {
  if (v.kind != Value::Kind::string) ctx.fail("expected a quoted string");
  return v.s;
}

void apply_root(ExperimentConfig& cfg, const std::string& key, const Value& v,
                const ParseCtx& ctx) {
  if (key == "seed") {
    cfg.seed = as_u64(v, ctx);
  } else if (key == "preset") {
    cfg.preset = preset_from_name(as_string(v, ctx));
  } else if (key == "out_dir") {
    cfg.out_dir = as_string(v, ctx);
  } else {
    ctx.fail("unknown key \"" + key + "\" at top level");
  }
}

void apply_fed(FedConfig& fed, const std::string& key, const Value& v, const ParseCtx& ctx) {
  if (key == "rounds") fed.rounds = static_cast<int>(as_int(v, ctx));
  else if (key == "local_epochs_personalized")
    fed.local_epochs_personalized = static_cast<int>(as_int(v, ctx));
  else if (key == "local_epochs_global")
    fed.local_epochs_global = static_cast<int>(as_int(v, ctx));
  else if (key == "batch_size") fed.batch_size = static_cast<int>(as_int(v, ctx));
  else if (key == "learning_rate") fed.learning_rate = as_double(v, ctx);
  else if (key == "beta1") fed.beta1 = as_double(v, ctx);
  else if (key == "beta2") fed.beta2 = as_double(v, ctx);
  else if (key == "train_fraction") fed.train_fraction = as_double(v, ctx);
  else if (key == "lambda_lmoe") fed.loss_weights.lambda_lmoe = as_double(v, ctx);
  else if (key == "lambda_kd") fed.loss_weights.lambda_kd = as_double(v, ctx);
  else if (key == "tau") fed.loss_weights.tau = as_double(v, ctx);
  else ctx.fail("unknown key \"" + key + "\" in [fed]");
}

void apply_model(ModelConfig& m, const std::string& key, const Value& v, const ParseCtx& ctx) {
  if (key == "image_size") m.image_size = static_cast<int>(as_int(v, ctx));
  else if (key == "patch_size") m.patch_size = static_cast<int>(as_int(v, ctx));
  else if (key == "embed_dim") m.embed_dim = static_cast<int>(as_int(v, ctx));
  else if (key == "depth") m.depth = static_cast<int>(as_int(v, ctx));
  else if (key == "heads") m.heads = static_cast<int>(as_int(v, ctx));
  else if (key == "mask_scale") m.mask_scale = static_cast<int>(as_int(v, ctx));
  else if (key == "rank") m.rank = static_cast<int>(as_int(v, ctx));
  else if (key == "alpha") m.alpha = as_double(v, ctx);
  else if (key == "experts") m.experts = static_cast<int>(as_int(v, ctx));
  else if (key == "top_k") m.top_k = static_cast<int>(as_int(v, ctx));
  else ctx.fail("unknown key \"" + key + "\" in [model]");
}

void apply_dataset(DatasetSpec& d, const std::string& key, const Value& v,
                   const ParseCtx& ctx) {
  if (key == "id") d.client_id = as_string(v, ctx);
  else if (key == "n_samples") d.n_samples = static_cast<int>(as_int(v, ctx));
  else if (key == "shape_family") d.shape_family = shape_family_from_name(as_string(v, ctx));
  else if (key == "gain") d.gain = as_double(v, ctx);
  else if (key == "bias") d.bias = as_double(v, ctx);
  else if (key == "gamma") d.gamma = as_double(v, ctx);
  else if (key == "noise_sigma") d.noise_sigma = as_double(v, ctx);
  else if (key == "background") d.background_texture = background_from_name(as_string(v, ctx));
  else if (key == "seed") d.seed = as_u64(v, ctx);
  else ctx.fail("unknown key \"" + key + "\" in a dataset table");
}

std::vector<DatasetSpec> default_roster() {
  std::vector<DatasetSpec> clients(4);
  clients[0].client_id = "c0_plain";
  clients[0].shape_family = ShapeFamily::ellipse;
  clients[0].gain = 1.0;
  clients[0].bias = 0.0;
  clients[0].gamma = 1.0;
  clients[0].noise_sigma = 0.02;
  clients[0].background_texture = BackgroundTexture::flat;
  clients[0].seed = 101;

  clients[1].client_id = "c1_dim";
  clients[1].shape_family = ShapeFamily::blob;
  clients[1].gain = 0.8;
  clients[1].bias = -0.05;
  clients[1].gamma = 1.6;
  clients[1].noise_sigma = 0.03;
  clients[1].background_texture = BackgroundTexture::gradient;
  clients[1].seed = 202;

  clients[2].client_id = "c2_inverted";
  clients[2].shape_family = ShapeFamily::ring;
  clients[2].gain = -0.9;
  clients[2].bias = 0.95;
  clients[2].gamma = 1.0;
  clients[2].noise_sigma = 0.02;
  clients[2].background_texture = BackgroundTexture::speckle;
  clients[2].seed = 303;

  clients[3].client_id = "c3_bright";
  clients[3].shape_family = ShapeFamily::ellipse;
  clients[3].gain = 1.1;
  clients[3].bias = 0.05;
  clients[3].gamma = 0.6;
  clients[3].noise_sigma = 0.04;
  clients[3].background_texture = BackgroundTexture::gradient;
  clients[3].seed = 404;
  return clients;
}

DatasetSpec default_unseen() {
  DatasetSpec u;
  u.client_id = "unseen_blob";
  u.shape_family = ShapeFamily::blob;
  u.gain = 0.95;
  u.bias = 0.0;
  u.gamma = 1.1;
  u.noise_sigma = 0.02;
  u.background_texture = BackgroundTexture::flat;
  u.seed = 909;
  return u;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (clients.size() < 2) {
    throw ValidationError("a federated run needs at least 2 clients, got " +
                          std::to_string(clients.size()));
  }
  std::set<std::string> ids;
  for (const auto& c : clients) {
    c.validate();
    if (!ids.insert(c.client_id).second) {
      throw ValidationError("duplicate client id \"" + c.client_id + "\"");
    }
  }
  unseen.validate();
  model.validate();
  fed.validate();
  if (out_dir.empty()) throw ValidationError("out_dir must be non-empty");
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.clients = default_roster();
  cfg.unseen = default_unseen();
  cfg.fed.seed = cfg.seed;
  return cfg;
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& source_name) {
  ExperimentConfig cfg;
  ParseCtx ctx{source_name, 0};

  enum class Section { root, fed, model, unseen, client } section = Section::root;
  bool saw_unseen = false;

  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++ctx.line;
    std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line == "[[clients]]") {
        cfg.clients.emplace_back();
        section = Section::client;
      } else if (line == "[fed]") {
        section = Section::fed;
      } else if (line == "[model]") {
        section = Section::model;
      } else if (line == "[unseen]") {
        section = Section::unseen;
        saw_unseen = true;
      } else if (line == "[clients]") {
        ctx.fail("clients is an array of tables, use [[clients]]");
      } else {
        ctx.fail("unknown section " + line);
      }
      continue;
    }

    std::size_t eq = line.find('=');
    if (eq == std::string::npos) ctx.fail("expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string raw_value = trim(line.substr(eq + 1));
    if (key.empty()) ctx.fail("empty key");
    Value v = parse_value(raw_value, ctx);

    switch (section) {
      case Section::root: apply_root(cfg, key, v, ctx); break;
      case Section::fed: apply_fed(cfg.fed, key, v, ctx); break;
      case Section::model: apply_model(cfg.model, key, v, ctx); break;
      case Section::unseen: apply_dataset(cfg.unseen, key, v, ctx); break;
      case Section::client: apply_dataset(cfg.clients.back(), key, v, ctx); break;
    }
  }

  if (cfg.clients.empty()) cfg.clients = default_roster();
  if (!saw_unseen) cfg.unseen = default_unseen();
  cfg.fed.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, path);
}

}  // namespace pfsm
