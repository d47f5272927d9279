#include "vqnqs/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace vqnqs {

namespace {

using nlohmann::json;

[[noreturn]] void fail(int line, const std::string& what) {
  throw ConfigError("line " + std::to_string(line) + ": " + what);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  return true;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// strips a trailing comment that starts outside any quoted string
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

json parse_scalar(const std::string& raw, int line) {
  const std::string v = trim(raw);
  if (v.empty()) fail(line, "empty value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') fail(line, "unterminated string");
    std::string out;
    for (size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\') {
        if (i + 2 >= v.size()) fail(line, "dangling escape");
        const char c = v[++i];
        if (c == '"' || c == '\\') out.push_back(c);
        else fail(line, std::string("unsupported escape '\\") + c + "'");
      } else if (v[i] == '"') {
        fail(line, "stray quote inside string");
      } else {
        out.push_back(v[i]);
      }
    }
    return json(out);
  }
  if (v == "true") return json(true);
  if (v == "false") return json(false);
  // integer?
  {
    size_t i = (v[0] == '+' || v[0] == '-') ? 1 : 0;
    bool all_digits = i < v.size();
    for (; i < v.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(v[i]))) {
        all_digits = false;
        break;
      }
    if (all_digits) {
      try {
        if (v[0] == '-') return json(std::stoll(v));
        return json(std::stoull(v));
      } catch (const std::exception&) {
        fail(line, "integer out of range: " + v);
      }
    }
  }
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) fail(line, "bad value '" + v + "'");
    return json(d);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    fail(line, "bad value '" + v + "'");
  }
}

json parse_value(const std::string& raw, int line) {
  const std::string v = trim(raw);
  if (v.empty()) fail(line, "empty value");
  if (v.front() != '[') return parse_scalar(v, line);
  if (v.back() != ']') fail(line, "unterminated array");
  json arr = json::array();
  const std::string body = v.substr(1, v.size() - 2);
  if (trim(body).empty()) return arr;
  std::stringstream ss(body);
  std::string cell;
  while (std::getline(ss, cell, ',')) arr.push_back(parse_scalar(cell, line));
  return arr;
}

}  // namespace

json parse_config_text(const std::string& text) {
  json root = json::object();
  json* section = &root;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(lineno, "missing ']' in section header");
      const std::string path = trim(s.substr(1, s.size() - 2));
      if (path.empty()) fail(lineno, "empty section name");
      section = &root;
      std::stringstream ss(path);
      std::string part;
      while (std::getline(ss, part, '.')) {
        part = trim(part);
        if (!valid_name(part)) fail(lineno, "bad section name '" + part + "'");
        json& next = (*section)[part];
        if (next.is_null()) next = json::object();
        if (!next.is_object())
          fail(lineno, "section '" + part + "' collides with a value");
        section = &next;
      }
      continue;
    }
    const size_t eq = s.find('=');
    if (eq == std::string::npos) fail(lineno, "expected 'key = value'");
    const std::string key = trim(s.substr(0, eq));
    if (!valid_name(key)) fail(lineno, "bad key '" + key + "'");
    if (section->contains(key)) fail(lineno, "duplicate key '" + key + "'");
    (*section)[key] = parse_value(s.substr(eq + 1), lineno);
  }
  return root;
}

namespace {

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError(path + " must be a table of key = value entries");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key " + path + key);
  }
}

template <typename T>
T get_or(const json& j, const std::string& path, const char* key, T def);

template <>
int get_or<int>(const json& j, const std::string& path, const char* key,
                int def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number_integer() && !j[key].is_number_unsigned())
    throw ConfigError(path + key + " must be an integer");
  return j[key].get<int>();
}

template <>
uint64_t get_or<uint64_t>(const json& j, const std::string& path,
                          const char* key, uint64_t def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number_integer() && !j[key].is_number_unsigned())
    throw ConfigError(path + key + " must be an integer");
  return j[key].get<uint64_t>();
}

template <>
double get_or<double>(const json& j, const std::string& path, const char* key,
                      double def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number()) throw ConfigError(path + key + " must be a number");
  return j[key].get<double>();
}

template <>
bool get_or<bool>(const json& j, const std::string& path, const char* key,
                  bool def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_boolean())
    throw ConfigError(path + key + " must be true or false");
  return j[key].get<bool>();
}

template <>
std::string get_or<std::string>(const json& j, const std::string& path,
                                const char* key, std::string def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_string()) throw ConfigError(path + key + " must be a string");
  return j[key].get<std::string>();
}

std::vector<int> get_ints(const json& j, const std::string& path,
                          const char* key, std::vector<int> def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_array())
    throw ConfigError(path + key + " must be an array of integers");
  std::vector<int> out;
  for (const auto& v : j[key]) {
    if (!v.is_number_integer() && !v.is_number_unsigned())
      throw ConfigError(path + key + " must be an array of integers");
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace

int SystemConfig::n_sites() const {
  int n = 1;
  for (int d : dims) n *= d;
  return n;
}

HamiltonianModel SystemConfig::build() const {
  HamiltonianModel h;
  if (kind == "tfim") h.kind = HamiltonianModel::Kind::tfim;
  else if (kind == "heisenberg") h.kind = HamiltonianModel::Kind::heisenberg;
  else throw ConfigError("system.kind must be 'tfim' or 'heisenberg'");
  if (dims.size() != 1 && dims.size() != 2)
    throw ConfigError("system.dims must have one (chain) or two (grid) entries");
  for (int d : dims)
    if (d < 1) throw ConfigError("system.dims entries must be positive");
  h.lattice = build_lattice(
      dims.size() == 1 ? Lattice::Kind::chain1d : Lattice::Kind::grid2d, dims);
  h.J = j;
  h.Gamma = gamma;
  h.marshall = marshall;
  return h;
}

void RunConfig::validate() const {
  (void)system.build();  // validates kind and dims
  model.validate();
  train.validate();
  if (model.n_sites != system.n_sites())
    throw ConfigError("model.n_sites must match the system size");
  if (measure.samples_per_batch < 1 || measure.batches < 1)
    throw ConfigError("measure counts must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir must be set");
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, "", {"system", "model", "train", "measure", "seed", "out_dir"});
  RunConfig c;
  c.seed = get_or<uint64_t>(j, "", "seed", 0);
  c.out_dir = get_or<std::string>(j, "", "out_dir", "run");

  const json sys = j.contains("system") ? j["system"] : json::object();
  check_keys(sys, "system.", {"kind", "dims", "j", "gamma", "marshall"});
  c.system.kind = get_or<std::string>(sys, "system.", "kind", "tfim");
  c.system.dims = get_ints(sys, "system.", "dims", {16});
  c.system.j = get_or<double>(sys, "system.", "j", 1.0);
  c.system.gamma = get_or<double>(sys, "system.", "gamma", 1.0);
  c.system.marshall = get_or<bool>(sys, "system.", "marshall", true);

  const json mdl = j.contains("model") ? j["model"] : json::object();
  check_keys(mdl, "model.",
             {"n_sites", "group_size", "d_hidden", "n_heads", "n_blocks",
              "trailing_half_block", "vq_enabled", "vq_heads", "vq_codebook",
              "vq_temperature", "vq_gumbel", "vq_init_scale", "phase_enabled"});
  ModelConfig md;
  md.group_size = get_or<int>(mdl, "model.", "group_size", md.group_size);
  md.d_hidden = get_or<int>(mdl, "model.", "d_hidden", md.d_hidden);
  md.n_heads = get_or<int>(mdl, "model.", "n_heads", md.n_heads);
  md.n_blocks = get_or<int>(mdl, "model.", "n_blocks", md.n_blocks);
  md.trailing_half_block = get_or<bool>(mdl, "model.", "trailing_half_block",
                                        md.trailing_half_block);
  md.vq_enabled = get_or<bool>(mdl, "model.", "vq_enabled", md.vq_enabled);
  md.vq_heads = get_or<int>(mdl, "model.", "vq_heads", md.vq_heads);
  md.vq_codebook = get_or<int>(mdl, "model.", "vq_codebook", md.vq_codebook);
  md.vq_temperature =
      get_or<double>(mdl, "model.", "vq_temperature", md.vq_temperature);
  md.vq_gumbel = get_or<bool>(mdl, "model.", "vq_gumbel", md.vq_gumbel);
  md.vq_init_scale =
      get_or<double>(mdl, "model.", "vq_init_scale", md.vq_init_scale);
  md.phase_enabled =
      get_or<bool>(mdl, "model.", "phase_enabled", md.phase_enabled);
  md.n_sites = c.system.n_sites();
  if (mdl.contains("n_sites") &&
      get_or<int>(mdl, "model.", "n_sites", md.n_sites) != md.n_sites)
    throw ConfigError("model.n_sites must match the system size");
  c.model = md;

  const json tr = j.contains("train") ? j["train"] : json::object();
  check_keys(tr, "train.",
             {"samples_per_step", "steps", "optimizer", "beta1", "beta2",
              "adam_eps", "learning_rate", "cosine_decay", "grad_clip", "seed",
              "vq_tau_start", "vq_tau_end", "vq_gumbel", "checkpoint_every",
              "log_every", "distill"});
  TrainConfig tc;
  tc.samples_per_step =
      get_or<int>(tr, "train.", "samples_per_step", tc.samples_per_step);
  tc.steps = get_or<int>(tr, "train.", "steps", tc.steps);
  tc.optimizer = get_or<std::string>(tr, "train.", "optimizer", tc.optimizer);
  tc.beta1 = get_or<double>(tr, "train.", "beta1", tc.beta1);
  tc.beta2 = get_or<double>(tr, "train.", "beta2", tc.beta2);
  tc.adam_eps = get_or<double>(tr, "train.", "adam_eps", tc.adam_eps);
  tc.learning_rate =
      get_or<double>(tr, "train.", "learning_rate", tc.learning_rate);
  tc.cosine_decay = get_or<bool>(tr, "train.", "cosine_decay", tc.cosine_decay);
  tc.grad_clip = get_or<double>(tr, "train.", "grad_clip", tc.grad_clip);
  tc.seed = get_or<uint64_t>(tr, "train.", "seed", c.seed);
  tc.vq_tau_start =
      get_or<double>(tr, "train.", "vq_tau_start", tc.vq_tau_start);
  tc.vq_tau_end = get_or<double>(tr, "train.", "vq_tau_end", tc.vq_tau_end);
  tc.vq_gumbel = get_or<bool>(tr, "train.", "vq_gumbel", tc.vq_gumbel);
  tc.checkpoint_every =
      get_or<int>(tr, "train.", "checkpoint_every", tc.checkpoint_every);
  tc.log_every = get_or<int>(tr, "train.", "log_every", tc.log_every);
  const json dl = tr.contains("distill") ? tr["distill"] : json::object();
  check_keys(dl, "train.distill.", {"teacher_checkpoint", "batch_size"});
  tc.distill.teacher_checkpoint = get_or<std::string>(
      dl, "train.distill.", "teacher_checkpoint", "");
  tc.distill.batch_size =
      get_or<int>(dl, "train.distill.", "batch_size", tc.distill.batch_size);
  tc.out_dir = c.out_dir;
  c.train = tc;

  const json ms = j.contains("measure") ? j["measure"] : json::object();
  check_keys(ms, "measure.", {"samples_per_batch", "batches"});
  c.measure.samples_per_batch = get_or<int>(ms, "measure.", "samples_per_batch",
                                            c.measure.samples_per_batch);
  c.measure.batches = get_or<int>(ms, "measure.", "batches", c.measure.batches);

  c.validate();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["system"] = {{"kind", c.system.kind},
                 {"dims", c.system.dims},
                 {"j", c.system.j},
                 {"gamma", c.system.gamma},
                 {"marshall", c.system.marshall}};
  j["model"] = {{"n_sites", c.model.n_sites},
                {"group_size", c.model.group_size},
                {"d_hidden", c.model.d_hidden},
                {"n_heads", c.model.n_heads},
                {"n_blocks", c.model.n_blocks},
                {"trailing_half_block", c.model.trailing_half_block},
                {"vq_enabled", c.model.vq_enabled},
                {"vq_heads", c.model.vq_heads},
                {"vq_codebook", c.model.vq_codebook},
                {"vq_temperature", c.model.vq_temperature},
                {"vq_gumbel", c.model.vq_gumbel},
                {"vq_init_scale", c.model.vq_init_scale},
                {"phase_enabled", c.model.phase_enabled}};
  j["train"] = {{"samples_per_step", c.train.samples_per_step},
                {"steps", c.train.steps},
                {"optimizer", c.train.optimizer},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"learning_rate", c.train.learning_rate},
                {"cosine_decay", c.train.cosine_decay},
                {"grad_clip", c.train.grad_clip},
                {"seed", c.train.seed},
                {"vq_tau_start", c.train.vq_tau_start},
                {"vq_tau_end", c.train.vq_tau_end},
                {"vq_gumbel", c.train.vq_gumbel},
                {"checkpoint_every", c.train.checkpoint_every},
                {"log_every", c.train.log_every},
                {"distill",
                 {{"teacher_checkpoint", c.train.distill.teacher_checkpoint},
                  {"batch_size", c.train.distill.batch_size}}}};
  j["measure"] = {{"samples_per_batch", c.measure.samples_per_batch},
                  {"batches", c.measure.batches}};
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  json tree;
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
    try {
      tree = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
  } else {
    tree = parse_config_text(text);
  }
  return run_config_from_json(tree);
}

void write_resolved_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  out << run_config_to_json(c).dump(2) << '\n';
  if (!out.good()) throw ConfigError("write failed for " + path);
}

}  // namespace vqnqs
