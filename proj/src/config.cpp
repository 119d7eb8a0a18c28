#include "icf/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace icf {

namespace {

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t to_size(const std::string& v) {
  std::size_t pos = 0;
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer");
  const auto out = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a non-negative integer");
  return static_cast<std::size_t>(out);
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("expected true/false");
}

Field size_field(std::size_t& x) {
  return {[&x](const std::string& v) { x = to_size(v); }, [&x] { return std::to_string(x); }};
}
Field u64_field(std::uint64_t& x) {
  return {[&x](const std::string& v) { x = to_size(v); }, [&x] { return std::to_string(x); }};
}
Field double_field(double& x) {
  return {[&x](const std::string& v) { x = to_double(v); }, [&x] { return fmt(x); }};
}
Field bool_field(bool& x) {
  return {[&x](const std::string& v) { x = to_bool(v); }, [&x] { return std::string(x ? "true" : "false"); }};
}
Field string_field(std::string& x) {
  return {[&x](const std::string& v) { x = v; }, [&x] { return x; }};
}
Field template_field(PromptTemplate& x) {
  return {[&x](const std::string& v) {
            if (v == "desk") x = PromptTemplate::kDesk;
            else if (v == "full") x = PromptTemplate::kFull;
            else throw std::invalid_argument("expected desk or full");
          },
          [&x] { return std::string(x == PromptTemplate::kDesk ? "desk" : "full"); }};
}

void train_fields(std::map<std::string, Field>& f, const std::string& pre, TrainConfig& t) {
  f[pre + "lr"] = double_field(t.lr);
  f[pre + "accum"] = size_field(t.accum);
  f[pre + "clip_norm"] = double_field(t.clip_norm);
  f[pre + "steps"] = size_field(t.steps);
  f[pre + "chunk_size"] = size_field(t.chunk_size);
  f[pre + "checkpoint_every"] = size_field(t.checkpoint_every);
  f[pre + "weight_decay"] = double_field(t.weight_decay);
  f[pre + "beta1"] = double_field(t.beta1);
  f[pre + "beta2"] = double_field(t.beta2);
  f[pre + "prompt_template"] = template_field(t.prompt_template);
}

std::map<std::string, Field> fields(RunConfig& c) {
  std::map<std::string, Field> f;
  f["seed"] = u64_field(c.seed);
  f["corpus"] = string_field(c.corpus);
  f["corpus_tokens"] = size_field(c.corpus_tokens);
  f["out_dir"] = string_field(c.out_dir);
  f["context_length"] = size_field(c.context_length);
  f["eval_contexts"] = size_field(c.eval_contexts);

  f["lm.hidden"] = size_field(c.lm.hidden);
  f["lm.layers"] = size_field(c.lm.layers);
  f["lm.heads"] = size_field(c.lm.heads);
  f["lm.intermediate"] = size_field(c.lm.intermediate);
  f["lm.max_positions"] = size_field(c.lm.max_positions);
  f["lm.theta_base"] = double_field(c.lm.theta_base);
  f["lm.rms_eps"] = double_field(c.lm.rms_eps);

  f["lm_train.steps"] = size_field(c.lm_train.steps);
  f["lm_train.batch"] = size_field(c.lm_train.batch);
  f["lm_train.window"] = size_field(c.lm_train.window);
  f["lm_train.lr"] = double_field(c.lm_train.lr);
  f["lm_train.weight_decay"] = double_field(c.lm_train.weight_decay);
  f["lm_train.clip_norm"] = double_field(c.lm_train.clip_norm);
  f["lm_train.eval_windows"] = size_field(c.lm_train.eval_windows);
  f["lm_train.log_every"] = size_field(c.lm_train.log_every);
  f["lm_train.repeat_fraction"] = double_field(c.lm_train.repeat_fraction);
  f["lm_train.kv_fraction"] = double_field(c.lm_train.kv_fraction);

  f["icf.digest_tokens"] = size_field(c.icf.digest_tokens);
  f["icf.layers"] = size_field(c.icf.layers);
  f["icf.heads"] = size_field(c.icf.heads);
  f["icf.hidden"] = size_field(c.icf.hidden);
  f["icf.intermediate"] = size_field(c.icf.intermediate);
  f["icf.window"] = size_field(c.icf.window);
  f["icf.theta_base"] = double_field(c.icf.theta_base);
  f["icf.rms_eps"] = double_field(c.icf.rms_eps);
  f["icf.rope"] = bool_field(c.icf.rope);

  train_fields(f, "pretrain.", c.pretrain);
  train_fields(f, "finetune.", c.finetune);

  f["kv.n_pairs"] = size_field(c.kv.n_pairs);
  f["kv.key_len"] = size_field(c.kv.key_len);
  f["kv.val_len"] = size_field(c.kv.val_len);
  return f;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  pretrain.stage = Stage::kPretrain;
  finetune.stage = Stage::kFinetune;
  finetune.steps = 2000;
  finetune.lr = 5e-4;
}

void RunConfig::validate() const {
  lm.validate();
  icf.validate();
  pretrain.validate();
  finetune.validate();
  if (icf.hidden != lm.hidden) throw std::invalid_argument("config: icf.hidden must equal lm.hidden");
  if (context_length == 0) throw std::invalid_argument("config: context_length must be positive");
  if (lm_train.window > lm.max_positions) throw std::invalid_argument("config: lm_train.window exceeds lm.max_positions");
  if (pretrain.chunk_size > icf.window || finetune.chunk_size > icf.window) {
    throw std::invalid_argument("config: chunk_size exceeds icf.window");
  }
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  auto f = fields(c);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto it = f.find(key);
    if (it == f.end()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second.set(value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value for " + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

RunConfig resolve_run_config(const std::string& path) {
  if (!path.empty()) return load_run_config(path);
  if (const char* env = std::getenv(kConfigEnv); env && *env) return load_run_config(env);
  RunConfig c;
  c.validate();
  return c;
}

std::string resolved_text(const RunConfig& config) {
  RunConfig copy = config;
  std::string out;
  for (const auto& [key, field] : fields(copy)) out += key + " = " + field.get() + "\n";
  return out;
}

std::vector<std::string> run_config_keys() {
  RunConfig c;
  std::vector<std::string> keys;
  for (const auto& [key, field] : fields(c)) keys.push_back(key);
  return keys;
}

TokenSeq load_corpus(const RunConfig& config) {
  if (config.corpus.empty()) return gen_corpus(config.seed, config.corpus_tokens);
  return encode(read_file(config.corpus));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace icf
