#pragma once

// Run configuration files: one `key = value` per line, '#' starts a comment.

#include <cstdint>
#include <string>
#include <vector>

#include "icf/icformer.hpp"
#include "icf/lm.hpp"
#include "icf/training.hpp"

namespace icf {

struct RunConfig {
  std::uint64_t seed = 0;
  std::string corpus;  // text file; empty means generate from seed
  std::size_t corpus_tokens = 2'000'000;
  std::string out_dir = ".";
  std::size_t context_length = 64;
  std::size_t eval_contexts = 50;
  LMConfig lm;
  LMTrainConfig lm_train;
  ICFormerConfig icf;
  TrainConfig pretrain;
  TrainConfig finetune;
  KVTaskShape kv;

  RunConfig();
  void validate() const;
};

// Environment variable consulted when no config path is given.
inline constexpr const char* kConfigEnv = "ICF_CONFIG";

// Throws std::invalid_argument naming the line for unknown keys or bad values.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
// Uses `path` if non-empty, else $ICF_CONFIG if set, else defaults.
RunConfig resolve_run_config(const std::string& path);
// Every key with its effective value, sorted by key.
std::string resolved_text(const RunConfig& config);
std::vector<std::string> run_config_keys();

// Corpus named by the config, or the generated one.
TokenSeq load_corpus(const RunConfig& config);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace icf
