#pragma once

// The frozen target language model: a small Llama-style decoder that can be
// fed embedding rows (soft prefix) ahead of ordinary tokens.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "icf/checkpoint.hpp"
#include "icf/layers.hpp"
#include "icf/text.hpp"

namespace icf {

struct LMConfig {
  std::size_t vocab = kVocab;
  std::size_t hidden = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t intermediate = 256;
  std::size_t max_positions = 128;
  double theta_base = 10000.0;
  double rms_eps = 1e-6;

  void validate() const;
  BlockShape block() const { return {hidden, heads, intermediate, theta_base, rms_eps, true}; }
  void to_config(ConfigMap& out) const;
  static LMConfig from_config(const ConfigMap& in);
};

template <class T>
struct LMParams {
  LMConfig config;
  ParamMap<T> tensors;

  const Tensor<T>& embed() const { return param(tensors, "embed"); }
  // Marks every tensor trainable (LM training) or frozen (compressor training).
  void set_trainable(bool flag);
};

LMParams<float> init_lm(const LMConfig& config, std::uint64_t seed);
std::string lm_fingerprint(const LMParams<float>& lm);
void save_lm(const std::string& path, const LMParams<float>& lm);
LMParams<float> load_lm(const std::string& path);

// Rows occupying the leading LM positions, in order.
template <class T>
struct SoftPrefix {
  std::vector<Tensor<T>> blocks;

  std::size_t rows() const;
  void push(Tensor<T> block) { blocks.push_back(std::move(block)); }
};

// Final-normed hidden states for [prefix rows; token embeddings], RoPE
// positions 0..L-1 in input order, causal attention.
template <class T>
Tensor<T> lm_hidden(const LMParams<T>& lm, const SoftPrefix<T>& prefix, const TokenSeq& tokens,
                    AttentionTrace<T>* trace = nullptr);

// Tied output projection of hidden rows.
template <class T>
Tensor<T> lm_project(const LMParams<T>& lm, const Tensor<T>& hidden);

template <class T>
Tensor<T> lm_forward(const LMParams<T>& lm, const SoftPrefix<T>& prefix, const TokenSeq& tokens);

// Greedy decoding after the prefix; ties go to the lowest id.
template <class T>
TokenSeq generate_greedy(const LMParams<T>& lm, const SoftPrefix<T>& prefix, std::size_t max_new,
                         std::optional<int> stop = std::nullopt);

struct LMTrainConfig {
  std::size_t steps = 15000;
  std::size_t batch = 8;
  std::size_t window = 128;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_windows = 64;
  std::size_t log_every = 100;
  // Shares of training windows holding a repeated segment or a key/value
  // lookup instead of plain text.
  double repeat_fraction = 0.5;
  double kv_fraction = 0.2;
};

struct LMTrainLog {
  std::size_t step;
  double loss;
};

struct LMTrainResult {
  LMParams<float> params;
  double initial_heldout_loss = 0;
  double final_heldout_loss = 0;
  std::vector<LMTrainLog> curve;
  std::string fingerprint;
};

// Documents are split at '\n' and separated by kEos in the training stream.
std::vector<int> lm_stream(const TokenSeq& corpus);

// Mean next-token loss over `windows` evenly spaced windows of `stream`.
double lm_eval_loss(const LMParams<float>& lm, std::span<const int> stream, std::size_t window, std::size_t windows);

// Trains on the first 90% of the corpus stream, evaluates on the rest.
LMTrainResult train_lm(const TokenSeq& corpus, const LMConfig& config, const LMTrainConfig& train,
                       const std::function<void(const LMTrainLog&)>& on_log = {});

}  // namespace icf
