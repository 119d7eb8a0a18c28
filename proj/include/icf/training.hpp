#pragma once

// Two-stage optimization of the compressor against a frozen target LM:
// autoencoding pretraining, then prompt/answer fine-tuning.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "icf/icformer.hpp"
#include "icf/lm.hpp"
#include "icf/optim.hpp"

namespace icf {

enum class Stage { kPretrain, kFinetune };
std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  double lr = 1e-3;
  std::size_t accum = 8;
  double clip_norm = 2.0;
  std::size_t steps = 4000;
  std::uint64_t seed = 0;
  std::size_t chunk_size = 64;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  PromptTemplate prompt_template = PromptTemplate::kDesk;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Prefix [digests; AE] used for reconstruction.
template <class T>
SoftPrefix<T> ae_prefix(const DigestSet<T>& digests, const ICFormerParams<T>& params);

// Prefix [template head; digests; template tail] used for questions.
template <class T>
SoftPrefix<T> prompt_prefix(const DigestSet<T>& digests, const RenderedPrompt& prompt, const LMParams<T>& lm);

// Teacher-forced reconstruction loss. Predictions at the AE slot and every
// context slot target w_1..w_n followed by kEos. chunk_size 0 means the
// compressor window.
template <class T>
Tensor<T> ae_loss(const TokenSeq& context, const ICFormerParams<T>& params, const LMParams<T>& lm,
                  std::size_t chunk_size = 0);

// Answer-only loss with the prompt rendered after the digests; the answer is
// followed by kEos.
template <class T>
Tensor<T> ft_loss(const KVTask& task, const ICFormerParams<T>& params, const LMParams<T>& lm,
                  PromptTemplate tmpl = PromptTemplate::kDesk, std::size_t chunk_size = 0);

// Pretraining updates every compressor tensor; fine-tuning keeps [AE] frozen.
void set_stage_trainable(ICFormerParams<float>& params, Stage stage);

using Sample = std::variant<TokenSeq, KVTask>;
// Deterministic: the same index always yields the same sample.
using DataStream = std::function<Sample(std::size_t index)>;

// Windows of `length` tokens lying inside single documents of a corpus whose
// documents are newline separated. [begin_frac, end_frac) selects a slice of
// the documents (e.g. 0-0.9 for training, 0.9-1 for held-out).
class ContextSampler {
 public:
  ContextSampler(const TokenSeq& corpus, std::size_t length, double begin_frac, double end_frac);
  TokenSeq sample(std::uint64_t seed) const;
  std::vector<TokenSeq> evenly(std::size_t count) const;
  std::size_t length() const { return length_; }

 private:
  std::vector<std::vector<int>> docs_;
  std::size_t length_;
};

DataStream pretrain_stream(const ContextSampler& sampler, std::uint64_t seed);

struct KVTaskShape {
  std::size_t n_pairs = 4;
  std::size_t key_len = 2;
  std::size_t val_len = 3;
};
DataStream kv_stream(std::uint64_t seed, const KVTaskShape& shape, std::size_t window);

struct LossRecord {
  std::size_t step;
  Stage stage;
  double loss;
  double grad_norm;
  double lr;
};

struct TrainResult {
  std::vector<LossRecord> log;
  std::string lm_fingerprint;
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::size_t step, const ICFormerParams<float>&)> on_checkpoint;
};

// AdamW with gradient accumulation and global-norm clipping. Only compressor
// tensors change; the LM must be frozen and its fingerprint is verified
// before and after.
TrainResult train(const DataStream& data, const TrainConfig& config, ICFormerParams<float>& params,
                  const LMParams<float>& lm, const TrainHooks& hooks = {});

std::string loss_csv(const std::vector<LossRecord>& log);

}  // namespace icf
