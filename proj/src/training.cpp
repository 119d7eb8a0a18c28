#include "icf/training.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace icf {

std::string_view stage_name(Stage stage) { return stage == Stage::kPretrain ? "pretrain" : "finetune"; }

Stage parse_stage(std::string_view name) {
  if (name == "pretrain") return Stage::kPretrain;
  if (name == "finetune") return Stage::kFinetune;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0) || accum == 0 || !(clip_norm > 0) || chunk_size == 0) {
    throw std::invalid_argument("train: learning rate, accumulation, clip norm and chunk size must be positive");
  }
  if (weight_decay < 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw std::invalid_argument("train: invalid optimizer hyperparameters");
  }
}

template <class T>
SoftPrefix<T> ae_prefix(const DigestSet<T>& digests, const ICFormerParams<T>& params) {
  SoftPrefix<T> prefix;
  prefix.push(digests.vectors);
  prefix.push(params.ae());
  return prefix;
}

template <class T>
SoftPrefix<T> prompt_prefix(const DigestSet<T>& digests, const RenderedPrompt& prompt, const LMParams<T>& lm) {
  SoftPrefix<T> prefix;
  if (!prompt.before.empty()) prefix.push(embedding(lm.embed(), std::span<const int>(prompt.before.ids)));
  prefix.push(digests.vectors);
  if (!prompt.after.empty()) prefix.push(embedding(lm.embed(), std::span<const int>(prompt.after.ids)));
  return prefix;
}

template <class T>
Tensor<T> ae_loss(const TokenSeq& context, const ICFormerParams<T>& params, const LMParams<T>& lm,
                  std::size_t chunk_size) {
  const std::size_t n = context.size();
  const auto digests = compress_chunked(context, chunk_size ? chunk_size : params.config.window, params, lm.embed());
  const auto prefix = ae_prefix(digests, params);
  const std::size_t ae_row = digests.vectors.rows();
  auto hidden = lm_hidden(lm, prefix, context);
  std::vector<int> targets(context.ids);
  targets.push_back(kEos);
  auto logits = lm_project(lm, slice_rows(hidden, ae_row, n + 1));
  return cross_entropy(logits, std::span<const int>(targets));
}

template <class T>
Tensor<T> ft_loss(const KVTask& task, const ICFormerParams<T>& params, const LMParams<T>& lm, PromptTemplate tmpl,
                  std::size_t chunk_size) {
  if (task.answer.empty()) throw std::invalid_argument("ft_loss: empty answer");
  const auto digests =
      compress_chunked(task.context, chunk_size ? chunk_size : params.config.window, params, lm.embed());
  const auto rendered = render_prompt(task.prompt, tmpl);
  const auto prefix = prompt_prefix(digests, rendered, lm);
  auto hidden = lm_hidden(lm, prefix, task.answer);
  std::vector<int> targets(task.answer.ids);
  targets.push_back(kEos);
  // The last prompt row predicts the first answer token.
  auto logits = lm_project(lm, slice_rows(hidden, prefix.rows() - 1, targets.size()));
  return cross_entropy(logits, std::span<const int>(targets));
}

void set_stage_trainable(ICFormerParams<float>& params, Stage stage) {
  for (auto& [name, t] : params.tensors) t.set_requires_grad(!(stage == Stage::kFinetune && name == "ae"));
}

// ---- data -------------------------------------------------------------------

ContextSampler::ContextSampler(const TokenSeq& corpus, std::size_t length, double begin_frac, double end_frac)
    : length_(length) {
  if (length == 0) throw std::invalid_argument("ContextSampler: length must be positive");
  std::vector<std::vector<int>> all;
  std::vector<int> cur;
  for (int id : corpus.ids) {
    if (id == '\n') {
      all.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(id);
    }
  }
  if (!cur.empty()) all.push_back(std::move(cur));
  const auto lo = static_cast<std::size_t>(begin_frac * static_cast<double>(all.size()));
  const auto hi = static_cast<std::size_t>(end_frac * static_cast<double>(all.size()));
  for (std::size_t i = lo; i < hi && i < all.size(); ++i) {
    if (all[i].size() >= length) docs_.push_back(std::move(all[i]));
  }
  if (docs_.empty()) throw std::invalid_argument("ContextSampler: no document holds a window of that length");
}

TokenSeq ContextSampler::sample(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  const auto& doc = docs_[std::uniform_int_distribution<std::size_t>(0, docs_.size() - 1)(rng)];
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, doc.size() - length_)(rng);
  return TokenSeq{std::vector<int>(doc.begin() + static_cast<std::ptrdiff_t>(start),
                                   doc.begin() + static_cast<std::ptrdiff_t>(start + length_))};
}

std::vector<TokenSeq> ContextSampler::evenly(std::size_t count) const {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& doc = docs_[(i * docs_.size()) / count];
    out.push_back(TokenSeq{std::vector<int>(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(length_))});
  }
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

DataStream pretrain_stream(const ContextSampler& sampler, std::uint64_t seed) {
  return [sampler, seed](std::size_t index) -> Sample { return sampler.sample(mix(seed, index)); };
}

DataStream kv_stream(std::uint64_t seed, const KVTaskShape& shape, std::size_t window) {
  return [seed, shape, window](std::size_t index) -> Sample {
    return gen_kv_task(mix(seed, index), shape.n_pairs, shape.key_len, shape.val_len, window);
  };
}

// ---- loop -------------------------------------------------------------------

TrainResult train(const DataStream& data, const TrainConfig& config, ICFormerParams<float>& params,
                  const LMParams<float>& lm, const TrainHooks& hooks) {
  config.validate();
  for (const auto& [name, t] : lm.tensors) {
    if (t.requires_grad()) throw std::invalid_argument("train: target LM tensor '" + name + "' is not frozen");
  }
  TrainResult result;
  result.lm_fingerprint = lm_fingerprint(lm);
  set_stage_trainable(params, config.stage);
  for (auto& [name, t] : params.tensors) t.zero_grad();

  AdamW opt({config.lr, config.beta1, config.beta2, 1e-8, config.weight_decay});
  const float inv_accum = 1.0f / static_cast<float>(config.accum);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    double total = 0;
    double norm = 0;
    try {
      for (std::size_t a = 0; a < config.accum; ++a) {
        const Sample sample = data((step - 1) * config.accum + a);
        Tensor<float> loss;
        if (config.stage == Stage::kPretrain) {
          loss = ae_loss(std::get<TokenSeq>(sample), params, lm, config.chunk_size);
        } else {
          loss = ft_loss(std::get<KVTask>(sample), params, lm, config.prompt_template, config.chunk_size);
        }
        total += loss.item();
        backward(scale(loss, inv_accum));
      }
      norm = clip_grad_norm(trainable_grads(params.tensors), config.clip_norm);
    } catch (const NonFiniteError& e) {
      throw TrainingError(std::string("non-finite value at step ") + std::to_string(step) + ": " + e.what(), step);
    }
    opt.step(params.tensors);
    for (auto& [name, t] : params.tensors) t.zero_grad();

    LossRecord rec{step, config.stage, total / static_cast<double>(config.accum), norm, config.lr};
    result.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (config.checkpoint_every && step % config.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step, params);
    }
  }
  if (lm_fingerprint(lm) != result.lm_fingerprint) throw std::logic_error("train: target LM changed during training");
  return result;
}

std::string loss_csv(const std::vector<LossRecord>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,stage,loss,grad_norm,lr\n";
  for (const auto& r : log) os << r.step << ',' << stage_name(r.stage) << ',' << r.loss << ',' << r.grad_norm << ',' << r.lr << '\n';
  return os.str();
}

#define ICF_INSTANTIATE(T)                                                                                  \
  template SoftPrefix<T> ae_prefix<T>(const DigestSet<T>&, const ICFormerParams<T>&);                     \
  template SoftPrefix<T> prompt_prefix<T>(const DigestSet<T>&, const RenderedPrompt&, const LMParams<T>&); \
  template Tensor<T> ae_loss<T>(const TokenSeq&, const ICFormerParams<T>&, const LMParams<T>&, std::size_t); \
  template Tensor<T> ft_loss<T>(const KVTask&, const ICFormerParams<T>&, const LMParams<T>&, PromptTemplate, \
                                std::size_t);

ICF_INSTANTIATE(float)
ICF_INSTANTIATE(double)

}  // namespace icf
