#include "icf/lm.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "icf/optim.hpp"

namespace icf {

namespace {

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

std::size_t parse_size(const ConfigMap& in, const std::string& key, std::size_t fallback) {
  auto it = in.find(key);
  return it == in.end() ? fallback : static_cast<std::size_t>(std::stoull(it->second));
}

double parse_double(const ConfigMap& in, const std::string& key, double fallback) {
  auto it = in.find(key);
  return it == in.end() ? fallback : std::stod(it->second);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void LMConfig::validate() const {
  if (hidden == 0 || heads == 0 || hidden % heads != 0) throw std::invalid_argument("lm: hidden must be divisible by heads");
  if ((hidden / heads) % 2 != 0) throw std::invalid_argument("lm: head dimension must be even for rotary embeddings");
  if (intermediate <= hidden) throw std::invalid_argument("lm: intermediate size must exceed hidden size");
  if (vocab == 0 || layers == 0 || max_positions == 0) throw std::invalid_argument("lm: sizes must be positive");
}

void LMConfig::to_config(ConfigMap& out) const {
  out["lm.vocab"] = std::to_string(vocab);
  out["lm.hidden"] = std::to_string(hidden);
  out["lm.layers"] = std::to_string(layers);
  out["lm.heads"] = std::to_string(heads);
  out["lm.intermediate"] = std::to_string(intermediate);
  out["lm.max_positions"] = std::to_string(max_positions);
  out["lm.theta_base"] = fmt_double(theta_base);
  out["lm.rms_eps"] = fmt_double(rms_eps);
}

LMConfig LMConfig::from_config(const ConfigMap& in) {
  LMConfig c;
  c.vocab = parse_size(in, "lm.vocab", c.vocab);
  c.hidden = parse_size(in, "lm.hidden", c.hidden);
  c.layers = parse_size(in, "lm.layers", c.layers);
  c.heads = parse_size(in, "lm.heads", c.heads);
  c.intermediate = parse_size(in, "lm.intermediate", c.intermediate);
  c.max_positions = parse_size(in, "lm.max_positions", c.max_positions);
  c.theta_base = parse_double(in, "lm.theta_base", c.theta_base);
  c.rms_eps = parse_double(in, "lm.rms_eps", c.rms_eps);
  return c;
}

template <class T>
void LMParams<T>::set_trainable(bool flag) {
  for (auto& [name, t] : tensors) t.set_requires_grad(flag);
}

LMParams<float> init_lm(const LMConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  LMParams<float> lm{config, {}};
  constexpr double kInitStd = 0.02;
  lm.tensors["embed"] = normal_tensor({config.vocab, config.hidden}, rng, kInitStd);
  for (std::size_t i = 0; i < config.layers; ++i) init_block(lm.tensors, layer_prefix(i), config.block(), rng, kInitStd);
  lm.tensors["final_norm"] = Tensor<float>::full({config.hidden}, 1.0f);
  return lm;
}

std::string lm_fingerprint(const LMParams<float>& lm) { return fingerprint(lm.tensors); }

void save_lm(const std::string& path, const LMParams<float>& lm) {
  Checkpoint ckpt;
  for (const auto& [name, t] : lm.tensors) ckpt.tensors.emplace(name, t.detach());
  lm.config.to_config(ckpt.config);
  ckpt.config["kind"] = "target-lm";
  save_checkpoint(path, ckpt);
}

LMParams<float> load_lm(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  auto kind = ckpt.config.find("kind");
  if (kind == ckpt.config.end() || kind->second != "target-lm") throw std::runtime_error(path + " is not a target LM checkpoint");
  LMParams<float> lm{LMConfig::from_config(ckpt.config), std::move(ckpt.tensors)};
  lm.config.validate();
  return lm;
}

template <class T>
std::size_t SoftPrefix<T>::rows() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.rows();
  return n;
}

template <class T>
Tensor<T> lm_hidden(const LMParams<T>& lm, const SoftPrefix<T>& prefix, const TokenSeq& tokens,
                    AttentionTrace<T>* trace) {
  const auto& cfg = lm.config;
  const std::size_t length = prefix.rows() + tokens.size();
  if (length == 0) throw std::invalid_argument("lm_forward: empty input");
  if (length > cfg.max_positions) {
    throw std::length_error("lm_forward: " + std::to_string(length) + " positions exceed the maximum of " +
                            std::to_string(cfg.max_positions));
  }
  std::vector<Tensor<T>> parts;
  for (const auto& b : prefix.blocks) {
    if (b.cols() != cfg.hidden) throw ShapeError("lm_forward: prefix row width differs from hidden size");
    parts.push_back(b);
  }
  if (!tokens.empty()) parts.push_back(embedding(lm.embed(), std::span<const int>(tokens.ids)));
  Tensor<T> x = parts.size() == 1 ? parts[0] : concat_rows(parts);

  std::vector<std::size_t> positions(length);
  for (std::size_t i = 0; i < length; ++i) positions[i] = i;
  const Mask mask = Mask::causal(length);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    HeadWeights<T>* capture = nullptr;
    if (trace) capture = &trace->layers.emplace_back();
    x = self_attention_block(x, lm.tensors, layer_prefix(l), cfg.block(), positions, mask, capture);
  }
  return rms_norm(x, param(lm.tensors, "final_norm"), static_cast<T>(cfg.rms_eps));
}

template <class T>
Tensor<T> lm_project(const LMParams<T>& lm, const Tensor<T>& hidden) {
  return matmul_nt(hidden, lm.embed());
}

template <class T>
Tensor<T> lm_forward(const LMParams<T>& lm, const SoftPrefix<T>& prefix, const TokenSeq& tokens) {
  return lm_project(lm, lm_hidden(lm, prefix, tokens));
}

template <class T>
TokenSeq generate_greedy(const LMParams<T>& lm, const SoftPrefix<T>& prefix, std::size_t max_new,
                         std::optional<int> stop) {
  if (prefix.rows() == 0) throw std::invalid_argument("generate_greedy: empty prefix");
  NoGradGuard no_grad;
  TokenSeq out;
  out.vocab = static_cast<int>(lm.config.vocab);
  while (out.size() < max_new && prefix.rows() + out.size() < lm.config.max_positions) {
    auto hidden = lm_hidden(lm, prefix, out);
    auto logits = lm_project(lm, slice_rows(hidden, hidden.rows() - 1, 1));
    auto row = logits.data();
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    const int id = static_cast<int>(best);
    if (stop && id == *stop) break;
    out.ids.push_back(id);
  }
  return out;
}

std::vector<int> lm_stream(const TokenSeq& corpus) {
  std::vector<int> stream;
  stream.reserve(corpus.size());
  for (int id : corpus.ids) stream.push_back(id == '\n' ? kEos : id);
  return stream;
}

double lm_eval_loss(const LMParams<float>& lm, std::span<const int> stream, std::size_t window, std::size_t windows) {
  if (stream.size() < window + 1) throw std::invalid_argument("lm_eval_loss: stream shorter than one window");
  NoGradGuard no_grad;
  const std::size_t span = stream.size() - window - 1;
  double total = 0;
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t start = windows == 1 ? 0 : span * w / (windows - 1);
    TokenSeq in{std::vector<int>(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                 stream.begin() + static_cast<std::ptrdiff_t>(start + window))};
    std::vector<int> target(stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                            stream.begin() + static_cast<std::ptrdiff_t>(start + window + 1));
    total += cross_entropy(lm_forward(lm, SoftPrefix<float>{}, in), std::span<const int>(target)).item();
  }
  return total / static_cast<double>(windows);
}

namespace {

// window + 1 tokens: plain text, a repeated segment, or a key/value lookup.
// The last two give the model the copying and lookup skills a compressor
// relies on when it hands over soft prompts instead of tokens.
std::vector<int> training_window(std::span<const int> text, const LMTrainConfig& train, std::mt19937_64& rng) {
  const std::size_t len = train.window + 1;
  auto text_at = [&](std::size_t count) {
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, text.size() - count)(rng);
    return std::vector<int>(text.begin() + static_cast<std::ptrdiff_t>(start),
                            text.begin() + static_cast<std::ptrdiff_t>(start + count));
  };
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::vector<int> seq;
  if (u < train.repeat_fraction) {
    // Several "seg <sep> seg <eos>" units. Half the segments are random
    // letters, which only copying can predict; variable lengths rule out a
    // fixed-offset shortcut.
    while (seq.size() + 2 * 8 + 2 <= len) {
      const std::size_t room = (len - seq.size() - 2) / 2;
      const std::size_t seg = std::uniform_int_distribution<std::size_t>(8, std::min<std::size_t>(room, 64))(rng);
      std::vector<int> once;
      if (rng() & 1) {
        for (std::size_t i = 0; i < seg; ++i) once.push_back(static_cast<int>('a' + rng() % 26));
      } else {
        once = text_at(seg);
      }
      seq.insert(seq.end(), once.begin(), once.end());
      seq.push_back(kSep);
      seq.insert(seq.end(), once.begin(), once.end());
      seq.push_back(kEos);
    }
  } else if (u < train.repeat_fraction + train.kv_fraction) {
    const std::size_t pairs = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const auto task = gen_kv_task(rng(), pairs, 2, 3, train.window);
    seq = task.context.ids;
    const auto after = render_prompt(task.prompt, PromptTemplate::kDesk).after;
    seq.insert(seq.end(), after.ids.begin(), after.ids.end());
    seq.insert(seq.end(), task.answer.ids.begin(), task.answer.ids.end());
    seq.push_back(kEos);
  }
  if (seq.size() > len) seq.resize(len);
  const auto fill = text_at(len - seq.size());
  seq.insert(seq.end(), fill.begin(), fill.end());
  return seq;
}

}  // namespace

LMTrainResult train_lm(const TokenSeq& corpus, const LMConfig& config, const LMTrainConfig& train,
                       const std::function<void(const LMTrainLog&)>& on_log) {
  config.validate();
  if (train.window > config.max_positions) {
    throw std::invalid_argument("train_lm: window exceeds max positions");
  }
  if (train.repeat_fraction < 0 || train.kv_fraction < 0 || train.repeat_fraction + train.kv_fraction > 1) {
    throw std::invalid_argument("train_lm: repeat and lookup fractions must be non-negative and sum to at most 1");
  }
  if (train.repeat_fraction + train.kv_fraction > 0 && train.window < 64) {
    throw std::invalid_argument("train_lm: repeat and lookup windows need a window of at least 64");
  }
  const auto stream = lm_stream(corpus);
  const std::size_t split = stream.size() * 9 / 10;
  std::span<const int> train_part(stream.data(), split);
  std::span<const int> heldout(stream.data() + split, stream.size() - split);
  if (train_part.size() < train.window + 2 || heldout.size() < train.window + 2) {
    throw std::invalid_argument("train_lm: corpus too small for the training window");
  }

  LMTrainResult result{init_lm(config, train.seed), 0, 0, {}, {}};
  auto& lm = result.params;
  lm.set_trainable(true);
  result.initial_heldout_loss = lm_eval_loss(lm, heldout, train.window, train.eval_windows);

  AdamWConfig opt_cfg;
  opt_cfg.lr = train.lr;
  opt_cfg.weight_decay = train.weight_decay;
  AdamW opt(opt_cfg);
  std::mt19937_64 rng(train.seed ^ 0xA5A5A5A5ull);
  const std::size_t warmup = std::max<std::size_t>(1, train.steps / 20);
  const float inv_batch = 1.0f / static_cast<float>(train.batch);
  double running = 0;
  for (std::size_t step = 1; step <= train.steps; ++step) {
    double step_loss = 0;
    for (std::size_t b = 0; b < train.batch; ++b) {
      const auto seq = training_window(train_part, train, rng);
      TokenSeq in{std::vector<int>(seq.begin(), seq.end() - 1)};
      std::vector<int> target(seq.begin() + 1, seq.end());
      auto loss = cross_entropy(lm_forward(lm, SoftPrefix<float>{}, in), std::span<const int>(target));
      if (!std::isfinite(loss.item())) throw NonFiniteError("train_lm: loss diverged at step " + std::to_string(step));
      step_loss += loss.item();
      backward(scale(loss, inv_batch));
    }
    clip_grad_norm(trainable_grads(lm.tensors), train.clip_norm);
    // Linear warmup, then cosine decay to 10% of the peak rate.
    double lr = train.lr;
    if (step <= warmup) {
      lr = train.lr * static_cast<double>(step) / static_cast<double>(warmup);
    } else {
      const double progress = static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, train.steps - warmup));
      lr = train.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    opt.set_lr(lr);
    opt.step(lm.tensors);
    for (auto& [name, t] : lm.tensors) t.zero_grad();

    running += step_loss / static_cast<double>(train.batch);
    if (train.log_every && step % train.log_every == 0) {
      LMTrainLog entry{step, running / static_cast<double>(train.log_every)};
      result.curve.push_back(entry);
      if (on_log) on_log(entry);
      running = 0;
    }
  }
  result.final_heldout_loss = lm_eval_loss(lm, heldout, train.window, train.eval_windows);
  lm.set_trainable(false);
  result.fingerprint = lm_fingerprint(lm);
  return result;
}

#define ICF_INSTANTIATE(T)                                                                                     \
  template struct LMParams<T>;                                                                                 \
  template struct SoftPrefix<T>;                                                                               \
  template Tensor<T> lm_hidden<T>(const LMParams<T>&, const SoftPrefix<T>&, const TokenSeq&, AttentionTrace<T>*); \
  template Tensor<T> lm_project<T>(const LMParams<T>&, const Tensor<T>&);                                      \
  template Tensor<T> lm_forward<T>(const LMParams<T>&, const SoftPrefix<T>&, const TokenSeq&);                  \
  template TokenSeq generate_greedy<T>(const LMParams<T>&, const SoftPrefix<T>&, std::size_t, std::optional<int>);

ICF_INSTANTIATE(float)
ICF_INSTANTIATE(double)

}  // namespace icf
