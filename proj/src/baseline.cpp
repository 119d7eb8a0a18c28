#include "icf/baseline.hpp"

#include <random>
#include <stdexcept>

namespace icf {

void BaselineConfig::validate() const {
  if (memory_tokens == 0) throw std::invalid_argument("baseline: need at least one memory token");
  if (hidden == 0 || heads == 0 || hidden % heads != 0 || (hidden / heads) % 2 != 0) {
    throw std::invalid_argument("baseline: hidden must split into even-width heads");
  }
  if (layers == 0 || intermediate == 0 || vocab == 0) throw std::invalid_argument("baseline: sizes must be positive");
}

BaselineParams<float> init_baseline(const BaselineConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  BaselineParams<float> p{config, {}};
  p.tensors["embed"] = normal_tensor({config.vocab, config.hidden}, rng, 0.02);
  p.tensors["memory"] = normal_tensor({config.memory_tokens, config.hidden}, rng, 1.0);
  for (std::size_t i = 0; i < config.layers; ++i) {
    init_block(p.tensors, "layers." + std::to_string(i) + ".", config.block(), rng, 0.02);
  }
  p.tensors["final_norm"] = Tensor<float>::full({config.hidden}, 1.0f);
  return p;
}

template <class T>
DigestSet<T> encode_baseline(const TokenSeq& context, const BaselineParams<T>& params, AttentionTrace<T>* trace) {
  const auto& cfg = params.config;
  const std::size_t n = context.size(), k = cfg.memory_tokens;
  if (n == 0) throw std::invalid_argument("encode_baseline: empty context");
  if (n + k > cfg.window) {
    throw std::length_error("encode_baseline: " + std::to_string(n + k) + " positions exceed the window of " +
                            std::to_string(cfg.window));
  }
  auto x = concat_rows<T>({embedding(param(params.tensors, "embed"), std::span<const int>(context.ids)),
                           param(params.tensors, "memory")});
  std::vector<std::size_t> positions(n + k);
  for (std::size_t i = 0; i < n + k; ++i) positions[i] = i;
  const Mask mask = Mask::causal(n + k);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    HeadWeights<T>* capture = nullptr;
    if (trace) capture = &trace->layers.emplace_back();
    x = self_attention_block(x, params.tensors, "layers." + std::to_string(l) + ".", cfg.block(), positions, mask,
                             capture);
  }
  DigestSet<T> out;
  out.vectors = rms_norm(slice_rows(x, n, k), param(params.tensors, "final_norm"), static_cast<T>(cfg.rms_eps));
  out.spans.push_back({0, n, k});
  return out;
}

template struct BaselineParams<float>;
template struct BaselineParams<double>;
template DigestSet<float> encode_baseline<float>(const TokenSeq&, const BaselineParams<float>&, AttentionTrace<float>*);
template DigestSet<double> encode_baseline<double>(const TokenSeq&, const BaselineParams<double>&,
                                                   AttentionTrace<double>*);

}  // namespace icf
