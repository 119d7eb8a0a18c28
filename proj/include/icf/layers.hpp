#pragma once

// Building blocks shared by the target LM, the compressor and the baseline
// encoder: Llama-style pre-norm attention and SiLU-gated feed-forward.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "icf/tensor.hpp"

namespace icf {

template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

// Per-head post-softmax weights of one attention call.
template <class T>
struct HeadWeights {
  std::vector<Tensor<T>> heads;
};

// Post-softmax attention weights of every layer of one forward pass.
template <class T>
struct AttentionTrace {
  std::vector<HeadWeights<T>> layers;
};

// Multi-head attention on already rotated queries/keys.
// q: [R x h], k, v: [C x h]; mask: R x C. Returns [R x h] before W_O.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const Mask& mask, HeadWeights<T>* capture);

template <class T>
Tensor<T> gated_ffn(const Tensor<T>& x, const Tensor<T>& w_up, const Tensor<T>& w_gate, const Tensor<T>& w_down);

struct BlockShape {
  std::size_t hidden = 0;
  std::size_t heads = 0;
  std::size_t intermediate = 0;
  double theta_base = 10000.0;
  double rms_eps = 1e-6;
  bool rope = true;
};

// Self-attention block: x + Attn(norm(x)), then + FFN(norm(.)).
template <class T>
Tensor<T> self_attention_block(const Tensor<T>& x, const ParamMap<T>& params, const std::string& prefix,
                               const BlockShape& shape, std::span<const std::size_t> positions, const Mask& mask,
                               HeadWeights<T>* capture);

// Adds the seven matrices and two norms of one block under `prefix`.
void init_block(ParamMap<float>& params, const std::string& prefix, const BlockShape& shape, std::mt19937_64& rng,
                double init_std);

Tensor<float> normal_tensor(Shape shape, std::mt19937_64& rng, double stddev);

template <class T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name);

template <class U, class T>
ParamMap<U> cast_params(const ParamMap<T>& params);

template <class U, class T>
ParamMap<U> cast_params(const ParamMap<T>& params) {
  ParamMap<U> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
  return out;
}

}  // namespace icf
