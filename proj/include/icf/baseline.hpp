#pragma once

// Self-attention encoder in the style of memory-slot compressors: k memory
// tokens are appended to the context and everything runs through causal
// self-attention. Used only to measure cost against the compressor.

#include <cstdint>

#include "icf/icformer.hpp"

namespace icf {

struct BaselineConfig {
  std::size_t memory_tokens = 16;
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t intermediate = 256;
  std::size_t vocab = kVocab;
  std::size_t window = 128;  // n + k must fit
  double theta_base = 10000.0;
  double rms_eps = 1e-6;

  void validate() const;
  BlockShape block() const { return {hidden, heads, intermediate, theta_base, rms_eps, true}; }
};

template <class T>
struct BaselineParams {
  BaselineConfig config;
  ParamMap<T> tensors;
};

BaselineParams<float> init_baseline(const BaselineConfig& config, std::uint64_t seed);

// Final states of the k memory positions.
template <class T>
DigestSet<T> encode_baseline(const TokenSeq& context, const BaselineParams<T>& params,
                             AttentionTrace<T>* trace = nullptr);

}  // namespace icf
