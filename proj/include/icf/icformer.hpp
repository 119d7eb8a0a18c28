#pragma once

// The compressor: k learnable digest tokens that read the context through
// cross-attention. Digest queries see every context key plus the digest keys
// at or before their own index; context tokens are never queries, so their
// stream is the raw word embeddings at every layer.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "icf/checkpoint.hpp"
#include "icf/layers.hpp"
#include "icf/text.hpp"

namespace icf {

struct ICFormerConfig {
  std::size_t digest_tokens = 16;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t intermediate = 256;
  std::size_t window = 64;  // longest context a single compress call accepts
  double theta_base = 10000.0;
  double rms_eps = 1e-6;
  bool rope = true;

  void validate() const;
  BlockShape block() const { return {hidden, heads, intermediate, theta_base, rms_eps, rope}; }
  void to_config(ConfigMap& out) const;
  static ICFormerConfig from_config(const ConfigMap& in);
};

template <class T>
struct ICFormerParams {
  ICFormerConfig config;
  ParamMap<T> tensors;

  const Tensor<T>& digest() const { return param(tensors, "digest"); }
  const Tensor<T>& ae() const { return param(tensors, "ae"); }
};

ICFormerParams<float> init_icformer(const ICFormerConfig& config, std::uint64_t seed);
void save_icformer(const std::string& path, const ICFormerParams<float>& params, const ConfigMap& extra = {});
ICFormerParams<float> load_icformer(const std::string& path);

struct DigestSpan {
  std::size_t begin = 0;  // first context token of the chunk
  std::size_t length = 0;
  std::size_t digests = 0;
};

template <class T>
struct DigestSet {
  Tensor<T> vectors;  // rows x hidden
  std::vector<DigestSpan> spans;
};

// k x (n + k); row i keeps columns 0..n+i.
Mask build_mask(std::size_t n, std::size_t k);

// Observation points inside compress(), used by analysis and tests.
template <class T>
struct CompressProbe {
  AttentionTrace<T>* attention = nullptr;
  // Normalized context rows that feed W_K / W_V, one entry per layer.
  std::vector<Tensor<T>> context_kv_inputs;
  // Optional rewrite of the digest stream entering layer `l`.
  std::function<Tensor<T>(std::size_t l, const Tensor<T>& state)> rewrite_digests;
};

// `embed` is the target LM's word embedding table.
template <class T>
DigestSet<T> compress(const TokenSeq& context, const ICFormerParams<T>& params, const Tensor<T>& embed,
                      CompressProbe<T>* probe = nullptr);

// Contiguous chunk sizes for splitting n tokens into pieces of at most
// chunk_size, as equal as possible (larger pieces first).
std::vector<std::size_t> chunk_sizes(std::size_t n, std::size_t chunk_size);

template <class T>
DigestSet<T> compress_chunked(const TokenSeq& context, std::size_t chunk_size, const ICFormerParams<T>& params,
                              const Tensor<T>& embed);

// Digest rows as CSV, 9 significant digits.
template <class T>
std::string digests_csv(const DigestSet<T>& digests);

}  // namespace icf
