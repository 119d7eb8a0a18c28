#pragma once

// Cost model, scaling benchmarks, attention maps and evaluation helpers.

#include <cstdint>
#include <string>
#include <vector>

#include "icf/baseline.hpp"
#include "icf/icformer.hpp"
#include "icf/lm.hpp"

namespace icf {

using u128 = unsigned __int128;
std::string u128_str(u128 v);

struct FlopsParams {
  std::uint64_t b = 1;
  std::uint64_t s = 512;
  std::uint64_t k = 128;
  std::uint64_t h = 4096;
  std::uint64_t m = 11004;
  std::uint64_t l1 = 32;
  std::uint64_t l2 = 3;
};

struct FlopsTerm {
  std::string name;
  u128 flops;
};

struct FlopsReport {
  std::string method;
  std::vector<FlopsTerm> terms;  // per layer
  u128 per_layer = 0;
  std::uint64_t layers = 0;
  u128 total = 0;
};

// Throw std::overflow_error if any intermediate exceeds 128 bits.
FlopsReport flops_baseline(const FlopsParams& p);
FlopsReport flops_icformer(const FlopsParams& p);
double flops_ratio(const FlopsParams& p);
// The compact closed form  l1[2(s+k)(2h+s+k)+3m(s+k)] / l2[2kh+(s+k)(h+2k)+3mk].
// Its denominator drops a factor on the digest-only terms, so it disagrees
// with the per-term sums (about 42.9 vs 32.4 at the default parameters).
double flops_ratio_closed_form(const FlopsParams& p);

std::string flops_text(const FlopsReport& baseline, const FlopsReport& icformer, const FlopsParams& p);
std::string flops_csv(const FlopsReport& baseline, const FlopsReport& icformer);

// ---- measured scaling ------------------------------------------------------

struct ScalingRow {
  std::size_t n;
  std::string method;  // "icformer" or "baseline"
  std::uint64_t flops;
  double wall_ms_median;
};

// Toy models are sized by `icf` and `base`; windows are widened to fit the
// longest length. Every point repeats `repeats` times (at least 5).
std::vector<ScalingRow> scaling_bench(const std::vector<std::size_t>& lengths, std::size_t k,
                                      const ICFormerConfig& icf, const BaselineConfig& base, std::size_t repeats = 5,
                                      std::uint64_t seed = 0);
std::string scaling_csv(const std::vector<ScalingRow>& rows);

// ---- attention maps ---------------------------------------------------------

struct AttnMap {
  std::size_t layer = 0;
  std::size_t rows = 0;  // k
  std::size_t cols = 0;  // n + k
  std::vector<double> weights;  // row-major
  std::vector<std::string> labels;  // one per column

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

// Head-averaged weights of every layer of one compress pass.
std::vector<AttnMap> attn_maps(const TokenSeq& context, const ICFormerParams<float>& params, const Tensor<float>& embed);
AttnMap attn_map(std::size_t layer, const TokenSeq& context, const ICFormerParams<float>& params,
                 const Tensor<float>& embed);

// Plain PGM (P2); the largest weight of the map is white.
std::string attn_pgm(const AttnMap& map);
std::string attn_csv(const AttnMap& map);

// Share of adjacent digest pairs whose argmax context column does not move
// backwards.
double backslash_score(const AttnMap& map, std::size_t n_context);

struct TopEntry {
  std::size_t digest;
  std::size_t rank;
  std::size_t context_pos;
  std::string token;
  std::size_t first_layer;  // earliest layer where the position is in this digest's top list
};

struct TopAttended {
  std::vector<TopEntry> entries;
  double coverage = 0;  // share of context positions listed for some digest
};

TopAttended top_attended(std::size_t layer, const TokenSeq& context, const ICFormerParams<float>& params,
                         const Tensor<float>& embed, std::size_t top_n = 5);
std::string top_attended_csv(const TopAttended& top);

// ---- evaluation -------------------------------------------------------------

struct Transcript {
  TokenSeq reference;
  TokenSeq output;
  double bleu = 0;
  double ce = 0;
};

struct ReconstructResult {
  double bleu4 = 0;
  double ce = 0;
  std::vector<Transcript> transcripts;
};

// Greedy decode of [digests; AE] until kEos (at most n + 8 tokens), scored
// against the context; ce is the teacher-forced reconstruction loss.
ReconstructResult reconstruct_eval(const std::vector<TokenSeq>& contexts, const ICFormerParams<float>& params,
                                   const LMParams<float>& lm, std::size_t chunk_size = 0);
std::string transcript_text(const ReconstructResult& result);

TokenSeq ask(const TokenSeq& context, const TokenSeq& prompt, const ICFormerParams<float>& params,
             const LMParams<float>& lm, PromptTemplate tmpl = PromptTemplate::kDesk, std::size_t max_new = 32,
             std::size_t chunk_size = 0);

double kv_exact_match(const std::vector<KVTask>& tasks, const ICFormerParams<float>& params, const LMParams<float>& lm,
                      PromptTemplate tmpl = PromptTemplate::kDesk);

struct LadderRow {
  Randomness level;
  double bleu4;
  double ce;
};

// Every context is turned into the four randomness levels.
std::vector<LadderRow> ladder_eval(const std::vector<TokenSeq>& contexts, const ICFormerParams<float>& params,
                                   const LMParams<float>& lm, std::uint64_t seed);
std::string ladder_text(const std::vector<LadderRow>& rows);

}  // namespace icf
