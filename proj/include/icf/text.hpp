#pragma once

// Byte-level tokens, synthetic corpora and text-similarity metrics.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace icf {

inline constexpr int kByteVocab = 256;
inline constexpr int kEos = 256;  // end-of-text sentinel
inline constexpr int kPad = 257;
inline constexpr int kBos = 258;
inline constexpr int kSep = 259;
inline constexpr int kVocab = 260;

struct TokenSeq {
  std::vector<int> ids;
  int vocab = kVocab;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSeq&) const = default;
};

TokenSeq encode(std::string_view text);
// Throws std::invalid_argument on reserved special ids.
std::string decode(const TokenSeq& seq);
// Like decode but renders specials as <eos>, <pad>, ... for transcripts.
std::string render(const TokenSeq& seq);

// Deterministic English-like text from a template grammar. Documents are
// newline separated; the stream is cut to exactly `tokens` bytes.
TokenSeq gen_corpus(std::uint64_t seed, std::size_t tokens);
std::size_t lexicon_size();

// Shannon entropy (bits) of the unigram distribution of ids.
double unigram_entropy(std::span<const int> ids);

enum class Randomness { kNormal, kReversed, kPatterned, kRandom };
std::string_view randomness_name(Randomness level);

struct LadderSample {
  Randomness level;
  TokenSeq seq;
};

// Printable ASCII range used for the random level.
inline constexpr int kTextByteLo = 32;
inline constexpr int kTextByteHi = 126;

std::array<LadderSample, 4> make_ladder(const TokenSeq& seq, std::uint64_t seed);

struct KVTask {
  TokenSeq context;  // "key=value;" pairs
  TokenSeq prompt;   // the queried key
  TokenSeq answer;   // its value
};

KVTask gen_kv_task(std::uint64_t seed, std::size_t n_pairs, std::size_t key_len, std::size_t val_len,
                   std::size_t window);

enum class PromptTemplate { kDesk, kFull };

// Tokens placed before and after the digest rows when asking a question.
struct RenderedPrompt {
  TokenSeq before;
  TokenSeq after;
};
RenderedPrompt render_prompt(const TokenSeq& prompt, PromptTemplate tmpl);

// Tab-separated task files: context, prompt, answer per line, byte-escaped.
std::string escape_bytes(std::string_view raw);
std::string unescape_bytes(std::string_view escaped);
void write_tasks(const std::string& path, std::span<const KVTask> tasks);
std::vector<KVTask> read_tasks(const std::string& path);

// BLEU-4 over token ids with brevity penalty; zero n-gram matches are
// smoothed to kBleuEpsilon.
inline constexpr double kBleuEpsilon = 1e-9;
double bleu4(const TokenSeq& reference, const TokenSeq& hypothesis);

struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};
RougeScore rouge_l(const TokenSeq& reference, const TokenSeq& hypothesis);

}  // namespace icf
