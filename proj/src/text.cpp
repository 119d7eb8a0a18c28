#include "icf/text.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace icf {

TokenSeq encode(std::string_view text) {
  TokenSeq seq;
  seq.ids.reserve(text.size());
  for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c));
  return seq;
}

std::string decode(const TokenSeq& seq) {
  std::string out;
  out.reserve(seq.ids.size());
  for (int id : seq.ids) {
    if (id < 0 || id >= kByteVocab) {
      throw std::invalid_argument("decode: token " + std::to_string(id) + " is not a byte");
    }
    out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string render(const TokenSeq& seq) {
  std::string out;
  for (int id : seq.ids) {
    switch (id) {
      case kEos: out += "<eos>"; break;
      case kPad: out += "<pad>"; break;
      case kBos: out += "<bos>"; break;
      case kSep: out += "<sep>"; break;
      default: out.push_back(static_cast<char>(id));
    }
  }
  return out;
}

// ---- corpus -----------------------------------------------------------------

namespace {

const std::vector<std::string_view> kNouns = {
    "cat", "dog", "bird", "fish", "horse", "house", "tree", "river", "road", "city", "town", "village", "garden",
    "field", "forest", "mountain", "hill", "lake", "sea", "boat", "ship", "car", "train", "bridge", "tower",
    "castle", "king", "queen", "child", "man", "woman", "friend", "teacher", "doctor", "farmer", "baker",
    "soldier", "sailor", "painter", "writer", "singer", "student", "worker", "driver", "hunter", "book",
    "letter", "story", "song", "picture", "table", "chair", "door", "window", "wall", "roof", "floor", "room",
    "kitchen", "school", "market", "shop", "church", "office", "station", "street", "corner", "park", "stone",
    "rock", "sand", "water", "fire", "wind", "rain", "snow", "sun", "moon", "star", "sky", "cloud", "light",
    "night", "morning", "evening", "day", "week", "year", "winter", "summer", "spring", "autumn", "apple",
    "bread", "cheese", "milk", "cake", "soup", "tea", "coffee", "wine", "egg", "flower", "rose", "grass",
    "leaf", "seed", "box", "bag", "key", "coin", "ring", "lamp", "clock", "bell", "coat", "hat", "shoe",
    "glass", "cup", "plate", "knife", "rope", "wheel", "map", "pen", "paper", "gift", "game", "ball", "drum",
    "voice", "face", "hand", "eye", "heart", "head", "name", "word", "idea", "plan", "dream", "question",
    "answer", "path", "gate", "farm", "barn", "mill", "well", "island", "valley", "desert", "harbor", "wolf",
    "bear", "fox", "mouse", "goat", "sheep", "cow", "duck", "owl", "bee", "frog", "whale", "lion", "tiger",
    "monkey", "rabbit", "snake", "horn", "feather", "shadow", "mirror", "candle", "blanket", "basket"};

const std::vector<std::string_view> kAdjectives = {
    "old", "young", "big", "small", "tall", "short", "long", "wide", "narrow", "deep", "high", "low", "hot",
    "cold", "warm", "cool", "dry", "wet", "dark", "bright", "quiet", "loud", "soft", "hard", "fast", "slow",
    "happy", "sad", "kind", "cruel", "brave", "shy", "clever", "foolish", "rich", "poor", "busy", "lazy",
    "strong", "weak", "heavy", "light", "clean", "dirty", "new", "ancient", "modern", "strange", "simple",
    "gentle", "wild", "calm", "proud", "humble", "fresh", "sweet", "bitter", "green", "red", "blue", "yellow",
    "white", "black", "brown", "golden", "silver", "empty", "full", "open", "closed", "broken", "hidden",
    "famous", "lonely", "careful", "curious", "eager", "tired", "hungry", "thirsty", "sleepy", "noisy",
    "pretty", "ugly", "plain", "round", "square", "sharp", "smooth", "rough", "thin", "thick", "early",
    "late", "little", "great", "good", "bad", "fine"};

const std::vector<std::string_view> kVerbs = {
    "saw", "found", "took", "gave", "made", "built", "broke", "carried", "opened", "closed", "watched",
    "followed", "painted", "wrote", "read", "heard", "loved", "liked", "hated", "helped", "called", "asked",
    "answered", "visited", "left", "kept", "lost", "won", "sold", "bought", "cooked", "ate", "drank", "washed",
    "cleaned", "moved", "pushed", "pulled", "lifted", "dropped", "threw", "caught", "held", "touched",
    "showed", "told", "taught", "learned", "remembered", "forgot", "needed", "wanted", "chose", "crossed",
    "climbed", "passed", "reached", "missed", "met", "greeted", "thanked", "praised", "feared", "trusted",
    "fed", "fixed", "filled", "emptied", "counted", "measured", "marked", "named", "guarded", "hid", "sought",
    "planted", "picked", "cut", "burned", "dried", "warmed", "cooled", "shared", "borrowed", "returned",
    "noticed", "studied", "drew", "sang", "played", "joined", "led", "served", "sent", "brought", "packed",
    "tied", "wrapped", "hung", "rang"};

const std::vector<std::string_view> kAdverbs = {
    "quickly", "slowly", "quietly", "loudly", "gently", "carefully", "happily", "sadly", "often", "never",
    "always", "sometimes", "early", "late", "again", "soon", "today", "yesterday", "together", "alone",
    "easily", "badly", "well", "finally", "suddenly", "bravely", "softly", "proudly", "eagerly", "calmly",
    "silently", "warmly", "kindly", "boldly", "rarely", "twice", "once", "here", "there", "away"};

const std::vector<std::string_view> kPrepositions = {
    "in", "on", "near", "under", "over", "behind", "beside", "across", "through", "into", "from", "with",
    "by", "along", "around", "past", "toward", "inside", "outside", "beyond"};

const std::vector<std::string_view> kNames = {
    "Anna", "Ben", "Clara", "David", "Emma", "Frank", "Grace", "Henry", "Iris", "Jack", "Kate", "Leo", "Mary",
    "Nick", "Olga", "Paul", "Rosa", "Sam", "Tina", "Victor", "Wendy", "Adam", "Bella", "Carl", "Dora", "Eric",
    "Fiona", "George", "Hanna", "Ivan", "Julia", "Karl", "Lucy", "Max", "Nina", "Oscar", "Peter", "Ruth",
    "Simon", "Tom"};

const std::vector<std::string_view> kPlaces = {
    "north", "south", "east", "west", "capital", "countryside", "mountains", "coast", "woods", "meadow",
    "square", "palace", "temple", "library", "museum", "hospital", "prison", "theater", "inn", "cottage",
    "cave", "shore", "orchard", "quarry", "border", "port", "plain", "marsh", "ridge", "camp"};

const std::vector<std::string_view> kConnectives = {"and", "but", "so", "then", "while", "because"};

// Zipf-like draw: item r has weight 1/(r+1).
class ZipfPicker {
 public:
  explicit ZipfPicker(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / static_cast<double>(i + 1);
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
  std::size_t operator()(std::mt19937_64& rng) { return dist_(rng); }

 private:
  std::discrete_distribution<std::size_t> dist_;
};

class SentenceGrammar {
 public:
  SentenceGrammar()
      : noun_(kNouns.size()),
        adj_(kAdjectives.size()),
        verb_(kVerbs.size()),
        adv_(kAdverbs.size()),
        prep_(kPrepositions.size()),
        name_(kNames.size()),
        place_(kPlaces.size()),
        conn_(kConnectives.size()) {}

  // Placeholders are filled left to right so the draw order is fixed.
  std::string sentence(std::mt19937_64& rng) {
    static const std::array<std::string_view, 8> kTemplates = {
        "the A N V the N",
        "a N V P the A N",
        "M V the N D",
        "the N of the N was A",
        "M and M V a A N",
        "there was a A N P the L",
        "M V the N C the N V D",
        "in the L the N was A and A",
    };
    const auto& tmpl = kTemplates[std::uniform_int_distribution<std::size_t>(0, kTemplates.size() - 1)(rng)];
    std::string s;
    std::size_t i = 0;
    while (i < tmpl.size()) {
      const std::size_t end = std::min(tmpl.find(' ', i), tmpl.size());
      const std::string_view part = tmpl.substr(i, end - i);
      if (!s.empty()) s.push_back(' ');
      if (part.size() == 1 && part != "a") {
        s += fill(part[0], rng);
      } else {
        s += part;
      }
      i = end + 1;
    }
    return s + ".";
  }

 private:
  std::string_view fill(char slot, std::mt19937_64& r) {
    switch (slot) {
      case 'N': return kNouns[noun_(r)];
      case 'A': return kAdjectives[adj_(r)];
      case 'V': return kVerbs[verb_(r)];
      case 'D': return kAdverbs[adv_(r)];
      case 'P': return kPrepositions[prep_(r)];
      case 'M': return kNames[name_(r)];
      case 'L': return kPlaces[place_(r)];
      case 'C': return kConnectives[conn_(r)];
    }
    throw std::logic_error("unknown grammar slot");
  }

  ZipfPicker noun_, adj_, verb_, adv_, prep_, name_, place_, conn_;
};

}  // namespace

std::size_t lexicon_size() {
  std::set<std::string_view> words;
  for (const auto* list : {&kNouns, &kAdjectives, &kVerbs, &kAdverbs, &kPrepositions, &kNames, &kPlaces,
                           &kConnectives}) {
    words.insert(list->begin(), list->end());
  }
  return words.size();
}

TokenSeq gen_corpus(std::uint64_t seed, std::size_t tokens) {
  if (tokens == 0) throw std::invalid_argument("gen_corpus: token count must be positive");
  std::mt19937_64 rng(seed);
  SentenceGrammar grammar;
  std::uniform_int_distribution<int> doc_len(4, 9);
  std::string text;
  text.reserve(tokens + 256);
  while (text.size() < tokens) {
    const int sentences = doc_len(rng);
    for (int i = 0; i < sentences; ++i) {
      if (i) text.push_back(' ');
      text += grammar.sentence(rng);
    }
    text.push_back('\n');
  }
  text.resize(tokens);
  return encode(text);
}

double unigram_entropy(std::span<const int> ids) {
  if (ids.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (int id : ids) ++counts[id];
  double h = 0;
  const double n = static_cast<double>(ids.size());
  for (const auto& [id, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

// ---- randomness ladder ------------------------------------------------------

std::string_view randomness_name(Randomness level) {
  switch (level) {
    case Randomness::kNormal: return "normal";
    case Randomness::kReversed: return "reversed";
    case Randomness::kPatterned: return "patterned";
    case Randomness::kRandom: return "random";
  }
  return "?";
}

std::array<LadderSample, 4> make_ladder(const TokenSeq& seq, std::uint64_t seed) {
  if (seq.empty()) throw std::invalid_argument("make_ladder: empty sequence");
  TokenSeq reversed = seq;
  std::reverse(reversed.ids.begin(), reversed.ids.end());
  TokenSeq patterned = seq;
  for (int& id : patterned.ids) {
    if (id + 1 >= kByteVocab || id + 1 >= seq.vocab) {
      throw std::out_of_range("make_ladder: shifting id " + std::to_string(id) + " leaves the byte range");
    }
    ++id;
  }
  TokenSeq random = seq;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(kTextByteLo, kTextByteHi);
  for (int& id : random.ids) id = byte(rng);
  return {LadderSample{Randomness::kNormal, seq}, LadderSample{Randomness::kReversed, std::move(reversed)},
          LadderSample{Randomness::kPatterned, std::move(patterned)}, LadderSample{Randomness::kRandom, std::move(random)}};
}

// ---- key/value tasks --------------------------------------------------------

KVTask gen_kv_task(std::uint64_t seed, std::size_t n_pairs, std::size_t key_len, std::size_t val_len,
                   std::size_t window) {
  if (n_pairs == 0 || key_len == 0 || val_len == 0) {
    throw std::invalid_argument("gen_kv_task: pair count and lengths must be positive");
  }
  const std::size_t length = n_pairs * (key_len + val_len + 2);
  if (length > window) {
    throw std::length_error("gen_kv_task: context of " + std::to_string(length) + " tokens exceeds window of " +
                            std::to_string(window));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> letter('a', 'z');
  auto word = [&](std::size_t len) {
    std::string w(len, 'a');
    for (auto& c : w) c = static_cast<char>(letter(rng));
    return w;
  };
  // Retry until the queried key occurs exactly once, including inside values.
  for (;;) {
    std::vector<std::string> keys, values;
    std::set<std::string> used;
    while (keys.size() < n_pairs) {
      std::string k = word(key_len);
      if (!used.insert(k).second) continue;
      keys.push_back(k);
      values.push_back(word(val_len));
    }
    std::string context;
    for (std::size_t i = 0; i < n_pairs; ++i) context += keys[i] + "=" + values[i] + ";";
    const std::size_t q = std::uniform_int_distribution<std::size_t>(0, n_pairs - 1)(rng);
    if (context.find(keys[q]) != context.rfind(keys[q])) continue;
    return KVTask{encode(context), encode(keys[q]), encode(values[q])};
  }
}

RenderedPrompt render_prompt(const TokenSeq& prompt, PromptTemplate tmpl) {
  const std::string p = decode(prompt);
  if (tmpl == PromptTemplate::kFull) {
    return {encode("Response the Prompt based on the below text:\n\n"), encode("\n\nPrompt:" + p)};
  }
  return {TokenSeq{}, encode("Prompt:" + p + "\n")};
}

std::string escape_bytes(std::string_view raw) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : raw) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\t') {
      out += "\\t";
    } else if (c == '\n') {
      out += "\\n";
    } else if (c < 32 || c >= 127) {
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 15]);
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

std::string unescape_bytes(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i >= s.size()) throw std::invalid_argument("unescape_bytes: dangling backslash");
    switch (s[i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'x': {
        if (i + 2 >= s.size()) throw std::invalid_argument("unescape_bytes: short \\x escape");
        out.push_back(static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16)));
        i += 2;
        break;
      }
      default: throw std::invalid_argument(std::string("unescape_bytes: unknown escape \\") + s[i]);
    }
  }
  return out;
}

void write_tasks(const std::string& path, std::span<const KVTask> tasks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : tasks) {
    out << escape_bytes(decode(t.context)) << '\t' << escape_bytes(decode(t.prompt)) << '\t'
        << escape_bytes(decode(t.answer)) << '\n';
  }
}

std::vector<KVTask> read_tasks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<KVTask> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3) throw std::runtime_error("task line needs 3 tab-separated fields: " + line);
    tasks.push_back({encode(unescape_bytes(fields[0])), encode(unescape_bytes(fields[1])),
                     encode(unescape_bytes(fields[2]))});
  }
  return tasks;
}

// ---- metrics ----------------------------------------------------------------

namespace {

std::map<std::vector<int>, std::size_t> ngram_counts(const std::vector<int>& ids, std::size_t n) {
  std::map<std::vector<int>, std::size_t> counts;
  if (ids.size() < n) return counts;
  for (std::size_t i = 0; i + n <= ids.size(); ++i) {
    ++counts[std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(i),
                              ids.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

double bleu4(const TokenSeq& reference, const TokenSeq& hypothesis) {
  if (reference.empty()) throw std::invalid_argument("bleu4: empty reference");
  if (hypothesis.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto ref = ngram_counts(reference.ids, n);
    auto hyp = ngram_counts(hypothesis.ids, n);
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, c] : hyp) {
      total += c;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    const double p = (matched == 0 || total == 0) ? kBleuEpsilon
                                                  : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hypothesis.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

RougeScore rouge_l(const TokenSeq& reference, const TokenSeq& hypothesis) {
  if (reference.empty() || hypothesis.empty()) throw std::invalid_argument("rouge_l: empty sequence");
  const std::size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = reference.ids[i - 1] == hypothesis.ids[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[m]);
  RougeScore s;
  s.recall = lcs / static_cast<double>(n);
  s.precision = lcs / static_cast<double>(m);
  s.f1 = lcs == 0 ? 0.0 : 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

}  // namespace icf
