#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>

#include "icf/text.hpp"

using namespace icf;

namespace {

TokenSeq seq(std::vector<int> ids) { return TokenSeq{std::move(ids)}; }

// Straightforward BLEU-4 written independently of the library version.
double bleu_oracle(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<int>, int> rc, hc;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) rc[{ref.begin() + i, ref.begin() + i + n}]++;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) hc[{hyp.begin() + i, hyp.begin() + i + n}]++;
    int match = 0, total = 0;
    for (auto& [g, c] : hc) {
      total += c;
      match += std::min(c, rc.count(g) ? rc[g] : 0);
    }
    const double p = (total == 0 || match == 0) ? kBleuEpsilon : static_cast<double>(match) / total;
    log_sum += std::log(p) / 4;
  }
  const double bp = hyp.size() >= ref.size() ? 1.0 : std::exp(1.0 - static_cast<double>(ref.size()) / hyp.size());
  return bp * std::exp(log_sum);
}

std::size_t lcs(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t[a.size()][b.size()];
}

}  // namespace

TEST_CASE("encode / decode") {
  CHECK(encode("AB").ids == std::vector<int>{65, 66});
  CHECK(encode("").ids.empty());
  std::mt19937_64 rng(1);
  std::string raw;
  for (int i = 0; i < 1000; ++i) raw.push_back(static_cast<char>(rng() & 0xff));
  CHECK(decode(encode(raw)) == raw);
  for (int id : encode(raw).ids) CHECK(id < kByteVocab);
  CHECK_THROWS_AS(decode(seq({65, kEos})), std::invalid_argument);
  CHECK(render(seq({65, kEos})) == "A<eos>");
}

TEST_CASE("corpus generator") {
  const auto a = gen_corpus(0, 20000), b = gen_corpus(0, 20000), c = gen_corpus(1, 20000);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.size() == 20000);
  CHECK(lexicon_size() >= 400);
  CHECK(lexicon_size() <= 600);

  const auto big = gen_corpus(3, 100000);
  std::mt19937_64 rng(2);
  std::vector<int> uniform(100000);
  for (auto& v : uniform) v = static_cast<int>(rng() % 256);
  CHECK(unigram_entropy(big.ids) < unigram_entropy(uniform));
  CHECK(std::count(big.ids.begin(), big.ids.end(), '\n') > 100);
}

TEST_CASE("randomness ladder") {
  const auto ladder = make_ladder(seq({1, 2, 3}), 5);
  CHECK(ladder[0].level == Randomness::kNormal);
  CHECK(ladder[0].seq.ids == std::vector<int>{1, 2, 3});
  CHECK(ladder[1].seq.ids == std::vector<int>{3, 2, 1});
  CHECK(ladder[2].seq.ids == std::vector<int>{2, 3, 4});
  for (const auto& s : ladder) CHECK(s.seq.size() == 3);
  CHECK_THROWS_AS(make_ladder(seq({255}), 0), std::out_of_range);
  CHECK_THROWS_AS(make_ladder(seq({}), 0), std::invalid_argument);

  SUBCASE("random level is reproducible and close to uniform") {
    const auto base = gen_corpus(0, 20000);
    const auto r1 = make_ladder(base, 7)[3].seq, r2 = make_ladder(base, 7)[3].seq;
    CHECK(r1 == r2);
    const int bins = kTextByteHi - kTextByteLo + 1;
    std::vector<double> counts(bins, 0);
    for (int id : r1.ids) {
      REQUIRE(id >= kTextByteLo);
      REQUIRE(id <= kTextByteHi);
      counts[id - kTextByteLo] += 1;
    }
    const double expect = static_cast<double>(r1.size()) / bins;
    double chi2 = 0;
    for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
    // 94 degrees of freedom; the 0.999 quantile is about 142.
    CHECK(chi2 < 142.0);
  }
}

TEST_CASE("key/value tasks") {
  const auto one = gen_kv_task(3, 1, 2, 3, 64);
  CHECK(decode(one.context) == decode(one.prompt) + "=" + decode(one.answer) + ";");
  CHECK(gen_kv_task(9, 4, 2, 3, 64).context == gen_kv_task(9, 4, 2, 3, 64).context);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto t = gen_kv_task(s, 4, 2, 3, 64);
    const auto ctx = decode(t.context);
    const auto needle = decode(t.prompt) + "=";
    const auto at = ctx.find(needle);
    REQUIRE(at != std::string::npos);
    CHECK(ctx.find(needle, at + 1) == std::string::npos);
    CHECK(ctx.substr(at + needle.size(), t.answer.size()) == decode(t.answer));
  }
  CHECK_THROWS_AS(gen_kv_task(0, 20, 2, 3, 64), std::length_error);
}

TEST_CASE("prompt templates") {
  const auto desk = render_prompt(encode("ab"), PromptTemplate::kDesk);
  CHECK(desk.before.empty());
  CHECK(decode(desk.after) == "Prompt:ab\n");
  const auto full = render_prompt(encode("ab"), PromptTemplate::kFull);
  CHECK(decode(full.before) == "Response the Prompt based on the below text:\n\n");
  CHECK(decode(full.after) == "\n\nPrompt:ab");
}

TEST_CASE("task files round trip") {
  std::vector<KVTask> tasks{gen_kv_task(1, 3, 2, 3, 64), gen_kv_task(2, 2, 2, 3, 64)};
  tasks[1].context = encode("tab\there\nnew\\line");
  const auto path = (std::filesystem::temp_directory_path() / "icf_tasks_test.tsv").string();
  write_tasks(path, tasks);
  const auto back = read_tasks(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].context == tasks[i].context);
    CHECK(back[i].prompt == tasks[i].prompt);
    CHECK(back[i].answer == tasks[i].answer);
  }
  std::filesystem::remove(path);
  CHECK(unescape_bytes(escape_bytes("\x01\t\\")) == "\x01\t\\");
  CHECK_THROWS_AS(unescape_bytes("\\x4"), std::invalid_argument);
}

TEST_CASE("bleu4") {
  const auto ref = seq({1, 2, 3, 4, 5});
  CHECK(bleu4(ref, ref) == doctest::Approx(1.0));
  CHECK(bleu4(ref, seq({9, 8, 7, 6, 10})) <= 1e-6);
  CHECK(bleu4(ref, seq({})) == 0.0);
  const double b = bleu4(ref, seq({1, 2, 3, 4, 6}));
  CHECK(b == doctest::Approx(std::pow(0.2, 0.25)).epsilon(1e-12));
  CHECK(b == doctest::Approx(bleu_oracle(ref.ids, {1, 2, 3, 4, 6})).epsilon(1e-12));

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> r(3 + rng() % 20), h(1 + rng() % 25);
    for (auto& v : r) v = static_cast<int>(rng() % 4);
    for (auto& v : h) v = static_cast<int>(rng() % 4);
    CHECK(bleu4(seq(r), seq(h)) == doctest::Approx(bleu_oracle(r, h)).epsilon(1e-9));
  }

  // Equal sequences stay at 1 as matched suffixes are appended.
  auto grow = ref;
  for (int extra : {7, 8, 7, 9}) {
    grow.ids.push_back(extra);
    CHECK(bleu4(grow, grow) == doctest::Approx(1.0));
  }
}

TEST_CASE("rouge_l") {
  const auto a = seq({1, 2, 3, 4});
  const auto same = rouge_l(a, a);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.f1 == 1.0);
  const auto disjoint = rouge_l(a, seq({7, 8}));
  CHECK(disjoint.f1 == 0.0);
  CHECK(disjoint.precision == 0.0);
  const auto r = rouge_l(a, seq({1, 3, 4}));
  CHECK(r.recall == doctest::Approx(0.75));
  CHECK(r.precision == doctest::Approx(1.0));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> x(1 + rng() % 15), y(1 + rng() % 15);
    for (auto& v : x) v = static_cast<int>(rng() % 5);
    for (auto& v : y) v = static_cast<int>(rng() % 5);
    const auto s = rouge_l(seq(x), seq(y));
    CHECK(s.recall == doctest::Approx(static_cast<double>(lcs(x, y)) / x.size()));
    CHECK(s.precision == doctest::Approx(static_cast<double>(lcs(x, y)) / y.size()));
  }
}
