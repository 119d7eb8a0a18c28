#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "icf/lm.hpp"

using namespace icf;
using TF = Tensor<float>;

namespace {

LMConfig tiny() {
  LMConfig c;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.intermediate = 32;
  c.max_positions = 32;
  return c;
}

TokenSeq text(const char* s) { return encode(s); }

bool same(const TF& a, const TF& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny();
  c.intermediate = 8;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  auto round = LMConfig::from_config([&] {
    ConfigMap m;
    tiny().to_config(m);
    return m;
  }());
  CHECK(round.hidden == 16);
  CHECK(round.max_positions == 32);
}

TEST_CASE("soft prefix and token inputs agree") {
  const auto lm = init_lm(tiny(), 1);
  const auto t = text("hello there");
  const auto plain = lm_forward(lm, SoftPrefix<float>{}, t);
  CHECK(plain.rows() == t.size());
  CHECK(plain.cols() == kVocab);

  SoftPrefix<float> as_rows;
  as_rows.push(embedding(lm.embed(), std::span<const int>(t.ids)));
  CHECK(same(lm_forward(lm, as_rows, TokenSeq{}), plain));
}

TEST_CASE("causality: a prefix row only affects later positions") {
  const auto lm = init_lm(tiny(), 2);
  const auto t = text("abcdef");
  SoftPrefix<float> p;
  std::mt19937_64 rng(3);
  p.push(normal_tensor({4, 16}, rng, 1.0));
  const auto base = lm_forward(lm, p, t);
  for (std::size_t i = 0; i < 4; ++i) {
    auto q = p;
    q.blocks[0] = p.blocks[0].detach();
    q.blocks[0].mutable_data()[i * 16 + 3] += 0.5f;
    const auto out = lm_forward(lm, q, t);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      bool row_same = true;
      for (std::size_t c = 0; c < out.cols(); ++c) row_same = row_same && out.at(r, c) == base.at(r, c);
      if (r < i) CHECK(row_same);
      else CHECK_FALSE(row_same);
    }
  }
}

TEST_CASE("length overflow") {
  const auto lm = init_lm(tiny(), 1);
  TokenSeq longer;
  longer.ids.assign(33, 'a');
  CHECK_THROWS_AS(lm_forward(lm, SoftPrefix<float>{}, longer), std::length_error);
}

TEST_CASE("greedy decoding") {
  auto lm = init_lm(tiny(), 4);
  SoftPrefix<float> p;
  p.push(TF::full({1, 16}, 1.0f));
  CHECK(generate_greedy(lm, p, 0).empty());
  CHECK(generate_greedy(lm, p, 6) == generate_greedy(lm, p, 6));

  // Silence every block and keep only embedding row 7: the model then
  // always prefers 7.
  for (auto& [name, t] : lm.tensors) {
    if (name.find("wo") != std::string::npos || name.find("w_down") != std::string::npos || name == "embed") {
      for (auto& v : t.mutable_data()) v = 0.0f;
    }
  }
  for (std::size_t c = 0; c < 16; ++c) lm.tensors["embed"].mutable_data()[7 * 16 + c] = 1.0f;
  CHECK(generate_greedy(lm, p, 5).ids == std::vector<int>(5, 7));
  CHECK(generate_greedy(lm, p, 5, 7).empty());

  // All-zero prefix gives all-zero logits; the lowest id wins the tie.
  SoftPrefix<float> z;
  z.push(TF::zeros({1, 16}));
  for (auto& v : lm.tensors["embed"].mutable_data()) v = 0.0f;
  CHECK(generate_greedy(lm, z, 3).ids == std::vector<int>(3, 0));
}

TEST_CASE("gradients reach prefix rows but not a frozen LM") {
  auto lm = init_lm(tiny(), 5);
  lm.set_trainable(false);
  std::mt19937_64 rng(6);
  auto row = normal_tensor({2, 16}, rng, 1.0);
  row.set_requires_grad(true);
  SoftPrefix<float> p;
  p.push(row);
  const auto t = text("xyz");
  std::vector<int> target{'y', 'z', kEos};
  auto loss = cross_entropy(slice_rows(lm_forward(lm, p, t), 2, 3), std::span<const int>(target));
  backward(loss);
  double norm = 0;
  for (float g : row.grad()) norm += g * g;
  CHECK(norm > 0);
  for (const auto& [name, tensor] : lm.tensors) CHECK_FALSE(tensor.has_grad());
}

TEST_CASE("LM stream maps newlines to the sentinel") {
  const auto s = lm_stream(text("ab\ncd"));
  CHECK(s == std::vector<int>{'a', 'b', kEos, 'c', 'd'});
}

TEST_CASE("training") {
  const auto corpus = gen_corpus(0, 60000);
  LMTrainConfig tc;
  tc.window = 32;
  tc.batch = 4;
  tc.eval_windows = 16;
  tc.log_every = 0;
  tc.repeat_fraction = 0;
  tc.kv_fraction = 0;

  SUBCASE("zero steps stays near uniform") {
    tc.steps = 0;
    const auto r = train_lm(corpus, tiny(), tc);
    CHECK(std::abs(r.initial_heldout_loss - std::log(256.0)) < 0.2);
    CHECK(r.final_heldout_loss == r.initial_heldout_loss);
  }
  SUBCASE("a short run learns and is reproducible") {
    tc.steps = 150;
    const auto a = train_lm(corpus, tiny(), tc);
    CHECK(a.final_heldout_loss < std::log(static_cast<double>(kVocab)));
    CHECK(a.final_heldout_loss < 0.7 * a.initial_heldout_loss);
    for (const auto& [name, t] : a.params.tensors) CHECK_FALSE(t.requires_grad());
    tc.steps = 5;
    CHECK(train_lm(corpus, tiny(), tc).fingerprint == train_lm(corpus, tiny(), tc).fingerprint);
  }
  SUBCASE("mixed windows need room") {
    tc.repeat_fraction = 0.3;
    tc.steps = 1;
    CHECK_THROWS_AS(train_lm(corpus, tiny(), tc), std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto lm = init_lm(tiny(), 7);
  const auto path = (std::filesystem::temp_directory_path() / "icf_lm_test.icf").string();
  save_lm(path, lm);
  const auto back = load_lm(path);
  CHECK(lm_fingerprint(back) == lm_fingerprint(lm));
  CHECK(back.config.hidden == 16);
  std::filesystem::remove(path);
}
