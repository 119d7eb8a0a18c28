#include <doctest.h>

#include <cmath>

#include "check.hpp"
#include "icf/training.hpp"

using namespace icf;
using TF = Tensor<float>;

namespace {

LMConfig tiny_lm() {
  LMConfig c;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.intermediate = 32;
  c.max_positions = 64;
  return c;
}

ICFormerConfig tiny_icf() {
  ICFormerConfig c;
  c.digest_tokens = 3;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 16;
  c.intermediate = 32;
  c.window = 16;
  return c;
}

LMParams<float> frozen(std::uint64_t seed) {
  auto lm = init_lm(tiny_lm(), seed);
  lm.set_trainable(false);
  return lm;
}

TokenSeq ctx(const char* s) { return encode(s); }

bool same_params(const ParamMap<float>& a, const ParamMap<float>& b) {
  return fingerprint(a) == fingerprint(b);
}

}  // namespace

TEST_CASE("reconstruction loss") {
  const auto lm = frozen(1);
  const auto p = init_icformer(tiny_icf(), 2);
  const auto c = ctx("the cat sat");

  SUBCASE("untrained models sit near the uniform loss") {
    CHECK(std::abs(ae_loss(c, p, lm).item() - std::log(static_cast<double>(kVocab))) < 0.3);
  }
  SUBCASE("equals cross entropy of the explicit slice") {
    const auto d = compress(c, p, lm.embed());
    const auto logits = lm_forward(lm, ae_prefix(d, p), c);
    CHECK(logits.rows() == 3 + 1 + c.size());
    std::vector<int> targets(c.ids);
    targets.push_back(kEos);
    const auto expect = cross_entropy(slice_rows(logits, 3, c.size() + 1), std::span<const int>(targets));
    CHECK(ae_loss(c, p, lm).item() == doctest::Approx(expect.item()).epsilon(1e-6));
  }
  SUBCASE("too long for the compressor") {
    CHECK_THROWS_AS(ae_loss(ctx("0123456789abcdefg"), p, lm, 17), std::invalid_argument);
  }
}

TEST_CASE("finite-difference gradient of the reconstruction loss w.r.t. digest embeddings") {
  const auto lm32 = frozen(3);
  const auto p32 = init_icformer(tiny_icf(), 4);
  LMParams<double> lm{lm32.config, cast_params<double>(lm32.tensors)};
  ICFormerParams<double> p{p32.config, cast_params<double>(p32.tensors)};
  // Scale up the blocks so the check is not dominated by the residual path.
  for (auto& [name, t] : p.tensors)
    if (name.starts_with("layers.") && name.find("norm") == std::string::npos)
      for (auto& v : t.mutable_data()) v *= 20.0;
  for (auto& [name, t] : lm.tensors) t.set_requires_grad(false);
  const auto c = ctx("a red dog ran");
  const double err = test::grad_rel_error(
      [&](const std::vector<Tensor<double>>& in) {
        auto q = p;
        q.tensors["digest"] = in[0];
        return ae_loss(c, q, lm);
      },
      {p.digest().detach()});
  CHECK(err <= 1e-4);
}

TEST_CASE("answer loss") {
  const auto lm = frozen(5);
  const auto p = init_icformer(tiny_icf(), 6);
  KVTask t{ctx("ab=xyz;cd=uvw;"), ctx("cd"), ctx("uvw")};

  SUBCASE("equals cross entropy of the explicit slice") {
    for (auto tmpl : {PromptTemplate::kDesk, PromptTemplate::kFull}) {
      const auto d = compress(t.context, p, lm.embed());
      const auto r = render_prompt(t.prompt, tmpl);
      // Full sequence as plain rows: [before; digests; after; answer].
      SoftPrefix<float> rows;
      if (!r.before.empty()) rows.push(embedding(lm.embed(), std::span<const int>(r.before.ids)));
      rows.push(d.vectors);
      if (tmpl == PromptTemplate::kFull && rows.rows() + r.after.size() + 4 > lm.config.max_positions) continue;
      rows.push(embedding(lm.embed(), std::span<const int>(r.after.ids)));
      const std::size_t start = rows.rows() - 1;
      const auto logits = lm_forward(lm, rows, t.answer);
      std::vector<int> targets(t.answer.ids);
      targets.push_back(kEos);
      const auto expect = cross_entropy(slice_rows(logits, start, 4), std::span<const int>(targets));
      CHECK(ft_loss(t, p, lm, tmpl).item() == doctest::Approx(expect.item()).epsilon(1e-6));
    }
  }
  SUBCASE("empty answer") {
    KVTask empty = t;
    empty.answer = TokenSeq{};
    CHECK_THROWS_AS(ft_loss(empty, p, lm), std::invalid_argument);
  }
}

TEST_CASE("trainable sets") {
  const auto lm = frozen(7);
  auto p = init_icformer(tiny_icf(), 8);
  const auto c = ctx("one two three");
  KVTask t{ctx("ab=xyz;"), ctx("ab"), ctx("xyz")};

  set_stage_trainable(p, Stage::kPretrain);
  for (auto& [name, tensor] : p.tensors) tensor.zero_grad();
  backward(ae_loss(c, p, lm));
  for (const auto& [name, tensor] : p.tensors) {
    double n = 0;
    for (float g : tensor.grad()) n += std::abs(g);
    CHECK_MESSAGE(n > 0, name);
  }
  for (const auto& [name, tensor] : lm.tensors) CHECK_FALSE(tensor.has_grad());

  set_stage_trainable(p, Stage::kFinetune);
  for (auto& [name, tensor] : p.tensors) tensor.zero_grad();
  backward(ft_loss(t, p, lm));
  for (const auto& [name, tensor] : p.tensors) {
    double n = 0;
    for (float g : tensor.grad()) n += std::abs(g);
    if (name == "ae") {
      CHECK_FALSE(tensor.requires_grad());
      CHECK(n == 0);
    } else {
      CHECK_MESSAGE(n > 0, name);
    }
  }
}

TEST_CASE("training loop") {
  const auto lm = frozen(9);
  const auto corpus = gen_corpus(0, 20000);
  const ContextSampler sampler(corpus, 12, 0.0, 0.9);
  const auto data = pretrain_stream(sampler, 3);
  TrainConfig tc;
  tc.accum = 2;
  tc.chunk_size = 16;

  SUBCASE("zero steps leaves parameters untouched") {
    auto p = init_icformer(tiny_icf(), 10);
    const auto before = p.tensors;
    ParamMap<float> copy;
    for (const auto& [n, t] : before) copy[n] = t.detach();
    tc.steps = 0;
    const auto r = train(data, tc, p, lm);
    CHECK(r.log.empty());
    CHECK(same_params(p.tensors, copy));
  }
  SUBCASE("the LM stays frozen and runs are reproducible") {
    tc.steps = 4;
    tc.checkpoint_every = 2;
    const auto fp = lm_fingerprint(lm);
    auto a = init_icformer(tiny_icf(), 11), b = init_icformer(tiny_icf(), 11);
    std::vector<std::size_t> saved;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](std::size_t step, const ICFormerParams<float>&) { saved.push_back(step); };
    const auto r = train(data, tc, a, lm, hooks);
    train(data, tc, b, lm);
    CHECK(r.lm_fingerprint == fp);
    CHECK(lm_fingerprint(lm) == fp);
    CHECK(r.log.size() == 4);
    CHECK(saved == std::vector<std::size_t>{2, 4});
    CHECK(same_params(a.tensors, b.tensors));
    const auto init = init_icformer(tiny_icf(), 11);
    CHECK_FALSE(same_params(a.tensors, init.tensors));
    const auto csv = loss_csv(r.log);
    CHECK(csv.starts_with("step,stage,loss,grad_norm,lr\n1,pretrain,"));
  }
  SUBCASE("an unfrozen LM is refused") {
    auto open = init_lm(tiny_lm(), 12);
    open.set_trainable(true);
    auto p = init_icformer(tiny_icf(), 13);
    tc.steps = 1;
    CHECK_THROWS_AS(train(data, tc, p, open), std::invalid_argument);
  }
  SUBCASE("non-finite values abort with the step") {
    auto p = init_icformer(tiny_icf(), 14);
    tc.steps = 3;
    for (auto& v : p.tensors["digest"].mutable_data()) v = 3e38f;
    try {
      train(data, tc, p, lm);
      FAIL("expected a training error");
    } catch (const TrainingError& e) {
      CHECK(e.step() == 1);
    }
  }
}

TEST_CASE("accumulated update equals one step on the mean gradient") {
  const auto lm = frozen(15);
  const auto corpus = gen_corpus(1, 20000);
  const ContextSampler sampler(corpus, 10, 0.0, 0.9);
  const auto data = pretrain_stream(sampler, 4);
  TrainConfig tc;
  tc.accum = 4;
  tc.steps = 1;
  tc.clip_norm = 1e9;
  tc.chunk_size = 16;

  auto trained = init_icformer(tiny_icf(), 16);
  train(data, tc, trained, lm);

  auto manual = init_icformer(tiny_icf(), 16);
  set_stage_trainable(manual, Stage::kPretrain);
  std::map<std::string, std::vector<double>> mean;
  for (std::size_t i = 0; i < 4; ++i) {
    for (auto& [n, t] : manual.tensors) t.zero_grad();
    backward(ae_loss(std::get<TokenSeq>(data(i)), manual, lm, 16));
    for (auto& [n, t] : manual.tensors) {
      auto& m = mean[n];
      m.resize(t.numel(), 0.0);
      for (std::size_t j = 0; j < t.numel(); ++j) m[j] += t.grad()[j] / 4.0;
    }
  }
  for (auto& [n, t] : manual.tensors)
    for (std::size_t j = 0; j < t.numel(); ++j) t.mutable_grad()[j] = static_cast<float>(mean[n][j]);
  AdamW opt({tc.lr, tc.beta1, tc.beta2, 1e-8, tc.weight_decay});
  opt.step(manual.tensors);

  double worst = 0;
  for (const auto& [n, t] : manual.tensors)
    for (std::size_t j = 0; j < t.numel(); ++j)
      worst = std::max(worst, std::abs(double(t.data()[j]) - trained.tensors.at(n).data()[j]));
  CHECK(worst <= 1e-6);
}

TEST_CASE("data streams") {
  const auto corpus = gen_corpus(2, 30000);
  const ContextSampler s(corpus, 20, 0.0, 0.5);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto w = s.sample(seed);
    CHECK(w.size() == 20);
    CHECK(std::find(w.ids.begin(), w.ids.end(), '\n') == w.ids.end());
  }
  CHECK(s.sample(3) == s.sample(3));
  CHECK(s.evenly(5).size() == 5);
  CHECK_THROWS_AS(ContextSampler(corpus, 100000, 0.0, 1.0), std::invalid_argument);

  const auto kv = kv_stream(8, KVTaskShape{}, 64);
  CHECK(std::get<KVTask>(kv(4)).context == std::get<KVTask>(kv(4)).context);
  CHECK(std::get<KVTask>(kv(4)).context != std::get<KVTask>(kv(5)).context);
  CHECK(parse_stage("finetune") == Stage::kFinetune);
  CHECK_THROWS(parse_stage("other"));
}
