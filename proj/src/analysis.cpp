#include "icf/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "icf/training.hpp"

namespace icf {

std::string u128_str(u128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return {s.rbegin(), s.rend()};
}

namespace {

u128 mul(std::initializer_list<u128> factors) {
  u128 acc = 1;
  for (u128 f : factors) {
    if (__builtin_mul_overflow(acc, f, &acc)) throw std::overflow_error("flops: product exceeds 128 bits");
  }
  return acc;
}

void finish(FlopsReport& r, std::uint64_t layers) {
  r.per_layer = 0;
  for (const auto& t : r.terms) {
    if (__builtin_add_overflow(r.per_layer, t.flops, &r.per_layer)) throw std::overflow_error("flops: sum exceeds 128 bits");
  }
  r.layers = layers;
  r.total = mul({r.per_layer, layers});
}

std::string sci(u128 v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4e", static_cast<double>(v));
  return buf;
}

}  // namespace

FlopsReport flops_baseline(const FlopsParams& p) {
  const u128 b = p.b, t = u128(p.s) + p.k, h = p.h, m = p.m;
  FlopsReport r{"baseline", {}, 0, 0, 0};
  r.terms = {{"xW_Q/W_K/W_V", mul({6, b, t, h, h})}, {"QK^T", mul({2, b, t, t, h})},
             {"AV", mul({2, b, t, t, h})},           {"xW_O", mul({2, b, t, h, h})},
             {"x_out W_up", mul({2, b, t, h, m})},   {"x_out W_gate", mul({2, b, t, h, m})},
             {"x_out W_down", mul({2, b, t, h, m})}};
  finish(r, p.l1);
  return r;
}

FlopsReport flops_icformer(const FlopsParams& p) {
  const u128 b = p.b, k = p.k, t = u128(p.s) + p.k, h = p.h, m = p.m;
  FlopsReport r{"icformer", {}, 0, 0, 0};
  r.terms = {{"xW_Q", mul({2, b, k, h, h})},        {"xW_K/W_V", mul({4, b, t, h, h})},
             {"QK^T", mul({2, b, k, t, h})},        {"AV", mul({2, b, k, t, h})},
             {"xW_O", mul({2, b, k, h, h})},        {"x_out W_up", mul({2, b, k, h, m})},
             {"x_out W_gate", mul({2, b, k, h, m})}, {"x_out W_down", mul({2, b, k, h, m})}};
  finish(r, p.l2);
  return r;
}

double flops_ratio(const FlopsParams& p) {
  return static_cast<double>(flops_baseline(p).total) / static_cast<double>(flops_icformer(p).total);
}

double flops_ratio_closed_form(const FlopsParams& p) {
  const double s = static_cast<double>(p.s), k = static_cast<double>(p.k), h = static_cast<double>(p.h),
               m = static_cast<double>(p.m);
  const double num = static_cast<double>(p.l1) * (2 * (s + k) * (2 * h + s + k) + 3 * m * (s + k));
  const double den = static_cast<double>(p.l2) * (2 * k * h + (s + k) * (h + 2 * k) + 3 * m * k);
  return num / den;
}

std::string flops_text(const FlopsReport& baseline, const FlopsReport& icformer, const FlopsParams& p) {
  std::ostringstream os;
  os << "b=" << p.b << " s=" << p.s << " k=" << p.k << " h=" << p.h << " m=" << p.m << " l1=" << p.l1
     << " l2=" << p.l2 << "\n";
  for (const auto* r : {&baseline, &icformer}) {
    os << "\n" << r->method << " (per layer)\n";
    for (const auto& t : r->terms) {
      char line[96];
      std::snprintf(line, sizeof line, "  %-14s %s\n", t.name.c_str(), sci(t.flops).c_str());
      os << line;
    }
    os << "  per layer      " << sci(r->per_layer) << "\n";
    os << "  total (x" << r->layers << ")   " << sci(r->total) << "  [" << u128_str(r->total) << "]\n";
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "\nratio %.4f\nclosed-form ratio %.4f (compact expression; the per-term sums above are used)\n",
                static_cast<double>(baseline.total) / static_cast<double>(icformer.total),
                flops_ratio_closed_form(p));
  os << buf;
  return os.str();
}

std::string flops_csv(const FlopsReport& baseline, const FlopsReport& icformer) {
  std::ostringstream os;
  os << "method,term,flops\n";
  for (const auto* r : {&baseline, &icformer}) {
    for (const auto& t : r->terms) os << r->method << ',' << t.name << ',' << u128_str(t.flops) << '\n';
    os << r->method << ",per_layer," << u128_str(r->per_layer) << '\n';
    os << r->method << ",total," << u128_str(r->total) << '\n';
  }
  return os.str();
}

// ---- measured scaling ------------------------------------------------------

std::vector<ScalingRow> scaling_bench(const std::vector<std::size_t>& lengths, std::size_t k,
                                      const ICFormerConfig& icf, const BaselineConfig& base, std::size_t repeats,
                                      std::uint64_t seed) {
  if (lengths.empty()) return {};
  if (!std::is_sorted(lengths.begin(), lengths.end()) || lengths.front() == 0) {
    throw std::invalid_argument("scaling_bench: lengths must be positive and ascending");
  }
  repeats = std::max<std::size_t>(repeats, 5);
  ICFormerConfig ic = icf;
  ic.digest_tokens = k;
  ic.window = lengths.back();
  BaselineConfig bc = base;
  bc.memory_tokens = k;
  bc.window = lengths.back() + k;
  const auto ip = init_icformer(ic, seed);
  const auto bp = init_baseline(bc, seed + 1);
  std::mt19937_64 rng(seed + 2);
  const auto embed = normal_tensor({kVocab, ic.hidden}, rng, 0.02);
  std::uniform_int_distribution<int> byte(kTextByteLo, kTextByteHi);

  NoGradGuard no_grad;
  std::vector<ScalingRow> rows;
  for (std::size_t n : lengths) {
    TokenSeq ctx;
    for (std::size_t i = 0; i < n; ++i) ctx.ids.push_back(byte(rng));
    auto measure = [&](const std::string& method, auto&& fn) {
      std::uint64_t flops = 0;
      std::vector<double> ms;
      for (std::size_t r = 0; r < repeats; ++r) {
        FlopsScope scope;
        auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        flops = scope.count();
      }
      std::nth_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2), ms.end());
      rows.push_back({n, method, flops, ms[ms.size() / 2]});
    };
    measure("icformer", [&] { compress(ctx, ip, embed); });
    measure("baseline", [&] { encode_baseline(ctx, bp); });
  }
  return rows;
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::ostringstream os;
  os << "n,method,flops,wall_ms_median\n";
  for (const auto& r : rows) os << r.n << ',' << r.method << ',' << r.flops << ',' << r.wall_ms_median << '\n';
  return os.str();
}

// ---- attention maps ---------------------------------------------------------

namespace {

std::string token_label(int id) {
  if (id >= kTextByteLo && id <= kTextByteHi && id != ',') return std::string(1, static_cast<char>(id));
  return render(TokenSeq{{id}});
}

}  // namespace

std::vector<AttnMap> attn_maps(const TokenSeq& context, const ICFormerParams<float>& params,
                               const Tensor<float>& embed) {
  NoGradGuard no_grad;
  AttentionTrace<float> trace;
  CompressProbe<float> probe;
  probe.attention = &trace;
  compress(context, params, embed, &probe);
  const std::size_t k = params.config.digest_tokens, n = context.size();
  std::vector<std::string> labels;
  for (int id : context.ids) labels.push_back(token_label(id));
  for (std::size_t i = 0; i < k; ++i) labels.push_back("d" + std::to_string(i));

  std::vector<AttnMap> maps;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    AttnMap map{l, k, n + k, std::vector<double>(k * (n + k), 0.0), labels};
    const auto& heads = trace.layers[l].heads;
    for (const auto& h : heads) {
      for (std::size_t i = 0; i < map.weights.size(); ++i) map.weights[i] += h.data()[i];
    }
    for (auto& w : map.weights) w /= static_cast<double>(heads.size());
    maps.push_back(std::move(map));
  }
  return maps;
}

AttnMap attn_map(std::size_t layer, const TokenSeq& context, const ICFormerParams<float>& params,
                 const Tensor<float>& embed) {
  if (layer >= params.config.layers) {
    throw std::out_of_range("attn_map: layer " + std::to_string(layer) + " of a " +
                            std::to_string(params.config.layers) + "-layer compressor");
  }
  return std::move(attn_maps(context, params, embed)[layer]);
}

std::string attn_pgm(const AttnMap& map) {
  const double top = map.weights.empty() ? 0.0 : *std::max_element(map.weights.begin(), map.weights.end());
  std::ostringstream os;
  os << "P2\n" << map.cols << ' ' << map.rows << "\n255\n";
  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < map.cols; ++c) {
      const int v = top > 0 ? static_cast<int>(std::lround(255.0 * map.at(r, c) / top)) : 0;
      os << (c ? " " : "") << v;
    }
    os << '\n';
  }
  return os.str();
}

std::string attn_csv(const AttnMap& map) {
  std::ostringstream os;
  os.precision(9);
  os << "digest";
  for (const auto& l : map.labels) {
    os << ",\"";
    for (char ch : l) os << (ch == '"' ? "\"\"" : std::string(1, ch));
    os << '"';
  }
  os << '\n';
  for (std::size_t r = 0; r < map.rows; ++r) {
    os << r;
    for (std::size_t c = 0; c < map.cols; ++c) os << ',' << map.at(r, c);
    os << '\n';
  }
  return os.str();
}

namespace {

std::size_t argmax_context(const AttnMap& map, std::size_t row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c) {
    if (map.at(row, c) > map.at(row, best)) best = c;
  }
  return best;
}

std::vector<std::size_t> top_positions(const AttnMap& map, std::size_t row, std::size_t n, std::size_t top_n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return map.at(row, a) > map.at(row, b); });
  idx.resize(std::min(top_n, n));
  return idx;
}

}  // namespace

double backslash_score(const AttnMap& map, std::size_t n_context) {
  if (n_context == 0 || n_context > map.cols) throw std::invalid_argument("backslash_score: bad context length");
  if (map.rows < 2) return 1.0;
  std::size_t ok = 0;
  std::size_t prev = argmax_context(map, 0, n_context);
  for (std::size_t r = 1; r < map.rows; ++r) {
    const std::size_t cur = argmax_context(map, r, n_context);
    if (cur >= prev) ++ok;
    prev = cur;
  }
  return static_cast<double>(ok) / static_cast<double>(map.rows - 1);
}

TopAttended top_attended(std::size_t layer, const TokenSeq& context, const ICFormerParams<float>& params,
                         const Tensor<float>& embed, std::size_t top_n) {
  if (layer >= params.config.layers) throw std::out_of_range("top_attended: invalid layer");
  if (top_n == 0) throw std::invalid_argument("top_attended: top_n must be positive");
  const auto maps = attn_maps(context, params, embed);
  const std::size_t n = context.size();
  TopAttended out;
  std::set<std::size_t> covered;
  for (std::size_t d = 0; d < params.config.digest_tokens; ++d) {
    std::vector<std::vector<std::size_t>> per_layer;
    for (const auto& m : maps) {
      per_layer.push_back(top_positions(m, d, n, top_n));
      covered.insert(per_layer.back().begin(), per_layer.back().end());
    }
    const auto& chosen = per_layer[layer];
    for (std::size_t rank = 0; rank < chosen.size(); ++rank) {
      const std::size_t pos = chosen[rank];
      std::size_t first = layer;
      for (std::size_t l = 0; l < layer; ++l) {
        if (std::find(per_layer[l].begin(), per_layer[l].end(), pos) != per_layer[l].end()) {
          first = l;
          break;
        }
      }
      out.entries.push_back({d, rank, pos, token_label(context.ids[pos]), first});
    }
  }
  out.coverage = static_cast<double>(covered.size()) / static_cast<double>(n);
  return out;
}

std::string top_attended_csv(const TopAttended& top) {
  std::ostringstream os;
  os << "digest_index,rank,context_pos,token,first_layer\n";
  for (const auto& e : top.entries) {
    os << e.digest << ',' << e.rank << ',' << e.context_pos << ",\"";
    for (char ch : e.token) os << (ch == '"' ? "\"\"" : std::string(1, ch));
    os << "\"," << e.first_layer << '\n';
  }
  return os.str();
}

// ---- evaluation -------------------------------------------------------------

namespace {

std::size_t room(const LMParams<float>& lm, const SoftPrefix<float>& prefix, std::size_t wanted) {
  const std::size_t used = prefix.rows();
  const std::size_t cap = lm.config.max_positions > used ? lm.config.max_positions - used : 0;
  return std::min(wanted, cap);
}

}  // namespace

ReconstructResult reconstruct_eval(const std::vector<TokenSeq>& contexts, const ICFormerParams<float>& params,
                                   const LMParams<float>& lm, std::size_t chunk_size) {
  NoGradGuard no_grad;
  const std::size_t chunk = chunk_size ? chunk_size : params.config.window;
  ReconstructResult out;
  for (const auto& c : contexts) {
    const auto digests = compress_chunked(c, chunk, params, lm.embed());
    const auto prefix = ae_prefix(digests, params);
    Transcript t;
    t.reference = c;
    t.output = generate_greedy(lm, prefix, room(lm, prefix, c.size() + 8), kEos);
    t.bleu = bleu4(c, t.output);
    t.ce = ae_loss(c, params, lm, chunk).item();
    out.bleu4 += t.bleu;
    out.ce += t.ce;
    out.transcripts.push_back(std::move(t));
  }
  if (!contexts.empty()) {
    out.bleu4 /= static_cast<double>(contexts.size());
    out.ce /= static_cast<double>(contexts.size());
  }
  return out;
}

std::string transcript_text(const ReconstructResult& result) {
  std::ostringstream os;
  char buf[96];
  for (std::size_t i = 0; i < result.transcripts.size(); ++i) {
    const auto& t = result.transcripts[i];
    std::snprintf(buf, sizeof buf, "[%zu] bleu4 %.4f ce %.4f\n", i, t.bleu, t.ce);
    os << buf << "ref: " << render(t.reference) << "\nout: " << render(t.output) << "\n";
  }
  std::snprintf(buf, sizeof buf, "mean bleu4 %.4f\nmean ce %.4f\n", result.bleu4, result.ce);
  os << buf;
  return os.str();
}

TokenSeq ask(const TokenSeq& context, const TokenSeq& prompt, const ICFormerParams<float>& params,
             const LMParams<float>& lm, PromptTemplate tmpl, std::size_t max_new, std::size_t chunk_size) {
  NoGradGuard no_grad;
  const auto digests = compress_chunked(context, chunk_size ? chunk_size : params.config.window, params, lm.embed());
  const auto prefix = prompt_prefix(digests, render_prompt(prompt, tmpl), lm);
  return generate_greedy(lm, prefix, room(lm, prefix, max_new), kEos);
}

double kv_exact_match(const std::vector<KVTask>& tasks, const ICFormerParams<float>& params, const LMParams<float>& lm,
                      PromptTemplate tmpl) {
  if (tasks.empty()) return 0;
  std::size_t hits = 0;
  for (const auto& t : tasks) hits += ask(t.context, t.prompt, params, lm, tmpl, t.answer.size() + 4) == t.answer;
  return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

std::vector<LadderRow> ladder_eval(const std::vector<TokenSeq>& contexts, const ICFormerParams<float>& params,
                                   const LMParams<float>& lm, std::uint64_t seed) {
  std::array<std::vector<TokenSeq>, 4> levels;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const auto ladder = make_ladder(contexts[i], seed + i);
    for (std::size_t j = 0; j < 4; ++j) levels[j].push_back(ladder[j].seq);
  }
  std::vector<LadderRow> rows;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto r = reconstruct_eval(levels[j], params, lm);
    rows.push_back({static_cast<Randomness>(j), r.bleu4, r.ce});
  }
  return rows;
}

std::string ladder_text(const std::vector<LadderRow>& rows) {
  std::ostringstream os;
  os << "level,bleu4,ce\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f\n", std::string(randomness_name(r.level)).c_str(), r.bleu4, r.ce);
    os << buf;
  }
  return os.str();
}

}  // namespace icf
