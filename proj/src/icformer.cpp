#include "icf/icformer.hpp"

#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>

namespace icf {

namespace {

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

std::size_t get_size(const ConfigMap& in, const std::string& key, std::size_t fallback) {
  auto it = in.find(key);
  return it == in.end() ? fallback : static_cast<std::size_t>(std::stoull(it->second));
}

double get_double(const ConfigMap& in, const std::string& key, double fallback) {
  auto it = in.find(key);
  return it == in.end() ? fallback : std::stod(it->second);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void ICFormerConfig::validate() const {
  if (digest_tokens == 0) throw std::invalid_argument("icformer: need at least one digest token");
  if (hidden == 0 || hidden % 2 != 0) throw std::invalid_argument("icformer: hidden size must be even");
  if (heads == 0 || hidden % heads != 0) throw std::invalid_argument("icformer: hidden must be divisible by heads");
  if ((hidden / heads) % 2 != 0) throw std::invalid_argument("icformer: head dimension must be even");
  if (layers == 0 || intermediate == 0 || window == 0) throw std::invalid_argument("icformer: sizes must be positive");
}

void ICFormerConfig::to_config(ConfigMap& out) const {
  out["icf.digest_tokens"] = std::to_string(digest_tokens);
  out["icf.layers"] = std::to_string(layers);
  out["icf.heads"] = std::to_string(heads);
  out["icf.hidden"] = std::to_string(hidden);
  out["icf.intermediate"] = std::to_string(intermediate);
  out["icf.window"] = std::to_string(window);
  out["icf.theta_base"] = fmt(theta_base);
  out["icf.rms_eps"] = fmt(rms_eps);
  out["icf.rope"] = rope ? "1" : "0";
}

ICFormerConfig ICFormerConfig::from_config(const ConfigMap& in) {
  ICFormerConfig c;
  c.digest_tokens = get_size(in, "icf.digest_tokens", c.digest_tokens);
  c.layers = get_size(in, "icf.layers", c.layers);
  c.heads = get_size(in, "icf.heads", c.heads);
  c.hidden = get_size(in, "icf.hidden", c.hidden);
  c.intermediate = get_size(in, "icf.intermediate", c.intermediate);
  c.window = get_size(in, "icf.window", c.window);
  c.theta_base = get_double(in, "icf.theta_base", c.theta_base);
  c.rms_eps = get_double(in, "icf.rms_eps", c.rms_eps);
  c.rope = get_size(in, "icf.rope", 1) != 0;
  return c;
}

ICFormerParams<float> init_icformer(const ICFormerConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  constexpr double kInitStd = 0.02;
  ICFormerParams<float> p{config, {}};
  // Digest and [AE] rows start at unit scale, like normalized hidden states.
  p.tensors["digest"] = normal_tensor({config.digest_tokens, config.hidden}, rng, 1.0);
  p.tensors["ae"] = normal_tensor({1, config.hidden}, rng, 1.0);
  for (std::size_t i = 0; i < config.layers; ++i) init_block(p.tensors, layer_prefix(i), config.block(), rng, kInitStd);
  p.tensors["final_norm"] = Tensor<float>::full({config.hidden}, 1.0f);
  return p;
}

void save_icformer(const std::string& path, const ICFormerParams<float>& params, const ConfigMap& extra) {
  Checkpoint ckpt;
  for (const auto& [name, t] : params.tensors) ckpt.tensors.emplace(name, t.detach());
  ckpt.config = extra;
  params.config.to_config(ckpt.config);
  ckpt.config["kind"] = "icformer";
  save_checkpoint(path, ckpt);
}

ICFormerParams<float> load_icformer(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  auto kind = ckpt.config.find("kind");
  if (kind == ckpt.config.end() || kind->second != "icformer") throw std::runtime_error(path + " is not a compressor checkpoint");
  ICFormerParams<float> p{ICFormerConfig::from_config(ckpt.config), std::move(ckpt.tensors)};
  p.config.validate();
  return p;
}

Mask build_mask(std::size_t n, std::size_t k) {
  Mask m{k, n + k, std::vector<std::uint8_t>(k * (n + k), 0)};
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c <= n + i; ++c) m.bits[i * (n + k) + c] = 1;
  return m;
}

template <class T>
DigestSet<T> compress(const TokenSeq& context, const ICFormerParams<T>& params, const Tensor<T>& embed,
                      CompressProbe<T>* probe) {
  const auto& cfg = params.config;
  const std::size_t n = context.size();
  const std::size_t k = cfg.digest_tokens;
  if (n == 0) throw std::invalid_argument("compress: empty context");
  if (n > cfg.window) {
    throw std::length_error("compress: context of " + std::to_string(n) + " tokens exceeds the window of " +
                            std::to_string(cfg.window));
  }
  if (embed.cols() != cfg.hidden) throw ShapeError("compress: embedding width differs from compressor hidden size");

  const T eps = static_cast<T>(cfg.rms_eps);
  const std::size_t dh = cfg.hidden / cfg.heads;
  const Tensor<T> ctx = embedding(embed, std::span<const int>(context.ids));
  const Mask mask = build_mask(n, k);
  // Context keys sit at 1..n, digests continue at n+1..n+k.
  std::vector<std::size_t> key_pos(n + k);
  for (std::size_t i = 0; i < n + k; ++i) key_pos[i] = i + 1;
  const std::span<const std::size_t> query_pos(key_pos.data() + n, k);

  Tensor<T> x = params.digest();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (probe && probe->rewrite_digests) x = probe->rewrite_digests(l, x);
    const std::string pre = layer_prefix(l);
    const auto& norm_w = param(params.tensors, pre + "attn_norm");
    auto ctx_n = rms_norm(ctx, norm_w, eps);
    auto hn = rms_norm(x, norm_w, eps);
    if (probe) probe->context_kv_inputs.push_back(ctx_n);
    auto kv_in = concat_rows<T>({ctx_n, hn});
    auto q = matmul(hn, param(params.tensors, pre + "wq"));
    auto key = matmul(kv_in, param(params.tensors, pre + "wk"));
    auto val = matmul(kv_in, param(params.tensors, pre + "wv"));
    if (cfg.rope) {
      q = rope(q, query_pos, dh, cfg.theta_base);
      key = rope(key, key_pos, dh, cfg.theta_base);
    }
    HeadWeights<T>* capture = nullptr;
    if (probe && probe->attention) capture = &probe->attention->layers.emplace_back();
    auto attn = matmul(multi_head_attention(q, key, val, cfg.heads, mask, capture), param(params.tensors, pre + "wo"));
    x = add(x, attn);
    auto fn = rms_norm(x, param(params.tensors, pre + "ffn_norm"), eps);
    x = add(x, gated_ffn(fn, param(params.tensors, pre + "w_up"), param(params.tensors, pre + "w_gate"),
                         param(params.tensors, pre + "w_down")));
  }
  DigestSet<T> out;
  out.vectors = rms_norm(x, param(params.tensors, "final_norm"), eps);
  out.spans.push_back({0, n, k});
  return out;
}

std::vector<std::size_t> chunk_sizes(std::size_t n, std::size_t chunk_size) {
  if (chunk_size == 0) throw std::invalid_argument("chunk size must be positive");
  if (n == 0) return {};
  const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
  const std::size_t base = n / chunks, extra = n % chunks;
  std::vector<std::size_t> sizes(chunks, base);
  for (std::size_t i = 0; i < extra; ++i) ++sizes[i];
  return sizes;
}

template <class T>
DigestSet<T> compress_chunked(const TokenSeq& context, std::size_t chunk_size, const ICFormerParams<T>& params,
                              const Tensor<T>& embed) {
  if (chunk_size > params.config.window) {
    throw std::invalid_argument("compress_chunked: chunk size exceeds the compressor window");
  }
  const auto sizes = chunk_sizes(context.size(), chunk_size);
  if (sizes.size() <= 1) return compress(context, params, embed);
  DigestSet<T> out;
  std::vector<Tensor<T>> parts;
  std::size_t begin = 0;
  for (auto len : sizes) {
    TokenSeq chunk{std::vector<int>(context.ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                    context.ids.begin() + static_cast<std::ptrdiff_t>(begin + len)),
                   context.vocab};
    auto d = compress(chunk, params, embed);
    parts.push_back(d.vectors);
    out.spans.push_back({begin, len, params.config.digest_tokens});
    begin += len;
  }
  out.vectors = concat_rows(parts);
  return out;
}

template <class T>
std::string digests_csv(const DigestSet<T>& digests) {
  std::ostringstream os;
  os.precision(9);
  const auto& v = digests.vectors;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    for (std::size_t c = 0; c < v.cols(); ++c) os << (c ? "," : "") << static_cast<double>(v.at(r, c));
    os << '\n';
  }
  return os.str();
}

#define ICF_INSTANTIATE(T)                                                                                   \
  template struct ICFormerParams<T>;                                                                         \
  template DigestSet<T> compress<T>(const TokenSeq&, const ICFormerParams<T>&, const Tensor<T>&,            \
                                    CompressProbe<T>*);                                                      \
  template DigestSet<T> compress_chunked<T>(const TokenSeq&, std::size_t, const ICFormerParams<T>&,         \
                                            const Tensor<T>&);                                               \
  template std::string digests_csv<T>(const DigestSet<T>&);

ICF_INSTANTIATE(float)
ICF_INSTANTIATE(double)

}  // namespace icf
