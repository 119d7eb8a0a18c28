#include "icf/layers.hpp"

#include <cmath>

namespace icf {

template <class T>
const Tensor<T>& param(const ParamMap<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const Mask& mask, HeadWeights<T>* capture) {
  const std::size_t h = q.cols();
  if (heads == 0 || h % heads != 0) throw ShapeError("attention: width not divisible by head count");
  const std::size_t dh = h / heads;
  const Tensor<T> qs = scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    auto qh = heads == 1 ? qs : slice_cols(qs, i * dh, dh);
    auto kh = heads == 1 ? k : slice_cols(k, i * dh, dh);
    auto vh = heads == 1 ? v : slice_cols(v, i * dh, dh);
    auto p = softmax_masked(matmul_nt(qh, kh), mask);
    if (capture) capture->heads.push_back(p);
    outs.push_back(matmul(p, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

template <class T>
Tensor<T> gated_ffn(const Tensor<T>& x, const Tensor<T>& w_up, const Tensor<T>& w_gate, const Tensor<T>& w_down) {
  return matmul(silu_gate(matmul(x, w_up), matmul(x, w_gate)), w_down);
}

template <class T>
Tensor<T> self_attention_block(const Tensor<T>& x, const ParamMap<T>& params, const std::string& prefix,
                               const BlockShape& shape, std::span<const std::size_t> positions, const Mask& mask,
                               HeadWeights<T>* capture) {
  const T eps = static_cast<T>(shape.rms_eps);
  const std::size_t dh = shape.hidden / shape.heads;
  auto hn = rms_norm(x, param(params, prefix + "attn_norm"), eps);
  auto q = matmul(hn, param(params, prefix + "wq"));
  auto k = matmul(hn, param(params, prefix + "wk"));
  auto v = matmul(hn, param(params, prefix + "wv"));
  if (shape.rope) {
    q = rope(q, positions, dh, shape.theta_base);
    k = rope(k, positions, dh, shape.theta_base);
  }
  auto attn = matmul(multi_head_attention(q, k, v, shape.heads, mask, capture), param(params, prefix + "wo"));
  auto x1 = add(x, attn);
  auto fn = rms_norm(x1, param(params, prefix + "ffn_norm"), eps);
  return add(x1, gated_ffn(fn, param(params, prefix + "w_up"), param(params, prefix + "w_gate"),
                           param(params, prefix + "w_down")));
}

Tensor<float> normal_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<float>(dist(rng));
  return Tensor<float>::from(std::move(shape), std::move(values));
}

void init_block(ParamMap<float>& params, const std::string& prefix, const BlockShape& shape, std::mt19937_64& rng,
                double init_std) {
  const std::size_t h = shape.hidden, m = shape.intermediate;
  params[prefix + "attn_norm"] = Tensor<float>::full({h}, 1.0f);
  params[prefix + "wq"] = normal_tensor({h, h}, rng, init_std);
  params[prefix + "wk"] = normal_tensor({h, h}, rng, init_std);
  params[prefix + "wv"] = normal_tensor({h, h}, rng, init_std);
  params[prefix + "wo"] = normal_tensor({h, h}, rng, init_std);
  params[prefix + "ffn_norm"] = Tensor<float>::full({h}, 1.0f);
  params[prefix + "w_up"] = normal_tensor({h, m}, rng, init_std);
  params[prefix + "w_gate"] = normal_tensor({h, m}, rng, init_std);
  params[prefix + "w_down"] = normal_tensor({m, h}, rng, init_std);
}

#define ICF_INSTANTIATE(T)                                                                                     \
  template const Tensor<T>& param<T>(const ParamMap<T>&, const std::string&);                                \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                             const Mask&, HeadWeights<T>*);                                     \
  template Tensor<T> gated_ffn<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> self_attention_block<T>(const Tensor<T>&, const ParamMap<T>&, const std::string&,          \
                                             const BlockShape&, std::span<const std::size_t>, const Mask&,      \
                                             HeadWeights<T>*);

ICF_INSTANTIATE(float)
ICF_INSTANTIATE(double)

}  // namespace icf
