#include "icf/optim.hpp"

#include <cmath>

namespace icf {

void AdamW::step(ParamMap<float>& params) {
  const auto& c = state_.config;
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [name, tensor] : params) {
    if (!tensor.requires_grad()) continue;
    auto p = tensor.mutable_data();
    auto g = tensor.grad();
    auto& mo = state_.moments[name];
    if (mo.first.size() != p.size()) {
      mo.first.assign(p.size(), 0.0f);
      mo.second.assign(p.size(), 0.0f);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double m = c.beta1 * mo.first[i] + (1.0 - c.beta1) * gi;
      const double v = c.beta2 * mo.second[i] + (1.0 - c.beta2) * gi * gi;
      mo.first[i] = static_cast<float>(m);
      mo.second[i] = static_cast<float>(v);
      double w = p[i];
      w *= 1.0 - c.lr * c.weight_decay;
      w -= c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
      p[i] = static_cast<float>(w);
    }
  }
}

double global_norm(const std::vector<std::span<float>>& grads) {
  double ss = 0;
  for (const auto& g : grads)
    for (float v : g) ss += static_cast<double>(v) * v;
  return std::sqrt(ss);
}

double clip_grad_norm(const std::vector<std::span<float>>& grads, double max_norm) {
  for (const auto& g : grads)
    for (float v : g)
      if (!std::isfinite(v)) throw NonFiniteError("clip_grad_norm: non-finite gradient");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    for (const auto& g : grads)
      for (float& v : g) v *= f;
  }
  return norm;
}

std::vector<std::span<float>> trainable_grads(ParamMap<float>& params) {
  std::vector<std::span<float>> out;
  for (auto& [name, t] : params) {
    if (t.requires_grad()) out.push_back(t.mutable_grad());
  }
  return out;
}

}  // namespace icf
