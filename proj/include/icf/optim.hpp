#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "icf/layers.hpp"

namespace icf {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct Moments {
  std::vector<float> first;
  std::vector<float> second;
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;
};

// Decoupled weight decay Adam. Only tensors with requires_grad are touched;
// their moment buffers are created on first use.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) { state_.config = config; }

  void step(ParamMap<float>& params);
  void set_lr(double lr) { state_.config.lr = lr; }
  const OptimizerState& state() const { return state_; }

 private:
  OptimizerState state_;
};

double global_norm(const std::vector<std::span<float>>& grads);
// Scales all grads by max_norm/g when the global L2 norm g exceeds max_norm.
// Returns g. Throws NonFiniteError on non-finite gradients.
double clip_grad_norm(const std::vector<std::span<float>>& grads, double max_norm);

// Gradient views of the trainable tensors of `params`.
std::vector<std::span<float>> trainable_grads(ParamMap<float>& params);

}  // namespace icf
