#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every primitive below builds a node that remembers its parents and a
// closure that pushes the node's gradient back into them. backward() walks
// the recorded nodes in reverse creation order, visiting each exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icf {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  // Only leaves may change their trainability; intermediate nodes inherit it.
  void set_requires_grad(bool flag);
  void zero_grad();
  bool is_leaf() const { return node_->is_leaf(); }

  // Detached leaf copy holding the same values.
  Tensor detach() const;
  template <class U>
  Tensor<U> cast() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
template <class U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
  return Tensor<U>::from(shape(), std::move(out), requires_grad());
}

// Binary row-major mask; 1 keeps an entry, 0 removes it.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  std::size_t count() const;
  static Mask full(std::size_t rows, std::size_t cols);
  static Mask causal(std::size_t n);
};

// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Counts 2*M*N*K for every matmul primitive executed on this thread while
// alive. Scopes nest; each sees only the flops issued during its lifetime.
class FlopsScope {
 public:
  FlopsScope();
  ~FlopsScope();
  FlopsScope(const FlopsScope&) = delete;
  FlopsScope& operator=(const FlopsScope&) = delete;
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
  bool previous_;
};

// Reachable part of the graph in execution order.
template <class T>
struct Graph {
  std::vector<Node<T>*> nodes;
  static Graph collect(const Tensor<T>& root);
};

template <class T>
void backward(const Tensor<T>& loss);

// ---- primitives -------------------------------------------------------------

template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[M x K] times b[N x K] transposed.
template <class T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps);
template <class T> Tensor<T> silu_gate(const Tensor<T>& x_up, const Tensor<T>& x_gate);
template <class T> Tensor<T> softmax_masked(const Tensor<T>& scores, const Mask& mask);
template <class T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);
template <class T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);
template <class T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <class T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <class T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <class T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count);
// Rotates coordinate pairs (2i, 2i+1) of every head_dim-wide block of row r
// by positions[r] * theta^i, theta = theta_base^(-2/head_dim).
template <class T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::size_t> positions, std::size_t head_dim,
               double theta_base);

// Dense h x h rotation R_pos; the same operator rope() applies row-wise.
std::vector<double> rope_matrix(std::int64_t pos, std::size_t h, double theta_base);

inline Tensor<float> operator+(const Tensor<float>& a, const Tensor<float>& b) { return add(a, b); }
inline Tensor<double> operator+(const Tensor<double>& a, const Tensor<double>& b) { return add(a, b); }

}  // namespace icf
