#include "icf/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace icf {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;
thread_local bool t_count_flops = false;
thread_local std::uint64_t t_flops = 0;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

void record_flops(std::size_t m, std::size_t n, std::size_t k) {
  if (t_count_flops) t_flops += 2ull * m * n * k;
}

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (!t.defined() || t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix");
}

// Builds the output node. Parents are recorded only when a gradient can flow.
template <class T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> data, const char* op,
                                   std::initializer_list<const Tensor<T>*> inputs) {
  check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (t_grad_enabled) {
    for (const auto* in : inputs) {
      if (in->requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
    }
  }
  return node;
}

template <class T>
std::shared_ptr<Node<T>> make_node_n(Shape shape, std::vector<T> data, const char* op,
                                     const std::vector<Tensor<T>>& inputs) {
  check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    }
  }
  return node;
}

// Gradient buffer of a parent, or nullptr when it takes no gradient.
template <class T>
T* grad_of(Node<T>* parent) {
  if (!parent->requires_grad) return nullptr;
  parent->ensure_grad();
  return parent->grad.data();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

Mask Mask::full(std::size_t rows, std::size_t cols) {
  return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

Mask Mask::causal(std::size_t n) {
  Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.bits[r * n + c] = 1;
  return m;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

FlopsScope::FlopsScope() : start_(t_flops), previous_(t_count_flops) { t_count_flops = true; }
FlopsScope::~FlopsScope() { t_count_flops = previous_; }
std::uint64_t FlopsScope::count() const { return t_flops - start_; }

// ---- Tensor -----------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count does not match shape " + shape_str(shape));
  }
  check_finite(values, "tensor construction");
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
std::size_t Tensor<T>::rows() const {
  return rank() == 1 ? 1 : node_->shape[0];
}

template <class T>
std::size_t Tensor<T>::cols() const {
  return node_->shape.back();
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on a tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <class T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  if (flag) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
}

template <class T>
void Tensor<T>::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data, false);
}

// ---- graph ------------------------------------------------------------------

template <class T>
Graph<T> Graph<T>::collect(const Tensor<T>& root) {
  Graph g;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    g.nodes.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(g.nodes.begin(), g.nodes.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });
  return g;
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any trainable tensor");
  auto graph = Graph<T>::collect(loss);
  Node<T>* root = loss.node();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = graph.nodes.rbegin(); it != graph.nodes.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->backward_fn) continue;
    n->ensure_grad();
    n->backward_fn(*n);
  }
}

// ---- primitives -------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = MapC<T>(a.data().data(), m, k) * MapC<T>(b.data().data(), k, n);
  record_flops(m, n, k);
  auto node = make_node<T>({m, n}, std::move(out), "matmul", {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [m, n, k](Node<T>& self) {
      Node<T>* pa = self.parents[0].get();
      Node<T>* pb = self.parents[1].get();
      MapC<T> g(self.grad.data(), m, n);
      if (T* ga = grad_of(pa)) {
        Map<T>(ga, m, k).noalias() += g * MapC<T>(pb->data.data(), k, n).transpose();
      }
      if (T* gb = grad_of(pb)) {
        Map<T>(gb, k, n).noalias() += MapC<T>(pa->data.data(), m, k).transpose() * g;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() =
      MapC<T>(a.data().data(), m, k) * MapC<T>(b.data().data(), n, k).transpose();
  record_flops(m, n, k);
  auto node = make_node<T>({m, n}, std::move(out), "matmul_nt", {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [m, n, k](Node<T>& self) {
      Node<T>* pa = self.parents[0].get();
      Node<T>* pb = self.parents[1].get();
      MapC<T> g(self.grad.data(), m, n);
      if (T* ga = grad_of(pa)) {
        Map<T>(ga, m, k).noalias() += g * MapC<T>(pb->data.data(), n, k);
      }
      if (T* gb = grad_of(pb)) {
        Map<T>(gb, n, k).noalias() += g.transpose() * MapC<T>(pa->data.data(), m, k);
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto node = make_node<T>(a.shape(), std::move(out), "add", {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      for (auto& p : self.parents) {
        if (T* g = grad_of(p.get())) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto node = make_node<T>(a.shape(), std::move(out), "mul", {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      Node<T>* pa = self.parents[0].get();
      Node<T>* pb = self.parents[1].get();
      if (T* ga = grad_of(pa)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * pb->data[i];
      }
      if (T* gb = grad_of(pb)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * pa->data[i];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto node = make_node<T>(a.shape(), std::move(out), "scale", {&a});
  if (node->requires_grad) {
    node->backward_fn = [factor](Node<T>& self) {
      if (T* g = grad_of(self.parents[0].get())) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  auto node = make_node<T>({1}, {total}, "sum", {&a});
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      Node<T>* p = self.parents[0].get();
      if (T* g = grad_of(p)) {
        for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[0];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  const std::size_t h = x.cols();
  const std::size_t rows = x.numel() / h;
  if (weight.numel() != h) {
    throw ShapeError("rms_norm: weight length " + std::to_string(weight.numel()) + " does not match width " +
                     std::to_string(h));
  }
  std::vector<T> out(x.numel());
  std::vector<T> inv(rows);
  auto dx = x.data();
  auto dw = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < h; ++j) ss += dx[r * h + j] * dx[r * h + j];
    T s = T(1) / std::sqrt(ss / T(h) + eps);
    inv[r] = s;
    for (std::size_t j = 0; j < h; ++j) out[r * h + j] = dx[r * h + j] * s * dw[j];
  }
  auto node = make_node<T>(x.shape(), std::move(out), "rms_norm", {&x, &weight});
  if (node->requires_grad) {
    node->backward_fn = [inv = std::move(inv), h, rows](Node<T>& self) {
      Node<T>* px = self.parents[0].get();
      Node<T>* pw = self.parents[1].get();
      T* gx = grad_of(px);
      T* gw = grad_of(pw);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px->data.data() + r * h;
        const T* gr = self.grad.data() + r * h;
        const T s = inv[r];
        if (gw) {
          for (std::size_t j = 0; j < h; ++j) gw[j] += gr[j] * xr[j] * s;
        }
        if (gx) {
          T dot = 0;
          for (std::size_t j = 0; j < h; ++j) dot += gr[j] * pw->data[j] * xr[j];
          const T c = s * s * s * dot / T(h);
          for (std::size_t j = 0; j < h; ++j) gx[r * h + j] += s * pw->data[j] * gr[j] - c * xr[j];
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> silu_gate(const Tensor<T>& x_up, const Tensor<T>& x_gate) {
  if (x_up.shape() != x_gate.shape()) {
    throw ShapeError("silu_gate: shapes differ " + shape_str(x_up.shape()) + " vs " + shape_str(x_gate.shape()));
  }
  std::vector<T> out(x_up.numel());
  auto up = x_up.data();
  auto gate = x_gate.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T sig = T(1) / (T(1) + std::exp(-gate[i]));
    out[i] = up[i] * gate[i] * sig;
  }
  auto node = make_node<T>(x_up.shape(), std::move(out), "silu_gate", {&x_up, &x_gate});
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      Node<T>* pu = self.parents[0].get();
      Node<T>* pg = self.parents[1].get();
      T* gu = grad_of(pu);
      T* gg = grad_of(pg);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T z = pg->data[i];
        const T sig = T(1) / (T(1) + std::exp(-z));
        if (gu) gu[i] += self.grad[i] * z * sig;
        if (gg) gg[i] += self.grad[i] * pu->data[i] * (sig + z * sig * (T(1) - sig));
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> softmax_masked(const Tensor<T>& scores, const Mask& mask) {
  require_matrix(scores, "softmax_masked");
  const std::size_t R = scores.rows(), C = scores.cols();
  if (mask.rows != R || mask.cols != C) {
    throw ShapeError("softmax_masked: mask " + shape_str({mask.rows, mask.cols}) + " does not match scores " +
                     shape_str(scores.shape()));
  }
  std::vector<T> out(R * C, T(0));
  auto s = scores.data();
  for (std::size_t r = 0; r < R; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      if (mask(r, c)) mx = std::max(mx, s[r * C + c]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw std::invalid_argument("softmax_masked: row " + std::to_string(r) + " is fully masked");
    }
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (mask(r, c)) {
        out[r * C + c] = std::exp(s[r * C + c] - mx);
        z += out[r * C + c];
      }
    }
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  auto node = make_node<T>(scores.shape(), std::move(out), "softmax_masked", {&scores});
  if (node->requires_grad) {
    node->backward_fn = [R, C](Node<T>& self) {
      T* g = grad_of(self.parents[0].get());
      if (!g) return;
      for (std::size_t r = 0; r < R; ++r) {
        const T* p = self.data.data() + r * C;
        const T* gp = self.grad.data() + r * C;
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += p[c] * gp[c];
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += p[c] * (gp[c] - dot);
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), V = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  }
  auto l = logits.data();
  std::vector<T> probs(rows * V);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(V));
    }
    const T* row = l.data() + r * V;
    const T mx = *std::max_element(row, row + V);
    T z = 0;
    for (std::size_t c = 0; c < V; ++c) {
      probs[r * V + c] = std::exp(row[c] - mx);
      z += probs[r * V + c];
    }
    for (std::size_t c = 0; c < V; ++c) probs[r * V + c] /= z;
    total += std::log(z) + mx - row[t];
  }
  total /= T(rows);
  auto node = make_node<T>({1}, {total}, "cross_entropy", {&logits});
  if (node->requires_grad) {
    std::vector<int> tg(targets.begin(), targets.end());
    node->backward_fn = [probs = std::move(probs), tg = std::move(tg), rows, V](Node<T>& self) {
      T* g = grad_of(self.parents[0].get());
      if (!g) return;
      const T f = self.grad[0] / T(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < V; ++c) g[r * V + c] += f * probs[r * V + c];
        g[r * V + static_cast<std::size_t>(tg[r])] -= f;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t V = table.rows(), h = table.cols();
  std::vector<T> out(ids.size() * h);
  auto d = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(V));
    }
    std::copy_n(d.data() + static_cast<std::size_t>(ids[i]) * h, h, out.data() + i * h);
  }
  auto node = make_node<T>({ids.size(), h}, std::move(out), "embedding", {&table});
  if (node->requires_grad) {
    std::vector<int> idv(ids.begin(), ids.end());
    node->backward_fn = [idv = std::move(idv), h](Node<T>& self) {
      T* g = grad_of(self.parents[0].get());
      if (!g) return;
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = g + static_cast<std::size_t>(idv[i]) * h;
        for (std::size_t j = 0; j < h; ++j) dst[j] += self.grad[i * h + j];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t h = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != h) throw ShapeError("concat_rows: width mismatch");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * h);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto node = make_node_n<T>({rows, h}, std::move(out), "concat_rows", parts);
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t n = p->data.size();
        if (T* g = grad_of(p.get())) {
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    width += p.cols();
  }
  std::vector<T> out(rows * width);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.data().data() + r * w, w, out.data() + r * width + col);
    col += w;
  }
  auto node = make_node_n<T>({rows, width}, std::move(out), "concat_cols", parts);
  if (node->requires_grad) {
    node->backward_fn = [rows, width](Node<T>& self) {
      std::size_t col = 0;
      for (auto& p : self.parents) {
        const std::size_t w = p->shape.back();
        if (T* g = grad_of(p.get())) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[r * width + col + j];
        }
        col += w;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t h = x.cols();
  if (count == 0 || begin + count > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * h),
                     x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * h));
  auto node = make_node<T>({count, h}, std::move(out), "slice_rows", {&x});
  if (node->requires_grad) {
    node->backward_fn = [begin, h](Node<T>& self) {
      if (T* g = grad_of(self.parents[0].get())) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * h + i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t rows = x.rows(), w = x.cols();
  if (count == 0 || begin + count > w) throw ShapeError("slice_cols: range out of bounds");
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data().data() + r * w + begin, count, out.data() + r * count);
  auto node = make_node<T>({rows, count}, std::move(out), "slice_cols", {&x});
  if (node->requires_grad) {
    node->backward_fn = [rows, w, begin, count](Node<T>& self) {
      if (T* g = grad_of(self.parents[0].get())) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < count; ++j) g[r * w + begin + j] += self.grad[r * count + j];
      }
    };
  }
  return Tensor<T>(node);
}

namespace {

// cos/sin tables indexed [row][pair].
struct RopeTable {
  std::vector<double> cos, sin;
};

RopeTable rope_table(std::span<const std::size_t> positions, std::size_t head_dim, double theta_base) {
  const std::size_t pairs = head_dim / 2;
  RopeTable t{std::vector<double>(positions.size() * pairs), std::vector<double>(positions.size() * pairs)};
  const double theta = std::pow(theta_base, -2.0 / static_cast<double>(head_dim));
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = static_cast<double>(positions[r]) * std::pow(theta, static_cast<double>(i));
      t.cos[r * pairs + i] = std::cos(angle);
      t.sin[r * pairs + i] = std::sin(angle);
    }
  }
  return t;
}

}  // namespace

template <class T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::size_t> positions, std::size_t head_dim, double theta_base) {
  require_matrix(x, "rope");
  if (head_dim == 0 || head_dim % 2 != 0) throw std::invalid_argument("rope: head dimension must be even");
  const std::size_t rows = x.rows(), w = x.cols();
  if (w % head_dim != 0) throw ShapeError("rope: width is not a multiple of the head dimension");
  if (positions.size() != rows) throw ShapeError("rope: one position per row required");
  auto table = std::make_shared<RopeTable>(rope_table(positions, head_dim, theta_base));
  const std::size_t pairs = head_dim / 2;
  std::vector<T> out(x.numel());
  auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; c += 2) {
      const std::size_t i = (c % head_dim) / 2;
      const T co = static_cast<T>(table->cos[r * pairs + i]);
      const T si = static_cast<T>(table->sin[r * pairs + i]);
      const T a = d[r * w + c], b = d[r * w + c + 1];
      out[r * w + c] = a * co - b * si;
      out[r * w + c + 1] = a * si + b * co;
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "rope", {&x});
  if (node->requires_grad) {
    node->backward_fn = [table, rows, w, head_dim, pairs](Node<T>& self) {
      T* g = grad_of(self.parents[0].get());
      if (!g) return;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; c += 2) {
          const std::size_t i = (c % head_dim) / 2;
          const T co = static_cast<T>(table->cos[r * pairs + i]);
          const T si = static_cast<T>(table->sin[r * pairs + i]);
          const T ga = self.grad[r * w + c], gb = self.grad[r * w + c + 1];
          g[r * w + c] += ga * co + gb * si;
          g[r * w + c + 1] += -ga * si + gb * co;
        }
      }
    };
  }
  return Tensor<T>(node);
}

std::vector<double> rope_matrix(std::int64_t pos, std::size_t h, double theta_base) {
  if (h == 0 || h % 2 != 0) throw std::invalid_argument("rope: width must be even");
  std::vector<double> m(h * h, 0.0);
  const double theta = std::pow(theta_base, -2.0 / static_cast<double>(h));
  for (std::size_t i = 0; i < h / 2; ++i) {
    const double angle = static_cast<double>(pos) * std::pow(theta, static_cast<double>(i));
    const double c = std::cos(angle), s = std::sin(angle);
    const std::size_t r = 2 * i;
    m[r * h + r] = c;
    m[r * h + r + 1] = -s;
    m[(r + 1) * h + r] = s;
    m[(r + 1) * h + r + 1] = c;
  }
  return m;
}

#define ICF_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                         \
  template struct Graph<T>;                                                                         \
  template void backward<T>(const Tensor<T>&);                                                      \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                      \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, T);                            \
  template Tensor<T> silu_gate<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> softmax_masked<T>(const Tensor<T>&, const Mask&);                              \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> rope<T>(const Tensor<T>&, std::span<const std::size_t>, std::size_t, double);

ICF_INSTANTIATE(float)
ICF_INSTANTIATE(double)

}  // namespace icf
