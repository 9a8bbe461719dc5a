#pragma once

// Dense row-major float32 tensors with reverse-mode differentiation.
//
// Every op returns a fresh tensor; inputs are never written. A tensor that
// depends on a requires_grad input records its parents and a backward rule,
// and backward() replays those rules in reverse topological order.
//
// All reductions run in a fixed sequential order so results are bit-identical
// between runs on the same build.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "phqfuse/error.hpp"

namespace phqfuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
};

inline void check_finite(std::span<const float> v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at index " +
                         std::to_string(i));
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const float av = ai[t];
      const float* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    const float* bi = b + i * n;
    for (std::size_t r = 0; r < k; ++r) {
      const float av = ai[r];
      float* cr = c + r * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * bi[j];
    }
  }
}

inline std::vector<float> transposed(const float* b, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = b[i * cols + j];
  return t;
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor shape must be positive, got " + shape_str(shape));
    if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    detail::check_finite(data, "tensor construction");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  template <class Gen>
  static Tensor randn(Shape shape, float stddev, Gen& gen, bool requires_grad = false) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = dist(gen);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  template <class Gen>
  static Tensor uniform(Shape shape, float lo, float hi, Gen& gen, bool requires_grad = false) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = dist(gen);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rows() const { return node().shape.at(0); }
  std::size_t cols() const { return rank() == 1 ? 1 : node().shape.at(1); }
  std::size_t numel() const { return node().data.size(); }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return !node().backward_fn; }
  const char* op_name() const { return node().op; }

  std::span<const float> data() const { return node().data; }
  std::span<const float> grad() const { return node().grad; }
  bool has_grad() const { return !node().grad.empty(); }

  /// Writable storage, only for leaf tensors (parameters being optimised).
  std::span<float> mutable_data() {
    if (!is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return node().data;
  }
  std::span<float> mutable_grad() { return node().grad; }

  void zero_grad() { node().grad.assign(numel(), 0.0f); }
  void clear_grad() { node().grad.clear(); }
  void set_requires_grad(bool v) {
    if (!is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
    node().requires_grad = v;
  }

  float item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }
  float at(std::size_t i, std::size_t j) const { return node().data.at(i * cols() + j); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return from(shape(), node().data, false); }

  /// Deep copy as a fresh leaf that keeps requires_grad.
  Tensor clone() const { return from(shape(), node().data, requires_grad()); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  // Internal, used by ops.
  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not need one.
inline float* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad.data() : nullptr;
}

inline const std::vector<float>& pdata(Node& self, std::size_t i) { return self.parents[i]->data; }

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

/// Topologically ordered view of the graph that produced `root`
/// (parents before children). Each node appears once.
inline std::vector<detail::Node*> topo_order(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode sweep from a scalar loss. All gradient buffers in the graph are
/// zeroed first, so repeated calls on the same graph give identical results.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
  auto order = topo_order(loss);
  for (auto* n : order) n->grad.assign(n->data.size(), 0.0f);
  loss.node().grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<float> c(m * n, 0.0f);
  detail::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
  return detail::make_result("matmul", {m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& s) {
    if (float* ga = detail::pgrad(s, 0))
      detail::gemm_nt(s.grad.data(), detail::pdata(s, 1).data(), ga, m, n, k);
    if (float* gb = detail::pgrad(s, 1))
      detail::gemm_tn(detail::pdata(s, 0).data(), s.grad.data(), gb, m, k, n);
  });
}

/// a[m,k] * b[n,k]^T, the shape used by linear layers storing weights as out x in.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  std::vector<float> c(m * n, 0.0f);
  detail::gemm_nt(a.data().data(), b.data().data(), c.data(), m, k, n);
  return detail::make_result("matmul_nt", {m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& s) {
    if (float* ga = detail::pgrad(s, 0))
      detail::gemm_nn(s.grad.data(), detail::pdata(s, 1).data(), ga, m, n, k);
    if (float* gb = detail::pgrad(s, 1))
      detail::gemm_tn(s.grad.data(), detail::pdata(s, 0).data(), gb, m, n, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  return detail::make_result("transpose", {n, m}, detail::transposed(a.data().data(), m, n), {a},
                             [m, n](detail::Node& s) {
                               float* ga = detail::pgrad(s, 0);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += s.grad[j * m + i];
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {
inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.shape(), std::move(c), {a, b}, [](detail::Node& s) {
    for (std::size_t p = 0; p < 2; ++p)
      if (float* g = detail::pgrad(s, p))
        for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] - b.data()[i];
  return detail::make_result("sub", a.shape(), std::move(c), {a, b}, [](detail::Node& s) {
    if (float* g = detail::pgrad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
    if (float* g = detail::pgrad(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] -= s.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.shape(), std::move(c), {a, b}, [](detail::Node& s) {
    const auto& av = detail::pdata(s, 0);
    const auto& bv = detail::pdata(s, 1);
    if (float* g = detail::pgrad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * bv[i];
    if (float* g = detail::pgrad(s, 1))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, float factor) {
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * factor;
  return detail::make_result("scale", a.shape(), std::move(c), {a}, [factor](detail::Node& s) {
    float* g = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * factor;
  });
}

/// a[m,n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  detail::require_2d(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(a.shape()));
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  return detail::make_result("add_bias", a.shape(), std::move(c), {a, bias}, [m, n](detail::Node& s) {
    if (float* g = detail::pgrad(s, 0))
      for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
    if (float* g = detail::pgrad(s, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += s.grad[i * n + j];
  });
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline Tensor silu(const Tensor& a) {
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * sigmoidf(a.data()[i]);
  return detail::make_result("silu", a.shape(), std::move(c), {a}, [](detail::Node& s) {
    const auto& x = detail::pdata(s, 0);
    float* g = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < s.grad.size(); ++i) {
      const float sg = sigmoidf(x[i]);
      g[i] += s.grad[i] * (sg * (1.0f + x[i] * (1.0f - sg)));
    }
  });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sqrt(a.data()[i]);
  return detail::make_result("sqrt", a.shape(), std::move(c), {a}, [](detail::Node& s) {
    float* g = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * 0.5f / s.data[i];
  });
}

inline Tensor sum(const Tensor& a) {
  float acc = 0.0f;
  for (float v : a.data()) acc += v;
  return detail::make_result("sum", {1}, {acc}, {a}, [](detail::Node& s) {
    float* g = detail::pgrad(s, 0);
    const std::size_t n = s.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += s.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  float acc = 0.0f;
  for (float v : a.data()) acc += v;
  const float inv = 1.0f / static_cast<float>(a.numel());
  return detail::make_result("mean", {1}, {acc * inv}, {a}, [inv](detail::Node& s) {
    float* g = detail::pgrad(s, 0);
    const std::size_t n = s.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += s.grad[0] * inv;
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result("reshape", std::move(shape), std::vector<float>(a.data().begin(), a.data().end()),
                             {a}, [](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
                             });
}

/// Inverted dropout: zero each entry with probability p, scale survivors by 1/(1-p).
template <class Gen>
Tensor dropout(const Tensor& a, float p, Gen& gen) {
  if (p < 0.0f || p >= 1.0f) throw ContractError("dropout rate must be in [0,1)");
  std::bernoulli_distribution keep(1.0 - p);
  const float inv = 1.0f / (1.0f - p);
  std::vector<float> mask(a.numel());
  for (auto& m : mask) m = keep(gen) ? inv : 0.0f;
  std::vector<float> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a.data()[i] * mask[i];
  return detail::make_result("dropout", a.shape(), std::move(c), {a},
                             [mask = std::move(mask)](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * mask[i];
                             });
}

// ---------------------------------------------------------------------------
// Indexing and layout

inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_2d(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw ContractError("embedding lookup with no ids");
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw RangeError("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result("embedding", {ids.size(), d}, std::move(out), {table},
                             [idv = std::move(idv), d](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += s.grad[i * d + j];
                             });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_2d(a, "slice_rows");
  const std::size_t n = a.cols();
  if (count == 0 || start + count > a.rows())
    throw DimensionError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") of " + shape_str(a.shape()));
  std::vector<float> out(a.data().begin() + start * n, a.data().begin() + (start + count) * n);
  return detail::make_result("slice_rows", {count, n}, std::move(out), {a}, [start, n](detail::Node& s) {
    float* g = detail::pgrad(s, 0) + start * n;
    for (std::size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_2d(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n)
    throw DimensionError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") of " + shape_str(a.shape()));
  std::vector<float> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + i * n + start, count, out.begin() + i * count);
  return detail::make_result("slice_cols", {m, count}, std::move(out), {a},
                             [m, n, start, count](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   g[i * n + start + j] += s.grad[i * count + j];
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n)
      throw DimensionError("concat_rows column mismatch: " + shape_str(p.shape()) + " vs width " +
                           std::to_string(n));
    m += p.rows();
  }
  std::vector<float> out;
  out.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result("concat_rows", {m, n}, std::move(out), parts,
                             [offsets = std::move(offsets)](detail::Node& s) {
                               for (std::size_t p = 0; p < s.parents.size(); ++p) {
                                 if (float* g = detail::pgrad(s, p)) {
                                   const std::size_t len = s.parents[p]->data.size();
                                   for (std::size_t i = 0; i < len; ++i) g[i] += s.grad[offsets[p] + i];
                                 }
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m)
      throw DimensionError("concat_cols row mismatch: " + shape_str(p.shape()) + " vs height " +
                           std::to_string(m));
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<float> out(m * n);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[p].data().begin() + i * widths[p], widths[p], out.begin() + i * n + off);
    off += widths[p];
  }
  return detail::make_result("concat_cols", {m, n}, std::move(out), parts,
                             [widths = std::move(widths), m, n](detail::Node& s) {
                               std::size_t off = 0;
                               for (std::size_t p = 0; p < s.parents.size(); ++p) {
                                 if (float* g = detail::pgrad(s, p)) {
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < widths[p]; ++j)
                                       g[i * widths[p] + j] += s.grad[i * n + off + j];
                                 }
                                 off += widths[p];
                               }
                             });
}

/// Sliding windows over rows: out[t] = concat(x[t*stride + j] for j < kernel).
/// Combined with matmul_nt this is a 1-D convolution without padding.
inline Tensor frames(const Tensor& x, std::size_t kernel, std::size_t stride) {
  detail::require_2d(x, "frames");
  const std::size_t len = x.rows(), ch = x.cols();
  if (kernel == 0 || stride == 0) throw ContractError("frames: kernel and stride must be positive");
  if (len < kernel)
    throw InputError("frames: input length " + std::to_string(len) + " shorter than kernel " +
                     std::to_string(kernel));
  const std::size_t out_len = (len - kernel) / stride + 1;
  const std::size_t width = kernel * ch;
  std::vector<float> out(out_len * width);
  for (std::size_t t = 0; t < out_len; ++t)
    std::copy_n(x.data().begin() + t * stride * ch, width, out.begin() + t * width);
  return detail::make_result("frames", {out_len, width}, std::move(out), {x},
                             [out_len, width, stride, ch](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t t = 0; t < out_len; ++t)
                                 for (std::size_t j = 0; j < width; ++j)
                                   g[t * stride * ch + j] += s.grad[t * width + j];
                             });
}

// ---------------------------------------------------------------------------
// Normalisation and attention primitives

namespace detail {
inline void softmax_row(const float* x, const std::uint8_t* allow, float* y, std::size_t n) {
  float mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j)
    if (!allow || allow[j]) mx = std::max(mx, x[j]);
  float denom = 0.0f;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = (!allow || allow[j]) ? std::exp(x[j] - mx) : 0.0f;
    denom += y[j];
  }
  const float inv = 1.0f / denom;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

inline std::function<void(Node&)> softmax_backward(std::size_t m, std::size_t n) {
  return [m, n](Node& s) {
    float* g = pgrad(s, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const float* y = s.data.data() + i * n;
      const float* gy = s.grad.data() + i * n;
      float dot = 0.0f;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  };
}
}  // namespace detail

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<float> y(m * n);
  for (std::size_t i = 0; i < m; ++i) detail::softmax_row(x.data().data() + i * n, nullptr, y.data() + i * n, n);
  return detail::make_result("softmax_rows", {m, n}, std::move(y), {x}, detail::softmax_backward(m, n));
}

/// Row-wise softmax restricted to entries where allow[i*n+j] != 0; the rest
/// get exactly zero probability. Every row needs at least one allowed entry.
inline Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> allow) {
  detail::require_2d(x, "masked_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (allow.size() != m * n) throw DimensionError("masked_softmax_rows: mask size mismatch");
  for (std::size_t i = 0; i < m; ++i) {
    if (std::none_of(allow.begin() + i * n, allow.begin() + (i + 1) * n, [](auto v) { return v != 0; }))
      throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " has no allowed entry");
  }
  std::vector<float> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    detail::softmax_row(x.data().data() + i * n, allow.data() + i * n, y.data() + i * n, n);
  return detail::make_result("masked_softmax_rows", {m, n}, std::move(y), {x}, detail::softmax_backward(m, n));
}

/// y = x / sqrt(mean(x^2) + eps) * gain, per row.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps) {
  detail::require_2d(x, "rmsnorm");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.numel() != d)
    throw DimensionError("rmsnorm gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<float> y(m * d), inv_rms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const float* xi = x.data().data() + i * d;
    float ss = 0.0f;
    for (std::size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    inv_rms[i] = 1.0f / std::sqrt(ss / static_cast<float>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = xi[j] * inv_rms[i] * gain.data()[j];
  }
  return detail::make_result("rmsnorm", {m, d}, std::move(y), {x, gain},
                             [m, d, inv_rms = std::move(inv_rms)](detail::Node& s) {
                               const auto& xv = detail::pdata(s, 0);
                               const auto& gv = detail::pdata(s, 1);
                               float* gx = detail::pgrad(s, 0);
                               float* gg = detail::pgrad(s, 1);
                               for (std::size_t i = 0; i < m; ++i) {
                                 const float* xi = xv.data() + i * d;
                                 const float* gy = s.grad.data() + i * d;
                                 const float r = inv_rms[i];
                                 if (gg)
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * xi[j] * r;
                                 if (gx) {
                                   // dx = r*g*gy - x * r^3/d * sum(gy*g*x)
                                   float dot = 0.0f;
                                   for (std::size_t j = 0; j < d; ++j) dot += gy[j] * gv[j] * xi[j];
                                   const float c = dot * r * r * r / static_cast<float>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                     gx[i * d + j] += r * gv[j] * gy[j] - xi[j] * c;
                                 }
                               }
                             });
}

/// y = (x - mean) / sqrt(var + eps) * gain + bias, per row.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  detail::require_2d(x, "layernorm");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layernorm parameters do not match input " + shape_str(x.shape()));
  std::vector<float> y(m * d), xhat(m * d), inv_std(m);
  const float fd = static_cast<float>(d);
  for (std::size_t i = 0; i < m; ++i) {
    const float* xi = x.data().data() + i * d;
    float mu = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= fd;
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= fd;
    inv_std[i] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xi[j] - mu) * inv_std[i];
      y[i * d + j] = xhat[i * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result(
      "layernorm", {m, d}, std::move(y), {x, gain, bias},
      [m, d, fd, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& s) {
        const auto& gv = detail::pdata(s, 1);
        float* gx = detail::pgrad(s, 0);
        float* gg = detail::pgrad(s, 1);
        float* gb = detail::pgrad(s, 2);
        for (std::size_t i = 0; i < m; ++i) {
          const float* gy = s.grad.data() + i * d;
          const float* xh = xhat.data() + i * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
          if (gx) {
            float s1 = 0.0f, s2 = 0.0f;
            for (std::size_t j = 0; j < d; ++j) {
              const float dxh = gy[j] * gv[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const float dxh = gy[j] * gv[j];
              gx[i * d + j] += inv_std[i] * (dxh - s1 / fd - xh[j] * s2 / fd);
            }
          }
        }
      });
}

/// Rotary position embedding on rows of x[seq, d_head]: each pair (2i, 2i+1)
/// of row t is rotated by positions[t] * theta^(-2i/d_head).
inline Tensor rope(const Tensor& x, std::span<const std::size_t> positions, float theta) {
  detail::require_2d(x, "rope");
  const std::size_t m = x.rows(), d = x.cols();
  if (d % 2 != 0) throw ConfigError("rope needs an even head dimension, got " + std::to_string(d));
  if (positions.size() != m) throw DimensionError("rope: one position per row required");
  const std::size_t half = d / 2;
  std::vector<float> cs(m * half), sn(m * half);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(static_cast<double>(theta), -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double ang = static_cast<double>(positions[t]) * freq;
      cs[t * half + i] = static_cast<float>(std::cos(ang));
      sn[t * half + i] = static_cast<float>(std::sin(ang));
    }
  }
  std::vector<float> y(m * d);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const float a = x.data()[t * d + 2 * i], b = x.data()[t * d + 2 * i + 1];
      const float c = cs[t * half + i], s = sn[t * half + i];
      y[t * d + 2 * i] = a * c - b * s;
      y[t * d + 2 * i + 1] = a * s + b * c;
    }
  }
  return detail::make_result("rope", {m, d}, std::move(y), {x},
                             [m, d, half, cs = std::move(cs), sn = std::move(sn)](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               for (std::size_t t = 0; t < m; ++t) {
                                 for (std::size_t i = 0; i < half; ++i) {
                                   const float ga = s.grad[t * d + 2 * i], gb = s.grad[t * d + 2 * i + 1];
                                   const float c = cs[t * half + i], sv = sn[t * half + i];
                                   g[t * d + 2 * i] += ga * c + gb * sv;
                                   g[t * d + 2 * i + 1] += -ga * sv + gb * c;
                                 }
                               }
                             });
}

/// Mean token cross-entropy over rows whose mask entry is nonzero.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m || mask.size() != m)
    throw DimensionError("cross_entropy: targets/mask length must equal logits rows");
  std::size_t count = 0;
  for (auto b : mask) count += b ? 1 : 0;
  if (count == 0) throw ContractError("cross_entropy: loss mask selects no positions");
  std::vector<float> probs(m * v, 0.0f);
  float total = 0.0f;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw RangeError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    const float* li = logits.data().data() + i * v;
    float mx = li[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, li[j]);
    float denom = 0.0f;
    for (std::size_t j = 0; j < v; ++j) denom += std::exp(li[j] - mx);
    const float lse = mx + std::log(denom);
    total += lse - li[targets[i]];
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(li[j] - lse);
  }
  const float inv = 1.0f / static_cast<float>(count);
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return detail::make_result("cross_entropy", {1}, {total * inv}, {logits},
                             [m, v, inv, probs = std::move(probs), tv = std::move(tv),
                              mv = std::move(mv)](detail::Node& s) {
                               float* g = detail::pgrad(s, 0);
                               const float up = s.grad[0] * inv;
                               for (std::size_t i = 0; i < m; ++i) {
                                 if (!mv[i]) continue;
                                 for (std::size_t j = 0; j < v; ++j) g[i * v + j] += up * probs[i * v + j];
                                 g[i * v + tv[i]] -= up;
                               }
                             });
}

}  // namespace phqfuse
