// SPDX-License-Identifier: Apache-2.0
#include "voicespace/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "voicespace/errors.hpp"

namespace voicespace {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{}, {0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimension must be positive: " +
                                     shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl)
    : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return matrix(n, n, std::move(v));
}

std::size_t Tensor::rows() const {
  switch (rank()) {
    case 0:
    case 1:
      return 1;
    case 2:
      return impl_->shape[0];
    default:
      throw DimensionError("expected a matrix, got " + shape_str(shape()));
  }
}

std::size_t Tensor::cols() const {
  switch (rank()) {
    case 0:
      return 1;
    case 1:
      return impl_->shape[0];
    case 2:
      return impl_->shape[1];
    default:
      throw DimensionError("expected a matrix, got " + shape_str(shape()));
  }
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl_->data.at(r * cols() + c);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, got " +
                        shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::zero_grad() { impl_->grad.clear(); }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("only leaf tensors can be mutated");
  return impl_->data;
}

void Tensor::assign(std::span<const double> values) {
  auto dst = mutable_data();
  if (values.size() != dst.size()) {
    throw DimensionError("assign: " + std::to_string(values.size()) +
                         " values into " + shape_str(shape()));
  }
  std::copy(values.begin(), values.end(), dst.begin());
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(shape(), impl_->data, requires_grad);
}

Tensor Tensor::reshaped(Shape shape) const {
  return voicespace::reshape(*this, std::move(shape));
}

detail::TensorImpl& impl_of(const Tensor& t) { return *t.impl_; }

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> backward) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = std::move(op);
  bool any = g_grad_enabled &&
             std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    impl->requires_grad = true;
    for (auto& t : inputs) impl->inputs.push_back(t.impl_);
    impl->backward = std::move(backward);
  }
  return Tensor(std::move(impl));
}

// ---- Graph / backward -------------------------------------------------------

Graph Graph::trace(const Tensor& root) {
  Graph g;
  std::unordered_map<const detail::TensorImpl*, std::size_t> ids;
  // Iterative post-order DFS so deep chains cannot overflow the stack.
  struct Frame {
    std::shared_ptr<detail::TensorImpl> impl;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  std::unordered_map<const detail::TensorImpl*, bool> seen;
  if (!root.requires_grad()) {
    g.tensors_.push_back(root);
    g.root_ = 0;
    return g;
  }
  stack.push_back({root.impl_, 0});
  seen[root.impl_.get()] = true;
  while (!stack.empty()) {
    auto& f = stack.back();
    if (f.next < f.impl->inputs.size()) {
      auto child = f.impl->inputs[f.next++];
      if (child->requires_grad && !seen[child.get()]) {
        seen[child.get()] = true;
        stack.push_back({child, 0});
      }
      continue;
    }
    auto impl = f.impl;
    stack.pop_back();
    std::size_t id = g.tensors_.size();
    ids[impl.get()] = id;
    g.tensors_.push_back(Tensor(impl));
    if (impl->inputs.empty()) {
      g.leaves_.push_back(id);
    } else {
      GraphNode node;
      node.op = impl->op;
      node.output = id;
      for (auto& in : impl->inputs) {
        if (in->requires_grad) node.inputs.push_back(ids.at(in.get()));
      }
      g.nodes_.push_back(std::move(node));
    }
  }
  g.root_ = ids.at(root.impl_.get());
  return g;
}

void backward(const Tensor& loss) { backward(loss, Graph::trace(loss)); }

void backward(const Tensor& loss, const Graph& graph) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  for (const auto& node : graph.nodes()) {
    impl_of(graph.tensor(node.output)).grad.clear();
  }
  auto& root = impl_of(graph.tensor(graph.root()));
  root.grad_buffer()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& impl = impl_of(graph.tensor(it->output));
    if (impl.grad.empty() || !impl.backward) continue;
    impl.backward(impl);
  }
}

// ---- helpers ----------------------------------------------------------------

namespace {

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.numel() != 1) {
    throw DimensionError(std::string(op) + ": expected a scalar, got " +
                         shape_str(s.shape()));
  }
}

// Adds g into the gradient buffer of an input if it tracks gradients.
template <typename Fn>
void accumulate(detail::TensorImpl& in, Fn&& fill) {
  if (!in.requires_grad) return;
  fill(in.grad_buffer());
}

using Impl = detail::TensorImpl;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMajor> cmap(double* p, std::size_t r, std::size_t c) {
  return {p, Eigen::Index(r), Eigen::Index(c)};
}
Eigen::Map<const RowMajor> cmap(const double* p, std::size_t r, std::size_t c) {
  return {p, Eigen::Index(r), Eigen::Index(c)};
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto src = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(src[i]);
  return make_result(a.shape(), std::move(out), name, {a},
                     [deriv](Impl& self) {
                       auto& in = *self.inputs[0];
                       accumulate(in, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += self.grad[i] *
                                   deriv(in.data[i], self.data[i]);
                         }
                       });
                     });
}

}  // namespace

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: shape " + shape_str(a.shape()) +
                         " incompatible with " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  cmap(out.data(), m, n).noalias() = cmap(a.data().data(), m, k) * cmap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), "matmul", {a, b},
                     [m, k, n](Impl& self) {
                       auto& ia = *self.inputs[0];
                       auto& ib = *self.inputs[1];
                       const auto G = cmap(self.grad.data(), m, n);
                       // dA = G B^T
                       accumulate(ia, [&](std::vector<double>& ga) {
                         cmap(ga.data(), m, k).noalias() += G * cmap(ib.data.data(), k, n).transpose();
                       });
                       // dB = A^T G
                       accumulate(ib, [&](std::vector<double>& gb) {
                         cmap(gb.data(), k, n).noalias() += cmap(ia.data.data(), m, k).transpose() * G;
                       });
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return make_result({n, m}, std::move(out), "transpose", {a},
                     [m, n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             g[i * n + j] += self.grad[j * m + i];
                       });
                     });
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Impl& self) {
    for (auto& in : self.inputs) {
      accumulate(*in, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Impl& self) {
    accumulate(*self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(*self.inputs[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Impl& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    accumulate(ia, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * ib.data[i];
    });
    accumulate(ib, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * ia.data[i];
    });
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not fit rows of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.at(j);
  return make_result(a.shape(), std::move(out), "add_bias", {a, bias},
                     [m, n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       });
                       accumulate(*self.inputs[1], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             g[j] += self.grad[i * n + j];
                       });
                     });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_scalar(s, "mul_scalar");
  const double sv = s.item();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * sv;
  return make_result(a.shape(), std::move(out), "mul_scalar", {a, s},
                     [](Impl& self) {
                       auto& ia = *self.inputs[0];
                       auto& is = *self.inputs[1];
                       const double sv = is.data[0];
                       accumulate(ia, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] * sv;
                       });
                       accumulate(is, [&](std::vector<double>& g) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           acc += self.grad[i] * ia.data[i];
                         g[0] += acc;
                       });
                     });
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  require_scalar(s, "div_scalar");
  const double sv = s.item();
  if (sv == 0.0) throw ContractError("div_scalar: division by zero");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / sv;
  return make_result(a.shape(), std::move(out), "div_scalar", {a, s},
                     [](Impl& self) {
                       auto& ia = *self.inputs[0];
                       auto& is = *self.inputs[1];
                       const double sv = is.data[0];
                       accumulate(ia, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] / sv;
                       });
                       // d(a/s)/ds = -a/s^2 = -out/s
                       accumulate(is, [&](std::vector<double>& g) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           acc += self.grad[i] * self.data[i];
                         g[0] -= acc / sv;
                       });
                     });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw ContractError("log of non-positive value");
  }
  return unary(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result({}, {s}, "sum", {a}, [](Impl& self) {
    accumulate(*self.inputs[0], [&](std::vector<double>& g) {
      for (auto& v : g) v += self.grad[0];
    });
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i * n + j);
  for (auto& v : out) v /= static_cast<double>(m);
  return make_result({n}, std::move(out), "mean_rows", {a}, [m, n](Impl& self) {
    accumulate(*self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += self.grad[j] / static_cast<double>(m);
    });
  });
}

Tensor row_sums(const Tensor& a) {
  require_matrix(a, "row_sums");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.at(i * n + j);
  return make_result({m}, std::move(out), "row_sums", {a}, [m, n](Impl& self) {
    accumulate(*self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
    });
  });
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---- softmax family ---------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result(a.shape(), std::move(out), "softmax_rows", {a},
                     [m, n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i) {
                           double inner = 0.0;
                           for (std::size_t j = 0; j < n; ++j)
                             inner += self.grad[i * n + j] * self.data[i * n + j];
                           for (std::size_t j = 0; j < n; ++j)
                             g[i * n + j] += self.data[i * n + j] *
                                             (self.grad[i * n + j] - inner);
                         }
                       });
                     });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_matrix(a, "log_softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lz;
  }
  return make_result(a.shape(), std::move(out), "log_softmax_rows", {a},
                     [m, n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i) {
                           double gs = 0.0;
                           for (std::size_t j = 0; j < n; ++j)
                             gs += self.grad[i * n + j];
                           for (std::size_t j = 0; j < n; ++j)
                             g[i * n + j] += self.grad[i * n + j] -
                                             std::exp(self.data[i * n + j]) * gs;
                         }
                       });
                     });
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
  require_matrix(p, "kl_rows");
  require_same(p, q, "kl_rows");
  const std::size_t m = p.rows(), n = p.cols();
  auto check = [&](const Tensor& t, const char* name) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = t.at(i * n + j);
        if (v < 0.0) {
          throw ContractError(std::string("kl_rows: ") + name +
                              " has a negative entry in row " +
                              std::to_string(i));
        }
        s += v;
      }
      if (std::fabs(s - 1.0) > 1e-6) {
        throw ContractError(std::string("kl_rows: row ") + std::to_string(i) +
                            " of " + name + " sums to " + std::to_string(s));
      }
    }
  };
  check(p, "p");
  check(q, "q");
  double total = 0.0;
  for (std::size_t k = 0; k < m * n; ++k) {
    const double pv = p.at(k);
    if (pv > 0.0) total += pv * (std::log(pv) - std::log(std::max(q.at(k), kKlFloor)));
  }
  total /= static_cast<double>(m);
  return make_result({}, {total}, "kl_rows", {p, q}, [m](Impl& self) {
    auto& ip = *self.inputs[0];
    auto& iq = *self.inputs[1];
    const double g0 = self.grad[0] / static_cast<double>(m);
    accumulate(ip, [&](std::vector<double>& g) {
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double pv = ip.data[k];
        if (pv > 0.0) {
          g[k] += g0 * (std::log(pv) -
                        std::log(std::max(iq.data[k], kKlFloor)) + 1.0);
        }
      }
    });
    accumulate(iq, [&](std::vector<double>& g) {
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (iq.data[k] >= kKlFloor) g[k] -= g0 * ip.data[k] / iq.data[k];
      }
    });
  });
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw DimensionError("cosine_sim: shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += a.at(i) * b.at(i);
    aa += a.at(i) * a.at(i);
    bb += b.at(i) * b.at(i);
  }
  if (aa == 0.0 || bb == 0.0) {
    throw ContractError("cosine_sim: zero-norm input");
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double c = std::clamp(ab / (na * nb), -1.0, 1.0);
  return make_result({}, {c}, "cosine_sim", {a, b}, [na, nb, c](Impl& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    const double g0 = self.grad[0];
    accumulate(ia, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (ib.data[i] / (na * nb) - c * ia.data[i] / (na * na));
    });
    accumulate(ib, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (ia.data[i] / (na * nb) - c * ib.data[i] / (nb * nb));
    });
  });
}

// ---- structural -------------------------------------------------------------

Tensor drop_diagonal(const Tensor& a) {
  require_matrix(a, "drop_diagonal");
  const std::size_t n = a.rows();
  if (a.cols() != n || n < 2) {
    throw DimensionError("drop_diagonal: needs a square matrix with N >= 2, got " +
                         shape_str(a.shape()));
  }
  std::vector<double> out;
  out.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.push_back(a.at(i * n + j));
  return make_result({n, n - 1}, std::move(out), "drop_diagonal", {a},
                     [n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         std::size_t k = 0;
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             if (i != j) g[i * n + j] += self.grad[k++];
                       });
                     });
}

Tensor diagonal(const Tensor& a) {
  require_matrix(a, "diagonal");
  const std::size_t n = a.rows();
  if (a.cols() != n) {
    throw DimensionError("diagonal: needs a square matrix, got " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i * n + i);
  return make_result({n}, std::move(out), "diagonal", {a}, [n](Impl& self) {
    accumulate(*self.inputs[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
    });
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != m) {
      throw DimensionError("concat_cols: shape " + shape_str(p.shape()) +
                           " does not match " + shape_str(parts[0].shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * total + off + j] = parts[k].at(i * w + j);
    off += w;
  }
  return make_result({m, total}, std::move(out), "concat_cols", parts,
                     [m, total, widths](Impl& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         const std::size_t w = widths[k];
                         accumulate(*self.inputs[k], [&](std::vector<double>& g) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               g[i * w + j] += self.grad[i * total + off + j];
                         });
                         off += w;
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != n) {
      throw DimensionError("concat_rows: shape " + shape_str(p.shape()) +
                           " does not match " + shape_str(parts[0].shape()));
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
    m += p.rows();
  }
  return make_result({m, n}, std::move(out), "concat_rows", parts,
                     [sizes](Impl& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < sizes.size(); ++k) {
                         accumulate(*self.inputs[k], [&](std::vector<double>& g) {
                           for (std::size_t i = 0; i < sizes[k]; ++i)
                             g[i] += self.grad[off + i];
                         });
                         off += sizes[k];
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of range for " +
                         shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i * n + begin + j);
  return make_result({m, w}, std::move(out), "slice_cols", {a},
                     [m, n, w, begin](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             g[i * n + begin + j] += self.grad[i * w + j];
                       });
                     });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[r]) +
                           " out of range for " + shape_str(a.shape()));
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a.at(idx[r] * n + j);
  }
  return make_result({idx.size(), n}, std::move(out), "gather_rows", {a},
                     [idx, n](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t r = 0; r < idx.size(); ++r)
                           for (std::size_t j = 0; j < n; ++j)
                             g[idx[r] * n + j] += self.grad[r * n + j];
                       });
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " +
                         shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a},
                     [](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i];
                       });
                     });
}

Tensor l2_normalize_rows(const Tensor& a) {
  require_matrix(a, "l2_normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> norms(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.at(i * n + j) * a.at(i * n + j);
    if (s == 0.0) {
      throw ContractError("l2_normalize_rows: row " + std::to_string(i) +
                          " has zero norm");
    }
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) / norms[i];
  }
  return make_result(a.shape(), std::move(out), "l2_normalize_rows", {a},
                     [m, n, norms = std::move(norms)](Impl& self) {
                       accumulate(*self.inputs[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < m; ++i) {
                           double inner = 0.0;
                           for (std::size_t j = 0; j < n; ++j)
                             inner += self.grad[i * n + j] * self.data[i * n + j];
                           for (std::size_t j = 0; j < n; ++j)
                             g[i * n + j] += (self.grad[i * n + j] -
                                              self.data[i * n + j] * inner) /
                                             norms[i];
                         }
                       });
                     });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps) {
  require_matrix(a, "layer_norm_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm_rows: gain/bias " +
                         shape_str(gain.shape()) + " do not fit " +
                         shape_str(a.shape()));
  }
  std::vector<double> xhat(m * n), out(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += a.at(i * n + j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a.at(i * n + j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (a.at(i * n + j) - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.at(j) + bias.at(j);
    }
  }
  return make_result(
      a.shape(), std::move(out), "layer_norm_rows", {a, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Impl& self) {
        auto& ia = *self.inputs[0];
        auto& ig = *self.inputs[1];
        auto& ib = *self.inputs[2];
        const auto& G = self.grad;
        accumulate(ia, [&](std::vector<double>& g) {
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dx = G[i * n + j] * ig.data[j];
              s1 += dx;
              s2 += dx * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dx = G[i * n + j] * ig.data[j];
              g[i * n + j] +=
                  inv_std[i] * (dx - s1 / dn - xhat[i * n + j] * s2 / dn);
            }
          }
        });
        accumulate(ig, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              g[j] += G[i * n + j] * xhat[i * n + j];
        });
        accumulate(ib, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j];
        });
      });
}

// ---- verification -----------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  std::vector<double> base(x.data().begin(), x.data().end());
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor(x.shape(), std::move(plus)));
    const double fm = f(Tensor(x.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

double grad_violation(std::span<const double> analytic,
                      std::span<const double> numeric, double rel,
                      double abs_tol) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("grad_violation: gradient sizes differ");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::fabs(analytic[i] - numeric[i]);
    const double allowed = std::max(
        rel * std::max(std::fabs(analytic[i]), std::fabs(numeric[i])), abs_tol);
    worst = std::max(worst, diff / allowed);
  }
  return worst;
}

double max_relative_error(std::span<const double> analytic,
                          std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: gradient sizes differ");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::fabs(analytic[i] - numeric[i]);
    const double denom = std::max(
        {std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

}  // namespace voicespace
