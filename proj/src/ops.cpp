// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/ops.hpp"

#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

namespace omni {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using Impl = detail::TensorImpl<T>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> ins) {
  if (Tape<T>::current() == nullptr) return false;
  for (const auto* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename F>
void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> ins, F&& fn) {
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  std::vector<std::shared_ptr<Impl<T>>> inputs;
  inputs.reserve(ins.size());
  for (const auto* t : ins) inputs.push_back(t->shared_impl());
  Tape<T>::current()->record(std::move(inputs), out.shared_impl(),
                             std::function<void()>(std::forward<F>(fn)));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_2d(const char* op, const Tensor<T>& a) {
  if (a.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[K x N] += A[M x K]^T * B[M x N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(std::span<const T> a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
  if (recording({&a, &b})) {
    auto* A = a.impl();
    auto* B = b.impl();
    auto* O = out.impl();
    record(out, {&a, &b}, [A, B, O, m, k, n] {
      if (A->requires_grad) {
        // dA = G * B^T
        auto bt = transposed<T>(B->data, k, n);
        gemm_nn(m, n, k, O->grad.data(), bt.data(), A->grad_buffer().data());
      }
      if (B->requires_grad) {
        // dB = A^T * G
        gemm_tn(m, k, n, A->data.data(), O->grad.data(), B->grad_buffer().data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d("transpose", a);
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out = Tensor<T>::from({c, r}, transposed<T>(a.data(), r, c));
  if (recording({&a})) {
    auto* A = a.impl();
    auto* O = out.impl();
    record(out, {&a}, [A, O, r, c] {
      auto g = A->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += O->grad[j * r + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out = a.clone();
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  if (recording({&a, &b})) {
    auto* A = a.impl();
    auto* B = b.impl();
    auto* O = out.impl();
    record(out, {&a, &b}, [A, B, O] {
      for (auto* in : {A, B}) {
        if (!in->requires_grad) continue;
        auto g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out = a.clone();
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  if (recording({&a, &b})) {
    auto* A = a.impl();
    auto* B = b.impl();
    auto* O = out.impl();
    record(out, {&a, &b}, [A, B, O] {
      if (A->requires_grad) {
        auto g = A->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i];
      }
      if (B->requires_grad) {
        auto g = B->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= O->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out = a.clone();
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  if (recording({&a, &b})) {
    auto* A = a.impl();
    auto* B = b.impl();
    auto* O = out.impl();
    record(out, {&a, &b}, [A, B, O] {
      if (A->requires_grad) {
        auto g = A->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * B->data[i];
      }
      if (B->requires_grad) {
        auto g = B->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * A->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = a.clone();
  for (auto& v : out.data()) v *= factor;
  if (recording({&a})) {
    auto* A = a.impl();
    auto* O = out.impl();
    record(out, {&a}, [A, O, factor] {
      auto g = A->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_2d("add_bias", x);
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out = x.clone();
  auto o = out.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] += bd[j];
  if (recording({&x, &bias})) {
    auto* X = x.impl();
    auto* B = bias.impl();
    auto* O = out.impl();
    record(out, {&x, &bias}, [X, B, O, r, c] {
      if (X->requires_grad) {
        auto g = X->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i];
      }
      if (B->requires_grad) {
        auto g = B->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[j] += O->grad[i * c + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s) {
  require_2d("row_scale", x);
  if (s.numel() != x.rows()) {
    throw DimensionError("row_scale: scale " + shape_str(s.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out = x.clone();
  auto o = out.data();
  auto sd = s.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] *= sd[i];
  if (recording({&x, &s})) {
    auto* X = x.impl();
    auto* S = s.impl();
    auto* O = out.impl();
    record(out, {&x, &s}, [X, S, O, r, c] {
      if (X->requires_grad) {
        auto g = X->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += O->grad[i * c + j] * S->data[i];
      }
      if (S->requires_grad) {
        auto g = S->grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < c; ++j) acc += O->grad[i * c + j] * X->data[i * c + j];
          g[i] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x.clone();
  for (auto& v : out.data()) v = gelu_value(v);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * gelu_grad(X->data[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out = x.clone();
  for (auto& v : out.data()) v = std::exp(v);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] * O->data[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out = x.clone();
  for (auto& v : out.data()) v = std::log(v);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i] / X->data[i];
    });
  }
  return out;
}

namespace {

template <typename T>
void check_softmax_input(std::span<const T> x) {
  for (T v : x) {
    if (std::isnan(v) || v == std::numeric_limits<T>::infinity()) {
      throw NumericError("softmax: non-finite input");
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  check_softmax_input(x.data());
  const std::size_t n = x.shape().back();
  const std::size_t r = x.numel() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * n;
    T mx = *std::max_element(row, row + n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j)
      o[i * n + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
  }
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O, r, n] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = O->data.data() + i * n;
        const T* gy = O->grad.data() + i * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  check_softmax_input(x.data());
  const std::size_t n = x.shape().back();
  const std::size_t r = x.numel() / n;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * n;
    T mx = *std::max_element(row, row + n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const T lz = static_cast<T>(std::log(z)) + mx;
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = row[j] - lz;
  }
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O, r, n] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        const T* ly = O->data.data() + i * n;
        const T* gy = O->grad.data() + i * n;
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) total += gy[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[j] - std::exp(ly[j]) * total;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_2d("layer_norm", x);
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(r);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * c;
    double mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = static_cast<T>(row[j] - mu) * rs;
      (*xhat)[i * c + j] = h;
      o[i * c + j] = h * gd[j] + bd[j];
    }
  }
  if (recording({&x, &gain, &bias})) {
    auto* X = x.impl();
    auto* G = gain.impl();
    auto* B = bias.impl();
    auto* O = out.impl();
    record(out, {&x, &gain, &bias}, [X, G, B, O, xhat, rstd, r, c] {
      const auto& gy = O->grad;
      if (G->requires_grad) {
        auto g = G->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j] * (*xhat)[i * c + j];
      }
      if (B->requires_grad) {
        auto g = B->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j];
      }
      if (X->requires_grad) {
        auto g = X->grad_buffer();
        std::vector<T> dh(c);
        for (std::size_t i = 0; i < r; ++i) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = gy[i * c + j] * G->data[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[i * c + j];
          }
          mean_dh /= static_cast<T>(c);
          mean_dh_h /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) {
            g[i * c + j] +=
                (*rstd)[i] * (dh[j] - mean_dh - (*xhat)[i * c + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require_2d("gather_rows", x);
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i : idx) {
    if (i >= r) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       std::to_string(r) + " rows");
    }
  }
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor<T> out = Tensor<T>::zeros({idx.size(), c});
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(xd.data() + idx[k] * c, c, o.data() + k * c);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    std::vector<std::size_t> rows(idx.begin(), idx.end());
    record(out, {&x}, [X, O, rows = std::move(rows), c] {
      auto g = X->grad_buffer();
      for (std::size_t k = 0; k < rows.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) g[rows[k] * c + j] += O->grad[k * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, std::span<const std::size_t> idx,
                           std::size_t rows) {
  require_2d("scatter_add_rows", x);
  if (idx.size() != x.rows()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(idx.size()) +
                         " indices for " + shape_str(x.shape()));
  }
  for (std::size_t i : idx) {
    if (i >= rows) {
      throw IndexError("scatter_add_rows: index " + std::to_string(i) +
                       " out of range for " + std::to_string(rows) + " rows");
    }
  }
  const std::size_t c = x.cols();
  Tensor<T> out = Tensor<T>::zeros({rows, c});
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t j = 0; j < c; ++j) o[idx[k] * c + j] += xd[k * c + j];
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    std::vector<std::size_t> dst(idx.begin(), idx.end());
    record(out, {&x}, [X, O, dst = std::move(dst), c] {
      auto g = X->grad_buffer();
      for (std::size_t k = 0; k < dst.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) g[k * c + j] += O->grad[dst[k] * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require_2d("pick", x);
  const std::size_t r = x.rows(), c = x.cols();
  if (idx.size() != r) {
    throw DimensionError("pick: " + std::to_string(idx.size()) + " indices for " +
                         shape_str(x.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({r});
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] >= c) {
      throw IndexError("pick: column " + std::to_string(idx[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    o[i] = xd[i * c + idx[i]];
  }
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    std::vector<std::size_t> cols(idx.begin(), idx.end());
    record(out, {&x}, [X, O, cols = std::move(cols), c] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < cols.size(); ++i) g[i * c + cols[i]] += O->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mask_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, T value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("mask_fill: mask of " + std::to_string(mask.size()) +
                         " entries for " + shape_str(x.shape()));
  }
  Tensor<T> out = x.clone();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    if (mask[i]) o[i] = value;
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    record(out, {&x}, [X, O, m = std::move(m)] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!m[i]) g[i] += O->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O] {
      auto g = X->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += O->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O] {
      auto g = X->grad_buffer();
      for (auto& v : g) v += O->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc / n);
  if (recording({&x})) {
    auto* X = x.impl();
    auto* O = out.impl();
    record(out, {&x}, [X, O, n] {
      auto g = X->grad_buffer();
      for (auto& v : g) v += O->grad[0] / n;
    });
  }
  return out;
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, std::span<const Segment> segments,
                               std::span<const std::uint8_t> key_valid) {
  require_same_shape("multi_head_attention", q, k);
  require_same_shape("multi_head_attention", q, v);
  require_2d("multi_head_attention", q);
  const std::size_t rows = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  if (!key_valid.empty() && key_valid.size() != rows) {
    throw DimensionError("multi_head_attention: key mask length mismatch");
  }
  for (const auto& s : segments) {
    if (s.offset + s.length > rows) throw IndexError("multi_head_attention: segment out of range");
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Segment> segs(segments.begin(), segments.end());
  std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());

  // Attention probabilities per (segment, head), row-major len x len.
  auto probs = std::make_shared<std::vector<std::vector<T>>>();
  probs->reserve(segs.size() * heads);
  Tensor<T> out = Tensor<T>::zeros({rows, d});
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto o = out.data();
  std::vector<T> score;
  for (const auto& s : segs) {
    const std::size_t n = s.length;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<T> a(n * n, T(0));
      const std::size_t col = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = qd.data() + (s.offset + i) * d + col;
        T mx = -std::numeric_limits<T>::infinity();
        score.assign(n, -std::numeric_limits<T>::infinity());
        for (std::size_t j = 0; j < n; ++j) {
          if (!valid.empty() && !valid[s.offset + j]) continue;
          const T* kj = kd.data() + (s.offset + j) * d + col;
          T dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += qi[e] * kj[e];
          score[j] = dot * inv_sqrt;
          mx = std::max(mx, score[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // no valid key
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T e = std::exp(score[j] - mx);
          a[i * n + j] = e;
          z += e;
        }
        T* oi = o.data() + (s.offset + i) * d + col;
        for (std::size_t j = 0; j < n; ++j) {
          a[i * n + j] /= z;
          const T w = a[i * n + j];
          if (w == T(0)) continue;
          const T* vj = vd.data() + (s.offset + j) * d + col;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += w * vj[e];
        }
      }
      probs->push_back(std::move(a));
    }
  }
  if (recording({&q, &k, &v})) {
    auto* Q = q.impl();
    auto* K = k.impl();
    auto* V = v.impl();
    auto* O = out.impl();
    record(out, {&q, &k, &v}, [Q, K, V, O, probs, segs = std::move(segs), heads, dh, d, inv_sqrt] {
      std::span<T> gq, gk, gv;
      if (Q->requires_grad) gq = Q->grad_buffer();
      if (K->requires_grad) gk = K->grad_buffer();
      if (V->requires_grad) gv = V->grad_buffer();
      std::vector<T> da, ds;
      std::size_t slot = 0;
      for (const auto& s : segs) {
        const std::size_t n = s.length;
        for (std::size_t h = 0; h < heads; ++h, ++slot) {
          const auto& a = (*probs)[slot];
          const std::size_t col = h * dh;
          da.assign(n * n, T(0));
          for (std::size_t i = 0; i < n; ++i) {
            const T* go = O->grad.data() + (s.offset + i) * d + col;
            for (std::size_t j = 0; j < n; ++j) {
              const T w = a[i * n + j];
              const T* vj = V->data.data() + (s.offset + j) * d + col;
              T dot = 0;
              for (std::size_t e = 0; e < dh; ++e) dot += go[e] * vj[e];
              da[i * n + j] = dot;
              if (!gv.empty() && w != T(0)) {
                T* gvj = gv.data() + (s.offset + j) * d + col;
                for (std::size_t e = 0; e < dh; ++e) gvj[e] += w * go[e];
              }
            }
          }
          ds.assign(n * n, T(0));
          for (std::size_t i = 0; i < n; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += da[i * n + j] * a[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
              ds[i * n + j] = a[i * n + j] * (da[i * n + j] - dot) * inv_sqrt;
          }
          for (std::size_t i = 0; i < n; ++i) {
            const T* qi = Q->data.data() + (s.offset + i) * d + col;
            for (std::size_t j = 0; j < n; ++j) {
              const T w = ds[i * n + j];
              if (w == T(0)) continue;
              const T* kj = K->data.data() + (s.offset + j) * d + col;
              if (!gq.empty()) {
                T* gqi = gq.data() + (s.offset + i) * d + col;
                for (std::size_t e = 0; e < dh; ++e) gqi[e] += w * kj[e];
              }
              if (!gk.empty()) {
                T* gkj = gk.data() + (s.offset + j) * d + col;
                for (std::size_t e = 0; e < dh; ++e) gkj[e] += w * qi[e];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

#define OMNI_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> row_scale(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template Tensor<T> log_softmax(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> scatter_add_rows(const Tensor<T>&, std::span<const std::size_t>,        \
                                      std::size_t);                                          \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);                   \
  template Tensor<T> mask_fill(const Tensor<T>&, std::span<const std::uint8_t>, T);          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&,                \
                                          const Tensor<T>&, std::size_t,                     \
                                          std::span<const Segment>,                          \
                                          std::span<const std::uint8_t>);

OMNI_INSTANTIATE_OPS(float)
OMNI_INSTANTIATE_OPS(double)

}  // namespace omni
