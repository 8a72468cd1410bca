#include "mlcl/ops.hpp"

#include <cmath>
#include <memory>

namespace mlcl {

namespace {

template <class T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(a.shape()));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C(m,n) += A(p,m)^T * B(p,n)
template <class T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n}, detail::wants_grad(a, b));
  mm_nn(a.values().data(), b.values().data(), out.values_mut().data(), m, k, n);
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b, m, k, n](TensorData<T>& o) {
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        mm_nt(o.grad.data(), b.values().data(), a.raw()->grad.data(), m, n, k);
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        mm_tn(a.values().data(), o.grad.data(), b.raw()->grad.data(), k, m, n);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m}, detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, m, n](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* ag = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          ag[static_cast<std::size_t>(i) * n + j] += og[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  Tensor<T> out = Tensor<T>::from_values(std::move(shape),
                                         std::vector<T>(a.values().begin(), a.values().end()),
                                         detail::wants_grad(a));
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* ag = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ag[i] += og[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a, b));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        T* g = b.raw()->grad.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a, b));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        T* g = b.raw()->grad.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= og[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a, b));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        const T* bv2 = b.values().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i] * bv2[i];
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        T* g = b.raw()->grad.data();
        const T* av2 = a.values().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i] * av2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  const T cv = static_cast<T>(c);
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] * cv;
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, cv](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i] * cv;
    });
  }
  return out;
}

template <class T>
Tensor<T> add_bias_rows(const Tensor<T>& a, const Tensor<T>& bias) {
  require_matrix(a, "add_bias_rows");
  if (static_cast<int>(bias.size()) != a.cols()) shape_error("add_bias_rows", a.shape(), bias.shape());
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a, bias));
  const T* av = a.values().data();
  const T* bv = bias.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(i) * n + j] = av[static_cast<std::size_t>(i) * n + j] + bv[j];
  if (out.requires_grad()) {
    detail::attach(out, {a, bias}, [a, bias, m, n](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
      }
      if (bias.requires_grad()) {
        bias.raw()->ensure_grad();
        T* g = bias.raw()->grad.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) g[j] += og[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> tile_rows(const Tensor<T>& a, int times) {
  require_matrix(a, "tile_rows");
  if (times < 1) throw std::invalid_argument("tile_rows: times must be >= 1");
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros({m * times, n}, detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  const std::size_t block = static_cast<std::size_t>(m) * n;
  for (int r = 0; r < times; ++r)
    for (std::size_t i = 0; i < block; ++i) ov[static_cast<std::size_t>(r) * block + i] = av[i];
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, times, block](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (int r = 0; r < times; ++r)
        for (std::size_t i = 0; i < block; ++i) g[i] += og[static_cast<std::size_t>(r) * block + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int n = parts.front().cols();
  int total = 0;
  bool grad = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) shape_error("concat_rows", parts.front().shape(), p.shape());
    total += p.rows();
    grad = grad || detail::wants_grad(p);
  }
  Tensor<T> out = Tensor<T>::zeros({total, n}, grad);
  T* ov = out.values_mut().data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto pv = p.values();
    for (std::size_t i = 0; i < pv.size(); ++i) ov[off + i] = pv[i];
    off += pv.size();
  }
  if (out.requires_grad()) {
    detail::attach(out, std::vector<Tensor<T>>(parts), [parts](TensorData<T>& o) {
      const T* og = o.grad.data();
      std::size_t off2 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          p.raw()->ensure_grad();
          T* g = p.raw()->grad.data();
          for (std::size_t i = 0; i < p.size(); ++i) g[i] += og[off2 + i];
        }
        off2 += p.size();
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len) {
  if (a.ndim() < 1) throw std::invalid_argument("slice_rows: scalar input");
  const int m = a.dim(0);
  if (start < 0 || len < 0 || start + len > m) {
    throw std::invalid_argument("slice_rows: window [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of range for shape " +
                                shape_str(a.shape()));
  }
  const std::size_t stride = a.size() / static_cast<std::size_t>(m ? m : 1);
  Shape out_shape = a.shape();
  out_shape[0] = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape, detail::wants_grad(a));
  const T* av = a.values().data() + static_cast<std::size_t>(start) * stride;
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < out.size(); ++i) ov[i] = av[i];
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, start, stride](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data() + static_cast<std::size_t>(start) * stride;
      const T* og = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int len) {
  require_matrix(a, "slice_cols");
  const int m = a.rows(), n = a.cols();
  if (start < 0 || len < 0 || start + len > n) {
    throw std::invalid_argument("slice_cols: window [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of range for shape " +
                                shape_str(a.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros({m, len}, detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j)
      ov[static_cast<std::size_t>(i) * len + j] = av[static_cast<std::size_t>(i) * n + start + j];
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, start, len, m, n](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          g[static_cast<std::size_t>(i) * n + start + j] += og[static_cast<std::size_t>(i) * len + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> take_rows_strided(const Tensor<T>& a, int stride, int offset) {
  require_matrix(a, "take_rows_strided");
  const int m = a.rows(), n = a.cols();
  if (stride < 1 || offset < 0 || offset >= stride || m % stride != 0) {
    throw std::invalid_argument("take_rows_strided: invalid stride/offset " +
                                std::to_string(stride) + "/" + std::to_string(offset) +
                                " for shape " + shape_str(a.shape()));
  }
  const int count = m / stride;
  Tensor<T> out = Tensor<T>::zeros({count, n}, detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < count; ++i) {
    const std::size_t src = (static_cast<std::size_t>(i) * stride + offset) * n;
    for (int j = 0; j < n; ++j) ov[static_cast<std::size_t>(i) * n + j] = av[src + j];
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, stride, offset, count, n](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (int i = 0; i < count; ++i) {
        const std::size_t dst = (static_cast<std::size_t>(i) * stride + offset) * n;
        for (int j = 0; j < n; ++j) g[dst + j] += og[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc), detail::wants_grad(a));
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T og = o.grad[0];
      for (std::size_t i = 0; i < a.size(); ++i) g[i] += og;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

template <class T>
Tensor<T> sum_squares(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc), detail::wants_grad(a));
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* av = a.values().data();
      const T og = o.grad[0];
      for (std::size_t i = 0; i < a.size(); ++i) g[i] += T(2) * av[i] * og;
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.ndim() < 1 || a.ndim() > 2) {
    throw std::invalid_argument("softmax: expected 1-D or 2-D input, got " + shape_str(a.shape()));
  }
  const int n = a.cols();
  const int m = static_cast<int>(a.size()) / n;
  if (n == 0) throw std::invalid_argument("softmax: empty axis");
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i) {
    const T* row = av + static_cast<std::size_t>(i) * n;
    T* orow = ov + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      orow[j] = static_cast<T>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < n; ++j) orow[j] = static_cast<T>(static_cast<double>(orow[j]) * inv);
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, m, n](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      const T* p = o.values.data();
      for (int i = 0; i < m; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(og[base + j]) * p[base + j];
        for (int j = 0; j < n; ++j)
          g[base + j] += static_cast<T>(p[base + j] * (static_cast<double>(og[base + j]) - dot));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  if (a.ndim() == 1) {
    if (axis != 0 && axis != -1) throw std::invalid_argument("softmax: bad axis for 1-D input");
    return softmax_lastdim(a);
  }
  require_matrix(a, "softmax");
  if (axis == 1 || axis == -1) return softmax_lastdim(a);
  if (axis == 0) return transpose(softmax_lastdim(transpose(a)));
  throw std::invalid_argument("softmax: bad axis " + std::to_string(axis));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x)));
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      const T* s = o.values.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i] * s[i] * (T(1) - s[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a](TensorData<T>& o) {
      constexpr double inv_sqrt_2pi = 0.39894228040143267794;
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      const T* av2 = a.values().data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double x = static_cast<double>(av2[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        g[i] += static_cast<T>(static_cast<double>(og[i]) * (cdf + x * pdf));
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                          double eps) {
  require_matrix(a, "layer_norm_rows");
  const int m = a.rows(), n = a.cols();
  if (static_cast<int>(gamma.size()) != n) shape_error("layer_norm_rows", a.shape(), gamma.shape());
  if (static_cast<int>(beta.size()) != n) shape_error("layer_norm_rows", a.shape(), beta.shape());
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a, gamma) || detail::wants_grad(beta));
  // Normalized rows are re-derived in the backward pass; keep the inverse stddev.
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  const T* av = a.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i) {
    const T* row = av + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*means)[static_cast<std::size_t>(i)] = mean;
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    T* orow = ov + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double xh = (static_cast<double>(row[j]) - mean) * is;
      orow[j] = static_cast<T>(xh * static_cast<double>(gv[j]) + static_cast<double>(bv[j]));
    }
  }
  if (out.requires_grad()) {
    detail::attach(out, {a, gamma, beta}, [a, gamma, beta, m, n, means, inv_std](TensorData<T>& o) {
      const T* og = o.grad.data();
      const T* av2 = a.values().data();
      const T* gv2 = gamma.values().data();
      std::vector<double> xhat(static_cast<std::size_t>(n));
      for (int i = 0; i < m; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * n;
        const double mean = (*means)[static_cast<std::size_t>(i)];
        const double is = (*inv_std)[static_cast<std::size_t>(i)];
        for (int j = 0; j < n; ++j) xhat[static_cast<std::size_t>(j)] = (static_cast<double>(av2[base + j]) - mean) * is;
        if (gamma.requires_grad()) {
          gamma.raw()->ensure_grad();
          T* gg = gamma.raw()->grad.data();
          for (int j = 0; j < n; ++j) gg[j] += static_cast<T>(static_cast<double>(og[base + j]) * xhat[static_cast<std::size_t>(j)]);
        }
        if (beta.requires_grad()) {
          beta.raw()->ensure_grad();
          T* bg = beta.raw()->grad.data();
          for (int j = 0; j < n; ++j) bg[j] += og[base + j];
        }
        if (a.requires_grad()) {
          a.raw()->ensure_grad();
          T* ag = a.raw()->grad.data();
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dxh = static_cast<double>(og[base + j]) * static_cast<double>(gv2[j]);
            m1 += dxh;
            m2 += dxh * xhat[static_cast<std::size_t>(j)];
          }
          m1 /= n;
          m2 /= n;
          for (int j = 0; j < n; ++j) {
            const double dxh = static_cast<double>(og[base + j]) * static_cast<double>(gv2[j]);
            ag[base + j] += static_cast<T>((dxh - m1 - xhat[static_cast<std::size_t>(j)] * m2) * is);
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a) {
  require_matrix(a, "l2_normalize_rows");
  const int m = a.rows(), n = a.cols();
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  constexpr double kDegenerate = 1e-12;
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * n;
    double ss = 0.0;
    for (int j = 0; j < n; ++j) ss += static_cast<double>(av[base + j]) * av[base + j];
    const double norm = std::sqrt(ss);
    (*norms)[static_cast<std::size_t>(i)] = norm;
    if (norm <= kDegenerate) {
      for (int j = 0; j < n; ++j) ov[base + j] = av[base + j];  // pass-through
    } else {
      const double inv = 1.0 / norm;
      for (int j = 0; j < n; ++j) ov[base + j] = static_cast<T>(static_cast<double>(av[base + j]) * inv);
    }
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, m, n, norms](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      const T* y = o.values.data();
      for (int i = 0; i < m; ++i) {
        const double norm = (*norms)[static_cast<std::size_t>(i)];
        if (norm <= kDegenerate) continue;  // degenerate rows get zero gradient
        const std::size_t base = static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(og[base + j]) * y[base + j];
        const double inv = 1.0 / norm;
        for (int j = 0; j < n; ++j)
          g[base + j] += static_cast<T>((static_cast<double>(og[base + j]) - dot * y[base + j]) * inv);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> batched_gram(const Tensor<T>& a, int batch) {
  require_matrix(a, "batched_gram");
  const int m = a.rows(), d = a.cols();
  if (batch < 1 || m % batch != 0) {
    throw std::invalid_argument("batched_gram: rows " + std::to_string(m) +
                                " not divisible by batch " + std::to_string(batch));
  }
  const int t = m / batch;
  Tensor<T> out = Tensor<T>::zeros({m, t}, detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int b = 0; b < batch; ++b) {
    const T* x = av + static_cast<std::size_t>(b) * t * d;
    T* o = ov + static_cast<std::size_t>(b) * t * t;
    mm_nt(x, x, o, t, d, t);
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, batch, t, d](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* ag = a.raw()->grad.data();
      const T* og = o.grad.data();
      const T* av2 = a.values().data();
      // dX = (dG + dG^T) X per sample
      std::vector<T> sym(static_cast<std::size_t>(t) * t);
      for (int b = 0; b < batch; ++b) {
        const T* gg = og + static_cast<std::size_t>(b) * t * t;
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < t; ++j)
            sym[static_cast<std::size_t>(i) * t + j] =
                gg[static_cast<std::size_t>(i) * t + j] + gg[static_cast<std::size_t>(j) * t + i];
        mm_nn(sym.data(), av2 + static_cast<std::size_t>(b) * t * d,
              ag + static_cast<std::size_t>(b) * t * d, t, t, d);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               int num_heads, int batch) {
  require_matrix(q, "multi_head_attention");
  require_same_shape(q, k, "multi_head_attention");
  require_same_shape(q, v, "multi_head_attention");
  const int m = q.rows(), d = q.cols();
  if (num_heads < 1 || d % num_heads != 0) {
    throw std::invalid_argument("multi_head_attention: dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(num_heads));
  }
  if (batch < 1 || m % batch != 0) {
    throw std::invalid_argument("multi_head_attention: rows " + std::to_string(m) +
                                " not divisible by batch " + std::to_string(batch));
  }
  const int t = m / batch;
  const int dh = d / num_heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<T> out = Tensor<T>::zeros({m, d}, detail::wants_grad(q, k) || detail::wants_grad(v));
  // Attention probabilities, kept for the backward pass: (batch*heads) blocks of t*t.
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<std::size_t>(batch) * num_heads * t * t);

  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  T* ov = out.values_mut().data();
  std::vector<double> srow(static_cast<std::size_t>(t));
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < num_heads; ++h) {
      const std::size_t col0 = static_cast<std::size_t>(h) * dh;
      T* pblock = probs->data() + (static_cast<std::size_t>(b) * num_heads + h) * t * t;
      for (int i = 0; i < t; ++i) {
        const T* qrow = qv + (static_cast<std::size_t>(b) * t + i) * d + col0;
        // scores row
        double mx = -1e300;
        for (int j = 0; j < t; ++j) {
          const T* krow = kv + (static_cast<std::size_t>(b) * t + j) * d + col0;
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += static_cast<double>(qrow[c]) * krow[c];
          acc *= inv_scale;
          srow[static_cast<std::size_t>(j)] = acc;
          mx = std::max(mx, acc);
        }
        double denom = 0.0;
        for (int j = 0; j < t; ++j) {
          const double e = std::exp(srow[static_cast<std::size_t>(j)] - mx);
          srow[static_cast<std::size_t>(j)] = e;
          denom += e;
        }
        const double inv = 1.0 / denom;
        T* prow = pblock + static_cast<std::size_t>(i) * t;
        for (int j = 0; j < t; ++j) prow[j] = static_cast<T>(srow[static_cast<std::size_t>(j)] * inv);
        // context row
        T* orow = ov + (static_cast<std::size_t>(b) * t + i) * d + col0;
        for (int j = 0; j < t; ++j) {
          const T p = prow[j];
          if (p == T(0)) continue;
          const T* vrow = vv + (static_cast<std::size_t>(b) * t + j) * d + col0;
          for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
        }
      }
    }
  }

  if (out.requires_grad()) {
    detail::attach(out, {q, k, v},
                   [q, k, v, probs, batch, num_heads, t, dh, inv_scale](TensorData<T>& o) {
      const int d = num_heads * dh;
      const T* og = o.grad.data();
      const T* qv2 = q.values().data();
      const T* kv2 = k.values().data();
      const T* vv2 = v.values().data();
      if (q.requires_grad()) q.raw()->ensure_grad();
      if (k.requires_grad()) k.raw()->ensure_grad();
      if (v.requires_grad()) v.raw()->ensure_grad();
      std::vector<double> da(static_cast<std::size_t>(t));
      std::vector<double> ds(static_cast<std::size_t>(t));
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < num_heads; ++h) {
          const std::size_t col0 = static_cast<std::size_t>(h) * dh;
          const T* pblock = probs->data() + (static_cast<std::size_t>(b) * num_heads + h) * t * t;
          for (int i = 0; i < t; ++i) {
            const T* dorow = og + (static_cast<std::size_t>(b) * t + i) * d + col0;
            const T* prow = pblock + static_cast<std::size_t>(i) * t;
            // dA_ij = dO_i . V_j ; dV_j += p_ij dO_i
            for (int j = 0; j < t; ++j) {
              const T* vrow = vv2 + (static_cast<std::size_t>(b) * t + j) * d + col0;
              double acc = 0.0;
              for (int c = 0; c < dh; ++c) acc += static_cast<double>(dorow[c]) * vrow[c];
              da[static_cast<std::size_t>(j)] = acc;
            }
            if (v.requires_grad()) {
              T* vg = v.raw()->grad.data();
              for (int j = 0; j < t; ++j) {
                const T p = prow[j];
                if (p == T(0)) continue;
                T* vgrow = vg + (static_cast<std::size_t>(b) * t + j) * d + col0;
                for (int c = 0; c < dh; ++c) vgrow[c] += p * dorow[c];
              }
            }
            // dS = A (dA - sum(dA*A)) ; dQ_i += dS K / sqrt(dh) ; dK_j += dS_ij Q_i / sqrt(dh)
            double dot = 0.0;
            for (int j = 0; j < t; ++j) dot += da[static_cast<std::size_t>(j)] * prow[j];
            for (int j = 0; j < t; ++j)
              ds[static_cast<std::size_t>(j)] =
                  static_cast<double>(prow[j]) * (da[static_cast<std::size_t>(j)] - dot) * inv_scale;
            const T* qrow = qv2 + (static_cast<std::size_t>(b) * t + i) * d + col0;
            T* qgrow = q.requires_grad()
                           ? q.raw()->grad.data() + (static_cast<std::size_t>(b) * t + i) * d + col0
                           : nullptr;
            for (int j = 0; j < t; ++j) {
              const double dsj = ds[static_cast<std::size_t>(j)];
              if (dsj == 0.0) continue;
              const T* krow = kv2 + (static_cast<std::size_t>(b) * t + j) * d + col0;
              if (qgrow != nullptr)
                for (int c = 0; c < dh; ++c) qgrow[c] += static_cast<T>(dsj * krow[c]);
              if (k.requires_grad()) {
                T* kgrow = k.raw()->grad.data() + (static_cast<std::size_t>(b) * t + j) * d + col0;
                for (int c = 0; c < dh; ++c) kgrow[c] += static_cast<T>(dsj * qrow[c]);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_values(a.shape(), std::vector<T>(a.values().begin(), a.values().end()),
                                false);
}

template <class T>
Tensor<T> stack_pair(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "stack_pair");
  const int m = static_cast<int>(a.size());
  Tensor<T> out = Tensor<T>::zeros({m, 2}, detail::wants_grad(a, b));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i) {
    ov[static_cast<std::size_t>(i) * 2] = av[i];
    ov[static_cast<std::size_t>(i) * 2 + 1] = bv[i];
  }
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b, m](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        for (int i = 0; i < m; ++i) g[i] += og[static_cast<std::size_t>(i) * 2];
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        T* g = b.raw()->grad.data();
        for (int i = 0; i < m; ++i) g[i] += og[static_cast<std::size_t>(i) * 2 + 1];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> prepend_class_token(const Tensor<T>& cls, const Tensor<T>& patches, int batch) {
  require_matrix(patches, "prepend_class_token");
  const int d = patches.cols();
  if (static_cast<int>(cls.size()) != d) shape_error("prepend_class_token", cls.shape(), patches.shape());
  if (batch < 1 || patches.rows() % batch != 0) {
    throw std::invalid_argument("prepend_class_token: rows " + std::to_string(patches.rows()) +
                                " not divisible by batch " + std::to_string(batch));
  }
  const int s = patches.rows() / batch;
  const int t = s + 1;
  Tensor<T> out = Tensor<T>::zeros({batch * t, d}, detail::wants_grad(cls, patches));
  const T* cv = cls.values().data();
  const T* pv = patches.values().data();
  T* ov = out.values_mut().data();
  for (int b = 0; b < batch; ++b) {
    T* block = ov + static_cast<std::size_t>(b) * t * d;
    for (int j = 0; j < d; ++j) block[j] = cv[j];
    const T* src = pv + static_cast<std::size_t>(b) * s * d;
    for (std::size_t i = 0; i < static_cast<std::size_t>(s) * d; ++i) block[d + i] = src[i];
  }
  if (out.requires_grad()) {
    detail::attach(out, {cls, patches}, [cls, patches, batch, s, t, d](TensorData<T>& o) {
      const T* og = o.grad.data();
      if (cls.requires_grad()) {
        cls.raw()->ensure_grad();
        T* g = cls.raw()->grad.data();
        for (int b = 0; b < batch; ++b) {
          const T* row = og + static_cast<std::size_t>(b) * t * d;
          for (int j = 0; j < d; ++j) g[j] += row[j];
        }
      }
      if (patches.requires_grad()) {
        patches.raw()->ensure_grad();
        T* g = patches.raw()->grad.data();
        for (int b = 0; b < batch; ++b) {
          const T* block = og + static_cast<std::size_t>(b) * t * d + d;
          T* dst = g + static_cast<std::size_t>(b) * s * d;
          for (std::size_t i = 0; i < static_cast<std::size_t>(s) * d; ++i) dst[i] += block[i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale_row_blocks(const Tensor<T>& a, const std::vector<T>& factors, int block_rows) {
  require_matrix(a, "scale_row_blocks");
  const int m = a.rows(), n = a.cols();
  if (block_rows < 1 || m % block_rows != 0 ||
      static_cast<int>(factors.size()) != m / block_rows) {
    throw std::invalid_argument("scale_row_blocks: " + std::to_string(factors.size()) +
                                " factors do not tile shape " + shape_str(a.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape(), detail::wants_grad(a));
  const T* av = a.values().data();
  T* ov = out.values_mut().data();
  for (int i = 0; i < m; ++i) {
    const T f = factors[static_cast<std::size_t>(i / block_rows)];
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(i) * n + j] = av[static_cast<std::size_t>(i) * n + j] * f;
  }
  if (out.requires_grad()) {
    detail::attach(out, {a}, [a, factors, block_rows, m, n](TensorData<T>& o) {
      a.raw()->ensure_grad();
      T* g = a.raw()->grad.data();
      const T* og = o.grad.data();
      for (int i = 0; i < m; ++i) {
        const T f = factors[static_cast<std::size_t>(i / block_rows)];
        for (int j = 0; j < n; ++j)
          g[static_cast<std::size_t>(i) * n + j] += og[static_cast<std::size_t>(i) * n + j] * f;
      }
    });
  }
  return out;
}

#define MLCL_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                         \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                     \
  template Tensor<T> add_bias_rows<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> tile_rows<T>(const Tensor<T>&, int);                                    \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                          \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, int, int);                              \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, int, int);                              \
  template Tensor<T> take_rows_strided<T>(const Tensor<T>&, int, int);                       \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                           \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                                          \
  template Tensor<T> sum_squares<T>(const Tensor<T>&);                                       \
  template Tensor<T> softmax_lastdim<T>(const Tensor<T>&);                                   \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                      \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                           \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                              \
  template Tensor<T> layer_norm_rows<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                        double);                                             \
  template Tensor<T> l2_normalize_rows<T>(const Tensor<T>&);                                 \
  template Tensor<T> batched_gram<T>(const Tensor<T>&, int);                                 \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,             \
                                             const Tensor<T>&, int, int);                    \
  template Tensor<T> detach<T>(const Tensor<T>&);                                            \
  template Tensor<T> stack_pair<T>(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> prepend_class_token<T>(const Tensor<T>&, const Tensor<T>&, int);        \
  template Tensor<T> scale_row_blocks<T>(const Tensor<T>&, const std::vector<T>&, int);

MLCL_INSTANTIATE_OPS(float)
MLCL_INSTANTIATE_OPS(double)

#undef MLCL_INSTANTIATE_OPS

}  // namespace mlcl
