#include "skipvit/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "skipvit/errors.hpp"
#include "skipvit/numerics/kernels.hpp"
#include "skipvit/numerics/mac_counter.hpp"

namespace skipvit::numerics {

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      const char* op, BackwardFn<T> fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_fn = std::move(fn);
  return out;
}

std::size_t normalize_axis(int axis, std::size_t ndim, const char* op) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(ndim));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape into [outer, len, inner] around one axis.
struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

std::size_t leading_count(const Shape& shape, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < shape.size(); ++i) n *= shape[i];
  return n;
}

void check_row_tensor(const Shape& shape, const char* op) {
  if (shape.size() < 2) {
    throw DimensionError(std::string(op) + ": expected [..., rows, width], got " +
                         shape_to_string(shape));
  }
}

template <typename T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

RowIndex RowIndex::shared(std::size_t batch, std::span<const std::size_t> rows) {
  RowIndex index;
  index.batch = batch;
  index.count = rows.size();
  index.rows.reserve(batch * rows.size());
  for (std::size_t b = 0; b < batch; ++b) index.rows.insert(index.rows.end(), rows.begin(), rows.end());
  return index;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_to_string(sa) + " and " +
                          shape_to_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) throw mismatch();
  const bool shared_rhs = sb.size() == 2;
  if (!shared_rhs && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
    throw mismatch();
  }
  const std::size_t batch = leading_count(sa, 2);

  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (shared_rhs) {
    kernels::gemm(pa, pb, out.data(), batch * m, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      kernels::gemm(pa + s * m * k, pb + s * k * n, out.data() + s * m * n, m, k, n);
    }
  }
  record_forward_macs(static_cast<std::uint64_t>(batch) * m * k * n);

  return make_result<T>(std::move(out_shape), std::move(out), {a, b}, "matmul",
                        [batch, m, k, n, shared_rhs](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    const T* g = self.grad.data();
    if (shared_rhs) {
      const std::size_t rows = batch * m;
      if (na.requires_grad) {
        std::vector<T> bt(n * k);
        kernels::transpose2d(nb.data.data(), bt.data(), k, n);
        kernels::gemm_accumulate(g, bt.data(), na.grad_buffer().data(), rows, n, k);
      }
      if (nb.requires_grad) {
        std::vector<T> at(k * rows);
        kernels::transpose2d(na.data.data(), at.data(), rows, k);
        kernels::gemm_accumulate(at.data(), g, nb.grad_buffer().data(), k, rows, n);
      }
      return;
    }
    std::vector<T> scratch(std::max(n * k, k * m));
    for (std::size_t s = 0; s < batch; ++s) {
      const T* gs = g + s * m * n;
      if (na.requires_grad) {
        kernels::transpose2d(nb.data.data() + s * k * n, scratch.data(), k, n);
        kernels::gemm_accumulate(gs, scratch.data(), na.grad_buffer().data() + s * m * k, m, n, k);
      }
      if (nb.requires_grad) {
        kernels::transpose2d(na.data.data() + s * m * k, scratch.data(), m, k);
        kernels::gemm_accumulate(scratch.data(), gs, nb.grad_buffer().data() + s * k * n, k, m, n);
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw DimensionError("add: shape " + shape_to_string(sb) + " does not broadcast onto " +
                         shape_to_string(sa));
  }
  const std::size_t width = b.numel();
  const std::size_t repeats = width == 0 ? 0 : a.numel() / width;
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; r < repeats; ++r) {
    T* row = out.data() + r * width;
    for (std::size_t j = 0; j < width; ++j) row[j] += bd[j];
  }
  return make_result<T>(sa, std::move(out), {a, b}, "add", [repeats, width](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    if (na.requires_grad) accumulate<T>(na.grad_buffer(), self.grad);
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t r = 0; r < repeats; ++r) {
        const T* g = self.grad.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) gb[j] += g[j];
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(a.shape(), std::move(out), {a}, "scale", [factor](Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

namespace {

// dst[pre, B, mid, A, post] = src[pre, A, mid, B, post] for axes a < b.
template <typename T>
void swap_axes_copy(const T* src, T* dst, const Shape& shape, std::size_t a, std::size_t b) {
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < a; ++i) pre *= shape[i];
  for (std::size_t i = a + 1; i < b; ++i) mid *= shape[i];
  for (std::size_t i = b + 1; i < shape.size(); ++i) post *= shape[i];
  const std::size_t na = shape[a];
  const std::size_t nb = shape[b];
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t i = 0; i < na; ++i) {
      for (std::size_t q = 0; q < mid; ++q) {
        for (std::size_t j = 0; j < nb; ++j) {
          const T* s = src + ((((p * na + i) * mid + q) * nb + j) * post);
          T* d = dst + ((((p * nb + j) * mid + q) * na + i) * post);
          std::copy(s, s + post, d);
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  std::size_t x = normalize_axis(axis0, a.ndim(), "transpose");
  std::size_t y = normalize_axis(axis1, a.ndim(), "transpose");
  if (x == y) return reshape(a, a.shape());
  if (x > y) std::swap(x, y);
  Shape out_shape = a.shape();
  std::swap(out_shape[x], out_shape[y]);
  std::vector<T> out(a.numel());
  swap_axes_copy(a.data().data(), out.data(), a.shape(), x, y);
  return make_result<T>(out_shape, std::move(out), {a}, "transpose",
                        [x, y, out_shape](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    std::vector<T> back(na.data.size());
    swap_axes_copy(self.grad.data(), back.data(), out_shape, x, y);
    accumulate<T>(na.grad_buffer(), back);
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, "reshape", [](Node<T>& self) {
    accumulate<T>(self.inputs[0]->grad_buffer(), self.grad);
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.ndim(), "softmax");
  const AxisView v = axis_view(x.shape(), ax);
  const T* in = x.data().data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      T peak = in[base];
      for (std::size_t l = 1; l < v.len; ++l) peak = std::max(peak, in[base + l * v.inner]);
      T total = 0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const T e = std::exp(in[base + l * v.inner] - peak);
        out[base + l * v.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] *= inv;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax", [v](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.len * v.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.ndim() == 0) throw DimensionError("layernorm: scalar input");
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layernorm: gain " + shape_to_string(gain.shape()) + " / bias " +
                         shape_to_string(bias.shape()) + " do not match width of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = width == 0 ? 0 : x.numel() / width;
  const T* in = x.data().data();
  const T* g = gain.data().data();
  const T* bb = bias.data().data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(width);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * width + j] = h;
      out[r * width + j] = h * g[j] + bb[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gain, bias}, "layernorm",
                        [rows, width, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    Node<T>& nx = *self.inputs[0];
    Node<T>& ng = *self.inputs[1];
    Node<T>& nb = *self.inputs[2];
    const T* gy = self.grad.data();
    const T* gam = ng.data.data();
    if (ng.requires_grad || nb.requires_grad) {
      auto* dg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
      auto* db = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) {
          const T gv = gy[r * width + j];
          if (dg) dg[j] += gv * xhat[r * width + j];
          if (db) db[j] += gv;
        }
      }
    }
    if (nx.requires_grad) {
      auto& dx = nx.grad_buffer();
      const T inv_w = T(1) / static_cast<T>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dh = 0;
        for (std::size_t j = 0; j < width; ++j) {
          const T d = gy[r * width + j] * gam[j];
          mean_d += d;
          mean_dh += d * xhat[r * width + j];
        }
        mean_d *= inv_w;
        mean_dh *= inv_w;
        for (std::size_t j = 0; j < width; ++j) {
          const T d = gy[r * width + j] * gam[j];
          dx[r * width + j] += rstd[r] * (d - mean_d - xhat[r * width + j] * mean_dh);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
  constexpr T kA = static_cast<T>(0.044715);
  std::vector<T> out(x.numel());
  std::vector<T> tanhs(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = in[i];
    tanhs[i] = std::tanh(kC * (v + kA * v * v * v));
    out[i] = T(0.5) * v * (T(1) + tanhs[i]);
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "gelu",
                        [tanhs = std::move(tanhs)](Node<T>& self) {
    Node<T>& nx = *self.inputs[0];
    auto& gx = nx.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = nx.data[i];
      const T t = tanhs[i];
      const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      gx[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const RowIndex& index) {
  check_row_tensor(x.shape(), "gather_rows");
  const std::size_t rows = x.dim(-2);
  const std::size_t width = x.dim(-1);
  const std::size_t batch = leading_count(x.shape(), 2);
  if (index.batch != batch || index.rows.size() != index.batch * index.count) {
    throw DimensionError("gather_rows: index covers " + std::to_string(index.batch) +
                         " slices, tensor " + shape_to_string(x.shape()) + " has " +
                         std::to_string(batch));
  }
  for (auto r : index.rows) {
    if (r >= rows) {
      throw IndexError("gather_rows: row index " + std::to_string(r) + " out of range [0, " +
                       std::to_string(rows) + ")");
    }
  }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = index.count;
  std::vector<T> out(batch * index.count * width);
  const T* in = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto sel = index.slice(b);
    for (std::size_t j = 0; j < index.count; ++j) {
      const T* src = in + (b * rows + sel[j]) * width;
      std::copy(src, src + width, out.data() + (b * index.count + j) * width);
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {x}, "gather_rows",
                        [index, rows, width, batch](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      const auto sel = index.slice(b);
      for (std::size_t j = 0; j < index.count; ++j) {
        const T* g = self.grad.data() + (b * index.count + j) * width;
        T* d = gx.data() + (b * rows + sel[j]) * width;
        for (std::size_t c = 0; c < width; ++c) d[c] += g[c];
      }
    }
  });
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& base, const Tensor<T>& src, const RowIndex& index) {
  check_row_tensor(base.shape(), "scatter_rows");
  check_row_tensor(src.shape(), "scatter_rows");
  const std::size_t rows = base.dim(-2);
  const std::size_t width = base.dim(-1);
  const std::size_t batch = leading_count(base.shape(), 2);
  if (src.dim(-1) != width || leading_count(src.shape(), 2) != batch || src.dim(-2) != index.count ||
      index.batch != batch || index.rows.size() != batch * index.count) {
    throw DimensionError("scatter_rows: source " + shape_to_string(src.shape()) +
                         " incompatible with base " + shape_to_string(base.shape()) +
                         " and index of " + std::to_string(index.count) + " rows");
  }
  std::vector<char> hit(rows);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(hit.begin(), hit.end(), 0);
    for (auto r : index.slice(b)) {
      if (r >= rows) {
        throw IndexError("scatter_rows: row index " + std::to_string(r) + " out of range [0, " +
                         std::to_string(rows) + ")");
      }
      if (hit[r]) {
        throw ContractError("scatter_rows: row " + std::to_string(r) + " targeted twice");
      }
      hit[r] = 1;
    }
  }
  std::vector<T> out(base.data().begin(), base.data().end());
  const T* s = src.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto sel = index.slice(b);
    for (std::size_t j = 0; j < index.count; ++j) {
      const T* from = s + (b * index.count + j) * width;
      std::copy(from, from + width, out.data() + (b * rows + sel[j]) * width);
    }
  }
  return make_result<T>(base.shape(), std::move(out), {base, src}, "scatter_rows",
                        [index, rows, width, batch](Node<T>& self) {
    Node<T>& nbase = *self.inputs[0];
    Node<T>& nsrc = *self.inputs[1];
    const T* g = self.grad.data();
    if (nbase.requires_grad) {
      auto& gb = nbase.grad_buffer();
      std::vector<char> hit(rows);
      for (std::size_t b = 0; b < batch; ++b) {
        std::fill(hit.begin(), hit.end(), 0);
        for (auto r : index.slice(b)) hit[r] = 1;
        for (std::size_t r = 0; r < rows; ++r) {
          if (hit[r]) continue;
          const std::size_t off = (b * rows + r) * width;
          for (std::size_t c = 0; c < width; ++c) gb[off + c] += g[off + c];
        }
      }
    }
    if (nsrc.requires_grad) {
      auto& gs = nsrc.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        const auto sel = index.slice(b);
        for (std::size_t j = 0; j < index.count; ++j) {
          const T* from = g + (b * rows + sel[j]) * width;
          T* to = gs.data() + (b * index.count + j) * width;
          for (std::size_t c = 0; c < width; ++c) to[c] += from[c];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  check_row_tensor(a.shape(), "concat_rows");
  check_row_tensor(b.shape(), "concat_rows");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || sa.back() != sb.back() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw DimensionError("concat_rows: incompatible shapes " + shape_to_string(sa) + " and " +
                         shape_to_string(sb));
  }
  const std::size_t batch = leading_count(sa, 2);
  const std::size_t width = sa.back();
  const std::size_t ra = sa[sa.size() - 2];
  const std::size_t rb = sb[sb.size() - 2];
  Shape out_shape = sa;
  out_shape[out_shape.size() - 2] = ra + rb;
  std::vector<T> out;
  out.reserve(batch * (ra + rb) * width);
  for (std::size_t s = 0; s < batch; ++s) {
    auto pa = a.data().subspan(s * ra * width, ra * width);
    auto pb = b.data().subspan(s * rb * width, rb * width);
    out.insert(out.end(), pa.begin(), pa.end());
    out.insert(out.end(), pb.begin(), pb.end());
  }
  return make_result<T>(std::move(out_shape), std::move(out), {a, b}, "concat_rows",
                        [batch, width, ra, rb](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    for (std::size_t s = 0; s < batch; ++s) {
      const T* g = self.grad.data() + s * (ra + rb) * width;
      if (na.requires_grad) {
        T* d = na.grad_buffer().data() + s * ra * width;
        for (std::size_t i = 0; i < ra * width; ++i) d[i] += g[i];
      }
      if (nb.requires_grad) {
        T* d = nb.grad_buffer().data() + s * rb * width;
        for (std::size_t i = 0; i < rb * width; ++i) d[i] += g[ra * width + i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.ndim(), "mean");
  const AxisView v = axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> out(v.outer * v.inner, T(0));
  const T* in = x.data().data();
  const T inv = T(1) / static_cast<T>(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      const T* row = in + (o * v.len + l) * v.inner;
      T* acc = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) acc[i] += row[i];
    }
  }
  for (auto& o : out) o *= inv;
  return make_result<T>(std::move(out_shape), std::move(out), {x}, "mean", [v, inv](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t l = 0; l < v.len; ++l) {
        T* row = gx.data() + (o * v.len + l) * v.inner;
        const T* g = self.grad.data() + o * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) row[i] += g[i] * inv;
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  return make_result<T>(Shape{}, std::vector<T>{total}, {x}, "sum", [](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> normalize_last(const Tensor<T>& x, std::size_t* fallbacks) {
  if (x.ndim() == 0 || x.shape().back() == 0) {
    throw DimensionError("normalize_last: empty last axis in " + shape_to_string(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<T> out(x.numel());
  std::vector<T> totals(rows);
  std::size_t uniform = 0;
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < width; ++j) s += in[r * width + j];
    totals[r] = s;
    if (s == T(0)) {
      ++uniform;
      std::fill_n(out.data() + r * width, width, T(1) / static_cast<T>(width));
    } else {
      for (std::size_t j = 0; j < width; ++j) out[r * width + j] = in[r * width + j] / s;
    }
  }
  if (fallbacks) *fallbacks = uniform;
  return make_result<T>(x.shape(), std::move(out), {x}, "normalize_last",
                        [rows, width, totals = std::move(totals)](Node<T>& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      if (totals[r] == T(0)) continue;
      const T* g = self.grad.data() + r * width;
      const T* y = self.data.data() + r * width;
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += (g[j] - dot) / totals[r];
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  const T* z = logits.data().data();
  std::vector<T> probs(batch * classes);
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    const T peak = *std::max_element(row, row + classes);
    T s = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - peak);
      s += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= s;
    total += std::log(s) + peak - row[labels[b]];
  }
  total /= static_cast<T>(batch);
  std::vector<std::int32_t> targets(labels.begin(), labels.end());
  return make_result<T>(Shape{}, std::vector<T>{total}, {logits}, "cross_entropy",
                        [batch, classes, probs = std::move(probs),
                         targets = std::move(targets)](Node<T>& self) {
    auto& gz = self.inputs[0]->grad_buffer();
    const T g = self.grad[0] / static_cast<T>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < classes; ++c) {
        const T onehot = static_cast<std::size_t>(targets[b]) == c ? T(1) : T(0);
        gz[b * classes + c] += g * (probs[b * classes + c] - onehot);
      }
    }
  });
}

#define SKIPVIT_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> softmax(const Tensor<T>&, int);                                        \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> gelu(const Tensor<T>&);                                                \
  template Tensor<T> gather_rows(const Tensor<T>&, const RowIndex&);                        \
  template Tensor<T> scatter_rows(const Tensor<T>&, const Tensor<T>&, const RowIndex&);     \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mean(const Tensor<T>&, int);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> normalize_last(const Tensor<T>&, std::size_t*);                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);

SKIPVIT_INSTANTIATE_OPS(float)
SKIPVIT_INSTANTIATE_OPS(double)

#undef SKIPVIT_INSTANTIATE_OPS

}  // namespace skipvit::numerics
