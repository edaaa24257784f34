#include "dslstm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include <Eigen/Core>

namespace dslstm::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MatMap<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstVecMap<T> as_vec(const Tensor<T>& t) {
  return ConstVecMap<T>(t.data(), static_cast<Eigen::Index>(t.size()));
}
template <typename T>
VecMap<T> as_vec(Tensor<T>& t) {
  return VecMap<T>(t.data(), static_cast<Eigen::Index>(t.size()));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void accumulate(Graph<T>& g, Var<T> target, const Tensor<T>& delta) {
  if (!g.requires_grad(target.id)) return;
  as_vec(g.grad_buffer(target.id)) += as_vec(delta);
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  as_vec(out) = as_vec(a.value()) + as_vec(b.value());
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& gout = g.grad_of(self);
    accumulate(g, a, gout);
    accumulate(g, b, gout);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  as_vec(out) = as_vec(a.value()) - as_vec(b.value());
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& gout = g.grad_of(self);
    accumulate(g, a, gout);
    if (g.requires_grad(b.id)) as_vec(g.grad_buffer(b.id)) -= as_vec(gout);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  as_vec(out) = as_vec(a.value()).cwiseProduct(as_vec(b.value()));
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto gout = as_vec(g.grad_of(self));
    if (g.requires_grad(a.id)) as_vec(g.grad_buffer(a.id)) += gout.cwiseProduct(as_vec(b.value()));
    if (g.requires_grad(b.id)) as_vec(g.grad_buffer(b.id)) += gout.cwiseProduct(as_vec(a.value()));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape());
  as_vec(out) = as_vec(a.value()) * factor;
  return a.graph->record(std::move(out), {a}, [a, factor](Graph<T>& g, std::size_t self) {
    if (g.requires_grad(a.id)) as_vec(g.grad_buffer(a.id)) += as_vec(g.grad_of(self)) * factor;
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = stable_sigmoid(av[i]);
  return a.graph->record(std::move(out), {a}, [a](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(a.id)) return;
    const auto& y = g.value(self);
    const auto& gout = g.grad_of(self);
    auto& ga = g.grad_buffer(a.id);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gout[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  return a.graph->record(std::move(out), {a}, [a](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(a.id)) return;
    const auto& y = g.value(self);
    const auto& gout = g.grad_of(self);
    auto& ga = g.grad_buffer(a.id);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gout[i] * (T{1} - y[i] * y[i]);
  });
}

template <typename T>
Var<T> lstm_pointwise(Var<T> z, Var<T> c_prev) {
  require_rank(z.shape(), 2, "lstm_pointwise");
  const std::size_t n = z.dim(0), h = z.dim(1) / 4;
  if (z.dim(1) != 4 * h || c_prev.shape() != Shape{n, h}) {
    throw ShapeError("lstm_pointwise: pre-activations " + shape_str(z.shape()) + " do not match cell " +
                     shape_str(c_prev.shape()));
  }
  // Gate activations are kept for backward: [i f g o tanh(c)] per row.
  auto acts = std::make_shared<std::vector<T>>(n * 5 * h);
  Tensor<T> out(Shape{n, 2 * h});
  const T* zv = z.value().data();
  const T* cv = c_prev.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* zr = zv + r * 4 * h;
    T* a = acts->data() + r * 5 * h;
    T* o = out.data() + r * 2 * h;
    for (std::size_t k = 0; k < h; ++k) {
      const T i = stable_sigmoid(zr[k]), f = stable_sigmoid(zr[h + k]);
      const T gg = std::tanh(zr[2 * h + k]), og = stable_sigmoid(zr[3 * h + k]);
      const T c = f * cv[r * h + k] + i * gg;
      const T tc = std::tanh(c);
      a[k] = i, a[h + k] = f, a[2 * h + k] = gg, a[3 * h + k] = og, a[4 * h + k] = tc;
      o[k] = og * tc;
      o[h + k] = c;
    }
  }
  return z.graph->record(std::move(out), {z, c_prev}, [z, c_prev, n, h, acts](Graph<T>& g, std::size_t self) {
    const T* gout = g.grad_of(self).data();
    const T* cv = c_prev.value().data();
    T* gz = g.requires_grad(z.id) ? g.grad_buffer(z.id).data() : nullptr;
    T* gc = g.requires_grad(c_prev.id) ? g.grad_buffer(c_prev.id).data() : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const T* a = acts->data() + r * 5 * h;
      const T* go = gout + r * 2 * h;
      for (std::size_t k = 0; k < h; ++k) {
        const T i = a[k], f = a[h + k], gg = a[2 * h + k], og = a[3 * h + k], tc = a[4 * h + k];
        const T dh = go[k];
        const T dc = go[h + k] + dh * og * (T{1} - tc * tc);
        if (gz) {
          T* zr = gz + r * 4 * h;
          zr[k] += dc * gg * i * (T{1} - i);
          zr[h + k] += dc * cv[r * h + k] * f * (T{1} - f);
          zr[2 * h + k] += dc * i * (T{1} - gg * gg);
          zr[3 * h + k] += dh * tc * og * (T{1} - og);
        }
        if (gc) gc[r * h + k] += dc * f;
      }
    }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  return a.graph->record(std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& g, std::size_t self) {
    const auto gout = as_mat(g.grad_of(self), m, n);
    if (g.requires_grad(a.id)) {
      as_mat(g.grad_buffer(a.id), m, k).noalias() += gout * as_mat(b.value(), k, n).transpose();
    }
    if (g.requires_grad(b.id)) {
      as_mat(g.grad_buffer(b.id), k, n).noalias() += as_mat(a.value(), m, k).transpose() * gout;
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out(Shape{c, r});
  as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
  return a.graph->record(std::move(out), {a}, [a, r, c](Graph<T>& g, std::size_t self) {
    if (g.requires_grad(a.id)) as_mat(g.grad_buffer(a.id), r, c) += as_mat(g.grad_of(self), c, r).transpose();
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  require_rank(x.shape(), 2, "add_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.shape() != Shape{cols}) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  as_mat(out, rows, cols) = as_mat(x.value(), rows, cols).rowwise() + as_vec(bias.value()).transpose();
  return x.graph->record(std::move(out), {x, bias}, [x, bias, rows, cols](Graph<T>& g, std::size_t self) {
    const auto& gout = g.grad_of(self);
    accumulate(g, x, gout);
    if (g.requires_grad(bias.id)) {
      as_vec(g.grad_buffer(bias.id)) += as_mat(gout, rows, cols).colwise().sum().transpose();
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias) {
  require_rank(x.shape(), 2, "linear");
  require_rank(weight.shape(), 2, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), outs = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias && bias->shape() != Shape{outs}) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  Tensor<T> out(Shape{rows, outs});
  auto om = as_mat(out, rows, outs);
  om.noalias() = as_mat(x.value(), rows, in) * as_mat(weight.value(), outs, in).transpose();
  if (bias) om.rowwise() += as_vec(bias->value()).transpose();
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return x.graph->record(std::move(out), parents, [x, weight, bias, rows, in, outs](Graph<T>& g, std::size_t self) {
    const auto gout = as_mat(g.grad_of(self), rows, outs);
    if (g.requires_grad(x.id)) {
      as_mat(g.grad_buffer(x.id), rows, in).noalias() += gout * as_mat(weight.value(), outs, in);
    }
    if (g.requires_grad(weight.id)) {
      as_mat(g.grad_buffer(weight.id), outs, in).noalias() += gout.transpose() * as_mat(x.value(), rows, in);
    }
    if (bias && g.requires_grad(bias->id)) {
      as_vec(g.grad_buffer(bias->id)) += gout.colwise().sum().transpose();
    }
  });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  if (parts.size() == 1) return parts[0];
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  const std::size_t row = total * inner;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].value().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[p], widths[p], out.data() + o * row + offset);
    }
    offset += widths[p];
  }
  std::vector<Var<T>> parents(parts.begin(), parts.end());
  return parts[0].graph->record(std::move(out), parents, [parents, widths, outer, row](Graph<T>& g, std::size_t self) {
    const T* gout = g.grad_of(self).data();
    std::size_t off = 0;
    for (std::size_t p = 0; p < parents.size(); ++p) {
      if (g.requires_grad(parents[p].id)) {
        T* dst = g.grad_buffer(parents[p].id).data();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* s = gout + o * row + off;
          T* d = dst + o * widths[p];
          for (std::size_t i = 0; i < widths[p]; ++i) d[i] += s[i];
        }
      }
      off += widths[p];
    }
  });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t src_row = s[axis] * inner, width = (end - begin) * inner, off = begin * inner;
  const T* src = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * src_row + off, width, out.data() + o * width);
  return x.graph->record(std::move(out), {x}, [x, outer, src_row, width, off](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t o = 0; o < outer; ++o) {
      T* d = dst + o * src_row + off;
      const T* s2 = gout + o * width;
      for (std::size_t i = 0; i < width; ++i) d[i] += s2[i];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, std::size_t self) {
    if (g.requires_grad(x.id)) as_vec(g.grad_buffer(x.id)) += as_vec(g.grad_of(self));
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices) {
  require_rank(x.shape(), 2, "gather_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out(Shape{indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.value().data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  return x.graph->record(std::move(out), {x}, [x, indices = std::move(indices), cols](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (std::size_t c = 0; c < cols; ++c) dst[indices[i] * cols + c] += gout[i * cols + c];
    }
  });
}

template <typename T>
Var<T> pad_rows(Var<T> x, std::size_t rows) {
  require_rank(x.shape(), 2, "pad_rows");
  const std::size_t have = x.dim(0), cols = x.dim(1);
  if (rows < have) throw ShapeError("pad_rows: target rows smaller than input");
  if (rows == have) return x;
  Tensor<T> out(Shape{rows, cols});
  std::copy_n(x.value().data(), have * cols, out.data());
  return x.graph->record(std::move(out), {x}, [x, have, cols](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t i = 0; i < have * cols; ++i) dst[i] += gout[i];
  });
}

template <typename T>
Var<T> scale_rows(Var<T> x, std::vector<T> factors) {
  require_rank(x.shape(), 2, "scale_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (factors.size() != rows) throw ShapeError("scale_rows: factor count does not match rows");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] * factors[r];
  }
  return x.graph->record(std::move(out), {x}, [x, factors = std::move(factors), cols](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t r = 0; r < factors.size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += gout[r * cols + c] * factors[r];
    }
  });
}

namespace {

// cols[(c*KH + i)*KW + j][oh*OW + ow] = x[c][oh + i][ow + j]
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, T* cols) {
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* dst = cols + ((ch * kh + i) * kw + j) * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
          std::copy_n(x + (ch * h + r + i) * w + j, ow, dst + r * ow);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, T* x) {
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* src = cols + ((ch * kh + i) * kw + j) * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
          T* d = x + (ch * h + r + i) * w + j;
          const T* s = src + r * ow;
          for (std::size_t q = 0; q < ow; ++q) d[q] += s[q];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<Var<T>> bias) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(kernel.shape(), 4, "conv2d");
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (h < kh || w < kw) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel " + shape_str(kernel.shape()));
  }
  if (bias && bias->shape() != Shape{o}) throw ShapeError("conv2d: bias does not match output channels");
  const std::size_t oh = h - kh + 1, ow = w - kw + 1, patch = c * kh * kw, pix = oh * ow;
  Tensor<T> out(Shape{batch, o, oh, ow});
  std::vector<T> cols(patch * pix);
  const auto km = as_mat(kernel.value(), o, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.value().data() + b * c * h * w, c, h, w, kh, kw, cols.data());
    MatMap<T> om(out.data() + b * o * pix, static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(pix));
    om.noalias() = km * ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(pix));
    if (bias) om.colwise() += as_vec(bias->value());
  }
  std::vector<Var<T>> parents{x, kernel};
  if (bias) parents.push_back(*bias);
  return x.graph->record(std::move(out), parents, [=](Graph<T>& g, std::size_t self) {
    const auto& gout = g.grad_of(self);
    const bool need_x = g.requires_grad(x.id), need_k = g.requires_grad(kernel.id);
    std::vector<T> buf(patch * pix);
    const auto kmat = as_mat(kernel.value(), o, patch);
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMatMap<T> gm(gout.data() + b * o * pix, static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(pix));
      MatMap<T> colm(buf.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(pix));
      if (need_k) {
        im2col(x.value().data() + b * c * h * w, c, h, w, kh, kw, buf.data());
        as_mat(g.grad_buffer(kernel.id), o, patch).noalias() += gm * colm.transpose();
      }
      if (need_x) {
        colm.noalias() = kmat.transpose() * gm;
        col2im_add(buf.data(), c, h, w, kh, kw, g.grad_buffer(x.id).data() + b * c * h * w);
      }
      if (bias && g.requires_grad(bias->id)) as_vec(g.grad_buffer(bias->id)) += gm.rowwise().sum();
    }
  });
}

template <typename T>
Var<T> maxpool2d(Var<T> x) {
  require_rank(x.shape(), 4, "maxpool2d");
  const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2d: spatial dims of " + shape_str(x.shape()) + " below 2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const T* src = x.value().data();
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t q = 0; q < ow; ++q) {
        std::size_t best = (p * h + 2 * r) * w + 2 * q;
        for (const std::size_t cand : {best + 1, best + w, best + w + 1}) {
          if (src[cand] > src[best]) best = cand;
        }
        const std::size_t oi = (p * oh + r) * ow + q;
        out[oi] = src[best];
        argmax[oi] = best;
      }
    }
  }
  return x.graph->record(std::move(out), {x}, [x, argmax = std::move(argmax)](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t i = 0; i < argmax.size(); ++i) dst[argmax[i]] += gout[i];
  });
}

template <typename T>
Var<T> time_major_rows(Var<T> x) {
  require_rank(x.shape(), 4, "time_major_rows");
  const std::size_t batch = x.dim(0), ch = x.dim(1), f = x.dim(2), t = x.dim(3);
  const std::size_t feat = ch * f;
  Tensor<T> out(Shape{t * batch, feat});
  const T* src = x.value().data();
  // src index: ((b*ch + c)*f + k)*t + s == (b*feat + j)*t + s with j = c*f + k
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < feat; ++j) {
      const T* col = src + (b * feat + j) * t;
      for (std::size_t s = 0; s < t; ++s) out[(s * batch + b) * feat + j] = col[s];
    }
  }
  return x.graph->record(std::move(out), {x}, [x, batch, feat, t](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < feat; ++j) {
        T* col = dst + (b * feat + j) * t;
        for (std::size_t s = 0; s < t; ++s) col[s] += gout[(s * batch + b) * feat + j];
      }
    }
  });
}

template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& stats, const BatchNormOptions& opts) {
  require_rank(x.shape(), 2, "batchnorm");
  const std::size_t rows = x.dim(0), feats = x.dim(1);
  if (gamma.shape() != Shape{feats} || beta.shape() != Shape{feats}) {
    throw ShapeError("batchnorm: gamma/beta do not match " + shape_str(x.shape()));
  }
  if (stats.mean.shape() != Shape{feats} || stats.var.shape() != Shape{feats}) {
    throw ShapeError("batchnorm: running statistics do not match " + shape_str(x.shape()));
  }
  const bool train = opts.mode == Mode::kTrain;
  if (train && rows < 2) throw ValidationError("batchnorm: train mode needs at least 2 rows (got 1)");

  const auto xm = as_mat(x.value(), rows, feats);
  Eigen::Matrix<T, Eigen::Dynamic, 1> mu(feats), inv_std(feats);
  if (train) {
    mu = xm.colwise().mean().transpose();
    const auto centered = (xm.rowwise() - mu.transpose()).eval();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> var =
        centered.array().square().colwise().sum().transpose() / static_cast<T>(rows);
    inv_std = (var.array() + static_cast<T>(opts.eps)).rsqrt();
    const T m = static_cast<T>(opts.momentum);
    const T unbias = static_cast<T>(rows) / static_cast<T>(rows - 1);
    if (stats.seeded) {
      as_vec(stats.mean) = (T{1} - m) * as_vec(stats.mean) + m * mu;
      as_vec(stats.var) = (T{1} - m) * as_vec(stats.var) + (m * unbias) * var;
    } else {
      as_vec(stats.mean) = mu;
      as_vec(stats.var) = unbias * var;
      stats.seeded = true;
    }
  } else {
    mu = as_vec(stats.mean);
    inv_std = (as_vec(stats.var).array() + static_cast<T>(opts.eps)).rsqrt();
  }
  Tensor<T> xhat(Shape{rows, feats});
  as_mat(xhat, rows, feats) = (xm.rowwise() - mu.transpose()).array().rowwise() * inv_std.transpose().array();
  Tensor<T> out(Shape{rows, feats});
  as_mat(out, rows, feats) = (as_mat(xhat, rows, feats).array().rowwise() * as_vec(gamma.value()).transpose().array())
                                 .rowwise() +
                             as_vec(beta.value()).transpose().array();
  std::vector<T> inv(inv_std.data(), inv_std.data() + feats);
  return x.graph->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, feats, train, xhat = std::move(xhat), inv = std::move(inv)](Graph<T>& g,
                                                                                         std::size_t self) {
        const auto gm = as_mat(g.grad_of(self), rows, feats);
        const auto xh = as_mat(xhat, rows, feats);
        if (g.requires_grad(gamma.id)) {
          as_vec(g.grad_buffer(gamma.id)) += (gm.array() * xh.array()).colwise().sum().transpose().matrix();
        }
        if (g.requires_grad(beta.id)) as_vec(g.grad_buffer(beta.id)) += gm.colwise().sum().transpose();
        if (!g.requires_grad(x.id)) return;
        const ConstVecMap<T> inv_std(inv.data(), static_cast<Eigen::Index>(feats));
        const auto dxhat = (gm.array().rowwise() * as_vec(gamma.value()).transpose().array()).eval();
        auto gx = as_mat(g.grad_buffer(x.id), rows, feats);
        if (!train) {
          gx.array() += dxhat.rowwise() * inv_std.transpose().array();
          return;
        }
        const T n = static_cast<T>(rows);
        const auto sum_d = dxhat.colwise().sum().eval();
        const auto sum_dx = (dxhat * xh.array()).colwise().sum().eval();
        gx.array() += ((n * dxhat).rowwise() - sum_d - xh.array().rowwise() * sum_dx).rowwise() *
                      (inv_std.transpose().array() / n);
      });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tensor<T> out = Tensor<T>::scalar(as_vec(x.value()).sum());
  return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, std::size_t self) {
    if (g.requires_grad(x.id)) as_vec(g.grad_buffer(x.id)).array() += g.grad_of(self)[0];
  });
}

template <typename T>
Var<T> mean_over_axis(Var<T> x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_over_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  Tensor<T> out(out_shape);
  const T inv = T{1} / static_cast<T>(len);
  const T* src = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += src[(o * len + k) * inner + i];
    }
  }
  as_vec(out) *= inv;
  return x.graph->record(std::move(out), {x}, [x, outer, inner, len, inv](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const T* gout = g.grad_of(self).data();
    T* dst = g.grad_buffer(x.id).data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < len; ++k) {
        for (std::size_t i = 0; i < inner; ++i) dst[(o * len + k) * inner + i] += gout[o * inner + i] * inv;
      }
    }
  });
}

namespace {

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits, std::size_t rows, std::size_t cols) {
  Tensor<T> out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * cols;
    T* p = out.data() + r * cols;
    const T mx = *std::max_element(z, z + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) total += (p[c] = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= total;
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> softmax(Var<T> x) {
  require_rank(x.shape(), 2, "softmax");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  return x.graph->record(softmax_rows(x.value(), rows, cols), {x}, [x, rows, cols](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(x.id)) return;
    const auto& y = g.value(self);
    const auto& gout = g.grad_of(self);
    auto& gx = g.grad_buffer(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += gout[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (gout[r * cols + c] - dot);
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count does not match batch");
  for (const int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cols) {
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  const auto& z = logits.value();
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * cols;
    const T mx = *std::max_element(zr, zr + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(zr[c] - mx);
    loss += (mx + std::log(total)) - zr[labels[r]];
  }
  loss /= static_cast<T>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph->record(Tensor<T>::scalar(loss), {logits},
                              [logits, rows, cols, lab = std::move(lab)](Graph<T>& g, std::size_t self) {
                                if (!g.requires_grad(logits.id)) return;
                                const T scale_by = g.grad_of(self)[0] / static_cast<T>(rows);
                                Tensor<T> p = softmax_rows(logits.value(), rows, cols);
                                for (std::size_t r = 0; r < rows; ++r) p[r * cols + lab[r]] -= T{1};
                                as_vec(g.grad_buffer(logits.id)) += as_vec(p) * scale_by;
                              });
}

#define DSLSTM_INSTANTIATE_OPS(T)                                                                     \
  template Var<T> add(Var<T>, Var<T>);                                                                \
  template Var<T> sub(Var<T>, Var<T>);                                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                                \
  template Var<T> scale(Var<T>, T);                                                                   \
  template Var<T> sigmoid(Var<T>);                                                                    \
  template Var<T> tanh(Var<T>);                                                                       \
  template Var<T> lstm_pointwise(Var<T>, Var<T>);                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                                             \
  template Var<T> transpose(Var<T>);                                                                  \
  template Var<T> add_bias(Var<T>, Var<T>);                                                           \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                      \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                                       \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                               \
  template Var<T> reshape(Var<T>, Shape);                                                             \
  template Var<T> gather_rows(Var<T>, std::vector<std::size_t>);                                      \
  template Var<T> pad_rows(Var<T>, std::size_t);                                                      \
  template Var<T> scale_rows(Var<T>, std::vector<T>);                                                 \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>);                                      \
  template Var<T> maxpool2d(Var<T>);                                                                  \
  template Var<T> time_major_rows(Var<T>);                                                            \
  template Var<T> batchnorm(Var<T>, Var<T>, Var<T>, RunningStats<T>&, const BatchNormOptions&);       \
  template Var<T> sum(Var<T>);                                                                        \
  template Var<T> mean_over_axis(Var<T>, std::size_t);                                                \
  template Var<T> softmax(Var<T>);                                                                    \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);

DSLSTM_INSTANTIATE_OPS(float)
DSLSTM_INSTANTIATE_OPS(double)

}  // namespace dslstm::ad
