#include <Eigen/Core>
#include <algorithm>

#include "capsdefl/error.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

// col[(c, ki, kj), (oh, ow)] = img[c, oh*s - p + ki, ow*s - p + kj], zero outside.
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ConfigError(std::string(op) + ": " + what + " " + shape_str(s) + " must have rank " +
                      std::to_string(rank));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (xs[1] != ws[1]) {
    throw ConfigError("conv2d: input " + shape_str(xs) + " incompatible with weight " +
                      shape_str(ws));
  }
  if (xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3]) {
    throw ConfigError("conv2d: kernel " + shape_str(ws) + " larger than padded input " +
                      shape_str(xs));
  }
  if (bias.defined() && (bias.numel() != ws[0])) {
    throw ConfigError("conv2d: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                      shape_str(ws));
  }
  const std::size_t n = xs[0], out_c = ws[0];
  ConvGeom g{xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding,
             (xs[2] + 2 * padding - ws[2]) / stride + 1, (xs[3] + 2 * padding - ws[3]) / stride + 1};
  const std::size_t in_sz = g.channels * g.height * g.width;
  const std::size_t out_sz = out_c * g.col_cols();

  std::vector<T> out(n * out_sz);
  std::vector<T> col(g.col_rows() * g.col_cols());
  MapConstMat<T> w(weight.data().data(), out_c, g.col_rows());
  MapConstMat<T> cm(col.data(), g.col_rows(), g.col_cols());
  for (std::size_t b = 0; b < n; ++b) {
    im2col(input.data().data() + b * in_sz, g, col.data());
    MapMat<T> y(out.data() + b * out_sz, out_c, g.col_cols());
    y.noalias() = w * cm;
    if (bias.defined()) {
      for (std::size_t o = 0; o < out_c; ++o) y.row(o).array() += bias.data()[o];
    }
  }

  return make_op<T>(
      OpKind::Conv2d, Shape{n, out_c, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
      [g, n, out_c, in_sz, out_sz](Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        auto* b = self.inputs[2].get();
        MapConstMat<T> wm(w.data.data(), out_c, g.col_rows());
        std::vector<T> col(g.col_rows() * g.col_cols());
        std::vector<T> dcol(x.requires_grad ? col.size() : 0);
        for (std::size_t i = 0; i < n; ++i) {
          MapConstMat<T> dy(self.grad.data() + i * out_sz, out_c, g.col_cols());
          if (x.requires_grad) {
            MapMat<T> dc(dcol.data(), g.col_rows(), g.col_cols());
            dc.noalias() = wm.transpose() * dy;
            col2im(dcol.data(), g, x.grad_buffer() + i * in_sz);
          }
          if (w.requires_grad) {
            im2col(x.data.data() + i * in_sz, g, col.data());
            MapConstMat<T> cm(col.data(), g.col_rows(), g.col_cols());
            MapMat<T> dw(w.grad_buffer(), out_c, g.col_rows());
            dw.noalias() += dy * cm.transpose();
          }
          if (b && b->requires_grad) {
            T* db = b->grad_buffer();
            for (std::size_t o = 0; o < out_c; ++o) db[o] += dy.row(o).sum();
          }
        }
      });
}

template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "deconv2d", "input");
  require_rank(weight.shape(), 4, "deconv2d", "weight");
  if (stride < 1) throw ConfigError("deconv2d: stride must be >= 1");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (xs[1] != ws[0]) {
    throw ConfigError("deconv2d: input " + shape_str(xs) + " incompatible with weight " +
                      shape_str(ws));
  }
  const std::size_t full_h = (xs[2] - 1) * stride + ws[2];
  const std::size_t full_w = (xs[3] - 1) * stride + ws[3];
  if (full_h <= 2 * padding || full_w <= 2 * padding) {
    throw ConfigError("deconv2d: padding " + std::to_string(padding) + " too large for input " +
                      shape_str(xs) + " and weight " + shape_str(ws));
  }
  if (bias.defined() && bias.numel() != ws[1]) {
    throw ConfigError("deconv2d: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                      shape_str(ws));
  }
  const std::size_t n = xs[0], in_c = ws[0], out_c = ws[1];
  // Geometry of the forward convolution this op is the adjoint of: it maps
  // the (out_h, out_w) output image down to the (H, W) input grid.
  ConvGeom g{out_c, full_h - 2 * padding, full_w - 2 * padding, ws[2], ws[3], stride, padding,
             xs[2], xs[3]};
  const std::size_t in_sz = in_c * g.col_cols();
  const std::size_t out_sz = out_c * g.height * g.width;

  std::vector<T> out(n * out_sz, T(0));
  std::vector<T> col(g.col_rows() * g.col_cols());
  MapConstMat<T> w(weight.data().data(), in_c, g.col_rows());
  for (std::size_t b = 0; b < n; ++b) {
    MapConstMat<T> x(input.data().data() + b * in_sz, in_c, g.col_cols());
    MapMat<T> cm(col.data(), g.col_rows(), g.col_cols());
    cm.noalias() = w.transpose() * x;
    T* y = out.data() + b * out_sz;
    col2im(col.data(), g, y);
    if (bias.defined()) {
      const std::size_t plane = g.height * g.width;
      for (std::size_t o = 0; o < out_c; ++o)
        for (std::size_t p = 0; p < plane; ++p) y[o * plane + p] += bias.data()[o];
    }
  }

  return make_op<T>(
      OpKind::Deconv2d, Shape{n, out_c, g.height, g.width}, std::move(out), {input, weight, bias},
      [g, n, in_c, out_c, in_sz, out_sz](Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        auto* b = self.inputs[2].get();
        MapConstMat<T> wm(w.data.data(), in_c, g.col_rows());
        std::vector<T> col(g.col_rows() * g.col_cols());
        for (std::size_t i = 0; i < n; ++i) {
          const T* dy = self.grad.data() + i * out_sz;
          im2col(dy, g, col.data());
          MapConstMat<T> cm(col.data(), g.col_rows(), g.col_cols());
          if (x.requires_grad) {
            MapMat<T> dx(x.grad_buffer() + i * in_sz, in_c, g.col_cols());
            dx.noalias() += wm * cm;
          }
          if (w.requires_grad) {
            MapConstMat<T> xm(x.data.data() + i * in_sz, in_c, g.col_cols());
            MapMat<T> dw(w.grad_buffer(), in_c, g.col_rows());
            dw.noalias() += xm * cm.transpose();
          }
          if (b && b->requires_grad) {
            T* db = b->grad_buffer();
            const std::size_t plane = g.height * g.width;
            for (std::size_t o = 0; o < out_c; ++o) {
              T acc = 0;
              for (std::size_t p = 0; p < plane; ++p) acc += dy[o * plane + p];
              db[o] += acc;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t pool, std::size_t stride) {
  require_rank(input.shape(), 4, "avg_pool2d", "input");
  if (pool < 1 || stride < 1) throw ConfigError("avg_pool2d: pool and stride must be >= 1");
  const auto& xs = input.shape();
  if (pool > xs[2] || pool > xs[3]) {
    throw ConfigError("avg_pool2d: window " + std::to_string(pool) + " larger than input " +
                      shape_str(xs));
  }
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = (h - pool) / stride + 1, ow = (w - pool) / stride + 1;
  const T inv = T(1) / static_cast<T>(pool * pool);
  std::vector<T> out(planes * oh * ow);
  const T* x = input.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T acc = 0;
        for (std::size_t a = 0; a < pool; ++a)
          for (std::size_t b = 0; b < pool; ++b)
            acc += x[(p * h + i * stride + a) * w + j * stride + b];
        out[(p * oh + i) * ow + j] = acc * inv;
      }
    }
  }
  return make_op<T>(OpKind::AvgPool2d, Shape{xs[0], xs[1], oh, ow}, std::move(out), {input},
                    [=](Node<T>& self) {
                      T* dx = self.inputs[0]->grad_buffer();
                      for (std::size_t p = 0; p < planes; ++p)
                        for (std::size_t i = 0; i < oh; ++i)
                          for (std::size_t j = 0; j < ow; ++j) {
                            const T g = self.grad[(p * oh + i) * ow + j] * inv;
                            for (std::size_t a = 0; a < pool; ++a)
                              for (std::size_t b = 0; b < pool; ++b)
                                dx[(p * h + i * stride + a) * w + j * stride + b] += g;
                          }
                    });
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>& bias) {
  require_rank(input.shape(), 2, "dense", "input");
  require_rank(weight.shape(), 2, "dense", "weight");
  const std::size_t n = input.dim(0), k = input.dim(1), m = weight.dim(0);
  if (weight.dim(1) != k) {
    throw ConfigError("dense: input " + shape_str(input.shape()) + " incompatible with weight " +
                      shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != m) {
    throw ConfigError("dense: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                      shape_str(weight.shape()));
  }
  std::vector<T> out(n * m);
  MapConstMat<T> x(input.data().data(), n, k);
  MapConstMat<T> w(weight.data().data(), m, k);
  MapMat<T> y(out.data(), n, m);
  y.noalias() = x * w.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), m);
    y.rowwise() += bv;
  }
  return make_op<T>(OpKind::Dense, Shape{n, m}, std::move(out), {input, weight, bias},
                    [n, k, m](Node<T>& self) {
                      auto& xin = *self.inputs[0];
                      auto& win = *self.inputs[1];
                      auto* bin = self.inputs[2].get();
                      MapConstMat<T> dy(self.grad.data(), n, m);
                      if (xin.requires_grad) {
                        MapConstMat<T> w(win.data.data(), m, k);
                        MapMat<T> dx(xin.grad_buffer(), n, k);
                        dx.noalias() += dy * w;
                      }
                      if (win.requires_grad) {
                        MapConstMat<T> x(xin.data.data(), n, k);
                        MapMat<T> dw(win.grad_buffer(), m, k);
                        dw.noalias() += dy.transpose() * x;
                      }
                      if (bin && bin->requires_grad) {
                        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bin->grad_buffer(), m);
                        db += dy.colwise().sum();
                      }
                    });
}

#define CAPSDEFL_INSTANTIATE_CONV(T)                                                           \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const BasicTensor<T>&, std::size_t, std::size_t);            \
  template BasicTensor<T> deconv2d(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                   const BasicTensor<T>&, std::size_t, std::size_t);          \
  template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);        \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                const BasicTensor<T>&);

CAPSDEFL_INSTANTIATE_CONV(float)
CAPSDEFL_INSTANTIATE_CONV(double)

}  // namespace capsdefl
