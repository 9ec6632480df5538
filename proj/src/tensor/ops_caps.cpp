#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "capsdefl/error.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename T>
BasicTensor<T> caps_predict(const BasicTensor<T>& u, const BasicTensor<T>& weight) {
  if (u.rank() != 3 || weight.rank() != 4 || u.dim(1) != weight.dim(0) ||
      u.dim(2) != weight.dim(3)) {
    throw ConfigError("caps_predict: input capsules " + shape_str(u.shape()) +
                      " incompatible with weight " + shape_str(weight.shape()));
  }
  const std::size_t n = u.dim(0), in_caps = u.dim(1), atoms = u.dim(2);
  const std::size_t out_caps = weight.dim(1), d = weight.dim(2);
  const std::size_t jd = out_caps * d;
  std::vector<T> out(n * in_caps * jd);
  // Per input capsule i: (J*D x A) * (A x N), one GEMM over the whole batch.
  RowMat<T> ui(atoms, n), yi(jd, n);
  for (std::size_t i = 0; i < in_caps; ++i) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t a = 0; a < atoms; ++a) ui(a, b) = u.data()[(b * in_caps + i) * atoms + a];
    Eigen::Map<const RowMat<T>> wi(weight.data().data() + i * jd * atoms, jd, atoms);
    yi.noalias() = wi * ui;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t r = 0; r < jd; ++r) out[(b * in_caps + i) * jd + r] = yi(r, b);
  }
  return make_op<T>(
      OpKind::CapsPredict, Shape{n, in_caps, out_caps, d}, std::move(out), {u, weight},
      [n, in_caps, atoms, jd](Node<T>& self) {
        auto& un = *self.inputs[0];
        auto& wn = *self.inputs[1];
        RowMat<T> ui(atoms, n), gi(jd, n), dui(atoms, n);
        for (std::size_t i = 0; i < in_caps; ++i) {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t r = 0; r < jd; ++r) gi(r, b) = self.grad[(b * in_caps + i) * jd + r];
          Eigen::Map<const RowMat<T>> wi(wn.data.data() + i * jd * atoms, jd, atoms);
          if (un.requires_grad) {
            dui.noalias() = wi.transpose() * gi;
            T* du = un.grad_buffer();
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t a = 0; a < atoms; ++a) du[(b * in_caps + i) * atoms + a] += dui(a, b);
          }
          if (wn.requires_grad) {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t a = 0; a < atoms; ++a)
                ui(a, b) = un.data[(b * in_caps + i) * atoms + a];
            Eigen::Map<RowMat<T>> dwi(wn.grad_buffer() + i * jd * atoms, jd, atoms);
            dwi.noalias() += gi * ui.transpose();
          }
        }
      });
}

template <typename T>
BasicTensor<T> caps_combine(const BasicTensor<T>& uhat, const BasicTensor<T>& coupling) {
  if (uhat.rank() != 4 || coupling.rank() != 3 || coupling.dim(0) != uhat.dim(0) ||
      coupling.dim(1) != uhat.dim(1) || coupling.dim(2) != uhat.dim(2)) {
    throw ConfigError("caps_combine: predictions " + shape_str(uhat.shape()) +
                      " incompatible with coupling " + shape_str(coupling.shape()));
  }
  const std::size_t n = uhat.dim(0), ni = uhat.dim(1), nj = uhat.dim(2), d = uhat.dim(3);
  std::vector<T> out(n * nj * d, T(0));
  const auto u = uhat.data();
  const auto c = coupling.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        const T cij = c[(b * ni + i) * nj + j];
        const T* src = u.data() + ((b * ni + i) * nj + j) * d;
        T* dst = out.data() + (b * nj + j) * d;
        for (std::size_t k = 0; k < d; ++k) dst[k] += cij * src[k];
      }
  return make_op<T>(OpKind::CapsCombine, Shape{n, nj, d}, std::move(out), {uhat, coupling},
                    [n, ni, nj, d](Node<T>& self) {
                      auto& un = *self.inputs[0];
                      auto& cn = *self.inputs[1];
                      T* du = un.requires_grad ? un.grad_buffer() : nullptr;
                      T* dc = cn.requires_grad ? cn.grad_buffer() : nullptr;
                      for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t i = 0; i < ni; ++i)
                          for (std::size_t j = 0; j < nj; ++j) {
                            const std::size_t ij = (b * ni + i) * nj + j;
                            const T* g = self.grad.data() + (b * nj + j) * d;
                            if (du) {
                              const T cij = cn.data[ij];
                              for (std::size_t k = 0; k < d; ++k) du[ij * d + k] += cij * g[k];
                            }
                            if (dc) {
                              T acc = 0;
                              for (std::size_t k = 0; k < d; ++k) acc += un.data[ij * d + k] * g[k];
                              dc[ij] += acc;
                            }
                          }
                    });
}

template <typename T>
BasicTensor<T> caps_agreement(const BasicTensor<T>& uhat, const BasicTensor<T>& v) {
  if (uhat.rank() != 4 || v.rank() != 3 || v.dim(0) != uhat.dim(0) || v.dim(1) != uhat.dim(2) ||
      v.dim(2) != uhat.dim(3)) {
    throw ConfigError("caps_agreement: predictions " + shape_str(uhat.shape()) +
                      " incompatible with poses " + shape_str(v.shape()));
  }
  const std::size_t n = uhat.dim(0), ni = uhat.dim(1), nj = uhat.dim(2), d = uhat.dim(3);
  std::vector<T> out(n * ni * nj);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j) {
        T acc = 0;
        for (std::size_t k = 0; k < d; ++k)
          acc += uhat.data()[((b * ni + i) * nj + j) * d + k] * v.data()[(b * nj + j) * d + k];
        out[(b * ni + i) * nj + j] = acc;
      }
  return make_op<T>(OpKind::CapsAgreement, Shape{n, ni, nj}, std::move(out), {uhat, v},
                    [n, ni, nj, d](Node<T>& self) {
                      auto& un = *self.inputs[0];
                      auto& vn = *self.inputs[1];
                      T* du = un.requires_grad ? un.grad_buffer() : nullptr;
                      T* dv = vn.requires_grad ? vn.grad_buffer() : nullptr;
                      for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t i = 0; i < ni; ++i)
                          for (std::size_t j = 0; j < nj; ++j) {
                            const std::size_t ij = (b * ni + i) * nj + j;
                            const T g = self.grad[ij];
                            for (std::size_t k = 0; k < d; ++k) {
                              if (du) du[ij * d + k] += g * vn.data[(b * nj + j) * d + k];
                              if (dv) dv[(b * nj + j) * d + k] += g * un.data[ij * d + k];
                            }
                          }
                    });
}

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& input) {
  if (input.rank() < 1) throw ConfigError("softmax_lastdim: scalar input");
  const std::size_t width = input.shape().back(), rows = input.numel() / width;
  std::vector<T> out(input.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * width;
    T* y = out.data() + r * width;
    const T mx = *std::max_element(x, x + width);
    T denom = 0;
    for (std::size_t k = 0; k < width; ++k) denom += (y[k] = std::exp(x[k] - mx));
    for (std::size_t k = 0; k < width; ++k) y[k] /= denom;
  }
  return make_op<T>(OpKind::SoftmaxLastDim, input.shape(), std::move(out), {input},
                    [rows, width](Node<T>& self) {
                      T* dx = self.inputs[0]->grad_buffer();
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* y = self.data.data() + r * width;
                        const T* g = self.grad.data() + r * width;
                        T dot = 0;
                        for (std::size_t k = 0; k < width; ++k) dot += y[k] * g[k];
                        for (std::size_t k = 0; k < width; ++k) dx[r * width + k] += y[k] * (g[k] - dot);
                      }
                    });
}

template <typename T>
BasicTensor<T> squash(const BasicTensor<T>& input) {
  if (input.rank() < 1) throw ConfigError("squash: scalar input");
  const std::size_t d = input.shape().back(), rows = input.numel() / d;
  std::vector<T> out(input.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* s = input.data().data() + r * d;
    T q = 0;
    for (std::size_t k = 0; k < d; ++k) q += s[k] * s[k];
    const T norm = std::sqrt(q);
    const T factor = norm / (T(1) + q);  // |s|^2/(1+|s|^2) / |s|, and 0 at s = 0
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = factor * s[k];
  }
  return make_op<T>(OpKind::Squash, input.shape(), std::move(out), {input},
                    [rows, d](Node<T>& self) {
                      auto& in = *self.inputs[0];
                      T* dx = in.grad_buffer();
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* s = in.data.data() + r * d;
                        const T* g = self.grad.data() + r * d;
                        T q = 0, sg = 0;
                        for (std::size_t k = 0; k < d; ++k) {
                          q += s[k] * s[k];
                          sg += s[k] * g[k];
                        }
                        const T norm = std::sqrt(q);
                        if (norm == T(0)) continue;  // Jacobian vanishes at the origin
                        const T factor = norm / (T(1) + q);
                        // d(factor)/ds = (1 - q) / ((1 + q)^2 |s|) * s
                        const T radial = (T(1) - q) / ((T(1) + q) * (T(1) + q) * norm);
                        for (std::size_t k = 0; k < d; ++k)
                          dx[r * d + k] += factor * g[k] + radial * sg * s[k];
                      }
                    });
}

template <typename T>
BasicTensor<T> caps_lengths(const BasicTensor<T>& v, std::size_t count) {
  if (v.rank() != 3 || count > v.dim(1)) {
    throw ConfigError("caps_lengths: poses " + shape_str(v.shape()) + " cannot supply " +
                      std::to_string(count) + " lengths");
  }
  const std::size_t n = v.dim(0), m = v.dim(1), d = v.dim(2);
  std::vector<T> out(n * count);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < count; ++j) {
      const T* p = v.data().data() + (b * m + j) * d;
      T q = 0;
      for (std::size_t k = 0; k < d; ++k) q += p[k] * p[k];
      out[b * count + j] = std::sqrt(q);
    }
  return make_op<T>(OpKind::CapsLengths, Shape{n, count}, std::move(out), {v},
                    [n, m, d, count](Node<T>& self) {
                      auto& in = *self.inputs[0];
                      T* dv = in.grad_buffer();
                      for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t j = 0; j < count; ++j) {
                          const T len = self.data[b * count + j];
                          if (len == T(0)) continue;
                          const T g = self.grad[b * count + j] / len;
                          for (std::size_t k = 0; k < d; ++k)
                            dv[(b * m + j) * d + k] += g * in.data[(b * m + j) * d + k];
                        }
                    });
}

template <typename T>
BasicTensor<T> mask_capsules(const BasicTensor<T>& v, std::size_t n_class, std::span<const int> keep) {
  if (v.rank() != 3 || n_class > v.dim(1)) {
    throw ConfigError("mask_capsules: poses " + shape_str(v.shape()) + " with " +
                      std::to_string(n_class) + " classes");
  }
  const std::size_t n = v.dim(0), m = v.dim(1), d = v.dim(2);
  if (n == 0 || keep.size() % n != 0) {
    throw ConfigError("mask_capsules: " + std::to_string(keep.size()) +
                      " kept classes for batch of " + std::to_string(n));
  }
  const std::size_t per = keep.size() / n, width = m * d;
  std::vector<T> mask(keep.size() * width, T(0));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (keep[r] < 0 || static_cast<std::size_t>(keep[r]) >= n_class) {
      throw UsageError("mask_capsules: class " + std::to_string(keep[r]) + " out of range [0, " +
                       std::to_string(n_class) + ")");
    }
    for (std::size_t j = 0; j < m; ++j) {
      const bool pass = j >= n_class || static_cast<int>(j) == keep[r];
      if (pass) std::fill_n(mask.data() + r * width + j * d, d, T(1));
    }
  }
  std::vector<T> out(mask.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const T* src = v.data().data() + (r / per) * width;
    for (std::size_t k = 0; k < width; ++k) out[r * width + k] = mask[r * width + k] * src[k];
  }
  return make_op<T>(OpKind::MaskCapsules, Shape{keep.size(), width}, std::move(out), {v},
                    [mask = std::move(mask), per, width](Node<T>& self) {
                      T* dv = self.inputs[0]->grad_buffer();
                      const std::size_t rows = self.grad.size() / width;
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t k = 0; k < width; ++k)
                          dv[(r / per) * width + k] += mask[r * width + k] * self.grad[r * width + k];
                    });
}

#define CAPSDEFL_INSTANTIATE_CAPS(T)                                                           \
  template BasicTensor<T> caps_predict(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> caps_combine(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> caps_agreement(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> softmax_lastdim(const BasicTensor<T>&);                             \
  template BasicTensor<T> squash(const BasicTensor<T>&);                                      \
  template BasicTensor<T> caps_lengths(const BasicTensor<T>&, std::size_t);                   \
  template BasicTensor<T> mask_capsules(const BasicTensor<T>&, std::size_t, std::span<const int>);

CAPSDEFL_INSTANTIATE_CAPS(float)
CAPSDEFL_INSTANTIATE_CAPS(double)

}  // namespace capsdefl
