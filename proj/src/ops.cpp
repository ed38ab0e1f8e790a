#include "cellsearch/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cellsearch/error.hpp"

namespace cellsearch::ops {
namespace {

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " + s.str());
}

struct ConvGeometry {
  std::int64_t n, c, h, w;
  std::int64_t c_out, c_group, c_out_group;
  std::int64_t kh, kw;
  int stride, dilation, pad, groups;
  std::int64_t ho, wo;
  std::int64_t patch() const { return c_group * kh * kw; }
  std::int64_t pixels() const { return ho * wo; }
};

// Unfold the c_group channels starting at `img` into a (patch x pixels) matrix.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::int64_t pixels = g.pixels();
  for (std::int64_t c = 0; c < g.c_group; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * pixels;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki * g.dilation;
          T* row = dst + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          const T* src = img + (c * g.h + ih) * g.w;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj * g.dilation;
            row[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::int64_t pixels = g.pixels();
  for (std::int64_t c = 0; c < g.c_group; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * pixels;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki * g.dilation;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = img + (c * g.h + ih) * g.w;
          const T* row = src + oh * g.wo;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj * g.dilation;
            if (iw >= 0 && iw < g.w) dst[iw] += row[ow];
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  std::int64_t n, c, h, w, ho, wo;
  int kernel, stride, pad;
};

PoolGeometry pool_geometry(const Shape& s, int kernel, int stride, const char* op) {
  require_rank(s, 4, op);
  if (kernel < 1 || kernel % 2 == 0) throw ArgumentError(std::string(op) + ": kernel must be odd and positive");
  if (stride < 1) throw ArgumentError(std::string(op) + ": stride must be >= 1");
  PoolGeometry g{s[0], s[1], s[2], s[3], 0, 0, kernel, stride, same_padding(kernel, 1)};
  g.ho = conv_output_size(g.h, kernel, stride, 1, g.pad);
  g.wo = conv_output_size(g.w, kernel, stride, 1, g.pad);
  return g;
}

}  // namespace

std::int64_t conv_output_size(std::int64_t in, int kernel, int stride, int dilation, int padding) {
  const std::int64_t span = static_cast<std::int64_t>(dilation) * (kernel - 1) + 1;
  const std::int64_t padded = in + 2 * static_cast<std::int64_t>(padding);
  if (padded < span) throw ShapeError("window of extent " + std::to_string(span) + " does not fit input " + std::to_string(in));
  return (padded - span) / stride + 1;
}

int same_padding(int kernel, int dilation) { return dilation * (kernel - 1) / 2; }

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::type_identity_t<std::optional<Var<T>>>& bias,
              const Conv2dOptions& opt) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d");
  require_rank(ks, 4, "conv2d kernel");
  if (opt.groups < 1 || xs[1] % opt.groups != 0)
    throw ArgumentError("conv2d: input channels " + std::to_string(xs[1]) + " not divisible by groups " +
                        std::to_string(opt.groups));
  if (ks[0] % opt.groups != 0)
    throw ArgumentError("conv2d: output channels " + std::to_string(ks[0]) + " not divisible by groups");
  if (ks[1] != xs[1] / opt.groups)
    throw ShapeError("conv2d: kernel " + ks.str() + " does not match input " + xs.str() + " with groups " +
                     std::to_string(opt.groups));
  if (opt.stride < 1 || opt.dilation < 1) throw ArgumentError("conv2d: stride and dilation must be >= 1");
  if (bias && (bias->shape().rank() != 1 || bias->shape()[0] != ks[0]))
    throw ShapeError("conv2d: bias shape " + bias->shape().str() + " does not match " + std::to_string(ks[0]) +
                     " output channels");
  if (ks[2] != ks[3] && !opt.padding) throw ArgumentError("conv2d: same padding requires a square kernel");

  ConvGeometry g{};
  g.n = xs[0];
  g.c = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.c_out = ks[0];
  g.groups = opt.groups;
  g.c_group = g.c / g.groups;
  g.c_out_group = g.c_out / g.groups;
  g.kh = ks[2];
  g.kw = ks[3];
  g.stride = opt.stride;
  g.dilation = opt.dilation;
  g.pad = opt.padding ? *opt.padding : same_padding(static_cast<int>(g.kh), opt.dilation);
  if (g.pad < 0) throw ArgumentError("conv2d: negative padding");
  g.ho = conv_output_size(g.h, static_cast<int>(g.kh), g.stride, g.dilation, g.pad);
  g.wo = conv_output_size(g.w, static_cast<int>(g.kw), g.stride, g.dilation, g.pad);

  const std::int64_t patch = g.patch();
  const std::int64_t pixels = g.pixels();
  Tensor<T> out(Shape{g.n, g.c_out, g.ho, g.wo});
  std::vector<T> col(static_cast<std::size_t>(patch * pixels));
  const T* x = input.value().data().data();
  const T* wt = kernel.value().data().data();
  T* y = out.data().data();
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t grp = 0; grp < g.groups; ++grp) {
      im2col(x + (n * g.c + grp * g.c_group) * g.h * g.w, g, col.data());
      for (std::int64_t oc = 0; oc < g.c_out_group; ++oc) {
        const std::int64_t channel = grp * g.c_out_group + oc;
        T* dst = y + (n * g.c_out + channel) * pixels;
        const T* wrow = wt + channel * patch;
        for (std::int64_t kk = 0; kk < patch; ++kk) {
          const T wv = wrow[kk];
          const T* src = col.data() + kk * pixels;
          for (std::int64_t p = 0; p < pixels; ++p) dst[p] += wv * src[p];
        }
        if (bias) {
          const T b = bias->value()[static_cast<std::size_t>(channel)];
          for (std::int64_t p = 0; p < pixels; ++p) dst[p] += b;
        }
      }
    }
  }

  std::vector<NodeId> parents{input.id(), kernel.id()};
  const bool has_bias = bias.has_value();
  const NodeId bias_id = has_bias ? bias->id() : 0;
  if (has_bias) parents.push_back(bias_id);
  const NodeId in_id = input.id();
  const NodeId k_id = kernel.id();
  return input.tape().record(
      "conv2d", std::move(out), std::move(parents), [g, in_id, k_id, has_bias, bias_id](Tape<T>& tape, const Tensor<T>& gout) {
        Tensor<T>* gin = tape.grad_sink(in_id);
        Tensor<T>* gk = tape.grad_sink(k_id);
        Tensor<T>* gb = has_bias ? tape.grad_sink(bias_id) : nullptr;
        const std::int64_t patch = g.patch();
        const std::int64_t pixels = g.pixels();
        const T* x = tape.value(in_id).data().data();
        const T* wt = tape.value(k_id).data().data();
        const T* go = gout.data().data();
        std::vector<T> col(static_cast<std::size_t>(patch * pixels));
        for (std::int64_t n = 0; n < g.n; ++n) {
          for (std::int64_t grp = 0; grp < g.groups; ++grp) {
            const T* gblock = go + (n * g.c_out + grp * g.c_out_group) * pixels;
            if (gk) {
              im2col(x + (n * g.c + grp * g.c_group) * g.h * g.w, g, col.data());
              for (std::int64_t oc = 0; oc < g.c_out_group; ++oc) {
                const T* grow = gblock + oc * pixels;
                T* dw = gk->data().data() + (grp * g.c_out_group + oc) * patch;
                for (std::int64_t kk = 0; kk < patch; ++kk) {
                  const T* src = col.data() + kk * pixels;
                  T acc = 0;
                  for (std::int64_t p = 0; p < pixels; ++p) acc += grow[p] * src[p];
                  dw[kk] += acc;
                }
              }
            }
            if (gin) {
              std::fill(col.begin(), col.end(), T(0));
              for (std::int64_t oc = 0; oc < g.c_out_group; ++oc) {
                const T* grow = gblock + oc * pixels;
                const T* wrow = wt + (grp * g.c_out_group + oc) * patch;
                for (std::int64_t kk = 0; kk < patch; ++kk) {
                  const T wv = wrow[kk];
                  T* dst = col.data() + kk * pixels;
                  for (std::int64_t p = 0; p < pixels; ++p) dst[p] += wv * grow[p];
                }
              }
              col2im(col.data(), g, gin->data().data() + (n * g.c + grp * g.c_group) * g.h * g.w);
            }
            if (gb) {
              for (std::int64_t oc = 0; oc < g.c_out_group; ++oc) {
                const T* grow = gblock + oc * pixels;
                T acc = 0;
                for (std::int64_t p = 0; p < pixels; ++p) acc += grow[p];
                (*gb)[static_cast<std::size_t>(grp * g.c_out_group + oc)] += acc;
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride) {
  const PoolGeometry g = pool_geometry(x.shape(), kernel, stride, "max_pool2d");
  Tensor<T> out(Shape{g.n, g.c, g.ho, g.wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const T* in = x.value().data().data();
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::int64_t base = plane * g.h * g.w;
    for (std::int64_t oh = 0; oh < g.ho; ++oh) {
      for (std::int64_t ow = 0; ow < g.wo; ++ow, ++o) {
        std::int64_t best = -1;
        for (int ki = 0; ki < g.kernel; ++ki) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          for (int kj = 0; kj < g.kernel; ++kj) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw < 0 || iw >= g.w) continue;
            const std::int64_t idx = base + ih * g.w + iw;
            if (best < 0 || in[idx] > in[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = in[best];
      }
    }
  }
  const NodeId in_id = x.id();
  return x.tape().record("max_pool2d", std::move(out), {in_id},
                         [in_id, argmax = std::move(argmax)](Tape<T>& tape, const Tensor<T>& gout) {
                           Tensor<T>* gin = tape.grad_sink(in_id);
                           if (!gin) return;
                           for (std::size_t i = 0; i < argmax.size(); ++i)
                             (*gin)[static_cast<std::size_t>(argmax[i])] += gout[i];
                         });
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int kernel, int stride) {
  const PoolGeometry g = pool_geometry(x.shape(), kernel, stride, "avg_pool2d");
  Tensor<T> out(Shape{g.n, g.c, g.ho, g.wo});
  const T* in = x.value().data().data();
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
    const T* src = in + plane * g.h * g.w;
    for (std::int64_t oh = 0; oh < g.ho; ++oh) {
      const std::int64_t h0 = std::max<std::int64_t>(0, oh * g.stride - g.pad);
      const std::int64_t h1 = std::min<std::int64_t>(g.h, oh * g.stride - g.pad + g.kernel);
      for (std::int64_t ow = 0; ow < g.wo; ++ow, ++o) {
        const std::int64_t w0 = std::max<std::int64_t>(0, ow * g.stride - g.pad);
        const std::int64_t w1 = std::min<std::int64_t>(g.w, ow * g.stride - g.pad + g.kernel);
        T acc = 0;
        for (std::int64_t ih = h0; ih < h1; ++ih)
          for (std::int64_t iw = w0; iw < w1; ++iw) acc += src[ih * g.w + iw];
        out[o] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  const NodeId in_id = x.id();
  return x.tape().record("avg_pool2d", std::move(out), {in_id}, [g, in_id](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    std::size_t o = 0;
    for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
      T* dst = gin->data().data() + plane * g.h * g.w;
      for (std::int64_t oh = 0; oh < g.ho; ++oh) {
        const std::int64_t h0 = std::max<std::int64_t>(0, oh * g.stride - g.pad);
        const std::int64_t h1 = std::min<std::int64_t>(g.h, oh * g.stride - g.pad + g.kernel);
        for (std::int64_t ow = 0; ow < g.wo; ++ow, ++o) {
          const std::int64_t w0 = std::max<std::int64_t>(0, ow * g.stride - g.pad);
          const std::int64_t w1 = std::min<std::int64_t>(g.w, ow * g.stride - g.pad + g.kernel);
          const T share = gout[o] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (std::int64_t ih = h0; ih < h1; ++ih)
            for (std::int64_t iw = w0; iw < w1; ++iw) dst[ih * g.w + iw] += share;
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const std::type_identity_t<std::optional<Var<T>>>& gamma,
                  const std::type_identity_t<std::optional<Var<T>>>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormOptions& opt) {
  const Shape& s = x.shape();
  if (s.rank() != 2 && s.rank() != 4) throw ShapeError("batch_norm: expected rank 2 or 4 input, got " + s.str());
  const std::int64_t n = s[0];
  const std::int64_t c = s[1];
  const std::int64_t spatial = s.numel() / (n * c);
  const std::int64_t m = n * spatial;
  if (running_mean.numel() != c || running_var.numel() != c)
    throw ShapeError("batch_norm: running statistics do not match " + std::to_string(c) + " channels");
  if (gamma && gamma->shape().numel() != c) throw ShapeError("batch_norm: gamma shape mismatch");
  if (beta && beta->shape().numel() != c) throw ShapeError("batch_norm: beta shape mismatch");

  const T* in = x.value().data().data();
  Tensor<T> xhat(s);
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean = 0;
    double var = 0;
    if (opt.training) {
      for (std::int64_t b = 0; b < n; ++b) {
        const T* src = in + (b * c + ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) mean += src[i];
      }
      mean /= static_cast<double>(m);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* src = in + (b * c + ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double d = src[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      auto idx = static_cast<std::size_t>(ch);
      running_mean[idx] = static_cast<T>((1.0 - opt.momentum) * running_mean[idx] + opt.momentum * mean);
      running_var[idx] = static_cast<T>((1.0 - opt.momentum) * running_var[idx] + opt.momentum * unbiased);
    } else {
      mean = running_mean[static_cast<std::size_t>(ch)];
      var = running_var[static_cast<std::size_t>(ch)];
    }
    const double istd = 1.0 / std::sqrt(var + opt.eps);
    inv_std[static_cast<std::size_t>(ch)] = static_cast<T>(istd);
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t off = (b * c + ch) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i)
        xhat[static_cast<std::size_t>(off + i)] = static_cast<T>((in[off + i] - mean) * istd);
    }
  }

  Tensor<T> out = xhat;
  if (gamma || beta) {
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T gv = gamma ? gamma->value()[static_cast<std::size_t>(ch)] : T(1);
        const T bv = beta ? beta->value()[static_cast<std::size_t>(ch)] : T(0);
        T* dst = out.data().data() + (b * c + ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) dst[i] = gv * dst[i] + bv;
      }
    }
  }

  std::vector<NodeId> parents{x.id()};
  const bool has_gamma = gamma.has_value();
  const bool has_beta = beta.has_value();
  const NodeId gamma_id = has_gamma ? gamma->id() : 0;
  const NodeId beta_id = has_beta ? beta->id() : 0;
  if (has_gamma) parents.push_back(gamma_id);
  if (has_beta) parents.push_back(beta_id);
  const NodeId in_id = x.id();
  const bool training = opt.training;
  return x.tape().record(
      "batch_norm", std::move(out), std::move(parents),
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tape, const Tensor<T>& gout) {
        Tensor<T>* gin = tape.grad_sink(in_id);
        Tensor<T>* gg = has_gamma ? tape.grad_sink(gamma_id) : nullptr;
        Tensor<T>* gbeta = has_beta ? tape.grad_sink(beta_id) : nullptr;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const auto cidx = static_cast<std::size_t>(ch);
          double sum_dy = 0;
          double sum_dy_xhat = 0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              const auto k = static_cast<std::size_t>(off + i);
              sum_dy += gout[k];
              sum_dy_xhat += static_cast<double>(gout[k]) * xhat[k];
            }
          }
          if (gg) (*gg)[cidx] += static_cast<T>(sum_dy_xhat);
          if (gbeta) (*gbeta)[cidx] += static_cast<T>(sum_dy);
          if (!gin) continue;
          const double gv = has_gamma ? static_cast<double>(tape.value(gamma_id)[cidx]) : 1.0;
          const double istd = inv_std[cidx];
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              const auto k = static_cast<std::size_t>(off + i);
              double d;
              if (training) {
                d = gv * istd / static_cast<double>(m) *
                    (static_cast<double>(m) * gout[k] - sum_dy - xhat[k] * sum_dy_xhat);
              } else {
                d = gv * istd * gout[k];
              }
              (*gin)[k] += static_cast<T>(d);
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  const NodeId in_id = x.id();
  return x.tape().record("relu", std::move(out), {in_id}, [in_id](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    const Tensor<T>& in = tape.value(in_id);
    for (std::size_t i = 0; i < gout.vec().size(); ++i)
      if (in[i] > T(0)) (*gin)[i] += gout[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Var<T> xs[] = {a, b};
  return add_n<T>(xs);
}

template <typename T>
Var<T> add_n(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ArgumentError("add_n: no inputs");
  Tensor<T> out = xs[0].value();
  std::vector<NodeId> ids{xs[0].id()};
  for (std::size_t k = 1; k < xs.size(); ++k) {
    if (xs[k].shape() != out.shape())
      throw ShapeError("add: shape " + xs[k].shape().str() + " does not match " + out.shape().str());
    const auto src = xs[k].value().data();
    for (std::size_t i = 0; i < src.size(); ++i) out[i] += src[i];
    ids.push_back(xs[k].id());
  }
  std::vector<NodeId> parents = ids;
  return xs[0].tape().record("add", std::move(out), std::move(parents), [ids](Tape<T>& tape, const Tensor<T>& gout) {
    for (NodeId id : ids) {
      Tensor<T>* gin = tape.grad_sink(id);
      if (!gin) continue;
      for (std::size_t i = 0; i < gout.vec().size(); ++i) (*gin)[i] += gout[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  const NodeId in_id = x.id();
  return x.tape().record("scale", std::move(out), {in_id}, [in_id, factor](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    for (std::size_t i = 0; i < gout.vec().size(); ++i) (*gin)[i] += factor * gout[i];
  });
}

template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> xs, const Var<T>& coeffs) {
  if (xs.empty()) throw ArgumentError("weighted_sum: no inputs");
  if (coeffs.shape().rank() != 1 || coeffs.shape()[0] != static_cast<std::int64_t>(xs.size()))
    throw ShapeError("weighted_sum: coefficient shape " + coeffs.shape().str() + " does not match " +
                     std::to_string(xs.size()) + " inputs");
  const Shape& s = xs[0].shape();
  Tensor<T> out(s);
  std::vector<NodeId> ids;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (xs[k].shape() != s) throw InternalError("weighted_sum: branch shapes differ: " + xs[k].shape().str() + " vs " + s.str());
    const T c = coeffs.value()[k];
    const auto src = xs[k].value().data();
    for (std::size_t i = 0; i < src.size(); ++i) out[i] += c * src[i];
    ids.push_back(xs[k].id());
  }
  std::vector<NodeId> parents = ids;
  const NodeId c_id = coeffs.id();
  parents.push_back(c_id);
  return coeffs.tape().record("weighted_sum", std::move(out), std::move(parents),
                              [ids, c_id](Tape<T>& tape, const Tensor<T>& gout) {
                                const Tensor<T>& c = tape.value(c_id);
                                Tensor<T>* gc = tape.grad_sink(c_id);
                                for (std::size_t k = 0; k < ids.size(); ++k) {
                                  if (Tensor<T>* gin = tape.grad_sink(ids[k])) {
                                    for (std::size_t i = 0; i < gout.vec().size(); ++i) (*gin)[i] += c[k] * gout[i];
                                  }
                                  if (gc) {
                                    const Tensor<T>& x = tape.value(ids[k]);
                                    double acc = 0;
                                    for (std::size_t i = 0; i < gout.vec().size(); ++i)
                                      acc += static_cast<double>(gout[i]) * x[i];
                                    (*gc)[k] += static_cast<T>(acc);
                                  }
                                }
                              });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear");
  require_rank(weight.shape(), 2, "linear weight");
  const std::int64_t n = x.shape()[0];
  const std::int64_t f = x.shape()[1];
  const std::int64_t o = weight.shape()[0];
  if (weight.shape()[1] != f) throw ShapeError("linear: weight " + weight.shape().str() + " vs input " + x.shape().str());
  if (bias.shape() != Shape{o}) throw ShapeError("linear: bias shape " + bias.shape().str());
  Tensor<T> out(Shape{n, o});
  const T* xv = x.value().data().data();
  const T* wv = weight.value().data().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t j = 0; j < o; ++j) {
      T acc = bias.value()[static_cast<std::size_t>(j)];
      for (std::int64_t k = 0; k < f; ++k) acc += xv[b * f + k] * wv[j * f + k];
      out[static_cast<std::size_t>(b * o + j)] = acc;
    }
  const NodeId x_id = x.id(), w_id = weight.id(), b_id = bias.id();
  return x.tape().record("linear", std::move(out), {x_id, w_id, b_id},
                         [=](Tape<T>& tape, const Tensor<T>& gout) {
                           const T* xv = tape.value(x_id).data().data();
                           const T* wv = tape.value(w_id).data().data();
                           Tensor<T>* gx = tape.grad_sink(x_id);
                           Tensor<T>* gw = tape.grad_sink(w_id);
                           Tensor<T>* gb = tape.grad_sink(b_id);
                           for (std::int64_t b = 0; b < n; ++b)
                             for (std::int64_t j = 0; j < o; ++j) {
                               const T g = gout[static_cast<std::size_t>(b * o + j)];
                               if (gb) (*gb)[static_cast<std::size_t>(j)] += g;
                               for (std::int64_t k = 0; k < f; ++k) {
                                 if (gx) (*gx)[static_cast<std::size_t>(b * f + k)] += g * wv[j * f + k];
                                 if (gw) (*gw)[static_cast<std::size_t>(j * f + k)] += g * xv[b * f + k];
                               }
                             }
                         });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::int64_t planes = x.shape()[0] * x.shape()[1];
  const std::int64_t spatial = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1]});
  const T* in = x.value().data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::int64_t i = 0; i < spatial; ++i) acc += in[p * spatial + i];
    out[static_cast<std::size_t>(p)] = acc / static_cast<T>(spatial);
  }
  const NodeId in_id = x.id();
  return x.tape().record("global_avg_pool", std::move(out), {in_id},
                         [in_id, planes, spatial](Tape<T>& tape, const Tensor<T>& gout) {
                           Tensor<T>* gin = tape.grad_sink(in_id);
                           if (!gin) return;
                           for (std::int64_t p = 0; p < planes; ++p) {
                             const T share = gout[static_cast<std::size_t>(p)] / static_cast<T>(spatial);
                             for (std::int64_t i = 0; i < spatial; ++i) (*gin)[static_cast<std::size_t>(p * spatial + i)] += share;
                           }
                         });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ArgumentError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  require_rank(s0, 4, "concat_channels");
  std::int64_t channels = 0;
  std::vector<std::int64_t> widths;
  std::vector<NodeId> ids;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    require_rank(s, 4, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: " + s.str() + " incompatible with " + s0.str());
    widths.push_back(s[1]);
    channels += s[1];
    ids.push_back(v.id());
  }
  const std::int64_t n = s0[0];
  const std::int64_t spatial = s0[2] * s0[3];
  Tensor<T> out(Shape{n, channels, s0[2], s0[3]});
  for (std::int64_t b = 0; b < n; ++b) {
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const T* src = xs[k].value().data().data() + b * widths[k] * spatial;
      std::copy(src, src + widths[k] * spatial, out.data().data() + (b * channels + offset) * spatial);
      offset += widths[k];
    }
  }
  std::vector<NodeId> parents = ids;
  return xs[0].tape().record("concat_channels", std::move(out), std::move(parents),
                             [=](Tape<T>& tape, const Tensor<T>& gout) {
                               std::int64_t offset = 0;
                               for (std::size_t k = 0; k < ids.size(); ++k) {
                                 if (Tensor<T>* gin = tape.grad_sink(ids[k])) {
                                   for (std::int64_t b = 0; b < n; ++b) {
                                     const T* src = gout.data().data() + (b * channels + offset) * spatial;
                                     T* dst = gin->data().data() + b * widths[k] * spatial;
                                     for (std::int64_t i = 0; i < widths[k] * spatial; ++i) dst[i] += src[i];
                                   }
                                 }
                                 offset += widths[k];
                               }
                             });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count) {
  const Shape& s = x.shape();
  require_rank(s, 4, "slice_channels");
  if (begin < 0 || count < 1 || begin + count > s[1])
    throw ArgumentError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                        ") outside " + std::to_string(s[1]) + " channels");
  const std::int64_t n = s[0], c = s[1], spatial = s[2] * s[3];
  Tensor<T> out(Shape{n, count, s[2], s[3]});
  for (std::int64_t b = 0; b < n; ++b) {
    const T* src = x.value().data().data() + (b * c + begin) * spatial;
    std::copy(src, src + count * spatial, out.data().data() + b * count * spatial);
  }
  const NodeId in_id = x.id();
  return x.tape().record("slice_channels", std::move(out), {in_id}, [=](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* src = gout.data().data() + b * count * spatial;
      T* dst = gin->data().data() + (b * c + begin) * spatial;
      for (std::int64_t i = 0; i < count * spatial; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const Shape& s = x.shape();
  const int rank = static_cast<int>(s.rank());
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) throw ArgumentError("softmax: axis out of range for " + s.str());
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t dim = s[static_cast<std::size_t>(ax)];
  Tensor<T> out(s);
  const T* in = x.value().data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * dim * inner + i;
      T mx = in[base];
      for (std::int64_t d = 1; d < dim; ++d) mx = std::max(mx, in[base + d * inner]);
      T total = 0;
      for (std::int64_t d = 0; d < dim; ++d) {
        const T e = std::exp(in[base + d * inner] - mx);
        out[static_cast<std::size_t>(base + d * inner)] = e;
        total += e;
      }
      for (std::int64_t d = 0; d < dim; ++d) out[static_cast<std::size_t>(base + d * inner)] /= total;
    }
  const NodeId in_id = x.id();
  const NodeId out_id = x.tape().size();
  return x.tape().record("softmax", std::move(out), {in_id}, [=](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    const Tensor<T>& y = tape.value(out_id);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * dim * inner + i;
        T dot = 0;
        for (std::int64_t d = 0; d < dim; ++d) {
          const auto k = static_cast<std::size_t>(base + d * inner);
          dot += gout[k] * y[k];
        }
        for (std::int64_t d = 0; d < dim; ++d) {
          const auto k = static_cast<std::size_t>(base + d * inner);
          (*gin)[k] += y[k] * (gout[k] - dot);
        }
      }
  });
}

template <typename T>
Var<T> select_row(const Var<T>& x, std::int64_t r) {
  require_rank(x.shape(), 2, "select_row");
  const std::int64_t rows = x.shape()[0], cols = x.shape()[1];
  if (r < 0 || r >= rows) throw ArgumentError("select_row: row " + std::to_string(r) + " out of range");
  const auto begin = x.value().vec().begin() + r * cols;
  Tensor<T> out(Shape{cols}, std::vector<T>(begin, begin + cols));
  const NodeId in_id = x.id();
  return x.tape().record("select_row", std::move(out), {in_id}, [=](Tape<T>& tape, const Tensor<T>& gout) {
    Tensor<T>* gin = tape.grad_sink(in_id);
    if (!gin) return;
    for (std::int64_t j = 0; j < cols; ++j) (*gin)[static_cast<std::size_t>(r * cols + j)] += gout[static_cast<std::size_t>(j)];
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::int64_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.empty()) throw ArgumentError("cross_entropy: empty batch");
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (int l : labels)
    if (l < 0 || l >= k) throw ArgumentError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
  const T* z = logits.value().data().data();
  std::vector<T> probs(static_cast<std::size_t>(n * k));
  double loss = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    const T* row = z + b * k;
    const T mx = *std::max_element(row, row + k);
    double total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(row[j] - mx));
    const double log_total = std::log(total);
    for (std::int64_t j = 0; j < k; ++j)
      probs[static_cast<std::size_t>(b * k + j)] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx) - log_total));
    loss -= static_cast<double>(row[labels[static_cast<std::size_t>(b)]] - mx) - log_total;
  }
  loss /= static_cast<double>(n);
  const NodeId in_id = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record("cross_entropy", Tensor<T>(Shape{1}, static_cast<T>(loss)), {in_id},
                              [=, probs = std::move(probs), lab = std::move(lab)](Tape<T>& tape, const Tensor<T>& gout) {
                                Tensor<T>* gin = tape.grad_sink(in_id);
                                if (!gin) return;
                                const T g = gout[0] / static_cast<T>(n);
                                for (std::int64_t b = 0; b < n; ++b)
                                  for (std::int64_t j = 0; j < k; ++j) {
                                    const auto idx = static_cast<std::size_t>(b * k + j);
                                    const T target = j == lab[static_cast<std::size_t>(b)] ? T(1) : T(0);
                                    (*gin)[idx] += g * (probs[idx] - target);
                                  }
                              });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  const NodeId in_id = x.id();
  return x.tape().record("sum", Tensor<T>(Shape{1}, static_cast<T>(acc)), {in_id},
                         [in_id](Tape<T>& tape, const Tensor<T>& gout) {
                           Tensor<T>* gin = tape.grad_sink(in_id);
                           if (!gin) return;
                           for (T& v : gin->data()) v += gout[0];
                         });
}

#define CELLSEARCH_INSTANTIATE_OPS(T)                                                                          \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, const Conv2dOptions&);  \
  template Var<T> max_pool2d(const Var<T>&, int, int);                                                         \
  template Var<T> avg_pool2d(const Var<T>&, int, int);                                                         \
  template Var<T> batch_norm(const Var<T>&, const std::optional<Var<T>>&, const std::optional<Var<T>>&,       \
                             Tensor<T>&, Tensor<T>&, const BatchNormOptions&);                                 \
  template Var<T> relu(const Var<T>&);                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> add_n(std::span<const Var<T>>);                                                              \
  template Var<T> scale(const Var<T>&, T);                                                                     \
  template Var<T> weighted_sum(std::span<const Var<T>>, const Var<T>&);                                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> global_avg_pool(const Var<T>&);                                                              \
  template Var<T> concat_channels(std::span<const Var<T>>);                                                    \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                                   \
  template Var<T> softmax(const Var<T>&, int);                                                                 \
  template Var<T> select_row(const Var<T>&, std::int64_t);                                                     \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);                                          \
  template Var<T> sum(const Var<T>&);

CELLSEARCH_INSTANTIATE_OPS(float)
CELLSEARCH_INSTANTIATE_OPS(double)

}  // namespace cellsearch::ops
