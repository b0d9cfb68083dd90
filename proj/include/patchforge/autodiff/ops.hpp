#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "patchforge/autodiff/graph.hpp"
#include "patchforge/error.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge::ad {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

/// Adds `g` into the gradient slot of `v` when it requires one.
template <class T, class Fn>
void accumulate(Graph<T>& graph, const Var<T>& v, Fn&& fn) {
  if (!graph.requires_grad(v.id())) return;
  fn(graph.grad_buffer(v.id()));
}

struct ConvGeometry {
  int channels, height, width;
  int kh, kw, stride, pad;
  int out_h, out_w;
  int rows() const noexcept { return channels * kh * kw; }
  int cols() const noexcept { return out_h * out_w; }
  bool identity() const noexcept { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* row = col + (static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj)) * g.cols();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  for (int c = 0; c < g.channels; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* row = col + (static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj)) * g.cols();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

/// Elementwise unary op with derivative expressed through input and output.
template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  Graph<T>& g = x.graph();
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  return g.record(std::move(out), {x}, [x, deriv](Graph<T>& gr, const Tensor<T>& go) {
    const Tensor<T>& xv = gr.value(x.id());
    accumulate(gr, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * deriv(xv[i]);
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// 2-D cross-correlation. input (N, C, H, W), kernel (O, C, kh, kw).
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, int stride = 1, int padding = 0) {
  const Shape is = input.shape();
  const Shape ks = kernel.shape();
  if (ks.c != is.c)
    throw ShapeError("conv2d: kernel " + ks.str() + " expects " + std::to_string(ks.c) + " input channels, input " +
                     is.str());
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const int oh = (is.h + 2 * padding - ks.h) / stride + 1;
  const int ow = (is.w + 2 * padding - ks.w) / stride + 1;
  if (is.h + 2 * padding < ks.h || is.w + 2 * padding < ks.w || oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + ks.str() + " larger than padded input " + is.str());

  const detail::ConvGeometry geo{is.c, is.h, is.w, ks.h, ks.w, stride, padding, oh, ow};
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  Tensor<T> out({is.n, ks.n, oh, ow});

  const bool keep_cols = kernel.requires_grad() && !geo.identity();
  auto cols = std::make_shared<std::vector<T>>();
  std::vector<T> scratch;
  const std::size_t col_len = static_cast<std::size_t>(geo.rows()) * geo.cols();
  if (!geo.identity()) {
    if (keep_cols)
      cols->resize(col_len * is.n);
    else
      scratch.resize(col_len);
  }

  detail::CMapR<T> km(k.data(), ks.n, geo.rows());
  const std::size_t in_len = static_cast<std::size_t>(is.c) * is.plane();
  const std::size_t out_len = static_cast<std::size_t>(ks.n) * geo.cols();
  for (int b = 0; b < is.n; ++b) {
    const T* colp;
    if (geo.identity()) {
      colp = x.data() + b * in_len;
    } else {
      T* dst = keep_cols ? cols->data() + b * col_len : scratch.data();
      detail::im2col(x.data() + b * in_len, geo, dst);
      colp = dst;
    }
    detail::MapR<T> om(out.data() + b * out_len, ks.n, geo.cols());
    om.noalias() = km * detail::CMapR<T>(colp, geo.rows(), geo.cols());
  }

  return input.graph().record(
      std::move(out), {input, kernel}, [input, kernel, geo, cols, col_len, in_len, out_len](Graph<T>& g, const Tensor<T>& go) {
        const Shape ks = g.value(kernel.id()).shape();
        const int n = g.value(input.id()).shape().n;
        detail::CMapR<T> km(g.value(kernel.id()).data(), ks.n, geo.rows());
        if (g.requires_grad(kernel.id())) {
          Tensor<T>& gk = g.grad_buffer(kernel.id());
          detail::MapR<T> gkm(gk.data(), ks.n, geo.rows());
          for (int b = 0; b < n; ++b) {
            const T* colp = geo.identity() ? g.value(input.id()).data() + b * in_len : cols->data() + b * col_len;
            detail::CMapR<T> gom(go.data() + b * out_len, ks.n, geo.cols());
            gkm.noalias() += gom * detail::CMapR<T>(colp, geo.rows(), geo.cols()).transpose();
          }
        }
        if (g.requires_grad(input.id())) {
          Tensor<T>& gx = g.grad_buffer(input.id());
          std::vector<T> dcol(geo.identity() ? 0 : col_len);
          for (int b = 0; b < n; ++b) {
            detail::CMapR<T> gom(go.data() + b * out_len, ks.n, geo.cols());
            if (geo.identity()) {
              detail::MapR<T> gxm(gx.data() + b * in_len, geo.rows(), geo.cols());
              gxm.noalias() += km.transpose() * gom;
            } else {
              detail::MapR<T> dcm(dcol.data(), geo.rows(), geo.cols());
              dcm.noalias() = km.transpose() * gom;
              detail::col2im_add(dcol.data(), geo, gx.data() + b * in_len);
            }
          }
        }
      });
}

/// Adds a per-channel bias of shape (1, C, 1, 1).
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  const Shape xs = x.shape();
  const Shape bs = bias.shape();
  if (bs.n != 1 || bs.c != xs.c || bs.h != 1 || bs.w != 1)
    throw ShapeError("add_channel_bias: bias " + bs.str() + " does not match input " + xs.str());
  Tensor<T> out = x.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t plane = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T* p = &out.at(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) p[i] += bv[c];
    }
  return x.graph().record(std::move(out), {x, bias}, [x, bias](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    });
    detail::accumulate(g, bias, [&](Tensor<T>& gb) {
      const Shape s = go.shape();
      const std::size_t plane = s.plane();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const T* p = &go.at(n, c, 0, 0);
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          gb[c] += acc;
        }
    });
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> relu(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  TraceWriter trace;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out[i] = xv[i] > T(0) ? xv[i] : T(0);
    trace.bit(xv[i] > T(0));
  }
  return x.graph().record(std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& xv = g.value(x.id());
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (xv[i] > T(0)) gx[i] += go[i];
    });
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    for (const auto& v : {a, b})
      detail::accumulate(g, v, [&](Tensor<T>& gv) {
        for (std::size_t i = 0; i < go.numel(); ++i) gv[i] += go[i];
      });
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    });
    detail::accumulate(g, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
    });
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& av = g.value(a.id());
    const Tensor<T>& bv = g.value(b.id());
    detail::accumulate(g, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv[i];
    });
    detail::accumulate(g, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av[i];
    });
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& av = g.value(a.id());
    const Tensor<T>& bv = g.value(b.id());
    detail::accumulate(g, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / bv[i];
    });
    detail::accumulate(g, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * av[i] / (bv[i] * bv[i]);
    });
  });
}

/// Elementwise minimum; ties send the gradient to `a`.
template <class T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "minimum");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  TraceWriter trace;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = av[i] <= bv[i] ? av[i] : bv[i];
    trace.bit(av[i] <= bv[i]);
  }
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& av = g.value(a.id());
    const Tensor<T>& bv = g.value(b.id());
    detail::accumulate(g, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (av[i] <= bv[i]) ga[i] += go[i];
    });
    detail::accumulate(g, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (!(av[i] <= bv[i])) gb[i] += go[i];
    });
  });
}

/// Elementwise maximum; ties send the gradient to `a`.
template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "maximum");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  TraceWriter trace;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = av[i] >= bv[i] ? av[i] : bv[i];
    trace.bit(av[i] >= bv[i]);
  }
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& av = g.value(a.id());
    const Tensor<T>& bv = g.value(b.id());
    detail::accumulate(g, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (av[i] >= bv[i]) ga[i] += go[i];
    });
    detail::accumulate(g, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (!(av[i] >= bv[i])) gb[i] += go[i];
    });
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <class T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <class T>
Var<T> pow_scalar(const Var<T>& x, T p) {
  return detail::unary(x, [p](T v) { return std::pow(v, p); }, [p](T v) { return p * std::pow(v, p - T(1)); });
}

/// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  TraceWriter trace;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out[i] = std::clamp(xv[i], lo, hi);
    trace.value(xv[i] < lo ? 1 : (xv[i] > hi ? 2 : 0));
  }
  return x.graph().record(std::move(out), {x}, [x, lo, hi](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& xv = g.value(x.id());
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (xv[i] >= lo && xv[i] <= hi) gx[i] += go[i];
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <class T>
Var<T> sum(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T acc = 0;
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  return x.graph().record(Tensor<T>::scalar(acc), {x}, [x](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += go[0];
    });
  });
}

/// Mean of all elements; the mean of an empty tensor is 0.
template <class T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  if (n == 0) return x.graph().constant(Tensor<T>::scalar(T(0)));
  return scale(sum(x), T(1) / static_cast<T>(n));
}

/// Flat elements at `indices`, as a (1, 1, 1, K) tensor.
template <class T>
Var<T> gather(const Var<T>& x, std::vector<std::size_t> indices) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(vector_shape(static_cast<int>(indices.size())));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.numel()) throw ShapeError("gather: index out of range for " + xv.shape().str());
    out[i] = xv[indices[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return x.graph().record(std::move(out), {x}, [x, idx](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += go[i];
    });
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(s);
  return x.graph().record(std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    });
  });
}

// ---------------------------------------------------------------------------
// Spatial ops

/// x2 bilinear upsampling with half-pixel centers (align_corners = false).
template <class T>
Var<T> upsample2x_bilinear(const Var<T>& x) {
  const Shape s = x.shape();
  const int oh = 2 * s.h, ow = 2 * s.w;
  struct Tap {
    int i0, i1;
    T f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(src - i0)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(s.h, oh));
  auto tx = std::make_shared<std::vector<Tap>>(taps(s.w, ow));
  const Tensor<T>& xv = x.value();
  Tensor<T> out({s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oy = 0; oy < oh; ++oy) {
        const Tap& a = (*ty)[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < ow; ++ox) {
          const Tap& b = (*tx)[static_cast<std::size_t>(ox)];
          const T top = xv.at(n, c, a.i0, b.i0) * (T(1) - b.f) + xv.at(n, c, a.i0, b.i1) * b.f;
          const T bot = xv.at(n, c, a.i1, b.i0) * (T(1) - b.f) + xv.at(n, c, a.i1, b.i1) * b.f;
          out.at(n, c, oy, ox) = top * (T(1) - a.f) + bot * a.f;
        }
      }
  return x.graph().record(std::move(out), {x}, [x, ty, tx](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      const Shape os = go.shape();
      for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
          for (int oy = 0; oy < os.h; ++oy) {
            const Tap& a = (*ty)[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < os.w; ++ox) {
              const Tap& b = (*tx)[static_cast<std::size_t>(ox)];
              const T v = go.at(n, c, oy, ox);
              gx.at(n, c, a.i0, b.i0) += v * (T(1) - a.f) * (T(1) - b.f);
              gx.at(n, c, a.i0, b.i1) += v * (T(1) - a.f) * b.f;
              gx.at(n, c, a.i1, b.i0) += v * a.f * (T(1) - b.f);
              gx.at(n, c, a.i1, b.i1) += v * a.f * b.f;
            }
          }
    });
  });
}

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped. Ties pick
/// the first element in row-major window order.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  const Shape s = x.shape();
  const int oh = s.h / 2, ow = s.w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("maxpool2: input too small " + s.str());
  const Tensor<T>& xv = x.value();
  Tensor<T> out({s.n, s.c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  TraceWriter trace;
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = xv.offset(n, c, 2 * oy, 2 * ox);
          std::uint32_t which = 0;
          for (std::uint32_t k = 1; k < 4; ++k) {
            const std::size_t idx = xv.offset(n, c, 2 * oy + static_cast<int>(k / 2), 2 * ox + static_cast<int>(k % 2));
            if (xv[idx] > xv[best]) {
              best = idx;
              which = k;
            }
          }
          out[o] = xv[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
          trace.bit(which & 1u);
          trace.bit(which & 2u);
        }
  return x.graph().record(std::move(out), {x}, [x, argmax](Graph<T>& g, const Tensor<T>& go) {
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i) gx[(*argmax)[i]] += go[i];
    });
  });
}

/// Softmax over the channel axis at every (n, h, w).
template <class T>
Var<T> softmax_channel(const Var<T>& x) {
  const Shape s = x.shape();
  const Tensor<T>& xv = x.value();
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, xv[base + c * plane]);
      T z = 0;
      for (int c = 0; c < s.c; ++c) z += std::exp(xv[base + c * plane] - mx);
      for (int c = 0; c < s.c; ++c) out[base + c * plane] = std::exp(xv[base + c * plane] - mx) / z;
    }
  // The output is read back from the graph in backward; its id is known only after record().
  auto out_id = std::make_shared<std::size_t>(0);
  Var<T> y = x.graph().record(std::move(out), {x}, [x, out_id](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& yv = g.value(*out_id);
    const Shape s = yv.shape();
    const std::size_t plane = s.plane();
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (int n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
          T dot = 0;
          for (int c = 0; c < s.c; ++c) dot += go[base + c * plane] * yv[base + c * plane];
          for (int c = 0; c < s.c; ++c) gx[base + c * plane] += yv[base + c * plane] * (go[base + c * plane] - dot);
        }
    });
  });
  *out_id = y.id();
  return y;
}

/// Numerically stable log-softmax over the channel axis.
template <class T>
Var<T> log_softmax_channel(const Var<T>& x) {
  const Shape s = x.shape();
  const Tensor<T>& xv = x.value();
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, xv[base + c * plane]);
      T z = 0;
      for (int c = 0; c < s.c; ++c) z += std::exp(xv[base + c * plane] - mx);
      const T lse = mx + std::log(z);
      for (int c = 0; c < s.c; ++c) out[base + c * plane] = xv[base + c * plane] - lse;
    }
  auto out_id = std::make_shared<std::size_t>(0);
  Var<T> y = x.graph().record(std::move(out), {x}, [x, out_id](Graph<T>& g, const Tensor<T>& go) {
    const Tensor<T>& yv = g.value(*out_id);
    const Shape s = yv.shape();
    const std::size_t plane = s.plane();
    detail::accumulate(g, x, [&](Tensor<T>& gx) {
      for (int n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
          T total = 0;
          for (int c = 0; c < s.c; ++c) total += go[base + c * plane];
          for (int c = 0; c < s.c; ++c)
            gx[base + c * plane] += go[base + c * plane] - std::exp(yv[base + c * plane]) * total;
        }
    });
  });
  *out_id = y.id();
  return y;
}

}  // namespace patchforge::ad
