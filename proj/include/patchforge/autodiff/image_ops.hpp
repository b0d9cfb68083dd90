#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "patchforge/autodiff/graph.hpp"
#include "patchforge/geometry.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

namespace detail {

/// Source sample for one output coordinate under half-pixel-center bilinear
/// resampling (align_corners = false), clamped to the border.
struct BilinearTap {
  int i0 = 0;
  int i1 = 0;
  double frac = 0.0;
};

inline BilinearTap bilinear_tap(double src, int in) {
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const int i0 = static_cast<int>(std::floor(src));
  return {i0, std::min(i0 + 1, in - 1), src - i0};
}

}  // namespace detail

/// Bilinear resize of every (n, c) plane to out_h x out_w.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  const Shape s = src.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output must be non-empty");
  if (s.h < 1 || s.w < 1) throw ShapeError("resize_bilinear: input is empty " + s.str());
  std::vector<detail::BilinearTap> ty(static_cast<std::size_t>(out_h)), tx(static_cast<std::size_t>(out_w));
  for (int y = 0; y < out_h; ++y)
    ty[static_cast<std::size_t>(y)] = detail::bilinear_tap((y + 0.5) * s.h / out_h - 0.5, s.h);
  for (int x = 0; x < out_w; ++x)
    tx[static_cast<std::size_t>(x)] = detail::bilinear_tap((x + 0.5) * s.w / out_w - 0.5, s.w);
  Tensor<T> out({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out_h; ++y) {
        const auto& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
          const auto& b = tx[static_cast<std::size_t>(x)];
          const double top = src.at(n, c, a.i0, b.i0) * (1 - b.frac) + src.at(n, c, a.i0, b.i1) * b.frac;
          const double bot = src.at(n, c, a.i1, b.i0) * (1 - b.frac) + src.at(n, c, a.i1, b.i1) * b.frac;
          out.at(n, c, y, x) = static_cast<T>(top * (1 - a.frac) + bot * a.frac);
        }
      }
  return out;
}

namespace ad {

template <class T>
struct PasteResult {
  Var<T> image;
  /// Region actually drawn for each requested region (clipped to the image);
  /// nullopt when the region missed the image entirely.
  std::vector<std::optional<BoundingBox>> drawn;
  bool any_outside = false;
};

namespace detail {

struct PasteEntry {
  std::uint32_t dst;  ///< pixel offset within one channel plane of the image
  std::uint32_t s00, s01, s10, s11;
  double w00, w01, w10, w11;
};

}  // namespace detail

/// Pastes `patch` (1, C, Hp, Wp) into `image` (1, C, H, W) once per region,
/// in order, so later regions overwrite earlier ones. Each region is filled with
/// the bilinearly resampled patch; pixels whose centers fall outside every
/// region are copied from the image. Gradients flow to the patch and, through
/// uncovered pixels, to the image.
template <class T>
PasteResult<T> paste_patches(const Var<T>& image, const Var<T>& patch, std::span<const BoundingBox> regions) {
  const Shape is = image.shape();
  const Shape ps = patch.shape();
  if (is.n != 1 || ps.n != 1 || is.c != ps.c)
    throw ShapeError("paste_patches: image " + is.str() + " and patch " + ps.str() + " are incompatible");
  if (ps.h < 1 || ps.w < 1) throw ShapeError("paste_patches: empty patch");

  PasteResult<T> result;
  const std::size_t plane = is.plane();
  std::vector<std::int32_t> owner(plane, -1);
  std::vector<detail::PasteEntry> entries;

  for (const BoundingBox& region : regions) {
    const auto clipped = region.valid() ? clip_to_image(region, is.w, is.h) : std::nullopt;
    int col0 = 0, col1 = 0, row0 = 0, row1 = 0;
    if (clipped) {
      col0 = std::max(0, static_cast<int>(std::ceil(clipped->x0() - 0.5)));
      col1 = std::min(is.w, static_cast<int>(std::ceil(clipped->x1() - 0.5)));
      row0 = std::max(0, static_cast<int>(std::ceil(clipped->y0() - 0.5)));
      row1 = std::min(is.h, static_cast<int>(std::ceil(clipped->y1() - 0.5)));
    }
    if (!clipped || col1 <= col0 || row1 <= row0) {
      result.drawn.push_back(std::nullopt);
      result.any_outside = true;
      continue;
    }
    result.drawn.push_back(clipped);
    for (int y = row0; y < row1; ++y) {
      const double v = (y + 0.5 - region.y0()) / region.h * ps.h - 0.5;
      const auto ty = patchforge::detail::bilinear_tap(v, ps.h);
      for (int x = col0; x < col1; ++x) {
        const double u = (x + 0.5 - region.x0()) / region.w * ps.w - 0.5;
        const auto tx = patchforge::detail::bilinear_tap(u, ps.w);
        const auto dst = static_cast<std::uint32_t>(y * is.w + x);
        const auto at = [&](int r, int c) { return static_cast<std::uint32_t>(r * ps.w + c); };
        owner[dst] = static_cast<std::int32_t>(entries.size());
        entries.push_back({dst, at(ty.i0, tx.i0), at(ty.i0, tx.i1), at(ty.i1, tx.i0), at(ty.i1, tx.i1),
                           (1 - ty.frac) * (1 - tx.frac), (1 - ty.frac) * tx.frac, ty.frac * (1 - tx.frac), ty.frac * tx.frac});
      }
    }
  }

  auto live = std::make_shared<std::vector<detail::PasteEntry>>();
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (owner[entries[i].dst] == static_cast<std::int32_t>(i)) live->push_back(entries[i]);

  Tensor<T> out = image.value();
  const Tensor<T>& pv = patch.value();
  const std::size_t pplane = ps.plane();
  for (int c = 0; c < is.c; ++c) {
    T* o = out.data() + c * plane;
    const T* p = pv.data() + c * pplane;
    for (const auto& e : *live)
      o[e.dst] = p[e.s00] * static_cast<T>(e.w00) + p[e.s01] * static_cast<T>(e.w01) + p[e.s10] * static_cast<T>(e.w10) +
                 p[e.s11] * static_cast<T>(e.w11);
  }

  result.image = image.graph().record(
      std::move(out), {image, patch}, [image, patch, live, plane, pplane](Graph<T>& g, const Tensor<T>& go) {
        const int channels = go.shape().c;
        if (g.requires_grad(patch.id())) {
          Tensor<T>& gp = g.grad_buffer(patch.id());
          for (int c = 0; c < channels; ++c) {
            const T* o = go.data() + c * plane;
            T* p = gp.data() + c * pplane;
            for (const auto& e : *live) {
              const T v = o[e.dst];
              p[e.s00] += v * static_cast<T>(e.w00);
              p[e.s01] += v * static_cast<T>(e.w01);
              p[e.s10] += v * static_cast<T>(e.w10);
              p[e.s11] += v * static_cast<T>(e.w11);
            }
          }
        }
        if (g.requires_grad(image.id())) {
          Tensor<T>& gi = g.grad_buffer(image.id());
          std::vector<char> covered(plane, 0);
          for (const auto& e : *live) covered[e.dst] = 1;
          for (int c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < plane; ++i)
              if (!covered[i]) gi[c * plane + i] += go[c * plane + i];
        }
      });
  return result;
}

/// Single-region form of paste_patches.
template <class T>
PasteResult<T> paste_patch(const Var<T>& image, const Var<T>& patch, const BoundingBox& region) {
  return paste_patches(image, patch, std::span<const BoundingBox>(&region, 1));
}

}  // namespace ad
}  // namespace patchforge
