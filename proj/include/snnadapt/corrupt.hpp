#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"
#include "rng.hpp"

namespace snnadapt {

namespace detail {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Bilinear upsampling with half-pixel centers (the usual align_corners=false
// convention), source coordinates clamped at the borders.
inline Mat bilinear_resize(const Mat& src, int out_h, int out_w) {
  const int sh = static_cast<int>(src.rows()), sw = static_cast<int>(src.cols());
  Mat out(out_h, out_w);
  const double fy = static_cast<double>(sh) / out_h;
  const double fx = static_cast<double>(sw) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double sy = (y + 0.5) * fy - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(sh - 1));
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      double sx = (x + 0.5) * fx - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(sw - 1));
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = sx - x0;
      out(y, x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

}  // namespace detail

// Multi-octave cloud field on an n x n grid (n a power of two): uniform noise
// at resolutions 2^1 .. n, each octave upsampled to full size and weighted by
// 1/2^s so the coarsest scale dominates, then min-max normalized to [0, 1].
inline Mat cloud_field(int n, SplitMix64& rng) {
  if (!detail::is_power_of_two(n) || n < 2) {
    throw StructuralError("cloud field size must be a power of two and at least 2");
  }
  const int levels = static_cast<int>(std::round(std::log2(n)));
  Mat field = Mat::Zero(n, n);
  for (int s = 1; s <= levels; ++s) {
    const int res = 1 << s;
    Mat noise(res, res);
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) noise(y, x) = rng.uniform();
    }
    field += detail::bilinear_resize(noise, n, n) / static_cast<double>(1 << s);
  }
  const double lo = field.minCoeff();
  const double hi = field.maxCoeff();
  if (hi > lo) {
    field = (field.array() - lo) / (hi - lo);
  } else {
    field.setConstant(0.5);
  }
  return field;
}

// Midpoint-displacement field on a (2^k + 1)-square lattice. Each subdivision
// level perturbs the averaged midpoints by 0.5 * roughness^level * u, u
// uniform in [-1, 1]. Border midpoints average only their two in-line
// neighbours, so roughness 0 reproduces the bilinear interpolation of the
// four seeded corners exactly. Values are clamped to [0, 1].
inline Mat diamond_square(int size, double roughness, SplitMix64& rng) {
  if (size < 3 || !detail::is_power_of_two(size - 1)) {
    throw StructuralError("lattice size must be 2^k + 1");
  }
  if (roughness < 0.0) throw StructuralError("roughness must be non-negative");
  Mat f = Mat::Zero(size, size);
  f(0, 0) = rng.uniform(0.25, 0.75);
  f(0, size - 1) = rng.uniform(0.25, 0.75);
  f(size - 1, 0) = rng.uniform(0.25, 0.75);
  f(size - 1, size - 1) = rng.uniform(0.25, 0.75);

  int step = size - 1;
  int level = 1;
  while (step > 1) {
    const int half = step / 2;
    const double amp = 0.5 * std::pow(roughness, level);

    // Square step: cell centers from their four corners.
    for (int y = half; y < size; y += step) {
      for (int x = half; x < size; x += step) {
        const double avg =
            (f(y - half, x - half) + f(y - half, x + half) + f(y + half, x - half) +
             f(y + half, x + half)) /
            4.0;
        f(y, x) = avg + amp * rng.uniform(-1.0, 1.0);
      }
    }

    // Diamond step: edge midpoints. Interior points average their four
    // cross neighbours; border points only the two neighbours along the edge.
    for (int y = 0; y < size; y += half) {
      const int x_start = (y / half) % 2 == 0 ? half : 0;
      for (int x = x_start; x < size; x += step) {
        double sum = 0.0;
        int cnt = 0;
        const bool border = y == 0 || y == size - 1 || x == 0 || x == size - 1;
        if (border) {
          if (y == 0 || y == size - 1) {
            sum = f(y, x - half) + f(y, x + half);
          } else {
            sum = f(y - half, x) + f(y + half, x);
          }
          cnt = 2;
        } else {
          sum = f(y - half, x) + f(y + half, x) + f(y, x - half) + f(y, x + half);
          cnt = 4;
        }
        f(y, x) = sum / cnt + amp * rng.uniform(-1.0, 1.0);
      }
    }

    step = half;
    ++level;
  }
  return f.cwiseMax(0.0).cwiseMin(1.0);
}

enum class CorruptionKind { None, Cloudy, Foggy };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::None;
  double beta = 0.5;          // blend weight of the corruption field
  double fog_roughness = 0.6;
  std::uint64_t seed = 0;
};

// Corruption field for one image, in [0, 1]. Fog is pushed toward white
// (0.5 + 0.5 * field) before blending, clouds are used as-is.
inline Mat corruption_field(int h, int w, const CorruptionSpec& spec, SplitMix64& rng) {
  switch (spec.kind) {
    case CorruptionKind::Cloudy: {
      if (h != w) throw StructuralError("cloud corruption needs square images");
      return cloud_field(h, rng);
    }
    case CorruptionKind::Foggy: {
      int lattice = 2;
      while (lattice + 1 < std::max(h, w) + 1) lattice *= 2;
      const Mat f = diamond_square(lattice + 1, spec.fog_roughness, rng);
      return 0.5 * Mat::Ones(h, w) + 0.5 * f.topLeftCorner(h, w);
    }
    case CorruptionKind::None: break;
  }
  return Mat::Zero(h, w);
}

// Alpha-blends the per-image corruption field over every channel:
//   out = (1 - beta) * image + beta * field
// The same field covers all channels; output stays within [0, 1] for inputs
// in that range. A fresh generator derived from spec.seed makes the result a
// pure function of (image, spec).
inline Vec apply_corruption(const Vec& image, int channels, int h, int w,
                            const CorruptionSpec& spec) {
  if (channels < 1 || h < 1 || w < 1 || image.size() != channels * h * w) {
    throw StructuralError("image shape mismatch");
  }
  if (!(spec.beta >= 0.0 && spec.beta <= 1.0)) {
    throw StructuralError("blend weight must lie in [0, 1]");
  }
  if (!image.allFinite()) throw NumericError("non-finite image");
  if (spec.kind == CorruptionKind::None) return image;

  SplitMix64 rng(spec.seed);
  const Mat field = corruption_field(h, w, spec, rng);
  Vec out(image.size());
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int i = (c * h + y) * w + x;
        out(i) = std::clamp((1.0 - spec.beta) * image(i) + spec.beta * field(y, x), 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace snnadapt
