#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "corrupt.hpp"
#include "detect.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace snnadapt {

// Three-way stroke-orientation task: dark elongated Gaussian strokes scattered
// over a light canvas, horizontal for class 0, vertical for class 1, diagonal
// for class 2. The cue is a texture tiled across the whole image rather than
// anything positional, so partial occlusion by a structured brightness field
// dilutes the evidence without erasing it, and identical stroke geometry
// across classes keeps total ink uninformative.
inline Dataset make_blob_dataset(int n, std::uint64_t seed, int size = 16) {
  if (n < 1 || size < 8) throw StructuralError("blob dataset needs n >= 1, size >= 8");
  SplitMix64 rng = SplitMix64(seed).child(0x626c6f62);  // "blob"
  Dataset ds;
  ds.channels = 1;
  ds.height = size;
  ds.width = size;
  ds.num_classes = 3;

  const double base_angle[3] = {0.0, 1.5707963267948966, 0.7853981633974483};
  const int strokes = std::max(3, size * size * 10 / 256);
  for (int i = 0; i < n; ++i) {
    const int label = rng.uniform_int(3);
    Vec img = Vec::Constant(size * size, 0.92);
    for (int b = 0; b < strokes; ++b) {
      const double cx = rng.uniform(1.0, size - 1.0);
      const double cy = rng.uniform(1.0, size - 1.0);
      const double amp = 0.50 + 0.25 * rng.uniform();
      const double sl = 1.8 + 0.6 * rng.uniform();   // long axis sigma, px
      const double ss = 0.55 + 0.20 * rng.uniform();  // short axis sigma, px
      const double th = base_angle[label] + rng.gaussian(0.0, 0.17);
      const double ct = std::cos(th), st = std::sin(th);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double dx = x - cx, dy = y - cy;
          const double u = ct * dx + st * dy;
          const double v = -st * dx + ct * dy;
          img(y * size + x) -= amp * std::exp(-(u * u) / (2.0 * sl * sl) - (v * v) / (2.0 * ss * ss));
        }
      }
    }
    for (int p = 0; p < size * size; ++p) {
      img(p) = std::clamp(img(p) + rng.gaussian(0.0, 0.01), 0.0, 1.0);
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

// Rectangle spotting task for the grid-cell head: one to three axis-aligned
// rectangles per image, either filled bright (class 0) or hollow outline
// (class 1), over a dim textured background. Centers land in distinct grid
// cells so every object owns its cell.
inline Dataset make_rect_dataset(int n, std::uint64_t seed, int size = 16,
                                 const DetectionGrid& grid = {4, 4, 2}) {
  if (n < 1 || size < 8) throw StructuralError("rect dataset needs n >= 1, size >= 8");
  if (size % grid.h != 0 || size % grid.w != 0) {
    throw StructuralError("grid must evenly divide the image");
  }
  SplitMix64 rng = SplitMix64(seed).child(0x72656374);  // "rect"
  Dataset ds;
  ds.channels = 1;
  ds.height = size;
  ds.width = size;
  ds.num_classes = grid.classes;

  const int cell_h = size / grid.h;
  const int cell_w = size / grid.w;
  for (int i = 0; i < n; ++i) {
    Vec img(size * size);
    for (int p = 0; p < size * size; ++p) img(p) = 0.06 + 0.06 * rng.uniform();

    const int n_obj = 1 + rng.uniform_int(3);
    std::set<int> taken_cells;
    std::vector<GroundTruthBox> objs;
    for (int o = 0; o < n_obj; ++o) {
      int cell = rng.uniform_int(grid.cells());
      int guard = 0;
      while (taken_cells.count(cell) != 0 && guard++ < 32) cell = rng.uniform_int(grid.cells());
      if (taken_cells.count(cell) != 0) continue;
      taken_cells.insert(cell);

      const int gy = cell / grid.w, gx = cell % grid.w;
      // Rect sides track the cell size so the task keeps the same geometry at
      // any resolution: 3..5 px for 4 px cells, 6..10 px for 8 px cells.
      const int bw = std::max(3, 3 * cell_w / 4) + rng.uniform_int(cell_w / 2 + 1);
      const int bh = std::max(3, 3 * cell_h / 4) + rng.uniform_int(cell_h / 2 + 1);
      double cx = (gx + 0.3 + 0.4 * rng.uniform()) * cell_w;
      double cy = (gy + 0.3 + 0.4 * rng.uniform()) * cell_h;
      cx = std::clamp(cx, bw / 2.0, size - bw / 2.0);
      cy = std::clamp(cy, bh / 2.0, size - bh / 2.0);
      const int x0 = std::clamp(static_cast<int>(std::lround(cx - bw / 2.0)), 0, size - 1);
      const int y0 = std::clamp(static_cast<int>(std::lround(cy - bh / 2.0)), 0, size - 1);
      const int x1 = std::min(x0 + bw - 1, size - 1);
      const int y1 = std::min(y0 + bh - 1, size - 1);

      const int cls = rng.uniform_int(grid.classes);
      const double bright = 0.80 + 0.15 * rng.uniform();
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const bool border = y == y0 || y == y1 || x == x0 || x == x1;
          if (cls == 0) {
            img(y * size + x) = bright;
          } else {
            img(y * size + x) = border ? bright : 0.12;
          }
        }
      }
      GroundTruthBox g;
      g.cls = cls;
      g.cx = (x0 + x1 + 1) / 2.0 / size;
      g.cy = (y0 + y1 + 1) / 2.0 / size;
      g.w = static_cast<double>(x1 - x0 + 1) / size;
      g.h = static_cast<double>(y1 - y0 + 1) / size;
      objs.push_back(g);
    }
    ds.images.push_back(std::move(img));
    ds.objects.push_back(std::move(objs));
  }
  return ds;
}

// Applies the same corruption family to every image, each with its own seed
// derived from the root, so the result is reproducible from (dataset, spec).
inline Dataset corrupt_dataset(const Dataset& ds, CorruptionKind kind, double beta,
                               std::uint64_t seed, double fog_roughness = 0.6) {
  Dataset out = ds;
  const SplitMix64 root(seed);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    CorruptionSpec spec;
    spec.kind = kind;
    spec.beta = beta;
    spec.fog_roughness = fog_roughness;
    spec.seed = root.child(i).seed();
    out.images[i] = apply_corruption(ds.images[i], ds.channels, ds.height, ds.width, spec);
  }
  return out;
}

}  // namespace snnadapt
