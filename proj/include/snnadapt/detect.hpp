#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "adapt.hpp"
#include "errors.hpp"
#include "network.hpp"

namespace snnadapt {

// Grid-cell detection head. The flat output vector is laid out channels-first
// over the grid: all confidence logits, then class logits, then the four box
// channels: [HW | C*HW | 4*HW].
struct DetectionGrid {
  int h = 1;
  int w = 1;
  int classes = 1;

  int cells() const { return h * w; }
  int output_size() const { return cells() * (1 + classes + 4); }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct DetectionHeadOutput {
  DetectionGrid grid;
  Vec raw;

  double conf_logit(int cell) const { return raw(cell); }
  double conf(int cell) const { return sigmoid(raw(cell)); }
  Vec class_logits(int cell) const {
    Vec u(grid.classes);
    for (int c = 0; c < grid.classes; ++c) u(c) = raw(grid.cells() * (1 + c) + cell);
    return u;
  }
  // Normalized (cx, cy, w, h) in [0, 1] image coordinates.
  Eigen::Vector4d box(int cell) const {
    Eigen::Vector4d b;
    const int base = grid.cells() * (1 + grid.classes);
    for (int k = 0; k < 4; ++k) b(k) = sigmoid(raw(base + grid.cells() * k + cell));
    return b;
  }
};

inline DetectionHeadOutput split_head(const DetectionGrid& grid, const Vec& raw) {
  if (raw.size() != grid.output_size()) {
    throw StructuralError("head output length does not match the grid layout");
  }
  return DetectionHeadOutput{grid, raw};
}

// Runs the spiking network and reads the final accumulated output potential
// divided by the step count. Unlike the classification readout, the head is
// decoded through sigmoids, so the estimate must stay on the source model's
// logit scale; the running mean of the accumulated potential would inflate it
// by (T+1)/2 and pin every box at its cell extremes.
inline DetectionHeadOutput toy_head_forward(const SpikingNetwork& net, const Vec& input,
                                            int timesteps, const DetectionGrid& grid) {
  const RunTrace trace = forward(net, input, timesteps);
  const Vec head = trace.output_potentials.row(timesteps - 1).transpose() /
                   static_cast<double>(timesteps);
  return split_head(grid, head);
}

// U-shaped weight over the objectness probability: cells the model is sure
// about (either way) keep their gradient, ambiguous mid-confidence cells are
// suppressed.
struct WeightingConfig {
  double tau_lo = 0.2;
  double tau_hi = 0.8;
  double delta = 20.0;
};

inline double confidence_weight(double p, const WeightingConfig& w) {
  return 1.0 / (1.0 + std::exp(w.delta * (p - w.tau_lo))) +
         1.0 / (1.0 + std::exp(-w.delta * (p - w.tau_hi)));
}

inline double confidence_weight_dp(double p, const WeightingConfig& w) {
  const double lo = 1.0 / (1.0 + std::exp(w.delta * (p - w.tau_lo)));
  const double hi = 1.0 / (1.0 + std::exp(-w.delta * (p - w.tau_hi)));
  return -w.delta * lo * (1.0 - lo) + w.delta * hi * (1.0 - hi);
}

// Sum over cells of (optionally confidence-weighted) class entropy.
inline double detection_entropy(const DetectionHeadOutput& out, double temperature, bool weighted,
                                const WeightingConfig& wc = {}) {
  double total = 0.0;
  for (int cell = 0; cell < out.grid.cells(); ++cell) {
    const double h = entropy_loss(out.class_logits(cell), temperature);
    total += weighted ? confidence_weight(out.conf(cell), wc) * h : h;
  }
  return total;
}

// Per-timestep detection objective for the adaptation engines. Box channels
// receive no gradient; confidence only couples through the weight itself.
inline TimestepLossFn detection_timestep_loss(const DetectionGrid& grid, double temperature,
                                              bool weighted, const WeightingConfig& wc = {}) {
  return [grid, temperature, weighted, wc](int, const Vec& v_out, Vec& grad) {
    const DetectionHeadOutput out = split_head(grid, v_out);
    grad = Vec::Zero(v_out.size());
    double total = 0.0;
    for (int cell = 0; cell < grid.cells(); ++cell) {
      const Vec u = out.class_logits(cell);
      const double h = entropy_loss(u, temperature);
      const Vec dh = entropy_loss_grad(u, temperature);
      double weight = 1.0;
      if (weighted) {
        const double q = out.conf_logit(cell);
        const double p = sigmoid(q);
        weight = confidence_weight(p, wc);
        grad(cell) += h * confidence_weight_dp(p, wc) * p * (1.0 - p);
      }
      for (int c = 0; c < grid.classes; ++c) {
        grad(grid.cells() * (1 + c) + cell) += weight * dh(c);
      }
      total += weight * h;
    }
    return total;
  };
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct GroundTruthBox {
  int cls = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized to [0, 1]
};

inline double box_iou(double acx, double acy, double aw, double ah, double bcx, double bcy,
                      double bw, double bh) {
  const double ax0 = acx - aw / 2, ax1 = acx + aw / 2, ay0 = acy - ah / 2, ay1 = acy + ah / 2;
  const double bx0 = bcx - bw / 2, bx1 = bcx + bw / 2, by0 = bcy - bh / 2, by1 = bcy + bh / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  const double uni = aw * ah + bw * bh - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Mean average precision at a fixed IoU threshold, 11-point interpolation.
// Every cell emits one candidate per class scored conf * class probability;
// candidates are matched greedily per class in score order.
inline double evaluate_map(const std::vector<DetectionHeadOutput>& preds,
                           const std::vector<std::vector<GroundTruthBox>>& truths,
                           double temperature = 1.0, double iou_thresh = 0.5) {
  if (preds.size() != truths.size()) throw StructuralError("prediction/truth count mismatch");
  if (preds.empty()) throw StructuralError("empty evaluation set");
  const DetectionGrid grid = preds.front().grid;

  double ap_sum = 0.0;
  int ap_classes = 0;
  for (int cls = 0; cls < grid.classes; ++cls) {
    struct Cand {
      double score;
      std::size_t image;
      Eigen::Vector4d box;
    };
    std::vector<Cand> cands;
    int n_gt = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (const GroundTruthBox& g : truths[i]) {
        if (g.cls == cls) ++n_gt;
      }
      for (int cell = 0; cell < grid.cells(); ++cell) {
        const Vec p = softmax_with_temperature(preds[i].class_logits(cell), temperature);
        cands.push_back({preds[i].conf(cell) * p(cls), i, preds[i].box(cell)});
      }
    }
    if (n_gt == 0) continue;
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Cand& c : cands) {
      double best_iou = 0.0;
      int best_j = -1;
      for (std::size_t j = 0; j < truths[c.image].size(); ++j) {
        const GroundTruthBox& g = truths[c.image][j];
        if (g.cls != cls || used[c.image][j]) continue;
        const double iou = box_iou(c.box(0), c.box(1), c.box(2), c.box(3), g.cx, g.cy, g.w, g.h);
        if (iou > best_iou) {
          best_iou = iou;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0 && best_iou >= iou_thresh) {
        used[c.image][static_cast<std::size_t>(best_j)] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double best = 0.0;
      for (std::size_t i = 0; i < precision.size(); ++i) {
        if (recall[i] >= r) best = std::max(best, precision[i]);
      }
      ap += best / 11.0;
    }
    ap_sum += ap;
    ++ap_classes;
  }
  return ap_classes > 0 ? ap_sum / ap_classes : 0.0;
}

}  // namespace snnadapt
