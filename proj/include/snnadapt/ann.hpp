#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"

namespace snnadapt {

// Inference-mode forward pass of the source network using its stored
// normalization statistics. Returns one activation vector per weight layer:
// post-ReLU for hidden layers, raw scores for the output head.
inline std::vector<Vec> ann_forward(const AnnModel& model, const Vec& input) {
  validate(model);
  if (input.size() != model.input_size) {
    throw StructuralError("input length does not match the model input size");
  }
  if (!input.allFinite()) throw NumericError("non-finite model input");

  std::vector<Vec> activations;
  Vec x = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    if (!is_weight_layer(l.kind)) continue;
    Vec z = linear_forward(l, x);
    if (i + 1 < model.layers.size() && model.layers[i + 1].kind == LayerKind::Normalization) {
      z = norm_affine(model.layers[i + 1], norm_normalize(model.layers[i + 1], z));
    }
    if (l.kind == LayerKind::OutputAccumulator) {
      activations.push_back(z);
    } else {
      activations.push_back(z.cwiseMax(0.0));
    }
    x = activations.back();
  }
  return activations;
}

// Per-weight-layer activation ceilings measured on held-out data. The head
// entry is pinned to 1: output potentials are read out unnormalized.
struct CalibrationProfile {
  double percentile = 99.9;
  std::vector<double> a_max;
};

// Nearest-rank percentile of pooled activations (percentile 100 is the exact
// maximum). Ceilings are floored at 1e-6 so silent layers cannot produce a
// divide-by-zero during conversion.
inline CalibrationProfile calibrate_max_activations(const AnnModel& model,
                                                    const std::vector<Vec>& batch,
                                                    double percentile = 99.9) {
  validate(model);
  if (batch.empty()) throw StructuralError("calibration batch is empty");
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw StructuralError("percentile must lie in (0, 100]");
  }

  std::size_t n_weight_layers = 0;
  for (const LayerSpec& l : model.layers) {
    if (is_weight_layer(l.kind)) ++n_weight_layers;
  }

  std::vector<std::vector<double>> pools(n_weight_layers);
  for (const Vec& x : batch) {
    const std::vector<Vec> acts = ann_forward(model, x);
    for (std::size_t w = 0; w + 1 < acts.size(); ++w) {
      const Vec& a = acts[w];
      pools[w].insert(pools[w].end(), a.data(), a.data() + a.size());
    }
  }

  CalibrationProfile profile;
  profile.percentile = percentile;
  for (std::size_t w = 0; w + 1 < n_weight_layers; ++w) {
    std::vector<double>& pool = pools[w];
    std::sort(pool.begin(), pool.end());
    const auto n = static_cast<double>(pool.size());
    const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
    const double v = pool[std::max<std::size_t>(rank, 1) - 1];
    profile.a_max.push_back(std::max(v, 1e-6));
  }
  profile.a_max.push_back(1.0);
  return profile;
}

}  // namespace snnadapt
