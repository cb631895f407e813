#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ann.hpp"
#include "errors.hpp"
#include "layers.hpp"
#include "network.hpp"

namespace snnadapt {

// Rewrites a trained ReLU network as an integrate-and-fire network whose
// firing rates approximate the ReLU activations normalized by their measured
// ceilings. All thresholds become 1; weights of layer l are scaled by
// a_prev / a_l, biases by 1 / a_l. Attached normalization parameters are
// scaled by 1 / a_l as well so that normalizing the scaled current reproduces
// the scaled source activation exactly. Each spiking layer starts with its
// learnable rate ceiling at the calibrated value (current scale 1), giving a
// conversion that is the identity on the dynamics until adaptation moves it.
inline SpikingNetwork convert(const AnnModel& ann, const CalibrationProfile& profile) {
  validate(ann);

  std::size_t n_weight_layers = 0;
  for (const LayerSpec& l : ann.layers) {
    if (is_weight_layer(l.kind)) ++n_weight_layers;
  }
  if (profile.a_max.size() != n_weight_layers) {
    throw StructuralError("calibration profile must cover every weight layer (head entry = 1)");
  }
  for (std::size_t w = 0; w + 1 < profile.a_max.size(); ++w) {
    if (!(profile.a_max[w] > 0.0) || !std::isfinite(profile.a_max[w])) {
      throw StructuralError("calibration ceiling for layer " + std::to_string(w) +
                            " must be positive and finite");
    }
  }
  if (profile.a_max.back() != 1.0) {
    throw StructuralError("the output head ceiling is fixed at 1");
  }

  SpikingNetwork net;
  net.input_size = ann.input_size;
  net.layers = ann.layers;

  double a_prev = 1.0;
  std::size_t w = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerSpec& l = net.layers[i];
    if (!is_weight_layer(l.kind)) continue;
    const double a_l = profile.a_max[w];
    l.weights *= a_prev / a_l;
    l.bias /= a_l;
    l.v_th = 1.0;
    l.clip_alpha = a_l;
    l.alpha_ref = a_l;
    if (l.kind == LayerKind::OutputAccumulator) {
      l.clip_alpha = 1.0;
      l.alpha_ref = 1.0;
    }
    if (i + 1 < net.layers.size() && net.layers[i + 1].kind == LayerKind::Normalization) {
      LayerSpec& n = net.layers[i + 1];
      n.mu /= a_l;
      n.sigma /= a_l;
      n.gamma /= a_l;
      n.beta /= a_l;
    }
    a_prev = a_l;
    ++w;
  }

  validate(net);
  return net;
}

}  // namespace snnadapt
