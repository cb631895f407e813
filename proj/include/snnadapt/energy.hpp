#pragma once

#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"
#include "network.hpp"

namespace snnadapt {

// Per-operation costs of 45nm arithmetic, picojoules. A multiply-accumulate
// is 3.7 (multiply) + 0.9 (add); a spike-triggered accumulate is the add
// alone rounded to 0.1 in published budgets, kept separate here.
struct EnergyProfile {
  double mac_pj = 4.6;
  double ac_pj = 0.1;
  double mult_pj = 3.7;
  double add_pj = 0.9;
};

inline std::uint64_t count_layer_macs(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Dense:
    case LayerKind::OutputAccumulator:
      return static_cast<std::uint64_t>(l.weights.rows()) *
             static_cast<std::uint64_t>(l.weights.cols());
    case LayerKind::Conv2d: {
      const Conv2dGeom& g = l.conv;
      return static_cast<std::uint64_t>(g.kernel) * g.kernel * g.in_channels * g.out_channels *
             g.out_h() * g.out_w();
    }
    case LayerKind::Normalization:
      return 0;  // folds into the preceding layer at inference time
  }
  return 0;
}

// Multiply-accumulates for one forward pass of the source network.
inline std::uint64_t count_ann_macs(const AnnModel& model) {
  std::uint64_t total = 0;
  for (const LayerSpec& l : model.layers) total += count_layer_macs(l);
  return total;
}

// Accumulates triggered in `layer` by a presynaptic spike raster, given the
// total spike count per presynaptic position. Border positions of a conv
// drive fewer taps, which the fan-out map accounts for.
inline std::uint64_t count_layer_synops(const LayerSpec& layer, const Vec& presyn_spike_counts) {
  const Eigen::VectorXi fan = synaptic_fanout(layer);
  if (presyn_spike_counts.size() != fan.size()) {
    throw StructuralError("spike raster length does not match the layer input");
  }
  std::uint64_t total = 0;
  for (Eigen::Index i = 0; i < fan.size(); ++i) {
    total += static_cast<std::uint64_t>(presyn_spike_counts(i)) *
             static_cast<std::uint64_t>(fan(static_cast<int>(i)));
  }
  return total;
}

// Spike-triggered accumulates over a whole run: every spiking stage's output
// raster counted against the fan-out of the stage consuming it. The analog
// input layer triggers multiply-accumulates instead (see
// count_snn_input_macs) and is deliberately not included here.
inline std::uint64_t count_snn_synops(const SpikingNetwork& net, const RunTrace& trace) {
  const auto stages = compile_stages(net);
  if (trace.spike_counts.size() + 1 != stages.size()) {
    throw StructuralError("trace does not match the network's stage structure");
  }
  std::uint64_t total = 0;
  for (std::size_t k = 0; k + 1 < stages.size(); ++k) {
    const LayerSpec& consumer =
        net.layers[static_cast<std::size_t>(stages[k + 1].weight_layer)];
    total += count_layer_synops(consumer, trace.spike_counts[k]);
  }
  return total;
}

// The first layer sees the analog input at every timestep, so it performs its
// full MAC load T times.
inline std::uint64_t count_snn_input_macs(const SpikingNetwork& net, int timesteps) {
  const auto stages = compile_stages(net);
  const LayerSpec& first = net.layers[static_cast<std::size_t>(stages.front().weight_layer)];
  return count_layer_macs(first) * static_cast<std::uint64_t>(timesteps);
}

struct EnergyEstimate {
  std::uint64_t macs = 0;
  std::uint64_t acs = 0;
  double joules = 0.0;
};

inline EnergyEstimate estimate_energy(std::uint64_t macs, std::uint64_t acs,
                                      const EnergyProfile& profile = {}) {
  EnergyEstimate e;
  e.macs = macs;
  e.acs = acs;
  e.joules = (static_cast<double>(macs) * profile.mac_pj + static_cast<double>(acs) * profile.ac_pj) *
             1e-12;
  return e;
}

}  // namespace snnadapt
