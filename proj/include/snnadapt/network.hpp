#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"

namespace snnadapt {

// Pseudo-derivative used in place of the spike Heaviside during backward
// passes. Both shapes integrate to 1 over the membrane axis. width == 0 means
// "use the layer threshold", which keeps the support proportional to v_th.
struct SurrogateConfig {
  enum class Shape { Triangular, Rectangular };
  Shape shape = Shape::Triangular;
  double width = 0.0;
};

inline double surrogate_grad(double v, double v_th, const SurrogateConfig& cfg) {
  const double a = cfg.width > 0.0 ? cfg.width : v_th;
  const double d = std::abs(v - v_th);
  if (cfg.shape == SurrogateConfig::Shape::Triangular) {
    return std::max(0.0, 1.0 - d / a) / a;
  }
  return d <= a ? 1.0 / (2.0 * a) : 0.0;
}

// How spikes are produced in the forward pass. Binary is the real dynamics.
// Relaxed replaces the Heaviside with the exact antiderivative of the
// configured surrogate, making the whole network differentiable so gradient
// implementations can be checked against finite differences. Relaxed runs are
// a diagnostic; they emit fractional "spikes".
enum class SpikeModel { Binary, Relaxed };

inline double relaxed_spike(double v, double v_th, const SurrogateConfig& cfg) {
  const double a = cfg.width > 0.0 ? cfg.width : v_th;
  const double x = v - v_th;
  if (x <= -a) return 0.0;
  if (x >= a) return 1.0;
  if (cfg.shape == SurrogateConfig::Shape::Rectangular) return (x + a) / (2.0 * a);
  if (x <= 0.0) {
    const double r = x + a;
    return r * r / (2.0 * a * a);
  }
  const double r = a - x;
  return 1.0 - r * r / (2.0 * a * a);
}

// Per-layer integrate-and-fire state. `trace` is the running spike sum; it
// doubles as the firing-rate counter and as the presynaptic trace consumed by
// the forward-in-time learning rule.
struct IfLayerState {
  Vec v;
  Vec s;
  Vec trace;

  void reset(int n) {
    v = Vec::Zero(n);
    s = Vec::Zero(n);
    trace = Vec::Zero(n);
  }
};

// One membrane update with subtraction reset:
//   v <- v - v_th * s_prev + alpha_scale * input_current
//   s <- spike(v, v_th)
// Returns the new spike vector. A neuron sitting exactly at threshold fires.
inline const Vec& if_step(IfLayerState& st, const Vec& input_current, double v_th,
                          double alpha_scale, SpikeModel model = SpikeModel::Binary,
                          const SurrogateConfig& sg = {}) {
  st.v += alpha_scale * input_current - v_th * st.s;
  for (Eigen::Index i = 0; i < st.v.size(); ++i) {
    st.s(i) = model == SpikeModel::Binary ? (st.v(i) >= v_th ? 1.0 : 0.0)
                                          : relaxed_spike(st.v(i), v_th, sg);
  }
  st.trace += st.s;
  return st.s;
}

struct SpikingNetwork {
  int input_size = 0;
  std::vector<LayerSpec> layers;
  SurrogateConfig surrogate;
};

inline void validate(const SpikingNetwork& net) {
  validate_model_chain(net.input_size, net.layers);
}

// A "stage" is one weight layer plus its attached normalization: the unit the
// simulator steps. The last stage is the non-spiking output accumulator.
struct StageInfo {
  int weight_layer = -1;  // index into net.layers
  int norm_layer = -1;    // index into net.layers, -1 when absent
  bool spiking = true;
};

inline std::vector<StageInfo> compile_stages(const SpikingNetwork& net) {
  validate(net);
  std::vector<StageInfo> stages;
  for (int i = 0; i < static_cast<int>(net.layers.size()); ++i) {
    const LayerSpec& l = net.layers[static_cast<std::size_t>(i)];
    if (!is_weight_layer(l.kind)) continue;
    StageInfo info;
    info.weight_layer = i;
    info.spiking = l.kind != LayerKind::OutputAccumulator;
    if (i + 1 < static_cast<int>(net.layers.size()) &&
        net.layers[static_cast<std::size_t>(i + 1)].kind == LayerKind::Normalization) {
      info.norm_layer = i + 1;
    }
    stages.push_back(info);
  }
  return stages;
}

// Drives one sample through the network a timestep at a time, exposing every
// intermediate quantity of the latest step so that forward runs and both
// gradient engines share a single implementation of the dynamics.
class Simulator {
 public:
  struct StageBuffers {
    Vec presyn;      // what fed this stage at the latest step
    Vec raw;         // W * presyn + b
    Vec normalized;  // (raw - mu) / sigma, size 0 without normalization
    Vec current;     // scaled post-affine current actually integrated
    IfLayerState state;  // spiking stages
    Vec out_v;           // output stage accumulated potential
  };

  Simulator(const SpikingNetwork& net, Vec input, SpikeModel model = SpikeModel::Binary)
      : net_(&net), input_(std::move(input)), model_(model), stages_info_(compile_stages(net)) {
    if (input_.size() != net.input_size) {
      throw StructuralError("input length does not match the network input size");
    }
    if (!input_.allFinite()) throw NumericError("non-finite network input");
    buffers_.resize(stages_info_.size());
    for (std::size_t k = 0; k < stages_info_.size(); ++k) {
      const int n = layer_output_size(net.layers[static_cast<std::size_t>(stages_info_[k].weight_layer)]);
      if (stages_info_[k].spiking) {
        buffers_[k].state.reset(n);
      } else {
        buffers_[k].out_v = Vec::Zero(n);
      }
    }
  }

  int t() const { return t_; }
  int stage_count() const { return static_cast<int>(stages_info_.size()); }
  const StageInfo& info(int k) const { return stages_info_[static_cast<std::size_t>(k)]; }
  const StageBuffers& stage(int k) const { return buffers_[static_cast<std::size_t>(k)]; }
  const Vec& input() const { return input_; }
  const Vec& output_potential() const { return buffers_.back().out_v; }

  void step() {
    const Vec* below = &input_;
    for (std::size_t k = 0; k < stages_info_.size(); ++k) {
      const StageInfo& info = stages_info_[k];
      StageBuffers& b = buffers_[k];
      const LayerSpec& wl = net_->layers[static_cast<std::size_t>(info.weight_layer)];
      b.presyn = *below;
      b.raw = linear_forward(wl, b.presyn);
      Vec y;
      if (info.norm_layer >= 0) {
        const LayerSpec& nl = net_->layers[static_cast<std::size_t>(info.norm_layer)];
        b.normalized = norm_normalize(nl, b.raw);
        y = norm_affine(nl, b.normalized);
      } else {
        y = b.raw;
      }
      b.current = wl.current_scale() * y;
      if (info.spiking) {
        if_step(b.state, b.current, wl.v_th, 1.0, model_, net_->surrogate);
        below = &b.state.s;
      } else {
        b.out_v += b.current;
      }
    }
    ++t_;
  }

 private:
  const SpikingNetwork* net_;
  Vec input_;
  SpikeModel model_;
  std::vector<StageInfo> stages_info_;
  std::vector<StageBuffers> buffers_;
  int t_ = 0;
};

// Everything observable from one T-step run of a single sample.
struct RunTrace {
  int timesteps = 0;
  std::vector<Mat> spikes;        // per spiking stage, row t-1 holds s[t]
  std::vector<Vec> spike_counts;  // per spiking stage
  Mat output_potentials;          // row t-1 holds the accumulated v[t]

  // Mean accumulated output potential: the class scores read out of a run.
  // Summed in timestep order and divided once, so it is bit-identical to the
  // running average the gradient engines report.
  Vec prediction() const {
    Vec sum = Vec::Zero(output_potentials.cols());
    for (Eigen::Index t = 0; t < output_potentials.rows(); ++t) {
      sum += output_potentials.row(t).transpose();
    }
    return sum / static_cast<double>(timesteps);
  }

  std::vector<Vec> firing_rates() const {
    std::vector<Vec> rates;
    rates.reserve(spike_counts.size());
    for (const Vec& c : spike_counts) rates.push_back(c / static_cast<double>(timesteps));
    return rates;
  }
};

inline RunTrace forward(const SpikingNetwork& net, const Vec& input, int timesteps,
                        SpikeModel model = SpikeModel::Binary) {
  if (timesteps < 1) throw StructuralError("timestep count must be at least 1");
  Simulator sim(net, input, model);
  RunTrace trace;
  trace.timesteps = timesteps;
  const int n_stages = sim.stage_count();
  for (int k = 0; k < n_stages - 1; ++k) {
    trace.spikes.emplace_back(timesteps, layer_output_size(net.layers[static_cast<std::size_t>(
                                             sim.info(k).weight_layer)]));
  }
  trace.output_potentials.resize(timesteps, layer_output_size(net.layers.back()));
  for (int t = 0; t < timesteps; ++t) {
    sim.step();
    for (int k = 0; k < n_stages - 1; ++k) {
      trace.spikes[static_cast<std::size_t>(k)].row(t) = sim.stage(k).state.s.transpose();
    }
    trace.output_potentials.row(t) = sim.output_potential().transpose();
  }
  for (int k = 0; k < n_stages - 1; ++k) {
    trace.spike_counts.push_back(sim.stage(k).state.trace);
  }
  return trace;
}

// Histogram of per-neuron firing rates, one per spiking stage. Bins uniformly
// partition [0, 1]; a rate of exactly 1 lands in the last bin.
inline std::vector<Eigen::VectorXi> firing_rate_histogram(const RunTrace& trace, int bins) {
  if (bins < 2) throw StructuralError("histogram needs at least 2 bins");
  std::vector<Eigen::VectorXi> hists;
  for (const Vec& counts : trace.spike_counts) {
    Eigen::VectorXi h = Eigen::VectorXi::Zero(bins);
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
      const double rate = counts(i) / static_cast<double>(trace.timesteps);
      const int idx = std::min(bins - 1, static_cast<int>(rate * bins));
      h(idx) += 1;
    }
    hists.push_back(h);
  }
  return hists;
}

}  // namespace snnadapt
