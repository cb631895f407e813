#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"
#include "network.hpp"

namespace snnadapt {

// ---------------------------------------------------------------------------
// Temperature-smoothed entropy. The temperature divides the scores before the
// softmax; larger values flatten the distribution and damp the gradient on
// already-confident predictions, which is what keeps unsupervised sharpening
// from collapsing onto a single class.
// ---------------------------------------------------------------------------

inline Vec softmax_with_temperature(const Vec& scores, double temperature) {
  if (!(temperature > 0.0)) throw StructuralError("temperature must be positive");
  if (!scores.allFinite()) throw NumericError("non-finite scores in softmax");
  const Vec u = scores / temperature;
  const double m = u.maxCoeff();
  Vec e = (u.array() - m).exp();
  return e / e.sum();
}

inline double entropy_loss(const Vec& scores, double temperature) {
  if (!(temperature > 0.0)) throw StructuralError("temperature must be positive");
  if (!scores.allFinite()) throw NumericError("non-finite scores in entropy");
  const Vec u = scores / temperature;
  const double m = u.maxCoeff();
  const double lse = m + std::log((u.array() - m).exp().sum());
  const Vec p = (u.array() - lse).exp();
  return lse - p.dot(u);  // -sum p log p, computed without log(0)
}

// d(entropy)/d(scores): -p .* (log p + H) / temperature.
inline Vec entropy_loss_grad(const Vec& scores, double temperature) {
  if (!(temperature > 0.0)) throw StructuralError("temperature must be positive");
  if (!scores.allFinite()) throw NumericError("non-finite scores in entropy gradient");
  const Vec u = scores / temperature;
  const double m = u.maxCoeff();
  const double lse = m + std::log((u.array() - m).exp().sum());
  const Vec logp = u.array() - lse;
  const Vec p = logp.array().exp();
  const double h = -p.dot(logp);
  return (-p.array() * (logp.array() + h) / temperature).matrix();
}

// Loss evaluated on the accumulated output potential of a single timestep.
// Returns the loss value and fills the gradient w.r.t. that potential. The
// engines average this over the run, so a full run minimizes the mean
// instantaneous loss.
using TimestepLossFn = std::function<double(int t, const Vec& v_out, Vec& grad)>;

inline TimestepLossFn entropy_timestep_loss(double temperature) {
  return [temperature](int, const Vec& v_out, Vec& grad) {
    grad = entropy_loss_grad(v_out, temperature);
    return entropy_loss(v_out, temperature);
  };
}

// ---------------------------------------------------------------------------
// Parameter identities and gradient containers.
// ---------------------------------------------------------------------------

struct ParamId {
  int layer = 0;  // index into net.layers
  enum class Kind { Weights, Bias, Gamma, Beta, Clip } kind = Kind::Weights;
  friend auto operator<=>(const ParamId&, const ParamId&) = default;
};

// Gradients keyed by parameter. Vectors are stored as single-column matrices,
// the clip gradient as 1x1. Only parameters the caller selected are present.
struct GradientSet {
  std::map<ParamId, Mat> g;

  bool all_finite() const {
    for (const auto& [id, m] : g) {
      if (!m.allFinite()) return false;
    }
    return true;
  }

  void add_scaled(const GradientSet& other, double s) {
    for (const auto& [id, m] : other.g) {
      auto it = g.find(id);
      if (it == g.end()) {
        g.emplace(id, s * m);
      } else {
        it->second += s * m;
      }
    }
  }

  void scale(double s) {
    for (auto& [id, m] : g) m *= s;
  }
};

enum class ParamSubset { AffineAndClip, Affine, All };

// Which parameters a test-time adaptation run may touch. Normalization
// statistics are never in the set; they move only through refresh.
inline std::set<ParamId> select_adapt_params(const SpikingNetwork& net, ParamSubset subset) {
  std::set<ParamId> out;
  for (int i = 0; i < static_cast<int>(net.layers.size()); ++i) {
    const LayerSpec& l = net.layers[static_cast<std::size_t>(i)];
    if (l.kind == LayerKind::Normalization) {
      out.insert({i, ParamId::Kind::Gamma});
      out.insert({i, ParamId::Kind::Beta});
    } else if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2d) {
      if (subset != ParamSubset::Affine) out.insert({i, ParamId::Kind::Clip});
    }
    if (subset == ParamSubset::All && is_weight_layer(l.kind)) {
      out.insert({i, ParamId::Kind::Weights});
      out.insert({i, ParamId::Kind::Bias});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient engines. Both return the same result shape; they differ in what
// they remember. The forward-in-time engine keeps a constant number of
// auxiliary tensors per layer; the backprop-through-time engine stores the
// whole history and is the exactness/memory baseline.
// ---------------------------------------------------------------------------

struct EngineResult {
  GradientSet grads;
  double loss = 0.0;        // mean per-timestep loss
  Vec prediction;           // mean accumulated output potential
  std::vector<Vec> firing_rates;
  std::uint64_t synops = 0;  // spike-triggered accumulates during the run
  int aux_tensor_count = 0;  // tensors retained beyond the current timestep
};

namespace detail {

struct StageParams {
  const LayerSpec* wl = nullptr;
  const LayerSpec* nl = nullptr;  // nullptr without normalization
  int weight_index = -1;
  int norm_index = -1;
  bool spiking = true;
  double scale = 1.0;
};

inline std::vector<StageParams> stage_params(const SpikingNetwork& net,
                                             const std::vector<StageInfo>& infos) {
  std::vector<StageParams> out;
  for (const StageInfo& si : infos) {
    StageParams sp;
    sp.weight_index = si.weight_layer;
    sp.norm_index = si.norm_layer;
    sp.wl = &net.layers[static_cast<std::size_t>(si.weight_layer)];
    sp.nl = si.norm_layer >= 0 ? &net.layers[static_cast<std::size_t>(si.norm_layer)] : nullptr;
    sp.spiking = si.spiking;
    sp.scale = sp.wl->current_scale();
    out.push_back(sp);
  }
  return out;
}

// Applies one stage's parameter gradients given g_i, the gradient w.r.t. the
// scaled current fed into the integrator at this step.
//   x_w:    what multiplies the weights (instant presyn for BPTT, presyn trace
//           for the forward-in-time rule)
//   x_norm: what multiplies gamma (instant normalized current or its trace)
//   x_clip: what pairs with the clip (instant scaled current or its trace)
//   bias_factor: 1 for instant rules, t for trace rules
inline void apply_stage_param_grads(const StageParams& sp, const Vec& g_i, const Vec& x_w,
                                    const Vec& x_norm, const Vec& x_clip, double bias_factor,
                                    const std::set<ParamId>& wanted, GradientSet& grads,
                                    Vec* error_below) {
  const Vec g_y = sp.scale * g_i;
  Vec g_c;
  if (sp.nl != nullptr) {
    const LayerSpec& n = *sp.nl;
    const ParamId gid{sp.norm_index, ParamId::Kind::Gamma};
    const ParamId bid{sp.norm_index, ParamId::Kind::Beta};
    const bool want_g = wanted.count(gid) != 0;
    const bool want_b = wanted.count(bid) != 0;
    g_c.resize(g_y.size());
    for (int ch = 0; ch < n.norm_channels; ++ch) {
      double acc_g = 0.0, acc_b = 0.0;
      for (int s = 0; s < n.norm_spatial; ++s) {
        const int i = ch * n.norm_spatial + s;
        acc_g += g_y(i) * x_norm(i);
        acc_b += g_y(i);
        g_c(i) = g_y(i) * n.gamma(ch) / n.sigma(ch);
      }
      if (want_g) grads.g[gid](ch, 0) += acc_g;
      if (want_b) grads.g[bid](ch, 0) += bias_factor * acc_b;
    }
  } else {
    g_c = g_y;
  }

  const ParamId wid{sp.weight_index, ParamId::Kind::Weights};
  const ParamId biasid{sp.weight_index, ParamId::Kind::Bias};
  const ParamId cid{sp.weight_index, ParamId::Kind::Clip};
  if (wanted.count(wid) != 0) accumulate_weight_grad(*sp.wl, g_c, x_w, grads.g[wid]);
  if (wanted.count(biasid) != 0) {
    grads.g[biasid].col(0) += bias_factor * reduce_bias_grad(*sp.wl, g_c);
  }
  if (sp.spiking && wanted.count(cid) != 0) {
    grads.g[cid](0, 0) += -g_i.dot(x_clip) / sp.wl->clip_alpha;
  }
  if (error_below != nullptr) *error_below = linear_backward_input(*sp.wl, g_c);
}

inline GradientSet zeroed_grads(const SpikingNetwork& net, const std::set<ParamId>& wanted) {
  GradientSet grads;
  for (const ParamId& id : wanted) {
    const LayerSpec& l = net.layers[static_cast<std::size_t>(id.layer)];
    switch (id.kind) {
      case ParamId::Kind::Weights:
        grads.g[id] = Mat::Zero(l.weights.rows(), l.weights.cols());
        break;
      case ParamId::Kind::Bias:
        grads.g[id] = Mat::Zero(l.bias.size(), 1);
        break;
      case ParamId::Kind::Gamma:
      case ParamId::Kind::Beta:
        grads.g[id] = Mat::Zero(l.norm_channels, 1);
        break;
      case ParamId::Kind::Clip:
        grads.g[id] = Mat::Zero(1, 1);
        break;
    }
  }
  return grads;
}

inline std::uint64_t spike_synops(const std::vector<Eigen::VectorXi>& fanouts, int k,
                                  const Vec& spikes) {
  std::uint64_t ops = 0;
  const Eigen::VectorXi& fan = fanouts[static_cast<std::size_t>(k)];
  for (Eigen::Index i = 0; i < spikes.size(); ++i) {
    if (spikes(i) != 0.0) ops += static_cast<std::uint64_t>(fan(static_cast<int>(i)));
  }
  return ops;
}

// Fan-out of each spiking stage's output into the next stage's weights.
inline std::vector<Eigen::VectorXi> consumer_fanouts(const SpikingNetwork& net,
                                                     const std::vector<StageParams>& stages) {
  std::vector<Eigen::VectorXi> fans;
  for (std::size_t k = 0; k + 1 < stages.size(); ++k) {
    fans.push_back(synaptic_fanout(*stages[k + 1].wl));
  }
  return fans;
}

}  // namespace detail

// Forward-in-time gradient: one pass, no stored history. At every step the
// instantaneous loss is propagated spatially (top of the network down) and
// each layer pairs the incoming error with running presynaptic traces, so the
// temporal sum is carried by the traces instead of by a tape. Resets are
// treated as non-differentiable pass-throughs.
inline EngineResult online_grad(const SpikingNetwork& net, const Vec& input, int timesteps,
                                const TimestepLossFn& loss, const std::set<ParamId>& wanted,
                                SpikeModel model = SpikeModel::Binary) {
  if (timesteps < 1) throw StructuralError("timestep count must be at least 1");
  Simulator sim(net, input, model);
  const auto stages = detail::stage_params(net, [&] {
    std::vector<StageInfo> infos;
    for (int k = 0; k < sim.stage_count(); ++k) infos.push_back(sim.info(k));
    return infos;
  }());
  const auto fanouts = detail::consumer_fanouts(net, stages);
  const int n_stages = static_cast<int>(stages.size());

  EngineResult res;
  res.grads = detail::zeroed_grads(net, wanted);

  // Running traces: the input trace plus, per spiking stage, the normalized
  // current trace (for gamma) and the scaled current trace (for the clip).
  // Presynaptic spike traces live in the simulator state itself.
  Vec input_trace = Vec::Zero(input.size());
  res.aux_tensor_count += 1;
  std::vector<Vec> current_trace(static_cast<std::size_t>(n_stages));
  std::vector<Vec> normalized_trace(static_cast<std::size_t>(n_stages));
  for (int k = 0; k < n_stages; ++k) {
    if (!stages[static_cast<std::size_t>(k)].spiking) continue;
    const int n = layer_output_size(*stages[static_cast<std::size_t>(k)].wl);
    current_trace[static_cast<std::size_t>(k)] = Vec::Zero(n);
    res.aux_tensor_count += 1;
    if (stages[static_cast<std::size_t>(k)].nl != nullptr) {
      normalized_trace[static_cast<std::size_t>(k)] = Vec::Zero(n);
      res.aux_tensor_count += 1;
    }
  }

  Vec prediction_sum = Vec::Zero(layer_output_size(*stages.back().wl));
  double loss_sum = 0.0;

  for (int t = 1; t <= timesteps; ++t) {
    sim.step();
    input_trace += sim.input();
    for (int k = 0; k < n_stages; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      if (!stages[ku].spiking) continue;
      current_trace[ku] += sim.stage(k).current;
      if (stages[ku].nl != nullptr) normalized_trace[ku] += sim.stage(k).normalized;
      if (k + 1 <= n_stages - 1) {
        res.synops += detail::spike_synops(fanouts, k, sim.stage(k).state.s);
      }
    }
    prediction_sum += sim.output_potential();

    Vec g_out;
    loss_sum += loss(t, sim.output_potential(), g_out);
    if (g_out.size() != prediction_sum.size()) {
      throw StructuralError("loss gradient length mismatch");
    }

    // Spatial backward at this step. The error entering each stage pairs with
    // that stage's traces, realizing the running temporal sum.
    Vec error = g_out;  // gradient w.r.t. the output accumulator potential
    for (int k = n_stages - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      const detail::StageParams& sp = stages[ku];
      Vec g_i;
      if (sp.spiking) {
        const Vec& v = sim.stage(k).state.v;
        g_i.resize(v.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) {
          g_i(i) = error(i) * surrogate_grad(v(i), sp.wl->v_th, net.surrogate);
        }
      } else {
        g_i = error;
      }
      const Vec& x_w = k == 0 ? input_trace : sim.stage(k - 1).state.trace;
      Vec error_below;
      detail::apply_stage_param_grads(sp, g_i, x_w, normalized_trace[ku], current_trace[ku],
                                      static_cast<double>(t), wanted, res.grads,
                                      k > 0 ? &error_below : nullptr);
      if (k > 0) error = std::move(error_below);
    }
  }

  const double w = 1.0 / static_cast<double>(timesteps);
  res.grads.scale(w);
  res.loss = loss_sum * w;
  res.prediction = prediction_sum / static_cast<double>(timesteps);
  for (int k = 0; k + 1 < n_stages; ++k) {
    res.firing_rates.push_back(sim.stage(k).state.trace / static_cast<double>(timesteps));
  }
  return res;
}

// Spec-shaped convenience wrapper: entropy objective, every parameter.
inline EngineResult online_step_grad(const SpikingNetwork& net, const Vec& input, int timesteps,
                                     double temperature) {
  return online_grad(net, input, timesteps, entropy_timestep_loss(temperature),
                     select_adapt_params(net, ParamSubset::All));
}

// Full backprop through time, including the reset paths: the adjoint of the
// membrane recursion v[t+1] = v[t] - v_th s[t] + I[t+1] is
//   lambda[t] = lambda[t+1] + sg'(v[t]) * (e_spatial[t] - v_th * lambda[t+1])
// with the surrogate in place of the spike derivative. Stores the entire
// history; exists as the exactness and memory baseline.
inline EngineResult bptt_grad(const SpikingNetwork& net, const Vec& input, int timesteps,
                              const TimestepLossFn& loss, const std::set<ParamId>& wanted,
                              SpikeModel model = SpikeModel::Binary) {
  if (timesteps < 1) throw StructuralError("timestep count must be at least 1");
  Simulator sim(net, input, model);
  const auto stages = detail::stage_params(net, [&] {
    std::vector<StageInfo> infos;
    for (int k = 0; k < sim.stage_count(); ++k) infos.push_back(sim.info(k));
    return infos;
  }());
  const auto fanouts = detail::consumer_fanouts(net, stages);
  const int n_stages = static_cast<int>(stages.size());

  EngineResult res;
  res.grads = detail::zeroed_grads(net, wanted);

  // Tape: one entry per timestep per stage.
  std::vector<std::vector<Vec>> presyn(static_cast<std::size_t>(n_stages));
  std::vector<std::vector<Vec>> membrane(static_cast<std::size_t>(n_stages));
  std::vector<std::vector<Vec>> normalized(static_cast<std::size_t>(n_stages));
  std::vector<std::vector<Vec>> current(static_cast<std::size_t>(n_stages));
  std::vector<Vec> out_potentials;

  Vec prediction_sum = Vec::Zero(layer_output_size(*stages.back().wl));

  for (int t = 1; t <= timesteps; ++t) {
    sim.step();
    for (int k = 0; k < n_stages; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      presyn[ku].push_back(sim.stage(k).presyn);
      res.aux_tensor_count += 1;
      current[ku].push_back(sim.stage(k).current);
      res.aux_tensor_count += 1;
      if (stages[ku].spiking) {
        membrane[ku].push_back(sim.stage(k).state.v);
        res.aux_tensor_count += 1;
        if (stages[ku].nl != nullptr) {
          normalized[ku].push_back(sim.stage(k).normalized);
          res.aux_tensor_count += 1;
        }
        if (k + 1 <= n_stages - 1) {
          res.synops += detail::spike_synops(fanouts, k, sim.stage(k).state.s);
        }
      }
    }
    out_potentials.push_back(sim.output_potential());
    res.aux_tensor_count += 1;
    prediction_sum += sim.output_potential();
  }

  // Adjoint sweep, t = T .. 1, top stage first within each step.
  std::vector<Vec> lambda_next(static_cast<std::size_t>(n_stages));
  for (int k = 0; k < n_stages; ++k) {
    lambda_next[static_cast<std::size_t>(k)] =
        Vec::Zero(layer_output_size(*stages[static_cast<std::size_t>(k)].wl));
  }

  double loss_sum = 0.0;
  std::vector<Vec> spatial_error(static_cast<std::size_t>(n_stages));
  for (int t = timesteps; t >= 1; --t) {
    const auto tu = static_cast<std::size_t>(t - 1);
    for (int k = n_stages - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      const detail::StageParams& sp = stages[ku];
      Vec lambda;
      if (!sp.spiking) {
        Vec g_out;
        loss_sum += loss(t, out_potentials[tu], g_out);
        lambda = lambda_next[ku] + g_out;
      } else {
        const Vec& v = membrane[ku][tu];
        const Vec& e = spatial_error[ku];  // filled by stage k+1 below
        lambda.resize(v.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) {
          const double sg = surrogate_grad(v(i), sp.wl->v_th, net.surrogate);
          lambda(i) = lambda_next[ku](i) + sg * (e(i) - sp.wl->v_th * lambda_next[ku](i));
        }
      }
      Vec error_below;
      detail::apply_stage_param_grads(
          sp, lambda, presyn[ku][tu],
          sp.nl != nullptr ? normalized[ku][tu] : Vec(), sp.spiking ? current[ku][tu] : Vec(),
          1.0, wanted, res.grads, k > 0 ? &error_below : nullptr);
      if (k > 0) spatial_error[static_cast<std::size_t>(k - 1)] = std::move(error_below);
      lambda_next[ku] = std::move(lambda);
    }
  }

  const double w = 1.0 / static_cast<double>(timesteps);
  res.grads.scale(w);
  res.loss = loss_sum * w;
  res.prediction = prediction_sum / static_cast<double>(timesteps);
  for (int k = 0; k + 1 < n_stages; ++k) {
    res.firing_rates.push_back(sim.stage(k).state.trace / static_cast<double>(timesteps));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Updates.
// ---------------------------------------------------------------------------

// Descent step on the rate ceiling with its L2 pull toward zero:
//   alpha <- alpha - lr * (dL/dalpha + 2 * epsilon * alpha)
// floored at 1e-3 of the ceiling's conversion-time value.
inline double update_clip(double alpha, double grad_alpha, double lr, double epsilon,
                          double alpha_ref) {
  const double updated = alpha - lr * (grad_alpha + 2.0 * epsilon * alpha);
  return std::max(updated, 1e-3 * alpha_ref);
}

// Re-estimates normalization statistics from the raw (pre-normalization)
// currents the batch actually produces, pooled over samples, timesteps and
// spatial positions. Replaces mu/sigma outright; population variance with a
// 1e-5 floor inside the square root.
inline void bn_refresh(SpikingNetwork& net, const std::vector<Vec>& inputs, int timesteps,
                       SpikeModel model = SpikeModel::Binary) {
  if (inputs.size() < 2) throw StructuralError("stat refresh needs at least 2 samples");
  if (timesteps < 1) throw StructuralError("timestep count must be at least 1");
  const auto infos = compile_stages(net);

  struct Acc {
    Vec sum, sumsq;
    double count = 0.0;
  };
  std::map<int, Acc> accs;  // norm layer index -> accumulator
  for (const StageInfo& si : infos) {
    if (si.norm_layer < 0) continue;
    const LayerSpec& n = net.layers[static_cast<std::size_t>(si.norm_layer)];
    accs[si.norm_layer] = {Vec::Zero(n.norm_channels), Vec::Zero(n.norm_channels), 0.0};
  }
  if (accs.empty()) return;

  for (const Vec& x : inputs) {
    Simulator sim(net, x, model);
    for (int t = 0; t < timesteps; ++t) {
      sim.step();
      for (int k = 0; k < sim.stage_count(); ++k) {
        const StageInfo& si = sim.info(k);
        if (si.norm_layer < 0) continue;
        const LayerSpec& n = net.layers[static_cast<std::size_t>(si.norm_layer)];
        Acc& a = accs[si.norm_layer];
        const Vec& raw = sim.stage(k).raw;
        for (int ch = 0; ch < n.norm_channels; ++ch) {
          const auto seg = raw.segment(ch * n.norm_spatial, n.norm_spatial);
          a.sum(ch) += seg.sum();
          a.sumsq(ch) += seg.squaredNorm();
        }
        a.count += n.norm_spatial;
      }
    }
  }

  for (auto& [idx, a] : accs) {
    LayerSpec& n = net.layers[static_cast<std::size_t>(idx)];
    for (int ch = 0; ch < n.norm_channels; ++ch) {
      const double mean = a.sum(ch) / a.count;
      const double var = a.sumsq(ch) / a.count - mean * mean;
      if (!std::isfinite(mean) || !std::isfinite(var)) {
        throw NumericError("non-finite normalization statistics");
      }
      n.mu(ch) = mean;
      n.sigma(ch) = std::sqrt(std::max(var, 1e-5));
    }
  }
}

// ---------------------------------------------------------------------------
// Batch driver.
// ---------------------------------------------------------------------------

enum class AdaptMode { Online, BpttOracle, BnStatsOnly };

struct AdaptConfig {
  int timesteps = 8;
  double temperature = 4.0;
  double learning_rate = 1e-3;
  double epsilon = 1e-3;  // L2 pull on the rate ceilings
  AdaptMode mode = AdaptMode::Online;
  ParamSubset subset = ParamSubset::AffineAndClip;
  bool refresh_stats = true;

  void validate() const {
    if (timesteps < 1) throw StructuralError("timesteps must be at least 1");
    if (!(temperature > 0.0)) throw StructuralError("temperature must be positive");
    if (!(learning_rate >= 0.0)) throw StructuralError("learning rate must be non-negative");
    if (!(epsilon >= 0.0)) throw StructuralError("epsilon must be non-negative");
  }
};

struct AdaptBatchResult {
  Mat predictions;  // one row per sample: mean accumulated output potentials
  double mean_step_loss = 0.0;
  std::vector<Vec> mean_firing_rates;
  std::uint64_t synops = 0;
  int aux_tensor_count = 0;
};

inline Mat batch_predictions(const SpikingNetwork& net, const std::vector<Vec>& inputs,
                             int timesteps) {
  if (inputs.empty()) throw StructuralError("empty batch");
  Mat preds;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const RunTrace trace = forward(net, inputs[i], timesteps);
    const Vec p = trace.prediction();
    if (i == 0) preds.resize(static_cast<Eigen::Index>(inputs.size()), p.size());
    preds.row(static_cast<Eigen::Index>(i)) = p.transpose();
  }
  return preds;
}

// One unsupervised adaptation step on one batch: optional stat refresh, then
// a gradient pass whose predictions are also the batch's reported
// predictions, then a single SGD-style update of the selected parameters.
// Numeric failures roll the statistics back and leave parameters untouched.
inline AdaptBatchResult adapt_batch(SpikingNetwork& net, const std::vector<Vec>& inputs,
                                    const AdaptConfig& cfg, const TimestepLossFn& loss) {
  cfg.validate();
  if (inputs.empty()) throw StructuralError("empty batch");

  // Snapshot statistics so a failed pass can restore them.
  std::vector<std::pair<int, std::pair<Vec, Vec>>> saved_stats;
  const bool refresh = cfg.refresh_stats && inputs.size() >= 2;
  if (refresh) {
    for (int i = 0; i < static_cast<int>(net.layers.size()); ++i) {
      const LayerSpec& l = net.layers[static_cast<std::size_t>(i)];
      if (l.kind == LayerKind::Normalization) saved_stats.push_back({i, {l.mu, l.sigma}});
    }
    bn_refresh(net, inputs, cfg.timesteps);
  }

  AdaptBatchResult res;
  const std::set<ParamId> wanted =
      cfg.mode == AdaptMode::BnStatsOnly ? std::set<ParamId>{} : select_adapt_params(net, cfg.subset);

  GradientSet total = detail::zeroed_grads(net, wanted);
  try {
    const auto b = static_cast<Eigen::Index>(inputs.size());
    for (Eigen::Index i = 0; i < b; ++i) {
      EngineResult er;
      if (cfg.mode == AdaptMode::BnStatsOnly) {
        const RunTrace trace = forward(net, inputs[static_cast<std::size_t>(i)], cfg.timesteps);
        er.prediction = trace.prediction();
        Vec scratch;
        for (int t = 1; t <= cfg.timesteps; ++t) {
          er.loss += loss(t, trace.output_potentials.row(t - 1).transpose(), scratch);
        }
        er.loss /= cfg.timesteps;
        er.firing_rates = trace.firing_rates();
        const auto stages = detail::stage_params(net, compile_stages(net));
        const auto fanouts = detail::consumer_fanouts(net, stages);
        for (std::size_t k = 0; k + 1 < stages.size(); ++k) {
          for (int t = 0; t < cfg.timesteps; ++t) {
            er.synops += detail::spike_synops(fanouts, static_cast<int>(k),
                                              trace.spikes[k].row(t).transpose());
          }
        }
      } else if (cfg.mode == AdaptMode::Online) {
        er = online_grad(net, inputs[static_cast<std::size_t>(i)], cfg.timesteps, loss, wanted);
      } else {
        er = bptt_grad(net, inputs[static_cast<std::size_t>(i)], cfg.timesteps, loss, wanted);
      }

      if (i == 0) {
        res.predictions.resize(b, er.prediction.size());
        res.mean_firing_rates.assign(er.firing_rates.begin(), er.firing_rates.end());
      } else {
        for (std::size_t k = 0; k < er.firing_rates.size(); ++k) {
          res.mean_firing_rates[k] += er.firing_rates[k];
        }
      }
      res.predictions.row(i) = er.prediction.transpose();
      res.mean_step_loss += er.loss;
      res.synops += er.synops;
      res.aux_tensor_count = std::max(res.aux_tensor_count, er.aux_tensor_count);
      total.add_scaled(er.grads, 1.0);
    }

    res.mean_step_loss /= static_cast<double>(inputs.size());
    for (Vec& r : res.mean_firing_rates) r /= static_cast<double>(inputs.size());
    total.scale(1.0 / static_cast<double>(inputs.size()));
    if (!total.all_finite() || !std::isfinite(res.mean_step_loss)) {
      throw NumericError("non-finite gradients in adaptation step");
    }
  } catch (...) {
    for (const auto& [idx, stats] : saved_stats) {
      net.layers[static_cast<std::size_t>(idx)].mu = stats.first;
      net.layers[static_cast<std::size_t>(idx)].sigma = stats.second;
    }
    throw;
  }

  if (cfg.mode != AdaptMode::BnStatsOnly && cfg.learning_rate > 0.0) {
    for (const auto& [id, g] : total.g) {
      LayerSpec& l = net.layers[static_cast<std::size_t>(id.layer)];
      switch (id.kind) {
        case ParamId::Kind::Weights: l.weights -= cfg.learning_rate * g; break;
        case ParamId::Kind::Bias: l.bias -= cfg.learning_rate * g.col(0); break;
        case ParamId::Kind::Gamma: l.gamma -= cfg.learning_rate * g.col(0); break;
        case ParamId::Kind::Beta: l.beta -= cfg.learning_rate * g.col(0); break;
        case ParamId::Kind::Clip:
          l.clip_alpha =
              update_clip(l.clip_alpha, g(0, 0), cfg.learning_rate, cfg.epsilon, l.alpha_ref);
          break;
      }
    }
  }
  return res;
}

inline AdaptBatchResult adapt_batch(SpikingNetwork& net, const std::vector<Vec>& inputs,
                                    const AdaptConfig& cfg) {
  return adapt_batch(net, inputs, cfg, entropy_timestep_loss(cfg.temperature));
}

}  // namespace snnadapt
