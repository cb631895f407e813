#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "ann.hpp"
#include "data.hpp"
#include "detect.hpp"
#include "layers.hpp"
#include "rng.hpp"

namespace snnadapt {

// Plain SGD training of the source network, with train-mode batch statistics
// in the normalization layers and running statistics written back for
// inference. Only needed to produce the pretrained models the rest of the
// pipeline consumes, so it stays deliberately simple.

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double bn_momentum = 0.1;
  std::uint64_t seed = 1;
};

// ---------------------------------------------------------------------------
// Model builders (He-style init).
// ---------------------------------------------------------------------------

inline LayerSpec dense_layer(int in, int out, SplitMix64& rng, double gain = 2.0) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.weights = Mat::NullaryExpr(out, in, [&] { return rng.gaussian(0.0, std::sqrt(gain / in)); });
  l.bias = Vec::Zero(out);
  return l;
}

inline LayerSpec output_layer(int in, int out, SplitMix64& rng) {
  LayerSpec l = dense_layer(in, out, rng, 1.0);
  l.kind = LayerKind::OutputAccumulator;
  return l;
}

inline LayerSpec conv_layer(const Conv2dGeom& geom, SplitMix64& rng) {
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.conv = geom;
  const double fan_in = geom.patch_size();
  l.weights = Mat::NullaryExpr(geom.out_channels, geom.patch_size(),
                               [&] { return rng.gaussian(0.0, std::sqrt(2.0 / fan_in)); });
  l.bias = Vec::Zero(geom.out_channels);
  return l;
}

inline LayerSpec norm_layer(int channels, int spatial) {
  LayerSpec l;
  l.kind = LayerKind::Normalization;
  l.norm_channels = channels;
  l.norm_spatial = spatial;
  l.mu = Vec::Zero(channels);
  l.sigma = Vec::Ones(channels);
  l.gamma = Vec::Ones(channels);
  l.beta = Vec::Zero(channels);
  return l;
}

inline AnnModel make_mlp(int input, const std::vector<int>& hidden, int out, bool with_norm,
                         SplitMix64 rng) {
  AnnModel m;
  m.input_size = input;
  int cur = input;
  for (int h : hidden) {
    m.layers.push_back(dense_layer(cur, h, rng));
    if (with_norm) m.layers.push_back(norm_layer(h, 1));
    cur = h;
  }
  m.layers.push_back(output_layer(cur, out, rng));
  validate(m);
  return m;
}

// Small conv stack ending in a dense head; `head_out` is the flat head size.
inline AnnModel make_convnet(int in_channels, int in_h, int in_w,
                             const std::vector<std::array<int, 3>>& convs,  // {out_c, stride, pad}
                             int head_out, bool with_norm, SplitMix64 rng) {
  AnnModel m;
  m.input_size = in_channels * in_h * in_w;
  int c = in_channels, h = in_h, w = in_w;
  for (const auto& spec : convs) {
    Conv2dGeom g;
    g.in_channels = c;
    g.in_h = h;
    g.in_w = w;
    g.out_channels = spec[0];
    g.kernel = 3;
    g.stride = spec[1];
    g.pad = spec[2];
    m.layers.push_back(conv_layer(g, rng));
    if (with_norm) m.layers.push_back(norm_layer(g.out_channels, g.out_h() * g.out_w()));
    c = g.out_channels;
    h = g.out_h();
    w = g.out_w();
  }
  m.layers.push_back(output_layer(c * h * w, head_out, rng));
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

namespace detail {

struct TrainStage {
  int weight_idx = -1;
  int norm_idx = -1;
  bool hidden = true;  // ReLU after the stage
};

inline std::vector<TrainStage> train_stages(const AnnModel& m) {
  std::vector<TrainStage> out;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& l = m.layers[static_cast<std::size_t>(i)];
    if (!is_weight_layer(l.kind)) continue;
    TrainStage s;
    s.weight_idx = i;
    s.hidden = l.kind != LayerKind::OutputAccumulator;
    if (i + 1 < static_cast<int>(m.layers.size()) &&
        m.layers[static_cast<std::size_t>(i + 1)].kind == LayerKind::Normalization) {
      s.norm_idx = i + 1;
    }
    out.push_back(s);
  }
  return out;
}

struct NormRunning {
  Vec mean, var;
};

struct StageCache {
  std::vector<Vec> x_in, z, xhat, out;
  Vec batch_mean, batch_sigma;  // sqrt(var + 1e-5)
};

// Train-mode batch forward; fills caches for the backward pass.
inline void train_forward(const AnnModel& m, const std::vector<TrainStage>& stages,
                          const std::vector<const Vec*>& batch, std::vector<StageCache>& caches) {
  const std::size_t B = batch.size();
  caches.assign(stages.size(), {});
  std::vector<Vec> x(B);
  for (std::size_t b = 0; b < B; ++b) x[b] = *batch[b];

  for (std::size_t k = 0; k < stages.size(); ++k) {
    const TrainStage& st = stages[k];
    const LayerSpec& wl = m.layers[static_cast<std::size_t>(st.weight_idx)];
    StageCache& cache = caches[k];
    cache.x_in = x;
    cache.z.resize(B);
    for (std::size_t b = 0; b < B; ++b) cache.z[b] = linear_forward(wl, x[b]);

    std::vector<Vec> y = cache.z;
    if (st.norm_idx >= 0) {
      const LayerSpec& nl = m.layers[static_cast<std::size_t>(st.norm_idx)];
      const int ch = nl.norm_channels, sp = nl.norm_spatial;
      const double n = static_cast<double>(B) * sp;
      cache.batch_mean = Vec::Zero(ch);
      cache.batch_sigma = Vec::Zero(ch);
      for (std::size_t b = 0; b < B; ++b) {
        for (int c = 0; c < ch; ++c) cache.batch_mean(c) += cache.z[b].segment(c * sp, sp).sum();
      }
      cache.batch_mean /= n;
      for (std::size_t b = 0; b < B; ++b) {
        for (int c = 0; c < ch; ++c) {
          cache.batch_sigma(c) +=
              (cache.z[b].segment(c * sp, sp).array() - cache.batch_mean(c)).square().sum();
        }
      }
      cache.batch_sigma = ((cache.batch_sigma / n).array() + 1e-5).sqrt();

      cache.xhat.resize(B);
      for (std::size_t b = 0; b < B; ++b) {
        cache.xhat[b].resize(cache.z[b].size());
        for (int c = 0; c < ch; ++c) {
          for (int s = 0; s < sp; ++s) {
            const int i = c * sp + s;
            cache.xhat[b](i) = (cache.z[b](i) - cache.batch_mean(c)) / cache.batch_sigma(c);
            y[b](i) = nl.gamma(c) * cache.xhat[b](i) + nl.beta(c);
          }
        }
      }
    }
    cache.out.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      cache.out[b] = st.hidden ? Vec(y[b].cwiseMax(0.0)) : y[b];
    }
    x = cache.out;
  }
}

}  // namespace detail

// Per-sample gradient of the training objective w.r.t. the head output.
// Returns the loss value.
using HeadLossFn = std::function<double(std::size_t sample_index, const Vec& head_out, Vec& grad)>;

// One SGD epoch over the batch list; returns the mean loss.
inline double train_epoch(AnnModel& m, const std::vector<const Vec*>& inputs,
                          const HeadLossFn& loss_fn, const TrainConfig& cfg,
                          std::vector<Mat>& vel_w, std::vector<Vec>& vel_b,
                          std::vector<Vec>& vel_gamma, std::vector<Vec>& vel_beta,
                          std::vector<detail::NormRunning>& running,
                          const std::vector<std::size_t>& order,
                          const std::vector<std::size_t>& sample_ids) {
  const auto stages = detail::train_stages(m);
  double loss_sum = 0.0;
  std::size_t n_seen = 0;

  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
    std::vector<const Vec*> batch;
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(inputs[order[i]]);
      ids.push_back(sample_ids[order[i]]);
    }
    const std::size_t B = batch.size();

    std::vector<detail::StageCache> caches;
    detail::train_forward(m, stages, batch, caches);

    // Update running statistics.
    for (std::size_t k = 0; k < stages.size(); ++k) {
      if (stages[k].norm_idx < 0) continue;
      detail::NormRunning& r = running[k];
      const Vec batch_var =
          caches[k].batch_sigma.array().square() - 1e-5;  // undo the eps for bookkeeping
      r.mean = (1.0 - cfg.bn_momentum) * r.mean + cfg.bn_momentum * caches[k].batch_mean;
      r.var = (1.0 - cfg.bn_momentum) * r.var + cfg.bn_momentum * batch_var;
    }

    // Loss and head gradients.
    std::vector<Vec> g(B);
    for (std::size_t b = 0; b < B; ++b) {
      Vec grad;
      loss_sum += loss_fn(ids[b], caches.back().out[b], grad);
      g[b] = std::move(grad);
      ++n_seen;
    }

    // Backward.
    std::vector<Mat> gw(stages.size());
    std::vector<Vec> gb(stages.size()), ggamma(stages.size()), gbeta(stages.size());
    for (std::size_t k = stages.size(); k-- > 0;) {
      const detail::TrainStage& st = stages[k];
      const LayerSpec& wl = m.layers[static_cast<std::size_t>(st.weight_idx)];
      detail::StageCache& cache = caches[k];
      gw[k] = Mat::Zero(wl.weights.rows(), wl.weights.cols());
      gb[k] = Vec::Zero(wl.bias.size());

      if (st.hidden) {
        for (std::size_t b = 0; b < B; ++b) {
          for (Eigen::Index i = 0; i < g[b].size(); ++i) {
            if (cache.out[b](i) <= 0.0) g[b](i) = 0.0;
          }
        }
      }

      if (st.norm_idx >= 0) {
        const LayerSpec& nl = m.layers[static_cast<std::size_t>(st.norm_idx)];
        const int ch = nl.norm_channels, sp = nl.norm_spatial;
        const double n = static_cast<double>(B) * sp;
        ggamma[k] = Vec::Zero(ch);
        gbeta[k] = Vec::Zero(ch);
        Vec sum_gxhat = Vec::Zero(ch), sum_gxhat_xhat = Vec::Zero(ch);
        for (std::size_t b = 0; b < B; ++b) {
          for (int c = 0; c < ch; ++c) {
            for (int s = 0; s < sp; ++s) {
              const int i = c * sp + s;
              ggamma[k](c) += g[b](i) * cache.xhat[b](i);
              gbeta[k](c) += g[b](i);
              const double gxhat = g[b](i) * nl.gamma(c);
              sum_gxhat(c) += gxhat;
              sum_gxhat_xhat(c) += gxhat * cache.xhat[b](i);
            }
          }
        }
        // Standard batch-statistics backward, population variance.
        for (std::size_t b = 0; b < B; ++b) {
          for (int c = 0; c < ch; ++c) {
            for (int s = 0; s < sp; ++s) {
              const int i = c * sp + s;
              const double gxhat = g[b](i) * nl.gamma(c);
              g[b](i) = (gxhat - sum_gxhat(c) / n - cache.xhat[b](i) * sum_gxhat_xhat(c) / n) /
                        cache.batch_sigma(c);
            }
          }
        }
      }

      std::vector<Vec> g_below(B);
      for (std::size_t b = 0; b < B; ++b) {
        accumulate_weight_grad(wl, g[b], cache.x_in[b], gw[k]);
        gb[k] += reduce_bias_grad(wl, g[b]);
        if (k > 0) g_below[b] = linear_backward_input(wl, g[b]);
      }
      if (k > 0) g = std::move(g_below);
    }

    // SGD with momentum.
    const double inv_b = 1.0 / static_cast<double>(B);
    for (std::size_t k = 0; k < stages.size(); ++k) {
      LayerSpec& wl = m.layers[static_cast<std::size_t>(stages[k].weight_idx)];
      vel_w[k] = cfg.momentum * vel_w[k] - cfg.lr * (gw[k] * inv_b + cfg.weight_decay * wl.weights);
      vel_b[k] = cfg.momentum * vel_b[k] - cfg.lr * (gb[k] * inv_b);
      wl.weights += vel_w[k];
      wl.bias += vel_b[k];
      if (stages[k].norm_idx >= 0) {
        LayerSpec& nl = m.layers[static_cast<std::size_t>(stages[k].norm_idx)];
        vel_gamma[k] = cfg.momentum * vel_gamma[k] - cfg.lr * (ggamma[k] * inv_b);
        vel_beta[k] = cfg.momentum * vel_beta[k] - cfg.lr * (gbeta[k] * inv_b);
        nl.gamma += vel_gamma[k];
        nl.beta += vel_beta[k];
      }
    }
  }
  return loss_sum / static_cast<double>(n_seen);
}

// Trains in place with the given per-sample head loss; writes running
// statistics into the normalization layers at the end. Returns the final
// epoch's mean loss.
inline double train_model(AnnModel& m, const std::vector<Vec>& inputs, const HeadLossFn& loss_fn,
                          const TrainConfig& cfg) {
  validate(m);
  if (inputs.empty()) throw StructuralError("empty training set");
  const auto stages = detail::train_stages(m);

  std::vector<Mat> vel_w(stages.size());
  std::vector<Vec> vel_b(stages.size()), vel_gamma(stages.size()), vel_beta(stages.size());
  std::vector<detail::NormRunning> running(stages.size());
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const LayerSpec& wl = m.layers[static_cast<std::size_t>(stages[k].weight_idx)];
    vel_w[k] = Mat::Zero(wl.weights.rows(), wl.weights.cols());
    vel_b[k] = Vec::Zero(wl.bias.size());
    if (stages[k].norm_idx >= 0) {
      const LayerSpec& nl = m.layers[static_cast<std::size_t>(stages[k].norm_idx)];
      vel_gamma[k] = Vec::Zero(nl.norm_channels);
      vel_beta[k] = Vec::Zero(nl.norm_channels);
      running[k].mean = Vec::Zero(nl.norm_channels);
      running[k].var = Vec::Ones(nl.norm_channels);
    }
  }

  std::vector<const Vec*> ptrs;
  std::vector<std::size_t> sample_ids;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ptrs.push_back(&inputs[i]);
    sample_ids.push_back(i);
  }

  SplitMix64 shuffle_rng = SplitMix64(cfg.seed).child(0x73687566);  // "shuf"
  double last_loss = 0.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, shuffle_rng);
    last_loss = train_epoch(m, ptrs, loss_fn, cfg, vel_w, vel_b, vel_gamma, vel_beta, running,
                            order, sample_ids);
  }

  for (std::size_t k = 0; k < stages.size(); ++k) {
    if (stages[k].norm_idx < 0) continue;
    LayerSpec& nl = m.layers[static_cast<std::size_t>(stages[k].norm_idx)];
    nl.mu = running[k].mean;
    nl.sigma = (running[k].var.array() + 1e-5).sqrt();
  }
  validate(m);
  return last_loss;
}

// ---------------------------------------------------------------------------
// Task-specific objectives and evaluation.
// ---------------------------------------------------------------------------

inline double train_classifier(AnnModel& m, const Dataset& ds, const TrainConfig& cfg) {
  if (!ds.labeled()) throw StructuralError("classification training needs labels");
  const HeadLossFn loss = [&ds](std::size_t idx, const Vec& logits, Vec& grad) {
    const Vec p = softmax_with_temperature(logits, 1.0);
    const int y = ds.labels[idx];
    grad = p;
    grad(y) -= 1.0;
    return -std::log(std::max(p(y), 1e-300));
  };
  return train_model(m, ds.images, loss, cfg);
}

inline double classifier_accuracy(const AnnModel& m, const Dataset& ds) {
  if (!ds.labeled()) throw StructuralError("accuracy needs labels");
  int correct = 0;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const Vec logits = ann_forward(m, ds.images[i]).back();
    Eigen::Index arg;
    logits.maxCoeff(&arg);
    if (static_cast<int>(arg) == ds.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.images.size());
}

// Grid-cell detection objective: binary objectness per cell (empty cells
// down-weighted), cross-entropy over classes and a squared box penalty on
// object cells.
inline double train_detector(AnnModel& m, const Dataset& ds, const DetectionGrid& grid,
                             const TrainConfig& cfg) {
  if (ds.objects.size() != ds.images.size()) throw StructuralError("detection training needs boxes");
  constexpr double kNoObjWeight = 0.5;
  constexpr double kBoxWeight = 5.0;

  const HeadLossFn loss = [&ds, grid](std::size_t idx, const Vec& head, Vec& grad) {
    const DetectionHeadOutput out = split_head(grid, head);
    grad = Vec::Zero(head.size());
    double total = 0.0;

    std::vector<int> cell_obj(static_cast<std::size_t>(grid.cells()), -1);
    for (std::size_t o = 0; o < ds.objects[idx].size(); ++o) {
      const GroundTruthBox& g = ds.objects[idx][o];
      const int gx = std::clamp(static_cast<int>(g.cx * grid.w), 0, grid.w - 1);
      const int gy = std::clamp(static_cast<int>(g.cy * grid.h), 0, grid.h - 1);
      cell_obj[static_cast<std::size_t>(gy * grid.w + gx)] = static_cast<int>(o);
    }

    for (int cell = 0; cell < grid.cells(); ++cell) {
      const int obj = cell_obj[static_cast<std::size_t>(cell)];
      const double q = out.conf_logit(cell);
      const double p = sigmoid(q);
      const double target = obj >= 0 ? 1.0 : 0.0;
      const double w = obj >= 0 ? 1.0 : kNoObjWeight;
      total += -w * (target * std::log(std::max(p, 1e-12)) +
                     (1.0 - target) * std::log(std::max(1.0 - p, 1e-12)));
      grad(cell) += w * (p - target);

      if (obj < 0) continue;
      const GroundTruthBox& g = ds.objects[idx][static_cast<std::size_t>(obj)];

      const Vec u = out.class_logits(cell);
      const Vec pc = softmax_with_temperature(u, 1.0);
      total += -std::log(std::max(pc(g.cls), 1e-300));
      for (int c = 0; c < grid.classes; ++c) {
        grad(grid.cells() * (1 + c) + cell) += pc(c) - (c == g.cls ? 1.0 : 0.0);
      }

      const double gt[4] = {g.cx, g.cy, g.w, g.h};
      const int base = grid.cells() * (1 + grid.classes);
      for (int k = 0; k < 4; ++k) {
        const double raw = head(base + grid.cells() * k + cell);
        const double pred = sigmoid(raw);
        total += kBoxWeight * (pred - gt[k]) * (pred - gt[k]);
        grad(base + grid.cells() * k + cell) +=
            kBoxWeight * 2.0 * (pred - gt[k]) * pred * (1.0 - pred);
      }
    }
    return total;
  };
  return train_model(m, ds.images, loss, cfg);
}

inline double detector_map(const AnnModel& m, const Dataset& ds, const DetectionGrid& grid) {
  std::vector<DetectionHeadOutput> preds;
  for (const Vec& img : ds.images) preds.push_back(split_head(grid, ann_forward(m, img).back()));
  return evaluate_map(preds, ds.objects);
}

inline double detector_map(const SpikingNetwork& net, const Dataset& ds, const DetectionGrid& grid,
                           int timesteps) {
  std::vector<DetectionHeadOutput> preds;
  for (const Vec& img : ds.images) preds.push_back(toy_head_forward(net, img, timesteps, grid));
  return evaluate_map(preds, ds.objects);
}

}  // namespace snnadapt
