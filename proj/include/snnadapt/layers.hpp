#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "errors.hpp"

namespace snnadapt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class LayerKind {
  Dense,              // y = W x + b, thresholded (spiking) after conversion
  Conv2d,             // 2d convolution over channels-first input, spiking
  Normalization,      // per-channel (x - mu)/sigma * gamma + beta
  OutputAccumulator,  // linear head; potentials accumulate, never spike
};

struct Conv2dGeom {
  int in_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int in_size() const { return in_channels * in_h * in_w; }
  int out_size() const { return out_channels * out_h() * out_w(); }
  int patch_size() const { return in_channels * kernel * kernel; }
};

// One layer of either a source (ANN) or converted (spiking) model. Unused
// fields stay at their defaults for kinds that do not need them. Tensors are
// channels-first and row-major in meaning: a conv kernel row holds one output
// channel, columns indexed by (in_channel * k + ky) * k + kx.
struct LayerSpec {
  LayerKind kind = LayerKind::Dense;

  // Dense / Conv2d / OutputAccumulator
  Mat weights;  // dense & head: out x in. conv: out_channels x patch_size
  Vec bias;     // length out (per output channel for conv)
  Conv2dGeom conv;

  // Spiking-only dynamics (set by conversion, identity defaults otherwise)
  double v_th = 1.0;
  double clip_alpha = 1.0;  // learnable rate ceiling
  double alpha_ref = 1.0;   // ceiling at conversion time; current scale = alpha_ref / clip_alpha

  // Normalization
  Vec mu, sigma, gamma, beta;  // one entry per channel
  int norm_channels = 0;
  int norm_spatial = 1;  // positions sharing each channel's parameters

  double current_scale() const { return alpha_ref / clip_alpha; }
};

inline bool is_weight_layer(LayerKind k) {
  return k == LayerKind::Dense || k == LayerKind::Conv2d || k == LayerKind::OutputAccumulator;
}

inline int layer_input_size(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv2d: return l.conv.in_size();
    case LayerKind::Normalization: return l.norm_channels * l.norm_spatial;
    default: return static_cast<int>(l.weights.cols());
  }
}

inline int layer_output_size(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv2d: return l.conv.out_size();
    case LayerKind::Normalization: return l.norm_channels * l.norm_spatial;
    default: return static_cast<int>(l.weights.rows());
  }
}

// y = W x + b for dense/head layers, direct convolution for conv layers.
inline Vec linear_forward(const LayerSpec& l, const Vec& x) {
  if (l.kind != LayerKind::Conv2d) return l.weights * x + l.bias;

  const Conv2dGeom& g = l.conv;
  const int oh = g.out_h(), ow = g.out_w();
  Vec y = Vec::Zero(g.out_size());
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = l.bias(oc);
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in_h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.in_w) continue;
              acc += l.weights(oc, (ic * g.kernel + ky) * g.kernel + kx) *
                     x((ic * g.in_h + iy) * g.in_w + ix);
            }
          }
        }
        y((oc * oh + oy) * ow + ox) = acc;
      }
    }
  }
  return y;
}

// Gradient of the linear map w.r.t. its input: W^T g, or the transposed
// convolution. Mirrors the forward loop so border handling matches exactly.
inline Vec linear_backward_input(const LayerSpec& l, const Vec& g_out) {
  if (l.kind != LayerKind::Conv2d) return l.weights.transpose() * g_out;

  const Conv2dGeom& g = l.conv;
  const int oh = g.out_h(), ow = g.out_w();
  Vec g_in = Vec::Zero(g.in_size());
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double go = g_out((oc * oh + oy) * ow + ox);
        if (go == 0.0) continue;
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in_h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.in_w) continue;
              g_in((ic * g.in_h + iy) * g.in_w + ix) +=
                  go * l.weights(oc, (ic * g.kernel + ky) * g.kernel + kx);
            }
          }
        }
      }
    }
  }
  return g_in;
}

// Accumulates dL/dW given the output-side gradient and the input that
// produced it.
inline void accumulate_weight_grad(const LayerSpec& l, const Vec& g_out, const Vec& x, Mat& g_w) {
  if (l.kind != LayerKind::Conv2d) {
    g_w.noalias() += g_out * x.transpose();
    return;
  }
  const Conv2dGeom& g = l.conv;
  const int oh = g.out_h(), ow = g.out_w();
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double go = g_out((oc * oh + oy) * ow + ox);
        if (go == 0.0) continue;
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in_h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.in_w) continue;
              g_w(oc, (ic * g.kernel + ky) * g.kernel + kx) +=
                  go * x((ic * g.in_h + iy) * g.in_w + ix);
            }
          }
        }
      }
    }
  }
}

// Per-output-channel reduction of an output-side gradient: dL/db before any
// time weighting the caller applies.
inline Vec reduce_bias_grad(const LayerSpec& l, const Vec& g_out) {
  if (l.kind != LayerKind::Conv2d) return g_out;
  const Conv2dGeom& g = l.conv;
  const int spatial = g.out_h() * g.out_w();
  Vec out = Vec::Zero(g.out_channels);
  for (int oc = 0; oc < g.out_channels; ++oc) {
    out(oc) = g_out.segment(oc * spatial, spatial).sum();
  }
  return out;
}

// Number of accumulate operations a single spike at each input position
// triggers downstream (its synaptic fan-out). Border positions of a conv feed
// fewer output taps than interior ones.
inline Eigen::VectorXi synaptic_fanout(const LayerSpec& l) {
  if (l.kind != LayerKind::Conv2d) {
    return Eigen::VectorXi::Constant(static_cast<int>(l.weights.cols()),
                                     static_cast<int>(l.weights.rows()));
  }
  const Conv2dGeom& g = l.conv;
  const int oh = g.out_h(), ow = g.out_w();
  Eigen::VectorXi fan = Eigen::VectorXi::Zero(g.in_size());
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int ic = 0; ic < g.in_channels; ++ic) {
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.in_w) continue;
            fan((ic * g.in_h + iy) * g.in_w + ix) += g.out_channels;
          }
        }
      }
    }
  }
  return fan;
}

inline Vec norm_normalize(const LayerSpec& n, const Vec& c) {
  Vec out(c.size());
  for (int ch = 0; ch < n.norm_channels; ++ch) {
    for (int s = 0; s < n.norm_spatial; ++s) {
      const int i = ch * n.norm_spatial + s;
      out(i) = (c(i) - n.mu(ch)) / n.sigma(ch);
    }
  }
  return out;
}

inline Vec norm_affine(const LayerSpec& n, const Vec& normalized) {
  Vec out(normalized.size());
  for (int ch = 0; ch < n.norm_channels; ++ch) {
    for (int s = 0; s < n.norm_spatial; ++s) {
      const int i = ch * n.norm_spatial + s;
      out(i) = n.gamma(ch) * normalized(i) + n.beta(ch);
    }
  }
  return out;
}

struct AnnModel {
  int input_size = 0;
  std::vector<LayerSpec> layers;
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw StructuralError(msg);
}
}  // namespace detail

// Validates the layer chain and returns each layer's output size. Rules: sizes
// chain from input_size; a normalization layer must directly follow a dense or
// conv layer with matching channel/spatial split; the final layer must be the
// output accumulator and nothing may follow it; thresholds and ceilings are
// positive; all tensors are finite.
inline std::vector<int> validate_model_chain(int input_size, const std::vector<LayerSpec>& layers) {
  using detail::require;
  require(input_size > 0, "model input size must be positive");
  require(!layers.empty(), "model has no layers");

  std::vector<int> out_sizes;
  int cur = input_size;
  int prev_channels = 0, prev_spatial = 0;
  bool prev_was_weight = false;

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string tag = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::Dense:
      case LayerKind::OutputAccumulator: {
        require(l.weights.size() > 0, tag + "missing weights");
        require(static_cast<int>(l.weights.cols()) == cur, tag + "weight columns mismatch input");
        require(l.bias.size() == l.weights.rows(), tag + "bias length mismatch");
        cur = static_cast<int>(l.weights.rows());
        prev_channels = cur;
        prev_spatial = 1;
        break;
      }
      case LayerKind::Conv2d: {
        const Conv2dGeom& g = l.conv;
        require(g.in_channels > 0 && g.in_h > 0 && g.in_w > 0, tag + "bad conv input geometry");
        require(g.kernel >= 1 && g.stride >= 1 && g.pad >= 0, tag + "bad conv kernel geometry");
        require(g.out_h() > 0 && g.out_w() > 0, tag + "conv output collapses to zero");
        require(g.in_size() == cur, tag + "conv input size mismatch");
        require(static_cast<int>(l.weights.rows()) == g.out_channels &&
                    static_cast<int>(l.weights.cols()) == g.patch_size(),
                tag + "conv kernel tensor shape mismatch");
        require(l.bias.size() == g.out_channels, tag + "conv bias length mismatch");
        cur = g.out_size();
        prev_channels = g.out_channels;
        prev_spatial = g.out_h() * g.out_w();
        break;
      }
      case LayerKind::Normalization: {
        require(prev_was_weight, tag + "normalization must directly follow a dense or conv layer");
        require(layers[i - 1].kind != LayerKind::OutputAccumulator,
                tag + "normalization cannot follow the output head");
        require(l.norm_channels == prev_channels && l.norm_spatial == prev_spatial,
                tag + "normalization channel/spatial split mismatch");
        require(l.mu.size() == l.norm_channels && l.sigma.size() == l.norm_channels &&
                    l.gamma.size() == l.norm_channels && l.beta.size() == l.norm_channels,
                tag + "normalization parameter length mismatch");
        require((l.sigma.array() > 0.0).all(), tag + "sigma must be positive");
        break;
      }
    }
    if (is_weight_layer(l.kind)) {
      require(l.v_th > 0.0, tag + "threshold must be positive");
      require(l.clip_alpha > 0.0 && l.alpha_ref > 0.0, tag + "rate ceiling must be positive");
      require(l.weights.allFinite() && l.bias.allFinite(), tag + "non-finite parameters");
    } else {
      require(l.mu.allFinite() && l.sigma.allFinite() && l.gamma.allFinite() && l.beta.allFinite(),
              tag + "non-finite normalization parameters");
    }
    require(l.kind == LayerKind::OutputAccumulator ? i + 1 == layers.size() : true,
            tag + "output accumulator must be the final layer");
    prev_was_weight = is_weight_layer(l.kind);
    out_sizes.push_back(layer_output_size(l));
  }
  require(layers.back().kind == LayerKind::OutputAccumulator,
          "model must end with an output accumulator");
  return out_sizes;
}

inline void validate(const AnnModel& m) { validate_model_chain(m.input_size, m.layers); }

}  // namespace snnadapt
