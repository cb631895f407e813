// Random small networks and finite-difference helpers shared by the gradient
// tests and the acceptance checks.
#pragma once

#include <functional>
#include <vector>

#include "snnadapt/layers.hpp"
#include "snnadapt/network.hpp"
#include "snnadapt/rng.hpp"

namespace builders {

using snnadapt::Conv2dGeom;
using snnadapt::LayerKind;
using snnadapt::LayerSpec;
using snnadapt::Mat;
using snnadapt::SpikingNetwork;
using snnadapt::SplitMix64;
using snnadapt::Vec;

inline Mat random_matrix(int rows, int cols, SplitMix64& rng, double scale) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  }
  return m;
}

inline Vec random_vector(int n, SplitMix64& rng, double scale) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = scale * rng.gaussian();
  return v;
}

inline LayerSpec random_norm(int channels, int spatial, SplitMix64& rng) {
  LayerSpec n;
  n.kind = LayerKind::Normalization;
  n.norm_channels = channels;
  n.norm_spatial = spatial;
  n.mu = random_vector(channels, rng, 0.2);
  n.sigma = Vec(channels);
  n.gamma = Vec(channels);
  for (int c = 0; c < channels; ++c) {
    n.sigma(c) = rng.uniform(0.4, 1.5);
    n.gamma(c) = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  n.beta = random_vector(channels, rng, 0.3);
  return n;
}

// Dense spiking net with 1..3 hidden layers of width <= max_width; each hidden
// layer gets a normalization attachment with probability norm_prob and a rate
// ceiling detuned from its reference so clip gradients are exercised.
inline SpikingNetwork random_dense_net(SplitMix64& rng, int max_hidden = 3, int max_width = 16,
                                       double norm_prob = 0.5) {
  const int n_hidden = 1 + rng.uniform_int(max_hidden);
  const int input = 2 + rng.uniform_int(max_width - 1);
  const int out = 2 + rng.uniform_int(4);

  SpikingNetwork net;
  net.input_size = input;
  int cur = input;
  for (int l = 0; l < n_hidden; ++l) {
    const int width = 2 + rng.uniform_int(max_width - 1);
    LayerSpec d;
    d.kind = LayerKind::Dense;
    d.weights = random_matrix(width, cur, rng, 1.2 / std::sqrt(static_cast<double>(cur)));
    d.bias = random_vector(width, rng, 0.2);
    d.v_th = 1.0;
    d.alpha_ref = rng.uniform(0.5, 2.0);
    d.clip_alpha = d.alpha_ref * rng.uniform(0.7, 1.4);
    net.layers.push_back(d);
    if (rng.uniform() < norm_prob) net.layers.push_back(random_norm(width, 1, rng));
    cur = width;
  }
  LayerSpec head;
  head.kind = LayerKind::OutputAccumulator;
  head.weights = random_matrix(out, cur, rng, 1.0 / std::sqrt(static_cast<double>(cur)));
  head.bias = random_vector(out, rng, 0.1);
  net.layers.push_back(head);
  validate(net);
  return net;
}

// Conv stage + normalization + dense head on a small single-channel image.
inline SpikingNetwork random_conv_net(SplitMix64& rng, int img = 5) {
  Conv2dGeom g;
  g.in_channels = 1;
  g.in_h = img;
  g.in_w = img;
  g.out_channels = 2;
  g.kernel = 3;
  g.stride = 1;
  g.pad = 1;

  SpikingNetwork net;
  net.input_size = g.in_size();
  LayerSpec conv;
  conv.kind = LayerKind::Conv2d;
  conv.conv = g;
  conv.weights = random_matrix(g.out_channels, g.patch_size(), rng, 0.5);
  conv.bias = random_vector(g.out_channels, rng, 0.2);
  conv.alpha_ref = rng.uniform(0.5, 2.0);
  conv.clip_alpha = conv.alpha_ref * rng.uniform(0.7, 1.4);
  net.layers.push_back(conv);
  net.layers.push_back(random_norm(g.out_channels, g.out_h() * g.out_w(), rng));

  LayerSpec head;
  head.kind = LayerKind::OutputAccumulator;
  head.weights = random_matrix(3, g.out_size(), rng, 1.0 / std::sqrt(static_cast<double>(g.out_size())));
  head.bias = random_vector(3, rng, 0.1);
  net.layers.push_back(head);
  validate(net);
  return net;
}

inline Vec random_input(int n, SplitMix64& rng) {
  Vec x(n);
  for (int i = 0; i < n; ++i) x(i) = rng.uniform();
  return x;
}

// Central finite difference of f around x with step h.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace builders
