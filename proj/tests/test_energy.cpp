#include <catch_amalgamated.hpp>

#include <cstdint>

#include "snnadapt/energy.hpp"
#include "snnadapt/network.hpp"
#include "snnadapt/rng.hpp"
#include "support/builders.hpp"
#include "support/oracles.hpp"

using namespace snnadapt;

namespace {

LayerSpec dense(int out, int in) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.weights = Mat::Ones(out, in);
  l.bias = Vec::Zero(out);
  return l;
}

}  // namespace

TEST_CASE("multiply-accumulate counts per layer") {
  REQUIRE(count_layer_macs(dense(3, 4)) == 12);

  LayerSpec conv;
  conv.kind = LayerKind::Conv2d;
  conv.conv = Conv2dGeom{2, 5, 5, 3, 3, 1, 1};  // 2ch 5x5 in, 3ch out, k=3, s=1, p=1
  conv.weights = Mat::Ones(3, 2 * 9);
  conv.bias = Vec::Zero(3);
  // 3x3 kernel * 2 in * 3 out * 5x5 output positions.
  REQUIRE(count_layer_macs(conv) == 9ull * 2 * 3 * 25);

  LayerSpec norm;
  norm.kind = LayerKind::Normalization;
  REQUIRE(count_layer_macs(norm) == 0);
}

TEST_CASE("source network cost is the sum over its layers") {
  SplitMix64 rng(31);
  AnnModel m;
  m.input_size = 4;
  m.layers.push_back(dense(6, 4));
  m.layers.push_back(dense(3, 6));
  m.layers.back().kind = LayerKind::OutputAccumulator;
  REQUIRE(count_ann_macs(m) == 24 + 18);
}

TEST_CASE("spike-triggered accumulates pair counts with consumer fan-out") {
  // Dense consumer: every presynaptic spike drives all 3 outputs.
  Vec spikes(4);
  spikes << 5, 0, 2, 1;
  REQUIRE(count_layer_synops(dense(3, 4), spikes) == (5 + 0 + 2 + 1) * 3);
  REQUIRE_THROWS_AS(count_layer_synops(dense(3, 4), Vec::Ones(5)), StructuralError);

  // Conv consumer with padding 0: corner inputs reach fewer taps.
  LayerSpec conv;
  conv.kind = LayerKind::Conv2d;
  conv.conv = Conv2dGeom{1, 4, 4, 2, 3, 1, 0};
  conv.weights = Mat::Ones(2, 9);
  conv.bias = Vec::Zero(2);
  const Eigen::VectorXi fan = synaptic_fanout(conv);
  Vec ones = Vec::Ones(16);
  std::uint64_t expect = 0;
  for (int i = 0; i < 16; ++i) expect += static_cast<std::uint64_t>(fan(i));
  REQUIRE(count_layer_synops(conv, ones) == expect);
  // With no padding every (kernel tap, output position) pair is reachable,
  // so the total equals the layer's MAC count.
  REQUIRE(expect == count_layer_macs(conv));

  // A corner of the 4x4 input feeds exactly one 3x3 window per out channel.
  REQUIRE(fan(0) == 2);
  // The 2x2 interior cells feed all four windows.
  REQUIRE(fan(1 * 4 + 1) == 4 * 2 * 1);
}

TEST_CASE("run-level accumulate count agrees with a brute-force recount") {
  SplitMix64 rng(32);
  for (int trial = 0; trial < 4; ++trial) {
    const SpikingNetwork net = (trial % 2 == 0) ? builders::random_dense_net(rng)
                                                : builders::random_conv_net(rng);
    const Vec x = builders::random_input(net.input_size, rng);
    const RunTrace tr = forward(net, x, 7);
    const auto stages = compile_stages(net);

    std::uint64_t expect = 0;
    for (std::size_t k = 0; k + 1 < stages.size(); ++k) {
      const LayerSpec& consumer = net.layers[static_cast<std::size_t>(stages[k + 1].weight_layer)];
      const Eigen::VectorXi fan = synaptic_fanout(consumer);
      for (int t = 0; t < 7; ++t) {
        for (Eigen::Index i = 0; i < tr.spikes[k].cols(); ++i) {
          if (tr.spikes[k](t, i) != 0.0) {
            expect += static_cast<std::uint64_t>(fan(static_cast<int>(i)));
          }
        }
      }
    }
    REQUIRE(count_snn_synops(net, tr) == expect);
  }
}

TEST_CASE("the analog input layer pays full multiplies every step") {
  SplitMix64 rng(33);
  const SpikingNetwork net = builders::random_dense_net(rng);
  const auto stages = compile_stages(net);
  const LayerSpec& first = net.layers[static_cast<std::size_t>(stages.front().weight_layer)];
  REQUIRE(count_snn_input_macs(net, 8) == count_layer_macs(first) * 8);
  REQUIRE(count_snn_input_macs(net, 1) == count_layer_macs(first));
}

TEST_CASE("energy conversion applies the published per-op costs exactly") {
  const EnergyEstimate e = estimate_energy(1000, 50000);
  REQUIRE(e.macs == 1000);
  REQUIRE(e.acs == 50000);
  REQUIRE(e.joules == (1000.0 * 4.6 + 50000.0 * 0.1) * 1e-12);

  EnergyProfile custom;
  custom.mac_pj = 2.0;
  custom.ac_pj = 0.5;
  REQUIRE(estimate_energy(10, 10, custom).joules == (10.0 * 2.0 + 10.0 * 0.5) * 1e-12);

  // The MAC figure decomposes into the documented multiply and add costs.
  const EnergyProfile def;
  REQUIRE(def.mult_pj + def.add_pj == Catch::Approx(def.mac_pj).epsilon(1e-15));
  REQUIRE(estimate_energy(0, 0).joules == 0.0);
}
