#include <catch_amalgamated.hpp>

#include "snnadapt/adapt.hpp"
#include "snnadapt/ann.hpp"
#include "snnadapt/convert.hpp"
#include "snnadapt/corrupt.hpp"
#include "snnadapt/data.hpp"
#include "snnadapt/detect.hpp"
#include "snnadapt/energy.hpp"
#include "snnadapt/errors.hpp"
#include "snnadapt/io.hpp"
#include "snnadapt/layers.hpp"
#include "snnadapt/metrics.hpp"
#include "snnadapt/network.hpp"
#include "snnadapt/rng.hpp"
#include "snnadapt/train.hpp"

using namespace snnadapt;

TEST_CASE("headers are self-contained and a converted net runs") {
  SplitMix64 rng(7);
  AnnModel ann = make_mlp(4, {6}, 3, true, rng);
  std::vector<Vec> batch;
  for (int i = 0; i < 8; ++i) {
    Vec x(4);
    for (int j = 0; j < 4; ++j) x(j) = rng.uniform();
    batch.push_back(x);
  }
  const CalibrationProfile profile = calibrate_max_activations(ann, batch, 100.0);
  const SpikingNetwork net = convert(ann, profile);
  const RunTrace trace = forward(net, batch[0], 8);
  REQUIRE(trace.prediction().size() == 3);
  REQUIRE(std::isfinite(entropy_loss(trace.prediction(), 4.0)));
}
