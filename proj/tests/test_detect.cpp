#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "snnadapt/detect.hpp"
#include "snnadapt/rng.hpp"
#include "support/builders.hpp"

using namespace snnadapt;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// Assembles a flat head vector from per-cell pieces, writing the layout
// [conf | classes | box] directly so the accessors are checked against it.
Vec assemble_raw(const DetectionGrid& g, const std::vector<double>& conf,
                 const std::vector<Vec>& cls, const std::vector<Eigen::Vector4d>& box_logits) {
  Vec raw = Vec::Zero(g.output_size());
  for (int cell = 0; cell < g.cells(); ++cell) {
    raw(cell) = conf[static_cast<std::size_t>(cell)];
    for (int c = 0; c < g.classes; ++c) {
      raw(g.cells() * (1 + c) + cell) = cls[static_cast<std::size_t>(cell)](c);
    }
    for (int k = 0; k < 4; ++k) {
      raw(g.cells() * (1 + g.classes) + g.cells() * k + cell) =
          box_logits[static_cast<std::size_t>(cell)](k);
    }
  }
  return raw;
}

}  // namespace

TEST_CASE("confidence weight matches high-precision references") {
  const WeightingConfig wc;
  REQUIRE(confidence_weight(0.0, wc) == Catch::Approx(0.9820139025730705).epsilon(1e-12));
  REQUIRE(confidence_weight(1.0, wc) == Catch::Approx(0.9820139025730705).epsilon(1e-12));
  REQUIRE(confidence_weight(0.2, wc) == Catch::Approx(0.5000061441746022).epsilon(1e-12));
  REQUIRE(confidence_weight(0.8, wc) == Catch::Approx(0.5000061441746022).epsilon(1e-12));
  REQUIRE(confidence_weight(0.5, wc) == Catch::Approx(0.0049452463132695).epsilon(1e-9));
}

TEST_CASE("confidence weight is symmetric and U-shaped for the default thresholds") {
  const WeightingConfig wc;
  for (double p = 0.0; p <= 0.5001; p += 0.05) {
    REQUIRE(confidence_weight(p, wc) ==
            Catch::Approx(confidence_weight(1.0 - p, wc)).epsilon(1e-12));
  }
  REQUIRE(confidence_weight(0.5, wc) < confidence_weight(0.25, wc));
  REQUIRE(confidence_weight(0.05, wc) > confidence_weight(0.25, wc));
}

TEST_CASE("confidence weight derivative agrees with finite differences") {
  WeightingConfig wc;
  wc.delta = 7.0;
  for (double p = 0.05; p < 1.0; p += 0.1) {
    const double fd = builders::central_diff(
        [&](double q) { return confidence_weight(q, wc); }, p, 1e-6);
    REQUIRE(confidence_weight_dp(p, wc) == Catch::Approx(fd).margin(1e-7));
  }
}

TEST_CASE("head accessors read the channels-first grid layout") {
  DetectionGrid g{2, 2, 3};
  REQUIRE(g.cells() == 4);
  REQUIRE(g.output_size() == 32);
  Vec raw(32);
  for (int i = 0; i < 32; ++i) raw(i) = i;
  const DetectionHeadOutput out = split_head(g, raw);
  REQUIRE(out.conf_logit(0) == 0.0);
  REQUIRE(out.conf_logit(3) == 3.0);
  REQUIRE(out.conf(3) == Catch::Approx(sigmoid(3.0)).epsilon(1e-15));
  REQUIRE(out.class_logits(1)(0) == 5.0);   // cells*(1+0)+1
  REQUIRE(out.class_logits(1)(2) == 13.0);  // cells*(1+2)+1
  REQUIRE(out.box(2)(0) == Catch::Approx(sigmoid(18.0)).epsilon(1e-15));
  REQUIRE(out.box(2)(1) == Catch::Approx(sigmoid(22.0)).epsilon(1e-15));
  REQUIRE_THROWS_AS(split_head(g, Vec::Zero(31)), StructuralError);
}

TEST_CASE("weighted cell entropy equals a direct double sum over the raw layout") {
  SplitMix64 rng(21);
  const DetectionGrid g{3, 2, 4};
  const double tau = 2.5;
  for (int trial = 0; trial < 6; ++trial) {
    const Vec raw = builders::random_vector(g.output_size(), rng, 1.5);
    const DetectionHeadOutput out = split_head(g, raw);
    const WeightingConfig wc;

    double expect_weighted = 0.0, expect_plain = 0.0;
    for (int cell = 0; cell < g.cells(); ++cell) {
      Vec u(g.classes);
      for (int c = 0; c < g.classes; ++c) u(c) = raw(g.cells() * (1 + c) + cell);
      const double h = entropy_loss(u, tau);
      expect_plain += h;
      expect_weighted += confidence_weight(sigmoid(raw(cell)), wc) * h;
    }
    REQUIRE(detection_entropy(out, tau, false) == Catch::Approx(expect_plain).epsilon(1e-12));
    REQUIRE(detection_entropy(out, tau, true, wc) ==
            Catch::Approx(expect_weighted).epsilon(1e-12));
  }
}

TEST_CASE("detection loss gradient matches finite differences") {
  SplitMix64 rng(22);
  const DetectionGrid g{2, 2, 3};
  const Vec raw = builders::random_vector(g.output_size(), rng, 1.2);

  for (const bool weighted : {false, true}) {
    const TimestepLossFn loss = detection_timestep_loss(g, 2.0, weighted);
    Vec grad;
    const double value = loss(1, raw, grad);
    REQUIRE(std::isfinite(value));
    REQUIRE(grad.size() == raw.size());

    for (int i = 0; i < raw.size(); ++i) {
      const double fd = builders::central_diff(
          [&](double v) {
            Vec p = raw;
            p(i) = v;
            Vec scratch;
            return loss(1, p, scratch);
          },
          raw(i), 1e-6);
      REQUIRE(grad(i) == Catch::Approx(fd).margin(1e-7));
    }

    // Box channels never receive gradient; confidence only couples through
    // the weighting.
    const int box_base = g.cells() * (1 + g.classes);
    for (int i = box_base; i < raw.size(); ++i) REQUIRE(grad(i) == 0.0);
    if (!weighted) {
      for (int cell = 0; cell < g.cells(); ++cell) REQUIRE(grad(cell) == 0.0);
    } else {
      REQUIRE(grad.head(g.cells()).cwiseAbs().maxCoeff() > 0.0);
    }
  }
}

TEST_CASE("box IoU hand cases") {
  REQUIRE(box_iou(0.5, 0.5, 0.4, 0.4, 0.5, 0.5, 0.4, 0.4) == Catch::Approx(1.0));
  REQUIRE(box_iou(0.2, 0.2, 0.2, 0.2, 0.8, 0.8, 0.2, 0.2) == 0.0);
  // Shift of half a width: intersection 0.2*0.4, union 2*0.16-0.08.
  REQUIRE(box_iou(0.5, 0.5, 0.4, 0.4, 0.7, 0.5, 0.4, 0.4) ==
          Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  // Nested boxes: IoU is the area ratio.
  REQUIRE(box_iou(0.5, 0.5, 0.2, 0.2, 0.5, 0.5, 0.4, 0.4) == Catch::Approx(0.25).epsilon(1e-12));
  REQUIRE(box_iou(0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0) == 0.0);
}

TEST_CASE("mean average precision on constructed scenarios") {
  const DetectionGrid g{1, 1, 1};
  const auto one_box = [&](double cx, double cy, double w, double h, double conf_logit) {
    return split_head(g, assemble_raw(g, {conf_logit}, {Vec::Zero(1)},
                                      {Eigen::Vector4d(logit(cx), logit(cy), logit(w), logit(h))}));
  };
  const GroundTruthBox gt{0, 0.5, 0.5, 0.4, 0.4};

  SECTION("a single matching prediction scores full marks") {
    const double m = evaluate_map({one_box(0.5, 0.5, 0.4, 0.4, 4.0)}, {{gt}});
    REQUIRE(m == Catch::Approx(1.0).epsilon(1e-12));
  }

  SECTION("a prediction that misses the overlap threshold scores zero") {
    const double m = evaluate_map({one_box(0.1, 0.1, 0.1, 0.1, 4.0)}, {{gt}});
    REQUIRE(m == 0.0);
  }

  SECTION("a higher-scored false positive halves the interpolated precision") {
    // Image 0 has no object but the more confident candidate; image 1's
    // candidate matches its truth. Ranking: fp then tp.
    const double m = evaluate_map(
        {one_box(0.5, 0.5, 0.4, 0.4, 6.0), one_box(0.5, 0.5, 0.4, 0.4, 2.0)},
        {{}, {gt}});
    REQUIRE(m == Catch::Approx(0.5).epsilon(1e-12));
  }

  SECTION("duplicate detections of one object count once") {
    const DetectionGrid g2{1, 2, 1};
    const Vec raw = assemble_raw(
        g2, {4.0, 3.0}, {Vec::Zero(1), Vec::Zero(1)},
        {Eigen::Vector4d(logit(0.5), logit(0.5), logit(0.4), logit(0.4)),
         Eigen::Vector4d(logit(0.5), logit(0.5), logit(0.4), logit(0.4))});
    // tp then fp: precision (1, 1/2), recall (1, 1). All 11 points see
    // recall 1 at precision 1.
    const double m = evaluate_map({split_head(g2, raw)}, {{gt}});
    REQUIRE(m == Catch::Approx(1.0).epsilon(1e-12));
  }

  SECTION("classes without ground truth are excluded from the mean") {
    const DetectionGrid g2{1, 1, 2};
    const Vec raw = assemble_raw(g2, {4.0}, {(Vec(2) << 3.0, -3.0).finished()},
                                 {Eigen::Vector4d(logit(0.5), logit(0.5), logit(0.4), logit(0.4))});
    const double m = evaluate_map({split_head(g2, raw)}, {{gt}});
    REQUIRE(m == Catch::Approx(1.0).epsilon(1e-12));
  }

  SECTION("input validation") {
    REQUIRE_THROWS_AS(evaluate_map({}, {}), StructuralError);
    REQUIRE_THROWS_AS(evaluate_map({one_box(0.5, 0.5, 0.4, 0.4, 1.0)}, {{gt}, {gt}}),
                      StructuralError);
  }
}

TEST_CASE("the spiking head reader averages the accumulated potential per step") {
  SplitMix64 rng(23);
  const DetectionGrid g{1, 1, 3};
  SpikingNetwork net = builders::random_dense_net(rng, 1, 6, 0.0);
  net.layers.back().weights = builders::random_matrix(g.output_size(),
                                                      net.layers.back().weights.cols(), rng, 0.5);
  net.layers.back().bias = builders::random_vector(g.output_size(), rng, 0.1);
  validate(net);
  const Vec x = builders::random_input(net.input_size, rng);
  const DetectionHeadOutput out = toy_head_forward(net, x, 6, g);
  // The head must sit on the source model's logit scale: total accumulated
  // output potential divided by the number of steps, not the running mean of
  // the accumulation, which would inflate every logit by about (T+1)/2 and
  // saturate the sigmoid box decode.
  const Vec direct = forward(net, x, 6).output_potentials.row(5).transpose() / 6.0;
  REQUIRE((out.raw - direct).cwiseAbs().maxCoeff() == 0.0);
}
