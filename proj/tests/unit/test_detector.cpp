// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "dgod/detector.hpp"
#include "dgod/toydata.hpp"
#include "helpers.hpp"

using namespace dgod;

namespace {

const ReferenceDetector& reference() {
  static const ReferenceDetector det;
  return det;
}

Image toy_image(int i = 0) { return generate_toy_dataset(test::small_spec(2)).source.domains[0][i].image; }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

TEST_SUITE("detector") {
  TEST_CASE("feature shapes") {
    const auto& det = reference();
    CHECK(det.config().stride() == 8);
    const DetectorParams p = det.init_params(1);
    const FeatureOutput fo = extract_features(det, p.theta, toy_image());
    CHECK(fo.image.map.shape() == ag::Shape{32, 8, 8});
    CHECK(fo.image.stride == 8);
    REQUIRE(fo.instances.count() > 0);
    CHECK(fo.instances.features.shape() == ag::Shape{static_cast<int>(fo.instances.count()), 64});
    CHECK(static_cast<int>(fo.instances.count()) <= det.config().max_proposals);
  }

  TEST_CASE("zero image gives finite features; inference is deterministic") {
    const auto& det = reference();
    const DetectorParams p = det.init_params(2);
    const FeatureOutput z = extract_features(det, p.theta, Image(64, 64, 0.0));
    CHECK(all_finite(z.image.map.value()));
    CHECK(all_finite(z.instances.features.value()));
    const Image img = toy_image(1);
    const FeatureOutput a = extract_features(det, p.theta, img);
    const FeatureOutput b = extract_features(det, p.theta, img);
    CHECK(std::equal(a.instances.features.value().begin(), a.instances.features.value().end(),
                     b.instances.features.value().begin(), b.instances.features.value().end()));
    CHECK(a.instances.proposals == b.instances.proposals);
    const Detections da = detect(det, p, img), db = detect(det, p, img);
    CHECK(da.boxes == db.boxes);
    CHECK(da.scores == db.scores);
  }

  TEST_CASE("wrong image size is rejected") {
    const auto& det = reference();
    const DetectorParams p = det.init_params(2);
    CHECK_THROWS_AS(extract_features(det, p.theta, Image(32, 64)), ValidationError);
  }

  TEST_CASE("training mode assigns region targets") {
    const auto& det = reference();
    const DetectorParams p = det.init_params(3);
    const auto sample = generate_toy_dataset(test::small_spec(2)).source.domains[1][0];
    Rng rng(4);
    const FeatureOutput fo = det.extract_features(p.theta, sample.image, &sample.annotations, &rng);
    const std::size_t R = fo.instances.count();
    REQUIRE(R > 0);
    CHECK(fo.targets.labels.size() == R);
    CHECK(fo.targets.box_deltas.size() == 4 * R);
    int fg = 0;
    for (std::size_t r = 0; r < R; ++r) {
      CHECK((fo.targets.labels[r] >= 0 && fo.targets.labels[r] <= det.num_classes()));
      CHECK((fo.targets.box_weight[r] > 0) == (fo.targets.labels[r] > 0));
      fg += fo.targets.labels[r] > 0;
    }
    CHECK(fg >= 1);  // ground-truth boxes always join the proposal pool
    CHECK(std::isfinite(fo.proposal_cls.item()));
    CHECK(std::isfinite(fo.proposal_reg.item()));
  }

  TEST_CASE("instance classification") {
    const auto& det = reference();
    const DetectorParams p = det.init_params(5);
    const FeatureOutput fo = extract_features(det, p.theta, toy_image());
    const ag::Var probs = classify_instances(det, p.phi, fo.instances);
    const int C = det.num_classes() + 1;
    for (int r = 0; r < probs.dim(0); ++r) {
      double s = 0;
      for (int c = 0; c < C; ++c) s += probs.value()[static_cast<std::size_t>(r * C + c)];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    // Duplicated rows give identical probabilities.
    InstanceFeatures dup;
    std::vector<double> row(fo.instances.features.value().begin(), fo.instances.features.value().begin() + 64);
    row.insert(row.end(), row.begin(), row.end());
    dup.features = ag::Var::constant({2, 64}, row);
    dup.proposals = {fo.instances.proposals[0], fo.instances.proposals[0]};
    const ag::Var pd = classify_instances(det, p.phi, dup);
    for (int c = 0; c < C; ++c) CHECK(pd.value()[c] == pd.value()[C + c]);
  }

  TEST_CASE("class log-probability gradient matches finite differences") {
    const auto& det = reference();
    DetectorParams p = det.init_params(6);
    const FeatureOutput fo = extract_features(det, p.theta, toy_image());
    const ag::Var x = ag::Var::constant({1, 64}, {fo.instances.features.value().begin(),
                                                  fo.instances.features.value().begin() + 64});
    const std::vector<int> truth{2};
    auto logp = [&] { return ag::scale(ag::nll_sum(ag::log_softmax(det.classify_logits(p.phi, x)), truth), -1.0); };
    ag::Var w = p.phi.at("cls.w");
    p.phi.zero_grad();
    ag::backward(logp());
    const std::vector<double> g = w.grad();
    double worst = 0;
    for (std::size_t i : {std::size_t{0}, std::size_t{64 * 2 + 5}, std::size_t{64 * 3 + 63}}) {
      const double keep = w.mutable_value()[i], h = 1e-5;
      w.mutable_value()[i] = keep + h;
      const double up = logp().item();
      w.mutable_value()[i] = keep - h;
      const double down = logp().item();
      w.mutable_value()[i] = keep;
      worst = std::max(worst, std::abs(g[i] - (up - down) / (2 * h)));
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("box regression") {
    const std::vector<BoundingBox> props{{10, 10, 8, 8}, {50, 50, 12, 12}};
    CHECK(regress_boxes(props, std::vector<double>(8, 0.0), 64, 64) == props);
    const std::vector<double> shift{0.25, 0.25, 0, 0, 0.5, 0, 0, 0};
    const auto moved = regress_boxes(props, shift, 64, 64);
    CHECK(moved[0].x == doctest::Approx(12));
    CHECK(moved[0].y == doctest::Approx(12));
    CHECK(moved[0].w == doctest::Approx(8));
    CHECK(moved[0].h == doctest::Approx(8));
    // Pushed past the right border and clipped.
    CHECK(moved[1].right() == doctest::Approx(64));
    CHECK(moved[1].x == doctest::Approx(56));
    const BoundingBox a{5, 7, 10, 6}, b{9, 4, 14, 12};
    const auto d = encode_deltas(a, b);
    const BoundingBox back = apply_deltas(a, d);
    CHECK(back.x == doctest::Approx(b.x));
    CHECK(back.y == doctest::Approx(b.y));
    CHECK(back.w == doctest::Approx(b.w));
    CHECK(back.h == doctest::Approx(b.h));
  }

  TEST_CASE("non-maximum suppression") {
    const std::vector<BoundingBox> same{{1, 1, 10, 10}, {1, 1, 10, 10}};
    const std::vector<double> s{0.4, 0.9};
    CHECK(nms(same, s, 0.5) == std::vector<std::size_t>{1});
    const std::vector<BoundingBox> apart{{1, 1, 10, 10}, {30, 30, 10, 10}, {2, 1, 10, 10}};
    const std::vector<double> s3{0.5, 0.7, 0.6};
    CHECK(nms(apart, s3, 0.5) == std::vector<std::size_t>{1, 2});
  }

  TEST_CASE("detector parameters are partitioned") {
    const auto& det = reference();
    const DetectorParams p = det.init_params(7);
    CHECK(p.theta.contains("backbone.conv1.w"));
    CHECK(p.phi.contains("cls.w"));
    CHECK(p.beta.contains("bbox.w"));
    CHECK(!p.theta.contains("cls.w"));
    CHECK(!p.phi.contains("bbox.w"));
    const DetectorParams q = det.init_params(7);
    CHECK(p.theta.flatten() == q.theta.flatten());
  }
}
