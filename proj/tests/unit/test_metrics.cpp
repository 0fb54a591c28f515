// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>

#include "dgod/metrics.hpp"
#include "helpers.hpp"

using namespace dgod;

namespace {

DomainDataset two_domain_dataset() {
  DomainDataset ds;
  ds.class_names = {"a", "b"};
  ds.domain_names = {"x", "y"};
  ds.schema = {2, 2, 32, 32};
  ds.domains.resize(2);
  auto add = [&](int d, const std::string& id, std::vector<Annotation> anns) {
    DomainSample s;
    s.image = Image(32, 32, 0.5);
    s.annotations = std::move(anns);
    s.domain = DomainLabel{d};
    s.id = id;
    ds.domains[static_cast<std::size_t>(d)].push_back(std::move(s));
  };
  add(0, "x0", {{{1, 1, 8, 8}, {1}}, {{20, 20, 6, 6}, {2}}});
  add(0, "x1", {{{3, 3, 10, 10}, {1}}});
  add(1, "y0", {{{5, 5, 9, 9}, {2}}});
  add(1, "y1", {});
  return ds;
}

std::vector<Prediction> ground_truth_predictions(const DomainDataset& ds) {
  std::vector<Prediction> p;
  for (const auto& dom : ds.domains)
    for (const auto& s : dom)
      for (const auto& a : s.annotations) p.push_back({s.id, a.label.value, 1.0, a.box});
  return p;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("average precision examples") {
    const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {30, 30, 10, 10}};
    std::vector<ScoredBox> exact;
    for (const auto& g : gts) exact.push_back({g, 1.0});
    CHECK(average_precision(exact, gts) == 1.0);
    CHECK(average_precision({}, gts) == 0.0);
    CHECK(!average_precision(exact, {}).has_value());
    const std::vector<ScoredBox> ranked{{{0, 0, 10, 10}, 0.9}, {{50, 0, 10, 10}, 0.8}, {{30, 30, 10, 10}, 0.7}};
    CHECK(*average_precision(ranked, gts) == 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
  }

  TEST_CASE("matching is greedy by score and takes the best free overlap") {
    const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {2, 0, 10, 10}};
    const std::vector<ScoredBox> preds{{{2, 0, 10, 10}, 0.3}, {{1, 0, 10, 10}, 0.9}};
    const MatchResult m = match_predictions(preds, gts, 0.5);
    CHECK(m.order == std::vector<std::size_t>{1, 0});
    CHECK(m.true_positive == std::vector<bool>{true, true});
    CHECK(m.false_negatives == 0);
    // A duplicate of an already matched box is a false positive.
    const std::vector<ScoredBox> dup{{{0, 0, 10, 10}, 0.9}, {{0, 0, 10, 10}, 0.8}};
    const std::vector<BoundingBox> one{{0, 0, 10, 10}};
    const MatchResult md = match_predictions(dup, one, 0.5);
    CHECK(md.true_positive == std::vector<bool>{true, false});
  }

  TEST_CASE("AP ignores the input order of tied predictions") {
    const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {20, 20, 10, 10}};
    std::vector<ScoredBox> preds{{{0, 0, 10, 10}, 0.5}, {{40, 40, 5, 5}, 0.5}, {{20, 20, 10, 10}, 0.9}};
    const double a = *average_precision(preds, gts);
    std::swap(preds[0], preds[1]);
    // Ties resolve by position, so the swapped input ranks the false positive first.
    const double b = *average_precision(preds, gts);
    CHECK(a == doctest::Approx(1.0));
    CHECK(b == doctest::Approx(0.5 + 0.5 * (2.0 / 3.0)));
  }

  TEST_CASE("pooled AP over images") {
    const std::vector<std::vector<ScoredBox>> preds{{{{0, 0, 10, 10}, 0.9}}, {{{5, 5, 5, 5}, 0.8}}};
    const std::vector<std::vector<BoundingBox>> gts{{{0, 0, 10, 10}}, {{20, 20, 5, 5}}};
    CHECK(*average_precision(preds, gts) == doctest::Approx(0.5));
  }

  TEST_CASE("summaries") {
    const std::vector<std::optional<double>> ap{0.5, 0.9};
    const std::vector<int> counts{10, 90};
    const MapSummary s = summarize(ap, counts);
    CHECK(s.wmap == doctest::Approx(0.86).epsilon(1e-12));
    CHECK(s.mean == doctest::Approx(0.70).epsilon(1e-12));
    const std::vector<int> equal{5, 5};
    CHECK(summarize(ap, equal).wmap == doctest::Approx(summarize(ap, equal).mean));
    const std::vector<std::optional<double>> single{0.42};
    const std::vector<int> c1{3};
    CHECK(summarize(single, c1).wmap == 0.42);
    CHECK(summarize(single, c1).mean == 0.42);
    const std::vector<std::optional<double>> partial{std::nullopt, 0.6};
    const std::vector<int> c2{0, 4};
    CHECK(summarize(partial, c2).mean == 0.6);
    const std::vector<std::optional<double>> none{std::nullopt};
    const std::vector<int> c0{0};
    CHECK_THROWS_AS(summarize(none, c0), ValidationError);

    const std::vector<double> acc{0.8, 0.6};
    const std::vector<int> imgs{10, 30};
    CHECK(wada(acc, imgs) == doctest::Approx(0.65).epsilon(1e-12));
    const std::vector<double> same{0.3, 0.3, 0.3};
    const std::vector<int> n3{1, 7, 2};
    CHECK(wada(same, n3) == doctest::Approx(0.3));
    const std::vector<double> lone{0.77};
    const std::vector<int> n1{9};
    CHECK(wada(lone, n1) == 0.77);
  }

  TEST_CASE("image accuracy") {
    const std::vector<Annotation> gts{{{0, 0, 10, 10}, {1}}, {{20, 20, 10, 10}, {2}}};
    const std::vector<Annotation> preds{{{0, 0, 10, 10}, {1}}, {{20, 20, 10, 10}, {1}}, {{40, 40, 5, 5}, {2}}};
    const std::vector<double> scores{0.9, 0.8, 0.2};
    // TP 1 (class 1), FP 1 (wrong class), FN 1; the low-score box is ignored.
    CHECK(image_accuracy(preds, scores, gts) == doctest::Approx(1.0 / 3.0));
    CHECK(image_accuracy({}, {}, {}) == 1.0);
  }

  TEST_CASE("evaluation of prediction sets") {
    const DomainDataset ds = two_domain_dataset();
    const MetricReport perfect = evaluate_predictions(ds, ground_truth_predictions(ds));
    CHECK(perfect.map == 1.0);
    CHECK(perfect.wmap == 1.0);
    CHECK(perfect.wada == 1.0);
    CHECK(perfect.class_instances == std::vector<int>{2, 2});
    CHECK(perfect.domain_images == std::vector<int>{2, 2});
    const MetricReport empty = evaluate_predictions(ds, {});
    CHECK(empty.map == 0.0);
    // The image without objects counts as correct, the other three as wrong.
    CHECK(empty.wada == doctest::Approx(0.25));
    const std::vector<Prediction> unknown{{"nope", 1, 0.5, {0, 0, 1, 1}}};
    CHECK_THROWS_AS(evaluate_predictions(ds, unknown), ValidationError);
    const std::vector<Prediction> bad_class{{"x0", 3, 0.5, {0, 0, 1, 1}}};
    CHECK_THROWS_AS(evaluate_predictions(ds, bad_class), ValidationError);
    const std::string js = report_json(perfect);
    CHECK(js.find("\"WmAP\"") != std::string::npos);
    CHECK(report_table(perfect).find("WADA") != std::string::npos);
  }

  TEST_CASE("prediction files round trip") {
    test::TempDir dir("preds");
    const std::vector<Prediction> p{{"a", 1, 0.123456789012345, {1.5, 2.25, 3, 4}}, {"b", 2, 1.0, {0, 0, 1, 1}}};
    write_predictions(dir / "p.json", p);
    CHECK(read_predictions(dir / "p.json") == p);
  }
}
