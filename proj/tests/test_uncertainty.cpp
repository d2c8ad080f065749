#include "oracles.hpp"
#include "test_util.hpp"
#include "vilod/error.hpp"
#include "vilod/uncertainty.hpp"

#include <doctest.h>

#include <cmath>

using namespace vilod;

namespace {

DetectionScoreMap random_instance(Rng& rng, std::size_t images, std::size_t max_dets) {
  DetectionScoreMap m;
  for (std::size_t i = 0; i < images; ++i) {
    std::vector<double> s(rng.below(max_dets + 1));
    for (auto& v : s) v = rng.below(4) == 0 ? std::round(rng.uniform() * 4) / 4 : rng.uniform();
    m.emplace("img" + std::to_string(rng.below(10 * images)) + "_" + std::to_string(i), std::move(s));
  }
  return m;
}

} // namespace

TEST_CASE("average_confidence") {
  CHECK(average_confidence({}) == 0.0);
  const std::vector<double> one{0.5};
  CHECK(average_confidence(one) == 0.5);
  const std::vector<double> three{0.9, 0.3, 0.6};
  CHECK(average_confidence(three) == doctest::Approx(0.6).epsilon(1e-15));
  const std::vector<double> bad{0.2, 1.2};
  CHECK_THROWS_AS(average_confidence(bad), Error);
}

TEST_CASE("select_al_samples: worked examples") {
  const DetectionScoreMap m{{"a", {}}, {"b", {0.2}}, {"c", {0.9, 0.5}}};
  CHECK(select_al_samples(m, {}, 2) == std::vector<ImageScore>{{"a", 0.0}, {"b", 0.2}});
  const auto excl = select_al_samples(m, {"a"}, 2);
  REQUIRE(excl.size() == 2);
  CHECK(excl[0] == ImageScore{"b", 0.2});
  CHECK(excl[1].image_id == "c");
  CHECK(excl[1].avg_conf == doctest::Approx(0.7));
  CHECK(select_al_samples(m, {}, 10).size() == 3);
  CHECK(select_al_samples(m, {}, 0).empty());
}

TEST_CASE("select_al_samples: equals the brute-force oracle (property)") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = random_instance(rng, 1 + rng.below(60), 6);
    IdSet exclude;
    for (const auto& [id, s] : m) {
      if (rng.below(4) == 0) exclude.insert(id);
    }
    const std::size_t budget = rng.below(40);
    const auto got = select_al_samples(m, exclude, budget);
    const auto want = oracle::select_lowest_average(m, exclude, budget);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].image_id == want[i].first);
      CHECK(got[i].avg_conf == want[i].second);
    }
  }
}

TEST_CASE("select_al_samples: monotone exclusion") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_instance(rng, 20, 4);
    const std::size_t budget = 1 + rng.below(10);
    const auto base = select_al_samples(m, {}, budget);
    IdSet chosen;
    for (const auto& s : base) chosen.insert(s.image_id);

    // excluding a non-selected id changes nothing
    for (const auto& [id, s] : m) {
      if (!chosen.contains(id)) {
        CHECK(select_al_samples(m, {id}, budget) == base);
        break;
      }
    }
    // excluding a selected id drops exactly it and appends the next candidate
    const auto& victim = base[rng.below(base.size())].image_id;
    const auto after = select_al_samples(m, {victim}, budget);
    std::vector<ImageScore> expected;
    for (const auto& s : base) {
      if (s.image_id != victim) expected.push_back(s);
    }
    const auto longer = select_al_samples(m, {}, budget + 1);
    if (longer.size() > base.size()) expected.push_back(longer.back());
    CHECK(after == expected);
  }
}

TEST_CASE("uncertainty_weight") {
  CHECK(uncertainty_weight(1.0) == 0.0);
  CHECK(uncertainty_weight(0.0) == 1.0);
  CHECK(uncertainty_weight(0.5) == 0.25);
  CHECK_THROWS_AS(uncertainty_weight(-0.1), Error);
  double prev = uncertainty_weight(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double w = uncertainty_weight(i / 1000.0);
    CHECK(w < prev);
    if (i < 1000) CHECK(w > 0.0);
    prev = w;
  }
}

TEST_CASE("compute_heatmap: argmax at a single weighted cluster") {
  Rng rng(3);
  std::vector<ProjectionPoint> pts;
  std::vector<double> w;
  for (int i = 0; i < 50; ++i) {
    pts.push_back({"u" + std::to_string(i), rng.uniform(-10, 10), rng.uniform(-10, 10)});
    w.push_back(0.0);
  }
  for (int i = 0; i < 30; ++i) {
    pts.push_back({"c" + std::to_string(i), 4.0 + rng.normal(0, 0.3), -3.0 + rng.normal(0, 0.3)});
    w.push_back(1.0);
  }
  const auto g = compute_heatmap(pts, w, 64, 64);
  const auto it = std::max_element(g.values.begin(), g.values.end());
  const std::size_t idx = static_cast<std::size_t>(it - g.values.begin());
  const double dx = (g.x_max - g.x_min) / 63.0;
  const double dy = (g.y_max - g.y_min) / 63.0;
  CHECK(std::abs(g.x_at(idx % 64) - 4.0) <= dx);
  CHECK(std::abs(g.y_at(idx / 64) + 3.0) <= dy);
  CHECK(g.colormap_name == "Reds");
}

TEST_CASE("compute_heatmap: all-zero weights give a flagged zero grid") {
  const std::vector<ProjectionPoint> pts{{"a", 0, 0}, {"b", 1, 1}, {"c", 2, 0}};
  const std::vector<double> w{0, 0, 0};
  const auto g = compute_heatmap(pts, w, 16, 16);
  CHECK(g.degenerate);
  CHECK(std::all_of(g.values.begin(), g.values.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("compute_heatmap: errors") {
  const std::vector<ProjectionPoint> one{{"a", 0, 0}};
  const std::vector<double> w1{1.0};
  CHECK_THROWS_AS(compute_heatmap(one, w1), Error);
  const std::vector<ProjectionPoint> two{{"a", 0, 0}, {"b", 1, 1}};
  const std::vector<double> neg{1.0, -0.5};
  try {
    compute_heatmap(two, neg);
    FAIL("expected NegativeWeight");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NegativeWeight);
  }
}

TEST_CASE("compute_heatmap: a single positive weight still yields a finite kernel") {
  const std::vector<ProjectionPoint> pts{{"a", 0, 0}, {"b", 1, 1}, {"c", 2, 0}};
  const std::vector<double> w{0, 1, 0};
  const auto g = compute_heatmap(pts, w, 32, 32);
  CHECK_FALSE(g.degenerate);
  for (const double v : g.values) CHECK(std::isfinite(v));
  CHECK(*std::max_element(g.values.begin(), g.values.end()) > 0.0);
}

TEST_CASE("compute_heatmap: matches the direct double-sum oracle") {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<ProjectionPoint> pts;
    std::vector<double> w;
    for (std::size_t i = 0; i < n; ++i) {
      pts.push_back({std::to_string(i), rng.normal(0, 5), rng.normal(1, 2)});
      w.push_back(uncertainty_weight(rng.uniform()));
    }
    const auto g = compute_heatmap(pts, w, 64, 64);
    const auto o = oracle::direct_kde(pts, w, 64, 64);
    CHECK(g.bandwidth[0] == doctest::Approx(o.h_xx).epsilon(1e-12));
    CHECK(g.bandwidth[1] == doctest::Approx(o.h_xy).epsilon(1e-12));
    CHECK(g.bandwidth[2] == doctest::Approx(o.h_yy).epsilon(1e-12));
    for (std::size_t c = 0; c < g.values.size(); ++c) {
      const double rel = std::abs(g.values[c] - o.values[c]) / std::max(std::abs(o.values[c]), 1e-300);
      if (o.values[c] > 1e-290) REQUIRE(rel <= 1e-9);
    }
  }
}

TEST_CASE("compute_heatmap: singular covariance takes the ridge, matching the oracle") {
  const std::vector<std::vector<ProjectionPoint>> sets{
      {{"a", 0.0, 0.0}, {"b", 3.0, 1.0}},
      {{"a", 0.0, 0.0}, {"b", 1.0, 2.0}, {"c", 2.0, 4.0}, {"d", -1.0, -2.0}},
      {{"a", 1.0, 5.0}, {"b", 4.0, 5.0}, {"c", 2.0, 5.0}}};
  for (const auto& pts : sets) {
    const std::vector<double> w(pts.size(), 0.5);
    const auto g = compute_heatmap(pts, w, 64, 64);
    const auto o = oracle::direct_kde(pts, w, 64, 64);
    CHECK(g.bandwidth[0] * g.bandwidth[2] - g.bandwidth[1] * g.bandwidth[1] > 0.0);
    for (std::size_t c = 0; c < g.values.size(); ++c) {
      if (o.values[c] > 1e-290) REQUIRE(std::abs(g.values[c] - o.values[c]) <= 1e-9 * o.values[c]);
    }
  }
}

TEST_CASE("compute_heatmap: integrates to about one inside a wide extent") {
  Rng rng(8);
  std::vector<ProjectionPoint> pts{{"c1", -50, -50}, {"c2", 50, -50}, {"c3", -50, 50}, {"c4", 50, 50}};
  std::vector<double> w{0, 0, 0, 0};
  for (int i = 0; i < 200; ++i) {
    pts.push_back({std::to_string(i), rng.normal(0, 5), rng.normal(0, 5)});
    w.push_back(uncertainty_weight(rng.uniform()));
  }
  const auto g = compute_heatmap(pts, w, 128, 128);
  double mass = 0.0;
  for (const double v : g.values) mass += v;
  mass *= g.cell_area();
  CHECK(mass >= 0.90);
  CHECK(mass <= 1.0 + 1e-6);
}

TEST_CASE("heatmap CSV round-trip") {
  const std::vector<ProjectionPoint> pts{{"a", 0, 0}, {"b", 1, 2}, {"c", 2, 1}};
  const std::vector<double> w{0.2, 1, 0.5};
  const auto g = compute_heatmap(pts, w, 5, 4);
  const auto back = heatmap_from_csv(heatmap_to_csv(g));
  CHECK(back.values == g.values);
  CHECK(back.bandwidth == g.bandwidth);
  CHECK(back.nx == 5);
  CHECK(back.ny == 4);
  CHECK(back.x_min == g.x_min);
  CHECK(back.colormap_name == "Reds");
}
