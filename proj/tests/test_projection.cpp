#include "oracles.hpp"
#include "test_util.hpp"
#include "vilod/error.hpp"
#include "vilod/projection.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

using namespace vilod;
using vilod::testing::make_blobs;
using vilod::testing::random_set;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected vilod::Error");
  return Errc::InvalidArgument;
}

} // namespace

TEST_CASE("kmeans: identical vectors collapse onto one centroid") {
  EmbeddingSet set(3);
  const std::vector<double> v{1.5, -2.0, 3.25};
  for (int i = 0; i < 5; ++i) set.add("x" + std::to_string(i), v);
  const auto model = kmeans_cluster(set, 1, 1);
  CHECK(model.centroids == v);
  CHECK(std::all_of(model.assignment.begin(), model.assignment.end(), [](auto a) { return a == 0; }));
}

TEST_CASE("kmeans: two separated blobs partition exactly") {
  std::vector<std::size_t> truth;
  const auto set = make_blobs(2, 20, 8, 1.0, 3, &truth);
  const auto model = kmeans_cluster(set, 2, 11);

  // oracle: nearest true blob center
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::size_t j = (i + 1) % set.size();
    const bool same_blob = truth[i] == truth[j];
    CHECK((model.assignment[i] == model.assignment[j]) == same_blob);
  }
}

TEST_CASE("kmeans: deterministic for a fixed seed") {
  const auto set = random_set(60, 5, 9);
  const auto a = kmeans_cluster(set, 6, 123);
  const auto b = kmeans_cluster(set, 6, 123);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignment == b.assignment);
  CHECK(a.sse_trace == b.sse_trace);
}

TEST_CASE("kmeans: k > n is rejected") {
  const auto set = random_set(3, 2, 1);
  CHECK(code_of([&] { kmeans_cluster(set, 4, 0); }) == Errc::KTooLarge);
}

TEST_CASE("kmeans: no empty clusters and SSE never increases (property)") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // heavy duplication makes empty clusters likely
    Rng rng(seed);
    EmbeddingSet set(2);
    for (int i = 0; i < 40; ++i) {
      const double base = static_cast<double>(rng.below(5));
      const std::vector<double> row{base, base * 0.5 + rng.uniform() * 1e-3};
      set.add("p" + std::to_string(i), row);
    }
    const std::size_t k = 3 + seed % 8;
    const auto model = kmeans_cluster(set, k, seed, {300, 1});
    std::vector<std::size_t> sizes(k, 0);
    for (const auto a : model.assignment) {
      REQUIRE(a < k);
      ++sizes[a];
    }
    CHECK(std::count(sizes.begin(), sizes.end(), 0) == 0);
    for (std::size_t t = 1; t < model.sse_trace.size(); ++t) {
      CHECK(model.sse_trace[t] <= model.sse_trace[t - 1] + 1e-12);
    }
    for (const double c : model.centroids) CHECK(std::isfinite(c));
  }
}

TEST_CASE("select_seed_pool: forced selection") {
  const auto set = random_set(2, 3, 4);
  auto ids = select_seed_pool(set, 1, 2, 0);
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<std::string>{"p0", "p1"});
}

TEST_CASE("select_seed_pool: one id per blob, nearest its mean") {
  std::vector<std::size_t> truth;
  const auto set = make_blobs(4, 15, 6, 2.0, 17, &truth);
  const auto ids = select_seed_pool(set, 4, 1, 5);
  REQUIRE(ids.size() == 4);

  // oracle: brute-force nearest point to each blob mean
  std::set<std::string> expected;
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<double> mean(set.dim(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (truth[i] != b) continue;
      for (std::size_t d = 0; d < set.dim(); ++d) mean[d] += set.row(i)[d];
      ++count;
    }
    for (auto& m : mean) m /= static_cast<double>(count);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (truth[i] != b) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < set.dim(); ++k) d += std::pow(set.row(i)[k] - mean[k], 2);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    expected.insert(set.id(best));
  }
  CHECK(std::set<std::string>(ids.begin(), ids.end()) == expected);
}

TEST_CASE("select_seed_pool: ids unique and drawn from the input; thin clusters backfill") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto set = random_set(45, 4, seed);
    const auto ids = select_seed_pool(set, 20, 2, seed);
    CHECK(ids.size() == 40);
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 40);
    for (const auto& id : ids) CHECK(set.index_of(id) < set.size());
  }
  const auto set = random_set(10, 2, 3);
  CHECK(code_of([&] { select_seed_pool(set, 6, 2, 0); }) == Errc::KTooLarge);
}

TEST_CASE("calibrate_perplexity: equidistant neighbours give a uniform conditional") {
  const std::vector<double> row(13, 4.0);
  const double beta = calibrate_perplexity(row, 12.0);
  const auto p = conditional_distribution(row, beta);
  for (const double v : p) CHECK(v == doctest::Approx(1.0 / 13.0).epsilon(1e-12));
  // a uniform row over 13 neighbours has perplexity 13 whatever beta is
  CHECK(std::exp2(entropy_bits(p)) == doctest::Approx(13.0).epsilon(1e-12));
}

TEST_CASE("calibrate_perplexity: target beyond the neighbour count is rejected") {
  const std::vector<double> row{1.0, 2.0, 3.0};
  CHECK(code_of([&] { calibrate_perplexity(row, 3.0); }) == Errc::PerplexityTooLarge);
  const std::vector<double> zeros(5, 0.0);
  CHECK(code_of([&] { calibrate_perplexity(zeros, 2.0); }) == Errc::DegenerateRow);
}

TEST_CASE("calibrate_perplexity: random rows hit the target entropy") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> row(49);
    const double scale = std::exp(rng.uniform(-3.0, 6.0));
    for (auto& d : row) d = scale * rng.uniform(0.01, 1.0);
    const double beta = calibrate_perplexity(row, 12.0);
    // oracle: Shannon entropy recomputed from scratch
    double z = 0.0;
    std::vector<double> w(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) z += (w[j] = std::exp(-beta * row[j]));
    double h = 0.0;
    for (const double v : w) {
      const double p = v / z;
      if (p > 0.0) h -= p * std::log2(p);
    }
    CHECK(std::abs(std::exp2(h) - 12.0) <= 1e-4 * 12.0 * std::log(2.0) * 2);
    CHECK(std::abs(h - std::log2(12.0)) <= 1e-4);
  }
}

TEST_CASE("compute_affinities: symmetric, zero diagonal, unit sum") {
  const auto set = random_set(40, 6, 8);
  const auto p = compute_affinities(pairwise_sq_distances(set), set.size(), 8.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.n; ++i) {
    CHECK(p.at(i, i) == 0.0);
    for (std::size_t j = 0; j < p.n; ++j) {
      CHECK(p.at(i, j) >= 0.0);
      CHECK(p.at(i, j) == p.at(j, i));
      sum += p.at(i, j);
    }
  }
  CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("tsne_project: shape, finiteness, determinism, KL trace") {
  const auto set = make_blobs(3, 20, 10, 3.0, 21);
  TsneOptions opts;
  opts.perplexity = 5.0;
  opts.seed = 77;
  const auto a = tsne_project(set, opts);
  REQUIRE(a.points.size() == set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    CHECK(a.points[i].image_id == set.id(i));
    CHECK(std::isfinite(a.points[i].x));
    CHECK(std::isfinite(a.points[i].y));
  }
  REQUIRE(a.kl_trace.size() == opts.iterations + 1);

  const double oracle = oracle::kl_divergence(a.affinities, a.points);
  CHECK(a.kl_trace.back() == doctest::Approx(oracle).epsilon(1e-9));
  CHECK(kl_divergence(a.affinities, a.points) == doctest::Approx(oracle).epsilon(1e-9));

  std::size_t non_increasing = 0;
  for (std::size_t t = 250; t < opts.iterations; ++t) non_increasing += a.kl_trace[t + 1] <= a.kl_trace[t];
  CHECK(static_cast<double>(non_increasing) >= 0.9 * static_cast<double>(opts.iterations - 250));
  CHECK(a.kl_trace.back() < a.kl_trace[250]);

  const auto b = tsne_project(set, opts);
  CHECK(a.points == b.points);
  CHECK(a.kl_trace == b.kl_trace);
}

TEST_CASE("tsne_project: duplicate embeddings are jittered apart") {
  auto set = random_set(12, 4, 5);
  EmbeddingSet dup(4);
  for (std::size_t i = 0; i < set.size(); ++i) dup.add(set.id(i), set.row(i));
  dup.add("copy", set.row(0));
  TsneOptions opts;
  opts.perplexity = 3.0;
  opts.iterations = 100;
  const auto r = tsne_project(dup, opts);
  CHECK(r.points.size() == 13);

  EmbeddingSet huge(1);
  for (int i = 0; i < 5; ++i) huge.add("h" + std::to_string(i), std::vector<double>{i < 2 ? 1e12 : 1.0 * i});
  CHECK(code_of([&] { tsne_project(huge, opts); }) == Errc::DegenerateInput);
}

TEST_CASE("tsne_project: input guards and perplexity warning") {
  const auto small = random_set(3, 2, 1);
  CHECK(code_of([&] { tsne_project(small, {}); }) == Errc::TooFewPoints);
  const auto set = random_set(30, 3, 1);
  TsneOptions opts;
  opts.iterations = 10;
  CHECK(tsne_project(set, opts).warnings.size() == 1); // 12 >= 29/3
}

TEST_CASE("projection CSV and embedding files round-trip") {
  vilod::testing::TempDir dir;
  const auto set = random_set(5, 3, 2);
  save_embeddings_text(set, dir.path() / "emb.txt", dir.path() / "ids.txt");
  const auto back = load_embeddings(dir.path() / "emb.txt", dir.path() / "ids.txt");
  REQUIRE(back.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back.id(i) == set.id(i));
    CHECK(std::equal(back.row(i).begin(), back.row(i).end(), set.row(i).begin()));
  }

  const std::vector<ProjectionPoint> pts{{"1 (3)", 0.25, -1.5}, {"a,b", 1e-7, 3.0}};
  CHECK(projection_from_csv(projection_to_csv(pts)) == pts);
}
