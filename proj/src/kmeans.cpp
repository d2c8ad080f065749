#include "vilod/error.hpp"
#include "vilod/projection.hpp"
#include "vilod/rng.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace vilod {

namespace {

struct Lloyd {
  const EmbeddingSet& data;
  std::size_t k;
  std::size_t dim;
  std::vector<double> centroids;
  std::vector<std::size_t> assignment;

  std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }

  void seed_plus_plus(Rng& rng) {
    const std::size_t n = data.size();
    centroids.assign(k * dim, 0.0);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(rng.below(n));
    for (std::size_t c = 0; c < k; ++c) {
      std::copy_n(data.row(pick).begin(), dim, centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
      if (c + 1 == k) break;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        nearest[i] = std::min(nearest[i], squared_distance(data.row(i), centroid(c)));
        total += nearest[i];
      }
      if (total <= 0.0) {
        pick = static_cast<std::size_t>(rng.below(n));
        continue;
      }
      const double target = rng.uniform() * total;
      double running = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        running += nearest[i];
        if (running > target && nearest[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
  }

  // Returns true if any assignment changed.
  bool assign() {
    bool changed = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(data.row(i), centroid(c));
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assignment[i] != best) {
        assignment[i] = best;
        changed = true;
      }
    }
    return changed;
  }

  // Moves the point farthest from its own centroid into each empty cluster.
  bool reseed_empty() {
    std::vector<std::size_t> sizes(k, 0);
    for (const auto a : assignment) ++sizes[a];
    bool moved = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = data.size();
      double far_d = -1.0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (sizes[assignment[i]] < 2) continue;
        const double d = squared_distance(data.row(i), centroid(assignment[i]));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far == data.size()) break; // cannot happen while k <= n
      --sizes[assignment[far]];
      assignment[far] = c;
      sizes[c] = 1;
      std::copy_n(data.row(far).begin(), dim, centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
      moved = true;
    }
    return moved;
  }

  void update_means() {
    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto row = data.row(i);
      const std::size_t c = assignment[i];
      ++counts[c];
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += row[d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) centroids[c * dim + d] = sums[c * dim + d] / static_cast<double>(counts[c]);
    }
  }

  double sse() const {
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) total += squared_distance(data.row(i), centroid(assignment[i]));
    return total;
  }
};

ClusterModel run_once(const EmbeddingSet& data, std::size_t k, std::uint64_t seed, std::size_t max_iterations) {
  Lloyd lloyd{data, k, data.dim(), {}, std::vector<std::size_t>(data.size(), k)};
  Rng rng(seed);
  lloyd.seed_plus_plus(rng);

  ClusterModel model;
  model.k = k;
  model.dim = data.dim();
  model.ids = data.ids();
  for (std::size_t it = 0; it < max_iterations; ++it) {
    bool changed = lloyd.assign();
    changed = lloyd.reseed_empty() || changed;
    if (!changed && it > 0) break;
    lloyd.update_means();
    model.sse_trace.push_back(lloyd.sse());
    model.iterations = it + 1;
  }
  model.centroids = std::move(lloyd.centroids);
  model.assignment = std::move(lloyd.assignment);
  return model;
}

} // namespace

ClusterModel kmeans_cluster(const EmbeddingSet& embeddings, std::size_t k, std::uint64_t seed,
                            const KMeansOptions& options) {
  if (embeddings.empty()) throw Error(Errc::InvalidArgument, "k-means needs at least one point");
  if (k == 0) throw Error(Errc::InvalidArgument, "k must be at least 1");
  if (k > embeddings.size()) {
    throw Error(Errc::KTooLarge, "k=" + std::to_string(k) + " exceeds n=" + std::to_string(embeddings.size()));
  }
  const std::size_t restarts = std::max<std::size_t>(1, options.restarts);
  ClusterModel best;
  for (std::size_t r = 0; r < restarts; ++r) {
    ClusterModel model = run_once(embeddings, k, mix_seed(seed, r), options.max_iterations);
    if (r == 0 || model.sse() < best.sse()) best = std::move(model);
  }
  return best;
}

std::vector<std::string> select_seed_pool(const EmbeddingSet& embeddings, std::size_t k, std::size_t per_centroid,
                                          std::uint64_t seed, const KMeansOptions& options) {
  if (k * per_centroid > embeddings.size()) {
    throw Error(Errc::KTooLarge, "k * per_centroid = " + std::to_string(k * per_centroid) + " exceeds n=" +
                                     std::to_string(embeddings.size()));
  }
  const ClusterModel model = kmeans_cluster(embeddings, k, seed, options);
  const std::size_t n = embeddings.size();
  std::vector<bool> taken(n, false);
  std::vector<std::string> picked;
  picked.reserve(k * per_centroid);

  std::vector<std::pair<double, std::size_t>> order(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) order[i] = {squared_distance(embeddings.row(i), model.centroid(c)), i};
    std::sort(order.begin(), order.end());

    std::size_t got = 0;
    for (const auto& [d, i] : order) {
      if (got == per_centroid) break;
      if (model.assignment[i] == c && !taken[i]) {
        taken[i] = true;
        picked.push_back(embeddings.id(i));
        ++got;
      }
    }
    for (const auto& [d, i] : order) {
      if (got == per_centroid) break;
      if (!taken[i]) {
        taken[i] = true;
        picked.push_back(embeddings.id(i));
        ++got;
      }
    }
  }
  return picked;
}

} // namespace vilod
