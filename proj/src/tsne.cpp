#include "vilod/error.hpp"
#include "vilod/projection.hpp"
#include "vilod/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vilod {

std::vector<double> conditional_distribution(std::span<const double> sq_distances, double beta) {
  // Shifting by the minimum distance leaves the normalized distribution
  // unchanged and keeps the largest term at exp(0).
  const double min_d = *std::min_element(sq_distances.begin(), sq_distances.end());
  std::vector<double> p(sq_distances.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    p[j] = std::exp(-beta * (sq_distances[j] - min_d));
    sum += p[j];
  }
  for (auto& v : p) v /= sum;
  return p;
}

double entropy_bits(std::span<const double> distribution) {
  double h = 0.0;
  for (const double v : distribution) {
    if (v > 0.0) h -= v * std::log2(v);
  }
  return h;
}

double calibrate_perplexity(std::span<const double> sq_distances, double target_perplexity) {
  if (sq_distances.empty()) throw Error(Errc::DegenerateRow, "empty distance row");
  if (!(target_perplexity > 0.0) || target_perplexity >= static_cast<double>(sq_distances.size())) {
    throw Error(Errc::PerplexityTooLarge, "target perplexity " + std::to_string(target_perplexity) +
                                              " needs more than " + std::to_string(sq_distances.size()) +
                                              " neighbours");
  }
  double min_d = std::numeric_limits<double>::infinity();
  double max_d = 0.0;
  double mean_shifted = 0.0;
  for (const double d : sq_distances) {
    if (!std::isfinite(d) || d < 0.0) throw Error(Errc::InvalidArgument, "distances must be finite and >= 0");
    min_d = std::min(min_d, d);
    max_d = std::max(max_d, d);
  }
  if (max_d == 0.0) throw Error(Errc::DegenerateRow, "all distances are zero");
  for (const double d : sq_distances) mean_shifted += d - min_d;
  mean_shifted /= static_cast<double>(sq_distances.size());

  const double target = std::log2(target_perplexity);
  double beta = mean_shifted > 0.0 ? 1.0 / mean_shifted : 1.0;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 64; ++step) {
    const double h = entropy_bits(conditional_distribution(sq_distances, beta));
    const double diff = h - target;
    if (std::abs(diff) <= 1e-5) break;
    if (diff > 0.0) {
      // too flat: sharpen
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
    } else {
      hi = beta;
      beta = (beta + lo) / 2.0;
    }
  }
  return beta;
}

std::vector<double> pairwise_sq_distances(const EmbeddingSet& embeddings) {
  const std::size_t n = embeddings.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = squared_distance(embeddings.row(i), embeddings.row(j));
      d[i * n + j] = v;
      d[j * n + i] = v;
    }
  }
  return d;
}

AffinityMatrix compute_affinities(std::span<const double> sq_distances, std::size_t n, double perplexity) {
  AffinityMatrix out;
  out.n = n;
  out.p.assign(n * n, 0.0);
  std::vector<double> row(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0, r = 0; j < n; ++j) {
      if (j != i) row[r++] = sq_distances[i * n + j];
    }
    const double beta = calibrate_perplexity(row, perplexity);
    const auto cond = conditional_distribution(row, beta);
    for (std::size_t j = 0, r = 0; j < n; ++j) {
      if (j != i) out.p[i * n + j] = cond[r++];
    }
  }
  // symmetrize: p_ij = (p_j|i + p_i|j) / 2n
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (out.p[i * n + j] + out.p[j * n + i]) * scale;
      out.p[i * n + j] = v;
      out.p[j * n + i] = v;
    }
  }
  return out;
}

namespace {

// Identical rows would give zero distances; nudge every repeat by a seeded
// jitter of the configured magnitude.
EmbeddingSet jitter_duplicates(const EmbeddingSet& in, double magnitude, std::uint64_t seed) {
  const std::size_t n = in.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto row_less = [&](std::size_t a, std::size_t b) {
    const auto ra = in.row(a);
    const auto rb = in.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  const auto row_equal = [&](std::size_t a, std::size_t b) {
    const auto ra = in.row(a);
    const auto rb = in.row(b);
    return std::equal(ra.begin(), ra.end(), rb.begin());
  };
  std::stable_sort(order.begin(), order.end(), row_less);
  std::vector<bool> repeat(n, false);
  bool any = false;
  for (std::size_t i = 1; i < n; ++i) {
    if (row_equal(order[i - 1], order[i])) {
      repeat[order[i]] = true;
      any = true;
    }
  }
  if (!any) return in;

  EmbeddingSet out(in.dim());
  std::vector<double> row(in.dim());
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = in.row(i);
    std::copy(src.begin(), src.end(), row.begin());
    if (repeat[i]) {
      Rng rng(mix_seed(seed, stable_hash(in.id(i))));
      for (auto& v : row) v += magnitude * rng.uniform(-1.0, 1.0);
    }
    out.add(in.id(i), row);
  }

  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ra = out.row(a);
    const auto rb = out.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  for (std::size_t i = 1; i < n; ++i) {
    const auto ra = out.row(order[i - 1]);
    const auto rb = out.row(order[i]);
    if (std::equal(ra.begin(), ra.end(), rb.begin())) {
      throw Error(Errc::DegenerateInput, "embeddings " + out.id(order[i - 1]) + " and " + out.id(order[i]) +
                                             " remain identical after jitter");
    }
  }
  return out;
}

} // namespace

TsneResult tsne_project(const EmbeddingSet& embeddings, const TsneOptions& options) {
  const std::size_t n = embeddings.size();
  if (n < 4) throw Error(Errc::TooFewPoints, "t-SNE needs at least 4 points, got " + std::to_string(n));

  TsneResult result;
  if (options.perplexity >= static_cast<double>(n - 1) / 3.0) {
    result.warnings.push_back("perplexity " + std::to_string(options.perplexity) + " is large for " +
                              std::to_string(n) + " points");
  }

  const EmbeddingSet data = jitter_duplicates(embeddings, options.duplicate_jitter, options.seed);
  result.affinities = compute_affinities(pairwise_sq_distances(data), n, options.perplexity);
  const auto& P = result.affinities.p;

  double p_log_p = 0.0;
  for (const double v : P) {
    if (v > 0.0) p_log_p += v * std::log(v);
  }

  Rng rng(options.seed);
  std::vector<double> y(2 * n);
  for (auto& v : y) v = options.init_sd * rng.normal();
  std::vector<double> update(2 * n, 0.0);
  std::vector<double> gains(2 * n, 1.0);
  std::vector<double> grad(2 * n);
  std::vector<double> num(n * n, 0.0);

  // Fills num with Student-t kernel values and returns their sum plus
  // KL(P || Q) at the current layout.
  const auto kernel = [&](double& kl) {
    double z = 0.0;
    double p_log_num = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = y[2 * i];
      const double yi = y[2 * i + 1];
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = xi - y[2 * j];
        const double dy = yi - y[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = q;
        num[j * n + i] = q;
        z += 2.0 * q;
        const double pij = P[i * n + j];
        if (pij > 0.0) p_log_num += 2.0 * pij * std::log(q);
      }
    }
    // KL = sum p log p - sum p log(num / Z), with sum p = 1
    kl = p_log_p - p_log_num + std::log(z);
    return z;
  };

  for (std::size_t it = 0; it < options.iterations; ++it) {
    const double exaggeration = it < options.exaggeration_iterations ? options.exaggeration : 1.0;
    const double momentum = it < options.momentum_switch ? options.initial_momentum : options.final_momentum;

    double kl = 0.0;
    const double z = kernel(kl);
    result.kl_trace.push_back(kl);

    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0;
      double gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = num[i * n + j];
        const double mult = (exaggeration * P[i * n + j] - q / z) * q;
        gx += mult * (y[2 * i] - y[2 * j]);
        gy += mult * (y[2 * i + 1] - y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    }

    for (std::size_t d = 0; d < 2 * n; ++d) {
      if (options.adaptive_gains) {
        const bool same_sign = (grad[d] > 0.0) == (update[d] > 0.0);
        gains[d] = same_sign ? gains[d] * 0.8 : gains[d] + 0.2;
        gains[d] = std::max(gains[d], 0.01);
      }
      update[d] = momentum * update[d] - options.learning_rate * gains[d] * grad[d];
      y[d] += update[d];
    }

    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  double final_kl = 0.0;
  kernel(final_kl);
  result.kl_trace.push_back(final_kl);

  result.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(y[2 * i]) || !std::isfinite(y[2 * i + 1])) {
      throw Error(Errc::DegenerateInput, "t-SNE diverged at point " + embeddings.id(i));
    }
    result.points.push_back({embeddings.id(i), y[2 * i], y[2 * i + 1]});
  }
  return result;
}

double kl_divergence(const AffinityMatrix& p, std::span<const ProjectionPoint> layout) {
  const std::size_t n = p.n;
  if (layout.size() != n) throw Error(Errc::InvalidArgument, "layout size does not match affinities");
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = layout[i].x - layout[j].x;
      const double dy = layout[i].y - layout[j].y;
      z += 1.0 / (1.0 + dx * dx + dy * dy);
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double pij = p.at(i, j);
      if (i == j || pij <= 0.0) continue;
      const double dx = layout[i].x - layout[j].x;
      const double dy = layout[i].y - layout[j].y;
      const double q = 1.0 / (1.0 + dx * dx + dy * dy) / z;
      kl += pij * std::log(pij / q);
    }
  }
  return kl;
}

} // namespace vilod
