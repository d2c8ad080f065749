#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vilod {

// Dimension produced by the detector backbone. Loaders accept any dimension
// as long as every row agrees.
inline constexpr std::size_t kEmbeddingDim = 256;

// Row-major matrix of image embeddings with one id per row.
class EmbeddingSet {
public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::size_t dim) : dim_(dim) {}

  void add(std::string image_id, std::span<const double> values);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return ids_.empty(); }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }

  // Row index of an id, or size() when absent. Linear scan.
  std::size_t index_of(std::string_view image_id) const;

  // Rows whose ids are in `keep`, in this set's order.
  EmbeddingSet subset(std::span<const std::string> keep) const;

private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> values_;
};

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept;

struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;       // k * dim, row-major
  std::vector<std::string> ids;        // copy of the clustered ids
  std::vector<std::size_t> assignment; // cluster index per id
  std::vector<double> sse_trace;       // within-cluster SSE after each Lloyd iteration
  std::size_t iterations = 0;

  std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }
  double sse() const { return sse_trace.empty() ? 0.0 : sse_trace.back(); }
};

struct KMeansOptions {
  std::size_t max_iterations = 300;
  // Independent k-means++ starts; the lowest-SSE run wins.
  std::size_t restarts = 10;
};

// Lloyd's algorithm from k-means++ seeding. Throws KTooLarge when k > n.
ClusterModel kmeans_cluster(const EmbeddingSet& embeddings, std::size_t k, std::uint64_t seed,
                            const KMeansOptions& options = {});

// Diversity seed pool: the `per_centroid` members nearest each centroid,
// backfilled from the globally nearest unselected points for thin clusters.
std::vector<std::string> select_seed_pool(const EmbeddingSet& embeddings, std::size_t k = 20,
                                          std::size_t per_centroid = 2, std::uint64_t seed = 42,
                                          const KMeansOptions& options = {});

// --- t-SNE -----------------------------------------------------------------

// Symmetric joint probabilities, zero diagonal, summing to one.
struct AffinityMatrix {
  std::size_t n = 0;
  std::vector<double> p; // n * n

  double at(std::size_t i, std::size_t j) const { return p[i * n + j]; }
};

// Gaussian conditional p(j|i) for one row of squared distances at precision beta.
std::vector<double> conditional_distribution(std::span<const double> sq_distances, double beta);

// Shannon entropy in bits of a discrete distribution.
double entropy_bits(std::span<const double> distribution);

// Binary search on beta = 1/(2 sigma^2) until log2 perplexity is within 1e-5
// of log2(target), or 64 steps. Throws DegenerateRow when all distances are
// zero and PerplexityTooLarge when target >= row length.
double calibrate_perplexity(std::span<const double> sq_distances, double target_perplexity);

// Pairwise squared distances, row-major n * n.
std::vector<double> pairwise_sq_distances(const EmbeddingSet& embeddings);

AffinityMatrix compute_affinities(std::span<const double> sq_distances, std::size_t n, double perplexity);

struct ProjectionPoint {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;

  bool operator==(const ProjectionPoint&) const = default;
};

struct TsneOptions {
  double perplexity = 12.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double init_sd = 1e-4;
  double duplicate_jitter = 1e-9;
  bool adaptive_gains = true;
  std::uint64_t seed = 42;
};

struct TsneResult {
  std::vector<ProjectionPoint> points;
  // kl_trace[t] = KL(P || Q) after t updates; size iterations + 1.
  std::vector<double> kl_trace;
  AffinityMatrix affinities;
  std::vector<std::string> warnings;
};

// Exact O(n^2) t-SNE to two dimensions. Requires n >= 4.
TsneResult tsne_project(const EmbeddingSet& embeddings, const TsneOptions& options = {});

// KL(P || Q) for a 2-D layout, with Q from the Student-t kernel.
double kl_divergence(const AffinityMatrix& p, std::span<const ProjectionPoint> layout);

// --- file formats ------------------------------------------------------------

// Matrix: text (whitespace separated, one row per line) or, for .bin/.f32
// files, little-endian float32 row-major. Ids: one per line, same order.
EmbeddingSet load_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& ids);
void save_embeddings_text(const EmbeddingSet& embeddings, const std::filesystem::path& matrix,
                          const std::filesystem::path& ids);

// CSV with header `image_id,x,y`. Ids containing commas or quotes are quoted.
std::string projection_to_csv(std::span<const ProjectionPoint> points);
std::vector<ProjectionPoint> projection_from_csv(std::string_view csv);

} // namespace vilod
