#pragma once

#include "vilod/projection.hpp"

#include <array>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace vilod {

struct ImageScore {
  std::string image_id;
  double avg_conf = 0.0;

  bool operator==(const ImageScore&) const = default;
};

// Per-image detection confidences. An empty list means no detections.
using DetectionScoreMap = std::map<std::string, std::vector<double>, std::less<>>;
using IdSet = std::set<std::string, std::less<>>;

// Arithmetic mean; 0.0 for an empty list. Throws ScoreOutOfRange.
double average_confidence(std::span<const double> scores);

// Lowest-average-confidence selection: candidates are the map keys minus
// `exclude`, ordered by (avg_conf, image_id) ascending and cut at `budget`.
std::vector<ImageScore> select_al_samples(const DetectionScoreMap& detections, const IdSet& exclude,
                                          std::size_t budget);

// (1 - avg_conf)^2. Throws ScoreOutOfRange outside [0, 1].
double uncertainty_weight(double avg_conf);

struct HeatmapGrid {
  double x_min = 0.0;
  double x_max = 0.0;
  double y_min = 0.0;
  double y_max = 0.0;
  std::size_t nx = 0;
  std::size_t ny = 0;
  // values[iy * nx + ix] is the density at (x(ix), y(iy)); grid nodes span
  // the extent inclusively.
  std::vector<double> values;
  // kernel covariance {xx, xy, yy}
  std::array<double, 3> bandwidth{};
  bool degenerate = false;
  std::string colormap_name = "Reds";

  double x_at(std::size_t ix) const;
  double y_at(std::size_t iy) const;
  double cell_area() const;
  double at(std::size_t ix, std::size_t iy) const { return values[iy * nx + ix]; }

  bool operator==(const HeatmapGrid&) const = default;
};

// Weighted bivariate Gaussian KDE on an nx * ny grid over the point extent
// padded by 5% per side. Bandwidth: Scott's factor n_eff^(-1/6), with Kish
// effective size, times the weighted (unbiased) data covariance.
HeatmapGrid compute_heatmap(std::span<const ProjectionPoint> points, std::span<const double> weights,
                            std::size_t nx = 128, std::size_t ny = 128);

// Header row `x_min,x_max,y_min,y_max,nx,ny,bw_xx,bw_xy,bw_yy,degenerate,colormap`,
// its values, then ny rows of nx comma-separated densities.
std::string heatmap_to_csv(const HeatmapGrid& grid);
HeatmapGrid heatmap_from_csv(std::string_view csv);

} // namespace vilod
