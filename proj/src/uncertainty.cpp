#include "vilod/uncertainty.hpp"

#include "csv_util.hpp"
#include "vilod/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace vilod {

double average_confidence(std::span<const double> scores) {
  if (scores.empty()) return 0.0;
  double total = 0.0;
  for (const double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw Error(Errc::ScoreOutOfRange, "confidence " + std::to_string(s));
    total += s;
  }
  return total / static_cast<double>(scores.size());
}

std::vector<ImageScore> select_al_samples(const DetectionScoreMap& detections, const IdSet& exclude,
                                          std::size_t budget) {
  std::vector<ImageScore> candidates;
  if (budget == 0) return candidates;
  candidates.reserve(detections.size());
  for (const auto& [id, scores] : detections) {
    if (exclude.contains(id)) continue;
    candidates.push_back({id, average_confidence(scores)});
  }
  const auto by_score = [](const ImageScore& a, const ImageScore& b) {
    return a.avg_conf != b.avg_conf ? a.avg_conf < b.avg_conf : a.image_id < b.image_id;
  };
  const std::size_t keep = std::min(budget, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                    by_score);
  candidates.resize(keep);
  return candidates;
}

double uncertainty_weight(double avg_conf) {
  if (!(avg_conf >= 0.0 && avg_conf <= 1.0)) throw Error(Errc::ScoreOutOfRange, "avg confidence " + std::to_string(avg_conf));
  const double u = 1.0 - avg_conf;
  return u * u;
}

double HeatmapGrid::x_at(std::size_t ix) const {
  return nx < 2 ? (x_min + x_max) / 2.0 : x_min + (x_max - x_min) * static_cast<double>(ix) / static_cast<double>(nx - 1);
}

double HeatmapGrid::y_at(std::size_t iy) const {
  return ny < 2 ? (y_min + y_max) / 2.0 : y_min + (y_max - y_min) * static_cast<double>(iy) / static_cast<double>(ny - 1);
}

double HeatmapGrid::cell_area() const {
  if (nx < 2 || ny < 2) return 0.0;
  return (x_max - x_min) / static_cast<double>(nx - 1) * (y_max - y_min) / static_cast<double>(ny - 1);
}

HeatmapGrid compute_heatmap(std::span<const ProjectionPoint> points, std::span<const double> weights, std::size_t nx,
                            std::size_t ny) {
  if (points.size() != weights.size()) {
    throw Error(Errc::InvalidArgument, "points/weights size mismatch");
  }
  if (points.size() < 2) throw Error(Errc::TooFewPoints, "heatmap needs at least 2 points");
  if (nx == 0 || ny == 0) throw Error(Errc::InvalidArgument, "empty grid");
  double total = 0.0;
  for (const double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(Errc::NegativeWeight, "weight " + std::to_string(w));
    total += w;
  }

  HeatmapGrid grid;
  grid.nx = nx;
  grid.ny = ny;
  grid.values.assign(nx * ny, 0.0);

  double lo_x = points[0].x, hi_x = points[0].x, lo_y = points[0].y, hi_y = points[0].y;
  for (const auto& p : points) {
    lo_x = std::min(lo_x, p.x);
    hi_x = std::max(hi_x, p.x);
    lo_y = std::min(lo_y, p.y);
    hi_y = std::max(hi_y, p.y);
  }
  const double span_x = hi_x - lo_x;
  const double span_y = hi_y - lo_y;
  const double pad_x = span_x > 0.0 ? 0.05 * span_x : 0.5;
  const double pad_y = span_y > 0.0 ? 0.05 * span_y : 0.5;
  grid.x_min = lo_x - pad_x;
  grid.x_max = hi_x + pad_x;
  grid.y_min = lo_y - pad_y;
  grid.y_max = hi_y + pad_y;

  if (total <= 0.0) {
    grid.degenerate = true;
    return grid;
  }

  const std::size_t n = points.size();
  std::vector<double> w(n);
  double sum_sq = 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = weights[i] / total;
    sum_sq += w[i] * w[i];
    mx += w[i] * points[i].x;
    my += w[i] * points[i].y;
  }
  double cxx = 0.0, cxy = 0.0, cyy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = points[i].x - mx;
    const double dy = points[i].y - my;
    cxx += w[i] * dx * dx;
    cxy += w[i] * dx * dy;
    cyy += w[i] * dy * dy;
  }
  const double unbias = 1.0 - sum_sq;
  const double n_eff = 1.0 / sum_sq;
  const double factor = std::pow(n_eff, -1.0 / 6.0);
  double hxx = cxx / unbias * factor * factor;
  double hxy = cxy / unbias * factor * factor;
  double hyy = cyy / unbias * factor * factor;

  // A single effective point or collinear data leaves the covariance
  // singular; fall back to a ridge sized from the extent.
  const double det = hxx * hyy - hxy * hxy;
  const double trace = hxx + hyy;
  if (!std::isfinite(det) || !(det > 1e-12 * trace * trace) || !(trace > 0.0)) {
    const double ridge_sd = 0.05 * std::max({span_x, span_y, 1e-12});
    if (!std::isfinite(hxx + hxy + hyy)) hxx = hxy = hyy = 0.0;
    hxx += ridge_sd * ridge_sd;
    hyy += ridge_sd * ridge_sd;
  }
  grid.bandwidth = {hxx, hxy, hyy};

  const double det_h = hxx * hyy - hxy * hxy;
  const double ixx = hyy / det_h;
  const double ixy = -hxy / det_h;
  const double iyy = hxx / det_h;
  const double norm = 1.0 / (2.0 * std::numbers::pi * std::sqrt(det_h));

  for (std::size_t iy = 0; iy < ny; ++iy) {
    const double gy = grid.y_at(iy);
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const double gx = grid.x_at(ix);
      double density = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (w[i] == 0.0) continue;
        const double dx = gx - points[i].x;
        const double dy = gy - points[i].y;
        const double q = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
        density += w[i] * std::exp(-0.5 * q);
      }
      grid.values[iy * nx + ix] = norm * density;
    }
  }
  return grid;
}

std::string heatmap_to_csv(const HeatmapGrid& g) {
  using detail::format_double;
  std::string out = "x_min,x_max,y_min,y_max,nx,ny,bw_xx,bw_xy,bw_yy,degenerate,colormap\n";
  out += format_double(g.x_min) + ',' + format_double(g.x_max) + ',' + format_double(g.y_min) + ',' +
         format_double(g.y_max) + ',' + std::to_string(g.nx) + ',' + std::to_string(g.ny) + ',' +
         format_double(g.bandwidth[0]) + ',' + format_double(g.bandwidth[1]) + ',' + format_double(g.bandwidth[2]) +
         ',' + (g.degenerate ? "1" : "0") + ',' + g.colormap_name + '\n';
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      if (ix > 0) out += ',';
      out += format_double(g.at(ix, iy));
    }
    out += '\n';
  }
  return out;
}

HeatmapGrid heatmap_from_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || !std::getline(in, line)) throw Error(Errc::InvalidArgument, "heatmap CSV header missing");
  const auto h = detail::csv_split(line);
  if (h.size() != 11) throw Error(Errc::InvalidArgument, "heatmap CSV header needs 11 fields");
  HeatmapGrid g;
  try {
    g.x_min = std::stod(h[0]);
    g.x_max = std::stod(h[1]);
    g.y_min = std::stod(h[2]);
    g.y_max = std::stod(h[3]);
    g.nx = std::stoul(h[4]);
    g.ny = std::stoul(h[5]);
    g.bandwidth = {std::stod(h[6]), std::stod(h[7]), std::stod(h[8])};
    g.degenerate = h[9] == "1";
    g.colormap_name = h[10];
    g.values.reserve(g.nx * g.ny);
    for (std::size_t iy = 0; iy < g.ny; ++iy) {
      if (!std::getline(in, line)) throw Error(Errc::InvalidArgument, "heatmap CSV truncated");
      const auto row = detail::csv_split(line);
      if (row.size() != g.nx) throw Error(Errc::InvalidArgument, "heatmap CSV row has wrong width");
      for (const auto& v : row) g.values.push_back(std::stod(v));
    }
  } catch (const std::logic_error&) {
    throw Error(Errc::InvalidArgument, "non-numeric heatmap CSV field");
  }
  return g;
}

} // namespace vilod
