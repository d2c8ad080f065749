#pragma once

// Brute-force reference implementations used to check the engine. They
// follow the textbook definitions and share no code with src/.

#include "vilod/evaluation.hpp"
#include "vilod/projection.hpp"

#include <functional>
#include <limits>
#include <optional>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace vilod::oracle {

// Score everything, sort everything, cut.
inline std::vector<std::pair<std::string, double>>
select_lowest_average(const std::map<std::string, std::vector<double>, std::less<>>& detections,
                      const std::set<std::string, std::less<>>& exclude, std::size_t budget) {
  std::vector<std::pair<double, std::string>> all;
  for (const auto& [id, scores] : detections) {
    if (exclude.count(id) != 0) continue;
    double avg = 0.0;
    if (!scores.empty()) {
      double total = 0.0;
      for (const double s : scores) total += s;
      avg = total / static_cast<double>(scores.size());
    }
    all.emplace_back(avg, id);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < all.size() && i < budget; ++i) out.emplace_back(all[i].second, all[i].first);
  return out;
}

struct KdeGrid {
  double x_min, x_max, y_min, y_max;
  double h_xx, h_xy, h_yy;
  std::vector<double> values; // [iy][ix]
};

// Direct double-sum weighted Gaussian KDE, bandwidth recomputed from the raw
// weights with numpy-style aweights covariance and Scott's factor.
inline KdeGrid direct_kde(const std::vector<ProjectionPoint>& pts, const std::vector<double>& raw_w, std::size_t nx,
                          std::size_t ny) {
  KdeGrid g{};
  double lx = 1e300, hx = -1e300, ly = 1e300, hy = -1e300;
  for (const auto& p : pts) {
    lx = std::min(lx, p.x);
    hx = std::max(hx, p.x);
    ly = std::min(ly, p.y);
    hy = std::max(hy, p.y);
  }
  // 5% padding per side, 0.5 for a zero span
  const double px = hx > lx ? 0.05 * (hx - lx) : 0.5;
  const double py = hy > ly ? 0.05 * (hy - ly) : 0.5;
  g.x_min = lx - px;
  g.x_max = hx + px;
  g.y_min = ly - py;
  g.y_max = hy + py;

  double v1 = 0.0, v2 = 0.0;
  for (const double w : raw_w) {
    v1 += w;
    v2 += w * w;
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    mx += raw_w[i] * pts[i].x / v1;
    my += raw_w[i] * pts[i].y / v1;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sxx += raw_w[i] * (pts[i].x - mx) * (pts[i].x - mx);
    sxy += raw_w[i] * (pts[i].x - mx) * (pts[i].y - my);
    syy += raw_w[i] * (pts[i].y - my) * (pts[i].y - my);
  }
  const double fact = v1 / (v1 * v1 - v2);
  const double neff = v1 * v1 / v2;
  const double scott2 = std::pow(neff, -2.0 / 6.0);
  g.h_xx = sxx * fact * scott2;
  g.h_xy = sxy * fact * scott2;
  g.h_yy = syy * fact * scott2;
  // singular covariance (two points, collinear data): the documented ridge
  // of (5% of the wider data span)^2 on the diagonal
  if (!(g.h_xx * g.h_yy - g.h_xy * g.h_xy > 1e-12 * (g.h_xx + g.h_yy) * (g.h_xx + g.h_yy))) {
    const double r = 0.05 * std::max(hx - lx, hy - ly);
    g.h_xx += r * r;
    g.h_yy += r * r;
  }

  const double det = g.h_xx * g.h_yy - g.h_xy * g.h_xy;
  g.values.resize(nx * ny);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const double x = g.x_min + (g.x_max - g.x_min) * static_cast<double>(ix) / static_cast<double>(nx - 1);
      const double y = g.y_min + (g.y_max - g.y_min) * static_cast<double>(iy) / static_cast<double>(ny - 1);
      double f = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const double dx = x - pts[i].x;
        const double dy = y - pts[i].y;
        // (d^T H^-1 d) with H^-1 = adj(H) / det(H)
        const double maha = (g.h_yy * dx * dx - 2.0 * g.h_xy * dx * dy + g.h_xx * dy * dy) / det;
        f += (raw_w[i] / v1) * std::exp(-maha / 2.0) / (2.0 * std::numbers::pi * std::sqrt(det));
      }
      g.values[iy * nx + ix] = f;
    }
  }
  return g;
}

// Intersection over union from corner coordinates.
inline double corner_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1, double bx2,
                         double by2) {
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  if (inter == 0.0) return 0.0;
  return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter);
}

inline double box_iou(const Detection& d, const GroundTruthBox& g) {
  return corner_iou(d.cx - d.w / 2, d.cy - d.h / 2, d.cx + d.w / 2, d.cy + d.h / 2, g.cx - g.w / 2, g.cy - g.h / 2,
                    g.cx + g.w / 2, g.cy + g.h / 2);
}

// Tries every injective detection-to-gt assignment within one class of one
// image and keeps the one whose per-detection vector, read in confidence
// order, of (IoU, -gt index) is lexicographically largest; an unmatched
// detection scores -inf. Returns the TP flag per detection.
inline std::vector<bool> exhaustive_match(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                                          double thresh) {
  std::vector<bool> tp(dets.size(), false);
  std::set<int> classes;
  for (const auto& d : dets) classes.insert(d.class_id);
  for (const int c : classes) {
    std::vector<std::size_t> di, gi;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id == c) di.push_back(i);
    }
    std::stable_sort(di.begin(), di.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id == c) gi.push_back(g);
    }
    using Key = std::vector<std::pair<double, double>>;
    const double ninf = -std::numeric_limits<double>::infinity();
    Key best_key;
    std::vector<int> best_assign, assign(di.size(), -1);
    std::vector<bool> used(gi.size(), false);
    std::function<void(std::size_t)> rec = [&](std::size_t k) {
      if (k == di.size()) {
        Key key;
        for (std::size_t j = 0; j < di.size(); ++j) {
          if (assign[j] < 0) {
            key.emplace_back(ninf, ninf);
          } else {
            const auto g = gi[static_cast<std::size_t>(assign[j])];
            key.emplace_back(box_iou(dets[di[j]], gts[g]), -static_cast<double>(g));
          }
        }
        if (best_assign.empty() || key > best_key) {
          best_key = key;
          best_assign = assign;
        }
        return;
      }
      assign[k] = -1;
      rec(k + 1);
      for (std::size_t g = 0; g < gi.size(); ++g) {
        if (used[g] || box_iou(dets[di[k]], gts[gi[g]]) < thresh) continue;
        used[g] = true;
        assign[k] = static_cast<int>(g);
        rec(k + 1);
        used[g] = false;
        assign[k] = -1;
      }
    };
    rec(0);
    for (std::size_t j = 0; j < di.size(); ++j) tp[di[j]] = best_assign[j] >= 0;
  }
  return tp;
}

// AP as the mean over recall levels i * 0.01 of the best precision among
// curve points with recall >= level.
inline std::optional<double> enumerated_ap(std::vector<std::pair<double, bool>> scored, std::size_t num_gt) {
  if (num_gt == 0) return scored.empty() ? std::nullopt : std::optional<double>(0.0);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::pair<double, double>> curve; // (recall, precision)
  std::size_t tp = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    tp += scored[i].second ? 1 : 0;
    curve.emplace_back(static_cast<double>(tp) / static_cast<double>(num_gt),
                       static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double level = k * 0.01;
    double best = 0.0;
    for (const auto& [r, p] : curve) {
      if (r >= level) best = std::max(best, p);
    }
    total += best;
  }
  return total / 101.0;
}

// Mean AP over defined classes at one IoU threshold.
inline double exhaustive_map(const std::map<std::string, std::vector<Detection>, std::less<>>& dets,
                             const std::map<std::string, std::vector<GroundTruthBox>, std::less<>>& gts,
                             double thresh) {
  std::map<int, std::vector<std::pair<double, bool>>> scored;
  std::map<int, std::size_t> ngt;
  for (const auto& [id, boxes] : gts) {
    for (const auto& g : boxes) ++ngt[g.class_id];
    const auto it = dets.find(id);
    if (it == dets.end()) continue;
    const auto tp = exhaustive_match(it->second, boxes, thresh);
    for (std::size_t i = 0; i < it->second.size(); ++i) scored[it->second[i].class_id].emplace_back(it->second[i].confidence, tp[i]);
  }
  std::set<int> classes;
  for (const auto& [c, n] : ngt) classes.insert(c);
  for (const auto& [c, s] : scored) classes.insert(c);
  double sum = 0.0;
  std::size_t defined = 0;
  for (const int c : classes) {
    const auto ap = enumerated_ap(scored[c], ngt[c]);
    if (ap) {
      sum += *ap;
      ++defined;
    }
  }
  return defined == 0 ? 0.0 : sum / static_cast<double>(defined);
}

// Independent KL(P||Q) recomputation straight from the definition.
inline double kl_divergence(const AffinityMatrix& p, const std::vector<ProjectionPoint>& pts) {
  const std::size_t n = pts.size();
  std::vector<double> q(n * n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      q[i * n + j] = 1.0 / (1.0 + std::pow(pts[i].x - pts[j].x, 2) + std::pow(pts[i].y - pts[j].y, 2));
      z += q[i * n + j];
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && p.at(i, j) > 0.0) kl += p.at(i, j) * std::log(p.at(i, j) / (q[i * n + j] / z));
    }
  }
  return kl;
}

} // namespace vilod::oracle
