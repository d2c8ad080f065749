#include "vilod/evaluation.hpp"

#include "csv_util.hpp"
#include "vilod/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace vilod {

DetectionMap group_by_image(std::span<const Detection> detections) {
  DetectionMap out;
  for (const auto& d : detections) out[d.image_id].push_back(d);
  return out;
}

namespace {

void check_box(const Box& b) {
  if (!(b.w > 0.0 && b.h > 0.0) || !std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
      !std::isfinite(b.h)) {
    throw Error(Errc::DegenerateBox, "box needs finite w, h > 0");
  }
}

} // namespace

double iou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double iy = std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::size_t MatchResult::true_positives() const {
  return static_cast<std::size_t>(
      std::count_if(detections.begin(), detections.end(), [](const DetectionMatch& m) { return m.is_tp; }));
}

std::size_t MatchResult::false_positives() const { return detections.size() - true_positives(); }

MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruthBox> gts, double iou_thresh) {
  MatchResult r;
  r.detections.resize(dets.size());

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });

  std::vector<bool> taken(gts.size(), false);
  for (const std::size_t d : order) {
    const Box db = dets[d].box();
    std::optional<std::size_t> best;
    double best_iou = -1.0;
    double seen = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != dets[d].class_id) continue;
      const double v = iou(db, box_of(gts[g]));
      seen = std::max(seen, v);
      if (taken[g] || v < iou_thresh) continue;
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    auto& m = r.detections[d];
    if (best) {
      taken[*best] = true;
      m.matched_gt = best;
      m.iou = best_iou;
      m.is_tp = true;
    } else {
      m.iou = seen;
    }
  }
  r.false_negatives = static_cast<std::size_t>(std::count(taken.begin(), taken.end(), false));
  return r;
}

std::optional<double> average_precision(std::span<const ScoredOutcome> outcomes, std::size_t num_gt) {
  if (num_gt == 0) {
    if (outcomes.empty()) return std::nullopt;
    return 0.0;
  }
  std::vector<ScoredOutcome> sorted(outcomes.begin(), outcomes.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ScoredOutcome& a, const ScoredOutcome& b) { return a.confidence > b.confidence; });

  const std::size_t n = sorted.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sorted[i].is_tp) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = static_cast<double>(k) * 0.01;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

namespace {

struct ClassTally {
  std::vector<ScoredOutcome> outcomes[10];
  std::size_t num_gt = 0;
};

std::optional<double> mean_of_defined(const std::vector<std::optional<double>>& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x : v) {
    if (x) {
      sum += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

} // namespace

EvalReport map_metrics(const DetectionMap& dets, const GroundTruth& gts) {
  if (gts.empty()) throw Error(Errc::EmptyEvalSet, "no images in the evaluation set");

  std::map<int, ClassTally> tally;
  static const std::vector<Detection> kNone;
  for (const auto& [image_id, boxes] : gts) {
    const auto found = dets.find(image_id);
    const auto& image_dets = found == dets.end() ? kNone : found->second;
    for (const auto& g : boxes) ++tally[g.class_id].num_gt;
    for (const auto& d : image_dets) tally[d.class_id];
    for (int t = 0; t < 10; ++t) {
      const auto m = match_detections(image_dets, boxes, kIouThresholds[t]);
      for (std::size_t i = 0; i < image_dets.size(); ++i) {
        tally[image_dets[i].class_id].outcomes[t].push_back({image_dets[i].confidence, m.detections[i].is_tp});
      }
    }
  }

  EvalReport report;
  std::vector<std::optional<double>> ap50, ap75, ap_all;
  for (const auto& [cls, t] : tally) {
    ClassAp row{cls, std::nullopt, std::nullopt};
    std::optional<double> per_thresh[10];
    for (int k = 0; k < 10; ++k) per_thresh[k] = average_precision(t.outcomes[k], t.num_gt);
    if (per_thresh[0]) {
      double s = 0.0;
      for (const auto& v : per_thresh) s += *v;
      row.ap50 = per_thresh[0];
      row.ap50_95 = s / 10.0;
    }
    ap50.push_back(per_thresh[0]);
    ap75.push_back(per_thresh[5]);
    ap_all.push_back(row.ap50_95);
    report.per_class.push_back(row);
  }
  report.map50 = mean_of_defined(ap50).value_or(0.0);
  report.map75 = mean_of_defined(ap75).value_or(0.0);
  report.map50_95 = mean_of_defined(ap_all).value_or(0.0);

  // Operating point: sweep the confidence threshold downward over all
  // IoU-0.5 outcomes and keep the best class-mean F1.
  struct Item {
    double conf;
    bool tp;
    std::size_t slot;
  };
  std::vector<Item> items;
  std::vector<std::size_t> gt_count;
  std::vector<bool> has_gt;
  for (const auto& [cls, t] : tally) {
    const std::size_t slot = gt_count.size();
    gt_count.push_back(t.num_gt);
    has_gt.push_back(t.num_gt > 0);
    for (const auto& o : t.outcomes[0]) items.push_back({o.confidence, o.is_tp, slot});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.conf > b.conf; });
  const std::size_t classes_with_gt = static_cast<std::size_t>(std::count(has_gt.begin(), has_gt.end(), true));
  report.confidence_threshold = 1.0;
  if (classes_with_gt > 0) {
    std::vector<std::size_t> kept(gt_count.size(), 0), tps(gt_count.size(), 0);
    double best_f1 = 0.0;
    for (std::size_t i = 0; i < items.size();) {
      const double tau = items[i].conf;
      for (; i < items.size() && items[i].conf == tau; ++i) {
        ++kept[items[i].slot];
        if (items[i].tp) ++tps[items[i].slot];
      }
      double f1 = 0.0, p = 0.0, r = 0.0;
      for (std::size_t c = 0; c < gt_count.size(); ++c) {
        if (!has_gt[c]) continue;
        const double pc = kept[c] == 0 ? 0.0 : static_cast<double>(tps[c]) / static_cast<double>(kept[c]);
        const double rc = static_cast<double>(tps[c]) / static_cast<double>(gt_count[c]);
        p += pc;
        r += rc;
        f1 += pc + rc > 0.0 ? 2.0 * pc * rc / (pc + rc) : 0.0;
      }
      const double denom = static_cast<double>(classes_with_gt);
      if (f1 / denom >= best_f1) {
        best_f1 = f1 / denom;
        report.precision = p / denom;
        report.recall = r / denom;
        report.confidence_threshold = tau;
      }
    }
  }
  return report;
}

ClassBalance class_balance(std::span<const AnnotatedInstance> annotations, int boundary, std::size_t num_classes) {
  ClassBalance b;
  b.prior_count.assign(num_classes, 0);
  b.new_count.assign(num_classes, 0);
  for (const auto& a : annotations) {
    if (a.class_id < 0 || static_cast<std::size_t>(a.class_id) >= num_classes) {
      throw Error(Errc::UnknownClass, "class " + std::to_string(a.class_id));
    }
    if (a.iteration < boundary) ++b.prior_count[static_cast<std::size_t>(a.class_id)];
    else if (a.iteration == boundary) ++b.new_count[static_cast<std::size_t>(a.class_id)];
  }
  return b;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(Errc::InvalidArgument, "quantile of empty data");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

BoxSummary summarize(std::vector<double> values) {
  BoxSummary s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.empty = false;
  s.count = values.size();
  s.q1 = quantile_sorted(values, 0.25);
  s.median = quantile_sorted(values, 0.5);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  double lo = s.q1, hi = s.q3;
  bool have_lo = false;
  for (const double v : values) {
    if (v < lo_fence || v > hi_fence) {
      s.outliers.push_back(v);
      continue;
    }
    if (!have_lo) {
      lo = std::min(lo, v);
      have_lo = true;
    }
    hi = std::max(hi, v);
  }
  s.min = lo;
  s.max = hi;
  return s;
}

std::vector<BoxSummary> confidence_distribution(std::span<const Detection> detections, std::size_t num_classes) {
  std::vector<std::vector<double>> per(num_classes);
  for (const auto& d : detections) {
    if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= num_classes) continue;
    per[static_cast<std::size_t>(d.class_id)].push_back(d.confidence);
  }
  std::vector<BoxSummary> out;
  out.reserve(num_classes);
  for (auto& v : per) out.push_back(summarize(std::move(v)));
  return out;
}

TrajectoryRow trajectory_row(std::string strategy, int iteration, const EvalReport& r) {
  return {std::move(strategy), iteration, r.map50_95, r.map50, r.map75, r.precision, r.recall};
}

std::string trajectory_to_csv(std::span<const TrajectoryRow> rows) {
  using detail::format_double;
  std::string out = "strategy,iteration,map50_95,map50,map75,precision,recall\n";
  for (const auto& r : rows) {
    out += detail::csv_field(r.strategy) + ',' + std::to_string(r.iteration) + ',' + format_double(r.map50_95) + ',' +
           format_double(r.map50) + ',' + format_double(r.map75) + ',' + format_double(r.precision) + ',' +
           format_double(r.recall) + '\n';
  }
  return out;
}

std::vector<TrajectoryRow> trajectory_from_csv(std::string_view csv) {
  std::vector<TrajectoryRow> rows;
  std::istringstream in{std::string(csv)};
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    if (header) {
      header = false;
      if (line.rfind("strategy,", 0) == 0) continue;
    }
    const auto f = detail::csv_split(line);
    if (f.size() != 7) throw Error(Errc::InvalidArgument, "trajectory row needs 7 fields: " + line);
    try {
      rows.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                      std::stod(f[6])});
    } catch (const std::logic_error&) {
      throw Error(Errc::InvalidArgument, "non-numeric trajectory field: " + line);
    }
  }
  return rows;
}

} // namespace vilod
