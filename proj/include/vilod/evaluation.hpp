#pragma once

#include "vilod/dataset_io.hpp"

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vilod {

// Normalized center-format box.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  static Box from_xyxy(double x1, double y1, double x2, double y2) {
    return {(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1};
  }
  bool operator==(const Box&) const = default;
};

inline Box box_of(const GroundTruthBox& g) { return {g.cx, g.cy, g.w, g.h}; }

struct Detection {
  std::string image_id;
  int class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  double confidence = 0.0;
  int model_version = 0;

  Box box() const { return {cx, cy, w, h}; }
  bool operator==(const Detection&) const = default;
};

using DetectionMap = std::map<std::string, std::vector<Detection>, std::less<>>;

// Groups a flat detection list by image id, keeping input order per image.
DetectionMap group_by_image(std::span<const Detection> detections);

// Throws DegenerateBox unless w, h > 0 and everything is finite.
double iou(const Box& a, const Box& b);

struct DetectionMatch {
  std::optional<std::size_t> matched_gt;
  double iou = 0.0; // IoU with the matched gt, else the best same-class IoU seen
  bool is_tp = false;
};

struct MatchResult {
  std::vector<DetectionMatch> detections; // parallel to the input detections
  std::size_t false_negatives = 0;

  std::size_t true_positives() const;
  std::size_t false_positives() const;
};

// One image. Per class, detections in descending confidence (input order
// breaks ties) each take the unmatched same-class gt with the highest IoU
// >= iou_thresh; equal IoUs go to the lower gt index.
MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruthBox> gts, double iou_thresh);

struct ScoredOutcome {
  double confidence = 0.0;
  bool is_tp = false;
};

// 101-point interpolated AP for one class. Recall points are i * 0.01 and
// precision is made monotone from the right. nullopt when there is neither
// a gt nor a detection; 0 when there are detections but no gt.
std::optional<double> average_precision(std::span<const ScoredOutcome> outcomes, std::size_t num_gt);

struct ClassAp {
  int class_id = 0;
  std::optional<double> ap50;
  std::optional<double> ap50_95;

  bool operator==(const ClassAp&) const = default;
};

struct EvalReport {
  double map50 = 0.0;
  double map75 = 0.0;
  double map50_95 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double confidence_threshold = 0.0; // operating point of precision/recall
  std::vector<ClassAp> per_class;

  bool operator==(const EvalReport&) const = default;
};

inline constexpr double kIouThresholds[10] = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

// Evaluation set = the keys of `gts` (images may have no boxes). Detections
// on images outside the set are ignored. Throws EmptyEvalSet.
//
// mAP averages over classes with a defined AP. Precision/recall are class
// means over the classes that have ground truth, taken at the confidence
// threshold that maximizes the class-mean F1 at IoU 0.5 (ties go to the
// lower threshold).
EvalReport map_metrics(const DetectionMap& dets, const GroundTruth& gts);

struct AnnotatedInstance {
  int class_id = 0;
  int iteration = 0;
};

struct ClassBalance {
  std::vector<std::size_t> prior_count; // iteration < boundary
  std::vector<std::size_t> new_count;   // iteration == boundary
};

// Throws UnknownClass for class ids outside [0, num_classes).
ClassBalance class_balance(std::span<const AnnotatedInstance> annotations, int boundary, std::size_t num_classes);

struct BoxSummary {
  bool empty = true;
  std::size_t count = 0;
  double min = 0.0; // whisker ends: extreme values inside the Tukey fences
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
  std::vector<double> outliers; // ascending
};

// Linearly interpolated quantile of sorted data (numpy's default method).
double quantile_sorted(std::span<const double> sorted, double q);

BoxSummary summarize(std::vector<double> values);

// One summary per class id in [0, num_classes).
std::vector<BoxSummary> confidence_distribution(std::span<const Detection> detections, std::size_t num_classes);

struct TrajectoryRow {
  std::string strategy;
  int iteration = 0;
  double map50_95 = 0.0;
  double map50 = 0.0;
  double map75 = 0.0;
  double precision = 0.0;
  double recall = 0.0;

  bool operator==(const TrajectoryRow&) const = default;
};

TrajectoryRow trajectory_row(std::string strategy, int iteration, const EvalReport& report);

// Header `strategy,iteration,map50_95,map50,map75,precision,recall`.
std::string trajectory_to_csv(std::span<const TrajectoryRow> rows);
std::vector<TrajectoryRow> trajectory_from_csv(std::string_view csv);

} // namespace vilod
