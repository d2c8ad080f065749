#pragma once

#include "vilod/dataset_io.hpp"
#include "vilod/evaluation.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace vilod {

struct TrainConfig {
  int epochs = 50;
  int image_size = 640;
  std::uint64_t seed = 42;

  bool operator==(const TrainConfig&) const = default;
};

struct ModelVersion {
  int version = 0;
  std::optional<int> parent;
  std::string weights_ref; // opaque to everything but the backend
  TrainConfig train_config;
  std::string created_at; // ISO-8601 UTC
  int best_epoch = 0;

  bool operator==(const ModelVersion&) const = default;
};

struct EpochMetrics {
  int epoch = 0;
  double map50 = 0.0;
  double map50_95 = 0.0;
  double box_loss = 0.0;
  double class_loss = 0.0;

  bool operator==(const EpochMetrics&) const = default;
};

struct LabeledImage {
  std::string image_id;
  std::vector<GroundTruthBox> boxes;

  bool operator==(const LabeledImage&) const = default;
};

struct TrainRequest {
  std::string session; // at most one active job per session
  std::optional<ModelVersion> parent;
  std::vector<LabeledImage> manifest; // every labeled image, not just new ones
  TrainConfig config;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// A detector that can be fine-tuned and queried. Implementations must be
// safe to call from several threads.
class DetectorBackend {
public:
  virtual ~DetectorBackend() = default;

  // Streams one EpochMetrics per epoch, then returns the child version built
  // from the epoch with the best validation map50_95. Version is
  // parent->version + 1, or 0 without a parent.
  virtual ModelVersion train(const TrainRequest& request, const EpochCallback& on_epoch) = 0;

  // Detections for the requested images only, in request order.
  virtual std::vector<Detection> infer(const ModelVersion& model, std::span<const std::string> image_ids) = 0;

  // Makes a model trained by an earlier process usable as a parent again.
  // `manifest` is what it was trained on. Backends whose weights outlive
  // the process need not do anything.
  virtual void restore_model(const ModelVersion& /*model*/, std::span<const LabeledImage> /*manifest*/) {}
};

std::string utc_timestamp();

// ---------------------------------------------------------------------------
// Synthetic backend

struct ClassSkill {
  std::size_t labeled_count = 0;
  double a = 0.06;  // detect_prob = logistic(a * labeled_count + b)
  double b = -1.0;  // +/-inf pins the probability to 1/0
  double conf_mean = 0.35;
  double conf_spread = 0.10;
  double sigma = 0.25; // localization noise, fraction of box size

  double detect_prob() const;
  bool operator==(const ClassSkill&) const = default;
};

struct SyntheticSkill {
  std::vector<ClassSkill> classes;
  double conf_cap = 0.92;     // conf_mean approaches this as labels grow
  double conf_rate = 40.0;    // labeled instances per e-fold of the remaining gap
  double sigma_rate = 30.0;   // sigma ~ 1 / (1 + labeled_count / sigma_rate)
  double fp_prob = 0.5;       // per false-positive slot and image
  int fp_slots = 2;
  double fp_decay = 150.0;    // fp_prob ~ 1 / (1 + total_labeled / fp_decay)
  double fp_conf_mean = 0.25;
  double difficulty_spread = 1.5; // per-image difficulty in [0, spread)
  double difficulty_conf_drop = 0.12;
  std::uint64_t seed = 42;

  std::size_t total_labeled() const;
  bool operator==(const SyntheticSkill&) const = default;
};

// Untrained skill with the documented defaults.
SyntheticSkill default_skill(std::size_t num_classes, std::uint64_t seed = 42);

// A skill that reproduces the ground truth exactly with confidence `conf`.
SyntheticSkill perfect_skill(std::size_t num_classes, double conf = 0.9);

// Adds the instances in `annotations` to the per-class counts. detect_prob
// follows the logistic, conf_mean moves toward conf_cap, sigma and fp_prob
// shrink. Path independent: adding A then B equals adding A+B.
// Throws UnknownClass.
SyntheticSkill synthetic_update_skill(const SyntheticSkill& skill, std::span<const GroundTruthBox> annotations);

// Detections of one image under `skill`. Deterministic in (skill, image_id).
// `difficulty` in [0, 1] overrides the hash-derived per-image value; either
// is scaled by difficulty_spread.
std::vector<Detection> synthetic_detect(const SyntheticSkill& skill, std::string_view image_id,
                                        std::span<const GroundTruthBox> truth, int model_version,
                                        std::optional<double> difficulty = std::nullopt);

struct SyntheticWorldView {
  GroundTruth truth;                     // every image the detector may see
  std::vector<std::string> validation;   // ids scored after each epoch
  std::map<std::string, double, std::less<>> difficulty; // optional, in [0, 1]
  std::size_t num_classes = 0;
};

class SyntheticDetector final : public DetectorBackend {
public:
  SyntheticDetector(SyntheticWorldView world, SyntheticSkill base);

  ModelVersion train(const TrainRequest& request, const EpochCallback& on_epoch) override;
  std::vector<Detection> infer(const ModelVersion& model, std::span<const std::string> image_ids) override;
  // Refits deterministically; the result equals what train() stored.
  void restore_model(const ModelVersion& model, std::span<const LabeledImage> manifest) override;

  // The next n train() calls fail with TrainingFailed.
  void inject_failures(int n);
  // Sleep per epoch, to make the training window observable.
  void set_epoch_delay(std::chrono::milliseconds delay);

  std::optional<SyntheticSkill> skill_of(const ModelVersion& model) const;
  const SyntheticWorldView& world() const { return world_; }

private:
  SyntheticWorldView world_;
  SyntheticSkill base_;
  mutable std::mutex mu_;
  std::map<std::string, SyntheticSkill, std::less<>> models_;
  std::set<std::string, std::less<>> active_sessions_;
  int pending_failures_ = 0;
  std::chrono::milliseconds epoch_delay_{0};

  // Best-epoch skill and its metrics.
  std::pair<SyntheticSkill, EpochMetrics> fit(std::span<const LabeledImage> manifest, const TrainConfig& config,
                                              int version, const EpochCallback& on_epoch,
                                              std::chrono::milliseconds delay) const;
};

} // namespace vilod
