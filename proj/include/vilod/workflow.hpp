#pragma once

// The human-in-the-loop iteration state machine and the automated
// strategies that drive it in simulation.
//
//   annotating -> ready_to_train -> training -> annotating | completed
//
// A Session is single-writer: callers serialize mutations. Training runs in
// three steps so the slow part can happen off the writer: begin_retrain()
// merges the pending batch and hands out a job, run_training_job() trains and
// evaluates without touching the state, and complete_retrain() or
// fail_retrain() posts the result back.

#include "vilod/dataset_io.hpp"
#include "vilod/detector.hpp"
#include "vilod/error.hpp"
#include "vilod/evaluation.hpp"
#include "vilod/projection.hpp"
#include "vilod/synthetic_world.hpp"
#include "vilod/uncertainty.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vilod {

struct SessionConfig {
  std::size_t budget_per_iteration = 30;
  std::size_t total_iterations = 5;
  std::size_t suggestion_count = 0; // 0 = budget_per_iteration
  std::uint64_t seed = 42;
  TrainConfig train_config;

  // seed pool L0 = seed_clusters * seed_per_cluster images
  std::size_t seed_clusters = 20;
  std::size_t seed_per_cluster = 2;
  // cluster count used by the exploration and balanced policies
  std::size_t policy_clusters = 20;
  double balance_bonus = 0.05;

  bool compute_projection = true;
  double perplexity = 12.0;
  std::size_t tsne_iterations = 1000;
  std::size_t heatmap_grid = 128;

  std::size_t effective_suggestions() const {
    return suggestion_count == 0 ? budget_per_iteration : suggestion_count;
  }

  bool operator==(const SessionConfig&) const = default;
};

// Flat `key = value` lines; '#' starts a comment. Unknown keys and bad
// values throw InvalidArgument.
using KeyValues = std::map<std::string, std::string, std::less<>>;
KeyValues parse_key_values(std::string_view text);

// Consumes the SessionConfig keys from `kv`, leaving the rest.
SessionConfig session_config_from(KeyValues& kv);
SessionConfig parse_session_config(std::string_view text);
std::string format_session_config(const SessionConfig& config);

// Throws InvalidArgument when budget or iterations are zero.
void validate_config(const SessionConfig& config);

enum class Phase { Annotating, ReadyToTrain, Training, Completed };

std::string_view phase_name(Phase phase) noexcept;
std::optional<Phase> parse_phase(std::string_view name) noexcept;

struct Fault {
  int iteration = 0;
  std::string code;
  std::string message;

  bool operator==(const Fault&) const = default;
};

struct IterationState {
  int iteration = 0;
  Phase phase = Phase::Annotating;
  std::vector<std::string> labeled_ids;                      // labeling order, seed first
  std::map<std::string, int, std::less<>> labeled_iteration; // 0 for the seed pool
  std::vector<std::string> pending_ids;                      // annotation order
  GroundTruth annotations;                                   // boxes of labeled and pending images
  std::optional<ModelVersion> current_model;
  std::vector<ModelVersion> lineage;
  std::vector<ImageScore> suggestions; // ranked once per model version
  std::vector<Detection> pool_detections;
  std::optional<HeatmapGrid> heatmap;
  std::vector<EvalReport> trajectory; // test-set report per model version
  std::optional<Fault> fault;

  bool is_labeled(std::string_view id) const { return labeled_iteration.find(id) != labeled_iteration.end(); }
  bool is_pending(std::string_view id) const;

  // Ranked suggestions minus anything annotated since they were ranked.
  std::vector<ImageScore> open_suggestions() const;

  bool operator==(const IterationState&) const = default;
};

// Immutable inputs shared by a session and its training jobs.
struct SessionInputs {
  DatasetRegistry registry;
  // Labels the platform may read: the seed pool and the test split. In
  // simulation the whole pool is labeled too.
  GroundTruth labels;
  EmbeddingSet embeddings;
};

// Simulation inputs: every label of the world is readable.
std::shared_ptr<const SessionInputs> simulation_inputs(const SyntheticWorld& world);

struct SessionContext {
  SessionConfig config;
  std::shared_ptr<const SessionInputs> inputs;
  std::string key; // detector session scope
  std::vector<std::string> pool_ids;
  GroundTruth test_truth;
  std::vector<ProjectionPoint> projection; // empty when disabled
};

struct TrainingJob {
  int iteration = 0;
  TrainRequest request;
  std::vector<std::string> labeled_ids; // after the merge
};

struct RetrainOutcome {
  ModelVersion model;
  std::vector<Detection> pool_detections;
  std::vector<ImageScore> suggestions;
  std::optional<HeatmapGrid> heatmap;
  EvalReport report;
  std::vector<EpochMetrics> epochs;
};

// Trains, runs pool and test inference, ranks suggestions and rebuilds the
// heatmap. Reads nothing but its arguments.
RetrainOutcome run_training_job(const SessionContext& ctx, const TrainingJob& job, DetectorBackend& detector,
                                const EpochCallback& on_epoch);

// Heatmap weights from detections: one point per projection entry, empty
// detection lists counting as confidence 0.
HeatmapGrid heatmap_for(const SessionContext& ctx, std::span<const Detection> pool_detections);

// What the current model was trained on: labeled images annotated up to its
// version, in labeling order. Empty without a model.
std::vector<LabeledImage> model_manifest(const IterationState& state);

class Session {
public:
  // Seeds L0, trains M0, infers on the pool and ranks the first suggestions.
  // A failure leaves nothing behind. `projection` skips t-SNE when given.
  static Session start(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                       DetectorBackend& detector, std::string key = "default",
                       std::optional<std::vector<ProjectionPoint>> projection = std::nullopt,
                       const EpochCallback& on_epoch = {});

  // Rebuilds a session around a previously captured state.
  static Session restore(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                         IterationState state, std::vector<ProjectionPoint> projection, std::string key = "default");

  const IterationState& state() const noexcept { return state_; }
  const SessionContext& context() const noexcept { return *ctx_; }
  std::shared_ptr<const SessionContext> shared_context() const noexcept { return ctx_; }

  // Overwriting a pending image keeps the count, and is also allowed at
  // ready_to_train. Errors: PhaseViolation, UnknownImage, NotSelectable,
  // MalformedBoxes, BudgetExceeded.
  void record_annotation(std::string_view image_id, std::vector<GroundTruthBox> boxes);
  // Errors: PhaseViolation, NotPending.
  void undo_annotation(std::string_view image_id);

  // Allowed at ready_to_train, or to retry after a failed job once nothing
  // is pending. Errors: PhaseViolation.
  TrainingJob begin_retrain();
  void complete_retrain(const TrainingJob& job, RetrainOutcome outcome);
  // Labels stay merged, the model stays, the fault is recorded.
  void fail_retrain(const TrainingJob& job, const Error& error);

  // begin + run + complete on the calling thread; rethrows job failures
  // after recording them.
  void retrain(DetectorBackend& detector, const EpochCallback& on_epoch = {});

private:
  Session(std::shared_ptr<const SessionContext> ctx, IterationState state)
      : ctx_(std::move(ctx)), state_(std::move(state)) {}

  std::shared_ptr<const SessionContext> ctx_;
  IterationState state_;
};

// Empty when every state invariant holds; otherwise one message each.
std::vector<std::string> invariant_violations(const IterationState& state, const SessionContext& ctx);

// --- scripted strategies -----------------------------------------------------

enum class PolicyKind { UncertaintyBaseline, Exploration, UncertaintyFiltered, Balanced, Replay };

std::string_view policy_name(PolicyKind kind) noexcept;
std::optional<PolicyKind> parse_policy(std::string_view name) noexcept;

struct SelectionPolicy {
  PolicyKind kind = PolicyKind::UncertaintyBaseline;
  // uncertainty_filtered: images the predicate rejects are skipped
  std::function<bool(std::string_view image_id)> accept;
  // replay: consumed in order; ids that are labeled or outside the pool are skipped
  std::vector<std::string> replay_ids;
};

// Round-robin over clusters, least-labeled cluster first (ties: lower index),
// taking the unlabeled member nearest its centroid.
std::vector<std::string> exploration_picks(const ClusterModel& clusters, const EmbeddingSet& embeddings,
                                           const IdSet& taken, std::size_t budget);

struct SimulationResult {
  std::string strategy;
  std::vector<EvalReport> reports; // M0..Mt
  std::vector<TrajectoryRow> trajectory;
  std::vector<std::vector<std::string>> selections; // per iteration
  std::vector<std::size_t> labeled_counts;          // after each model
  bool aborted = false;
  std::string error;
};

// Every cycle labels the picked ids from inputs->labels and retrains.
// Throws ReplayExhausted up front; backend failures end the run with
// `aborted` set and the trajectory so far.
SimulationResult run_scripted_strategy(const SelectionPolicy& policy, const SessionConfig& config,
                                       std::shared_ptr<const SessionInputs> inputs, DetectorBackend& detector);

SimulationResult run_baseline(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                              DetectorBackend& detector);

// One id per line; blank lines and '#' comments ignored; ".jpg"-style
// extensions stripped to the stem.
std::vector<std::string> parse_id_list(std::string_view text);

} // namespace vilod
