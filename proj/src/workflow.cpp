#include "vilod/workflow.hpp"

#include "vilod/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>

namespace vilod {

// --- config ------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
  throw Error(Errc::InvalidArgument, "bad value for " + std::string(key) + ": '" + std::string(value) + "'");
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v);
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v);
}

template <class F>
void take(KeyValues& kv, std::string_view key, F&& apply) {
  const auto it = kv.find(key);
  if (it == kv.end()) return;
  apply(std::string_view(it->second));
  kv.erase(it);
}

} // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(Errc::InvalidArgument, "line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(Errc::InvalidArgument, "line " + std::to_string(lineno) + ": empty key");
    out[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

SessionConfig session_config_from(KeyValues& kv) {
  SessionConfig c;
  take(kv, "budget_per_iteration", [&](auto v) { c.budget_per_iteration = to_u64("budget_per_iteration", v); });
  take(kv, "total_iterations", [&](auto v) { c.total_iterations = to_u64("total_iterations", v); });
  take(kv, "suggestion_count", [&](auto v) { c.suggestion_count = to_u64("suggestion_count", v); });
  take(kv, "seed", [&](auto v) { c.seed = to_u64("seed", v); });
  take(kv, "epochs", [&](auto v) { c.train_config.epochs = static_cast<int>(to_u64("epochs", v)); });
  take(kv, "image_size", [&](auto v) { c.train_config.image_size = static_cast<int>(to_u64("image_size", v)); });
  take(kv, "train_seed", [&](auto v) { c.train_config.seed = to_u64("train_seed", v); });
  take(kv, "seed_clusters", [&](auto v) { c.seed_clusters = to_u64("seed_clusters", v); });
  take(kv, "seed_per_cluster", [&](auto v) { c.seed_per_cluster = to_u64("seed_per_cluster", v); });
  take(kv, "policy_clusters", [&](auto v) { c.policy_clusters = to_u64("policy_clusters", v); });
  take(kv, "balance_bonus", [&](auto v) { c.balance_bonus = to_double("balance_bonus", v); });
  take(kv, "compute_projection", [&](auto v) { c.compute_projection = to_bool("compute_projection", v); });
  take(kv, "perplexity", [&](auto v) { c.perplexity = to_double("perplexity", v); });
  take(kv, "tsne_iterations", [&](auto v) { c.tsne_iterations = to_u64("tsne_iterations", v); });
  take(kv, "heatmap_grid", [&](auto v) { c.heatmap_grid = to_u64("heatmap_grid", v); });
  return c;
}

SessionConfig parse_session_config(std::string_view text) {
  auto kv = parse_key_values(text);
  auto c = session_config_from(kv);
  if (!kv.empty()) throw Error(Errc::InvalidArgument, "unknown config key: " + kv.begin()->first);
  return c;
}

std::string format_session_config(const SessionConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "budget_per_iteration = " << c.budget_per_iteration << "\n"
      << "total_iterations = " << c.total_iterations << "\n"
      << "suggestion_count = " << c.suggestion_count << "\n"
      << "seed = " << c.seed << "\n"
      << "epochs = " << c.train_config.epochs << "\n"
      << "image_size = " << c.train_config.image_size << "\n"
      << "train_seed = " << c.train_config.seed << "\n"
      << "seed_clusters = " << c.seed_clusters << "\n"
      << "seed_per_cluster = " << c.seed_per_cluster << "\n"
      << "policy_clusters = " << c.policy_clusters << "\n"
      << "balance_bonus = " << c.balance_bonus << "\n"
      << "compute_projection = " << (c.compute_projection ? "true" : "false") << "\n"
      << "perplexity = " << c.perplexity << "\n"
      << "tsne_iterations = " << c.tsne_iterations << "\n"
      << "heatmap_grid = " << c.heatmap_grid << "\n";
  return out.str();
}

void validate_config(const SessionConfig& c) {
  if (c.budget_per_iteration == 0) throw Error(Errc::InvalidArgument, "budget_per_iteration must be >= 1");
  if (c.total_iterations == 0) throw Error(Errc::InvalidArgument, "total_iterations must be >= 1");
  if (c.seed_clusters == 0 || c.seed_per_cluster == 0) throw Error(Errc::InvalidArgument, "empty seed pool");
  if (c.train_config.epochs <= 0) throw Error(Errc::InvalidArgument, "epochs must be >= 1");
  if (c.heatmap_grid == 0) throw Error(Errc::InvalidArgument, "heatmap_grid must be >= 1");
}

std::string_view phase_name(Phase p) noexcept {
  switch (p) {
  case Phase::Annotating: return "annotating";
  case Phase::ReadyToTrain: return "ready_to_train";
  case Phase::Training: return "training";
  case Phase::Completed: return "completed";
  }
  return "annotating";
}

std::optional<Phase> parse_phase(std::string_view name) noexcept {
  for (const Phase p : {Phase::Annotating, Phase::ReadyToTrain, Phase::Training, Phase::Completed}) {
    if (phase_name(p) == name) return p;
  }
  return std::nullopt;
}

std::shared_ptr<const SessionInputs> simulation_inputs(const SyntheticWorld& world) {
  auto in = std::make_shared<SessionInputs>();
  in->registry = world.registry;
  in->labels = world.truth;
  in->embeddings = world.embeddings;
  return in;
}

// --- state -------------------------------------------------------------------

bool IterationState::is_pending(std::string_view id) const {
  return std::find(pending_ids.begin(), pending_ids.end(), id) != pending_ids.end();
}

std::vector<ImageScore> IterationState::open_suggestions() const {
  std::vector<ImageScore> out;
  for (const auto& s : suggestions) {
    if (!is_labeled(s.image_id) && !is_pending(s.image_id)) out.push_back(s);
  }
  return out;
}

namespace {

DetectionScoreMap score_map(std::span<const std::string> pool_ids, std::span<const Detection> dets) {
  DetectionScoreMap scores;
  for (const auto& id : pool_ids) scores[id];
  for (const auto& d : dets) {
    if (const auto it = scores.find(d.image_id); it != scores.end()) it->second.push_back(d.confidence);
  }
  return scores;
}

} // namespace

HeatmapGrid heatmap_for(const SessionContext& ctx, std::span<const Detection> pool_detections) {
  std::map<std::string_view, std::pair<double, std::size_t>> acc;
  for (const auto& d : pool_detections) {
    auto& [sum, n] = acc[d.image_id];
    sum += d.confidence;
    ++n;
  }
  std::vector<double> weights;
  weights.reserve(ctx.projection.size());
  for (const auto& p : ctx.projection) {
    const auto it = acc.find(p.image_id);
    const double avg = it == acc.end() ? 0.0 : it->second.first / static_cast<double>(it->second.second);
    weights.push_back(uncertainty_weight(std::clamp(avg, 0.0, 1.0)));
  }
  return compute_heatmap(ctx.projection, weights, ctx.config.heatmap_grid, ctx.config.heatmap_grid);
}

RetrainOutcome run_training_job(const SessionContext& ctx, const TrainingJob& job, DetectorBackend& detector,
                                const EpochCallback& on_epoch) {
  RetrainOutcome out;
  out.model = detector.train(job.request, [&](const EpochMetrics& m) {
    out.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  });
  out.pool_detections = detector.infer(out.model, ctx.pool_ids);

  std::vector<std::string> test_ids;
  for (const auto& [id, boxes] : ctx.test_truth) test_ids.push_back(id);
  const auto test_dets = detector.infer(out.model, test_ids);
  out.report = map_metrics(group_by_image(test_dets), ctx.test_truth);

  const IdSet exclude(job.labeled_ids.begin(), job.labeled_ids.end());
  out.suggestions = select_al_samples(score_map(ctx.pool_ids, out.pool_detections), exclude,
                                      ctx.config.effective_suggestions());
  if (ctx.projection.size() >= 2) out.heatmap = heatmap_for(ctx, out.pool_detections);
  return out;
}

std::vector<LabeledImage> model_manifest(const IterationState& st) {
  std::vector<LabeledImage> out;
  if (!st.current_model) return out;
  for (const auto& id : st.labeled_ids) {
    const auto it = st.labeled_iteration.find(id);
    if (it != st.labeled_iteration.end() && it->second <= st.current_model->version) {
      out.push_back({id, st.annotations.at(id)});
    }
  }
  return out;
}

namespace {

void apply_outcome(IterationState& st, RetrainOutcome&& o) {
  st.current_model = o.model;
  st.lineage.push_back(std::move(o.model));
  st.pool_detections = std::move(o.pool_detections);
  st.suggestions = std::move(o.suggestions);
  st.heatmap = std::move(o.heatmap);
  st.trajectory.push_back(std::move(o.report));
  st.fault.reset();
}

TrainingJob make_job(const SessionContext& ctx, const IterationState& st) {
  TrainingJob job;
  job.iteration = st.iteration;
  job.labeled_ids = st.labeled_ids;
  job.request.session = ctx.key;
  job.request.parent = st.current_model;
  job.request.config = ctx.config.train_config;
  job.request.manifest.reserve(st.labeled_ids.size());
  for (const auto& id : st.labeled_ids) job.request.manifest.push_back({id, st.annotations.at(id)});
  return job;
}

[[noreturn]] void phase_violation(const IterationState& st, std::string_view what) {
  throw Error(Errc::PhaseViolation, std::string(what) + " not allowed while " + std::string(phase_name(st.phase)));
}

} // namespace

Session Session::start(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                       DetectorBackend& detector, std::string key,
                       std::optional<std::vector<ProjectionPoint>> projection, const EpochCallback& on_epoch) {
  validate_config(config);
  if (!inputs) throw Error(Errc::InvalidArgument, "session has no inputs");
  auto ctx = std::make_shared<SessionContext>();
  ctx->config = config;
  ctx->inputs = inputs;
  ctx->key = std::move(key);
  ctx->pool_ids = inputs->registry.ids(Split::TrainPool);
  if (ctx->pool_ids.empty()) throw Error(Errc::InvalidArgument, "registry has no pool images");
  for (const auto& id : inputs->registry.ids(Split::Test)) {
    if (const auto it = inputs->labels.find(id); it != inputs->labels.end()) ctx->test_truth.emplace(id, it->second);
  }
  if (ctx->test_truth.empty()) throw Error(Errc::EmptyEvalSet, "no labeled test images");

  const EmbeddingSet pool_emb = inputs->embeddings.subset(ctx->pool_ids);
  if (pool_emb.empty()) throw Error(Errc::InvalidArgument, "no embeddings for pool images");
  const auto seeds = select_seed_pool(pool_emb, config.seed_clusters, config.seed_per_cluster, config.seed);

  if (projection) {
    ctx->projection = std::move(*projection);
  } else if (config.compute_projection && pool_emb.size() >= 4) {
    TsneOptions o;
    // keep the target below the row length on tiny pools
    o.perplexity = std::min(config.perplexity, static_cast<double>(pool_emb.size() - 1) / 3.0);
    o.iterations = config.tsne_iterations;
    o.seed = config.seed;
    ctx->projection = tsne_project(pool_emb, o).points;
  }

  IterationState st;
  for (const auto& id : seeds) {
    const auto it = inputs->labels.find(id);
    if (it == inputs->labels.end()) throw Error(Errc::InvalidArgument, "seed image " + id + " has no labels");
    st.labeled_ids.push_back(id);
    st.labeled_iteration.emplace(id, 0);
    st.annotations.emplace(id, it->second);
  }
  const TrainingJob job = make_job(*ctx, st);
  apply_outcome(st, run_training_job(*ctx, job, detector, on_epoch));
  st.iteration = 1;
  st.phase = Phase::Annotating;
  return Session(std::move(ctx), std::move(st));
}

Session Session::restore(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                         IterationState state, std::vector<ProjectionPoint> projection, std::string key) {
  validate_config(config);
  if (!inputs) throw Error(Errc::InvalidArgument, "session has no inputs");
  auto ctx = std::make_shared<SessionContext>();
  ctx->config = config;
  ctx->inputs = inputs;
  ctx->key = std::move(key);
  ctx->pool_ids = inputs->registry.ids(Split::TrainPool);
  for (const auto& id : inputs->registry.ids(Split::Test)) {
    if (const auto it = inputs->labels.find(id); it != inputs->labels.end()) ctx->test_truth.emplace(id, it->second);
  }
  ctx->projection = std::move(projection);
  // a job cannot survive a restart
  if (state.phase == Phase::Training) {
    state.phase = Phase::Annotating;
    state.fault = Fault{state.iteration, std::string(errc_name(Errc::TrainingFailed)), "interrupted by restart"};
  }
  const auto bad = invariant_violations(state, *ctx);
  if (!bad.empty()) throw Error(Errc::InvalidArgument, "restored state is inconsistent: " + bad.front());
  return Session(std::move(ctx), std::move(state));
}

void Session::record_annotation(std::string_view image_id, std::vector<GroundTruthBox> boxes) {
  auto& st = state_;
  if (st.phase == Phase::Training || st.phase == Phase::Completed) phase_violation(st, "annotating");
  // the failed iteration's batch is already merged; only a retry can follow
  if (st.fault) phase_violation(st, "annotating before retrying a failed retrain");
  const ImageRecord* rec = ctx_->inputs->registry.find(image_id);
  if (!rec) throw Error(Errc::UnknownImage, "unknown image " + std::string(image_id));
  if (rec->split != Split::TrainPool) {
    throw Error(Errc::NotSelectable, std::string(image_id) + " is in the " + std::string(split_name(rec->split)) + " split");
  }
  if (st.is_labeled(image_id)) throw Error(Errc::NotSelectable, std::string(image_id) + " is already labeled");
  const std::size_t num_classes = ctx_->inputs->registry.classes().size();
  for (const auto& b : boxes) {
    if (!box_is_valid(b, num_classes)) throw Error(Errc::MalformedBoxes, "invalid box for " + std::string(image_id));
  }
  const std::string id(image_id);
  if (st.is_pending(id)) {
    st.annotations[id] = std::move(boxes);
    return;
  }
  if (st.pending_ids.size() >= ctx_->config.budget_per_iteration) {
    throw Error(Errc::BudgetExceeded, "budget of " + std::to_string(ctx_->config.budget_per_iteration) + " reached");
  }
  st.pending_ids.push_back(id);
  st.annotations[id] = std::move(boxes);
  if (st.pending_ids.size() == ctx_->config.budget_per_iteration) st.phase = Phase::ReadyToTrain;
}

void Session::undo_annotation(std::string_view image_id) {
  auto& st = state_;
  if (st.phase == Phase::Training || st.phase == Phase::Completed) phase_violation(st, "undo");
  const auto it = std::find(st.pending_ids.begin(), st.pending_ids.end(), image_id);
  if (it == st.pending_ids.end()) throw Error(Errc::NotPending, std::string(image_id) + " is not pending");
  st.annotations.erase(st.annotations.find(image_id));
  st.pending_ids.erase(it);
  st.phase = Phase::Annotating;
}

TrainingJob Session::begin_retrain() {
  auto& st = state_;
  const bool retry = st.phase == Phase::Annotating && st.fault && st.pending_ids.empty();
  if (st.phase != Phase::ReadyToTrain && !retry) {
    if (st.phase == Phase::Annotating) {
      throw Error(Errc::PhaseViolation, "retrain needs " + std::to_string(ctx_->config.budget_per_iteration) +
                                            " pending annotations, have " + std::to_string(st.pending_ids.size()));
    }
    phase_violation(st, "retrain");
  }
  for (const auto& id : st.pending_ids) {
    st.labeled_ids.push_back(id);
    st.labeled_iteration.emplace(id, st.iteration);
  }
  st.pending_ids.clear();
  std::erase_if(st.suggestions, [&](const ImageScore& s) { return st.is_labeled(s.image_id); });
  st.phase = Phase::Training;
  return make_job(*ctx_, st);
}

void Session::complete_retrain(const TrainingJob& job, RetrainOutcome outcome) {
  auto& st = state_;
  if (st.phase != Phase::Training || job.iteration != st.iteration) phase_violation(st, "completing a job");
  apply_outcome(st, std::move(outcome));
  if (static_cast<std::size_t>(st.iteration) >= ctx_->config.total_iterations) {
    st.phase = Phase::Completed;
  } else {
    ++st.iteration;
    st.phase = Phase::Annotating;
  }
}

void Session::fail_retrain(const TrainingJob& job, const Error& error) {
  auto& st = state_;
  if (st.phase != Phase::Training || job.iteration != st.iteration) phase_violation(st, "failing a job");
  st.fault = Fault{st.iteration, std::string(errc_name(error.code())), error.detail()};
  st.phase = Phase::Annotating;
}

void Session::retrain(DetectorBackend& detector, const EpochCallback& on_epoch) {
  const TrainingJob job = begin_retrain();
  RetrainOutcome outcome;
  try {
    outcome = run_training_job(*ctx_, job, detector, on_epoch);
  } catch (const Error& e) {
    fail_retrain(job, e);
    throw;
  } catch (const std::exception& e) {
    const Error wrapped(Errc::TrainingFailed, e.what());
    fail_retrain(job, wrapped);
    throw wrapped;
  }
  complete_retrain(job, std::move(outcome));
}

std::vector<std::string> invariant_violations(const IterationState& st, const SessionContext& ctx) {
  std::vector<std::string> out;
  const std::size_t budget = ctx.config.budget_per_iteration;
  if (st.pending_ids.size() > budget) out.push_back("pending exceeds budget");
  if ((st.phase == Phase::ReadyToTrain) != (st.pending_ids.size() == budget)) {
    out.push_back("phase ready_to_train must coincide with a full batch");
  }
  if (st.iteration < 1 || static_cast<std::size_t>(st.iteration) > ctx.config.total_iterations) {
    out.push_back("iteration out of range");
  }
  if (st.labeled_ids.size() != st.labeled_iteration.size()) out.push_back("labeled ids are not unique");
  for (const auto& id : st.labeled_ids) {
    if (!st.is_labeled(id)) out.push_back("labeled id missing from the iteration map: " + id);
    if (!ctx.inputs->registry.in_pool(id)) out.push_back("labeled id outside the pool: " + id);
    if (!st.annotations.count(id)) out.push_back("labeled id without boxes: " + id);
  }
  std::set<std::string_view> pending;
  for (const auto& id : st.pending_ids) {
    if (!pending.insert(id).second) out.push_back("pending id repeated: " + id);
    if (st.is_labeled(id)) out.push_back("pending id already labeled: " + id);
    if (!ctx.inputs->registry.in_pool(id)) out.push_back("pending id outside the pool: " + id);
    if (!st.annotations.count(id)) out.push_back("pending id without boxes: " + id);
  }
  if (st.annotations.size() != st.labeled_ids.size() + st.pending_ids.size()) {
    out.push_back("annotations do not match labeled + pending");
  }
  for (const auto& s : st.suggestions) {
    if (st.is_labeled(s.image_id)) out.push_back("suggestion already labeled: " + s.image_id);
  }
  for (const auto& s : st.open_suggestions()) {
    if (st.is_pending(s.image_id)) out.push_back("open suggestion pending: " + s.image_id);
  }
  if (st.trajectory.size() != st.lineage.size()) out.push_back("trajectory and lineage differ in length");
  if (st.current_model != (st.lineage.empty() ? std::nullopt : std::optional(st.lineage.back()))) {
    out.push_back("current model is not the lineage head");
  }
  return out;
}

// --- strategies ----------------------------------------------------------------

std::string_view policy_name(PolicyKind k) noexcept {
  switch (k) {
  case PolicyKind::UncertaintyBaseline: return "baseline";
  case PolicyKind::Exploration: return "exploration";
  case PolicyKind::UncertaintyFiltered: return "uncertainty";
  case PolicyKind::Balanced: return "balanced";
  case PolicyKind::Replay: return "replay";
  }
  return "baseline";
}

std::optional<PolicyKind> parse_policy(std::string_view name) noexcept {
  for (const auto k : {PolicyKind::UncertaintyBaseline, PolicyKind::Exploration, PolicyKind::UncertaintyFiltered,
                       PolicyKind::Balanced, PolicyKind::Replay}) {
    if (policy_name(k) == name) return k;
  }
  return std::nullopt;
}

std::vector<std::string> exploration_picks(const ClusterModel& clusters, const EmbeddingSet& embeddings,
                                           const IdSet& taken, std::size_t budget) {
  std::vector<std::size_t> counts(clusters.k, 0);
  std::vector<std::vector<std::pair<double, std::string>>> open(clusters.k);
  for (std::size_t i = 0; i < clusters.ids.size(); ++i) {
    const std::size_t c = clusters.assignment[i];
    const auto& id = clusters.ids[i];
    if (taken.count(id)) {
      ++counts[c];
      continue;
    }
    const std::size_t row = embeddings.index_of(id);
    if (row == embeddings.size()) continue;
    open[c].emplace_back(squared_distance(embeddings.row(row), clusters.centroid(c)), id);
  }
  for (auto& members : open) std::sort(members.begin(), members.end());

  std::vector<std::size_t> order(clusters.k);
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] < counts[b]; });

  std::vector<std::string> picks;
  std::vector<std::size_t> next(clusters.k, 0);
  bool progress = true;
  while (picks.size() < budget && progress) {
    progress = false;
    for (const std::size_t c : order) {
      if (picks.size() == budget) break;
      if (next[c] == open[c].size()) continue;
      picks.push_back(open[c][next[c]++].second);
      progress = true;
    }
  }
  return picks;
}

std::vector<std::string> parse_id_list(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    std::string id(t);
    const auto dot = id.rfind('.');
    if (dot != std::string::npos) {
      std::string ext = id.substr(dot);
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp") id.erase(dot);
    }
    out.push_back(std::move(id));
  }
  return out;
}

namespace {

// Most frequent predicted class per image, ties to the lower id.
std::map<std::string, int, std::less<>> predicted_majority(std::span<const Detection> dets) {
  std::map<std::string, std::map<int, std::size_t>, std::less<>> counts;
  for (const auto& d : dets) ++counts[d.image_id][d.class_id];
  std::map<std::string, int, std::less<>> out;
  for (const auto& [id, per] : counts) {
    int best = -1;
    std::size_t n = 0;
    for (const auto& [c, k] : per) {
      if (k > n) {
        best = c;
        n = k;
      }
    }
    out.emplace(id, best);
  }
  return out;
}

class Picker {
public:
  Picker(const SelectionPolicy& policy, const SessionContext& ctx, const IterationState& start)
      : policy_(policy), ctx_(ctx), pool_emb_(ctx.inputs->embeddings.subset(ctx.pool_ids)) {
    const auto& cfg = ctx.config;
    if (policy.kind == PolicyKind::Exploration || policy.kind == PolicyKind::Balanced) {
      clusters_ = kmeans_cluster(pool_emb_, std::min(cfg.policy_clusters, pool_emb_.size()), cfg.seed);
    }
    if (policy.kind == PolicyKind::UncertaintyFiltered && !policy.accept) {
      throw Error(Errc::InvalidArgument, "uncertainty_filtered needs a predicate");
    }
    if (policy.kind == PolicyKind::Replay) {
      std::set<std::string_view> usable;
      for (const auto& id : policy.replay_ids) {
        if (ctx.inputs->registry.in_pool(id) && !start.is_labeled(id)) usable.insert(id);
      }
      const std::size_t need = cfg.budget_per_iteration * cfg.total_iterations;
      if (usable.size() < need) {
        throw Error(Errc::ReplayExhausted, "replay list has " + std::to_string(usable.size()) +
                                               " usable ids, need " + std::to_string(need));
      }
    }
  }

  std::vector<std::string> pick(const IterationState& st) {
    const std::size_t budget = ctx_.config.budget_per_iteration;
    IdSet taken(st.labeled_ids.begin(), st.labeled_ids.end());
    switch (policy_.kind) {
    case PolicyKind::UncertaintyBaseline: return ids_of(select_al_samples(scores(st), taken, budget));
    case PolicyKind::UncertaintyFiltered: {
      std::vector<std::string> out;
      for (auto& s : select_al_samples(scores(st), taken, std::numeric_limits<std::size_t>::max())) {
        if (out.size() == budget) break;
        if (policy_.accept(s.image_id)) out.push_back(std::move(s.image_id));
      }
      return out;
    }
    case PolicyKind::Exploration: return exploration_picks(*clusters_, pool_emb_, taken, budget);
    case PolicyKind::Balanced: return balanced(st, taken, budget);
    case PolicyKind::Replay: {
      std::vector<std::string> out;
      while (out.size() < budget && cursor_ < policy_.replay_ids.size()) {
        const auto& id = policy_.replay_ids[cursor_++];
        if (!ctx_.inputs->registry.in_pool(id) || taken.count(id)) continue;
        taken.insert(id);
        out.push_back(id);
      }
      return out;
    }
    }
    return {};
  }

private:
  const SelectionPolicy& policy_;
  const SessionContext& ctx_;
  EmbeddingSet pool_emb_;
  std::optional<ClusterModel> clusters_;
  std::size_t cursor_ = 0;

  static std::vector<std::string> ids_of(std::vector<ImageScore> scores) {
    std::vector<std::string> out;
    for (auto& s : scores) out.push_back(std::move(s.image_id));
    return out;
  }

  DetectionScoreMap scores(const IterationState& st) const { return score_map(ctx_.pool_ids, st.pool_detections); }

  // Alternates uncertainty picks with cluster-coverage picks. Uncertainty
  // candidates predicted as the currently rarest labeled class get their
  // average confidence lowered by balance_bonus.
  std::vector<std::string> balanced(const IterationState& st, IdSet& taken, std::size_t budget) {
    const std::size_t num_classes = ctx_.inputs->registry.classes().size();
    std::vector<std::size_t> class_counts(num_classes, 0);
    auto count_boxes = [&](const std::vector<GroundTruthBox>& boxes) {
      for (const auto& b : boxes) {
        if (b.class_id >= 0 && static_cast<std::size_t>(b.class_id) < num_classes) ++class_counts[b.class_id];
      }
    };
    for (const auto& id : st.labeled_ids) count_boxes(st.annotations.at(id));

    auto ranked = select_al_samples(scores(st), taken, std::numeric_limits<std::size_t>::max());
    const auto majority = predicted_majority(st.pool_detections);
    const auto coverage = exploration_picks(*clusters_, pool_emb_, taken, budget);

    std::vector<std::string> out;
    std::size_t cov_next = 0;
    auto take_uncertain = [&]() -> bool {
      const int minority = static_cast<int>(
          std::min_element(class_counts.begin(), class_counts.end()) - class_counts.begin());
      const ImageScore* best = nullptr;
      double best_key = 0.0;
      for (const auto& s : ranked) {
        if (taken.count(s.image_id)) continue;
        const auto m = majority.find(s.image_id);
        const bool bonus = m != majority.end() && m->second == minority;
        const double key = s.avg_conf - (bonus ? ctx_.config.balance_bonus : 0.0);
        if (!best || key < best_key || (key == best_key && s.image_id < best->image_id)) {
          best = &s;
          best_key = key;
        }
      }
      if (!best) return false;
      out.push_back(best->image_id);
      return true;
    };
    auto take_coverage = [&]() -> bool {
      while (cov_next < coverage.size() && taken.count(coverage[cov_next])) ++cov_next;
      if (cov_next == coverage.size()) return false;
      out.push_back(coverage[cov_next++]);
      return true;
    };
    while (out.size() < budget) {
      const bool ok = out.size() % 2 == 0 ? (take_uncertain() || take_coverage()) : (take_coverage() || take_uncertain());
      if (!ok) break;
      taken.insert(out.back());
      if (const auto it = ctx_.inputs->labels.find(out.back()); it != ctx_.inputs->labels.end()) count_boxes(it->second);
    }
    return out;
  }
};

} // namespace

SimulationResult run_scripted_strategy(const SelectionPolicy& policy, const SessionConfig& config,
                                       std::shared_ptr<const SessionInputs> inputs, DetectorBackend& detector) {
  SessionConfig cfg = config;
  cfg.compute_projection = false;
  const bool idle = cfg.budget_per_iteration == 0;
  if (idle) cfg.budget_per_iteration = 1; // never annotated; keeps the session valid

  SimulationResult result;
  result.strategy = std::string(policy_name(policy.kind));
  Session session = Session::start(cfg, inputs, detector, "sim-" + result.strategy);
  Picker picker(policy, session.context(), session.state());

  auto record = [&] {
    result.reports.push_back(session.state().trajectory.back());
    result.labeled_counts.push_back(session.state().labeled_ids.size());
  };
  record();
  for (std::size_t t = 1; t <= cfg.total_iterations; ++t) {
    if (idle) {
      result.selections.emplace_back();
      record();
      continue;
    }
    auto picks = picker.pick(session.state());
    if (picks.size() < cfg.budget_per_iteration) {
      result.aborted = true;
      result.error = "pool exhausted at iteration " + std::to_string(t);
      break;
    }
    for (const auto& id : picks) {
      const auto it = inputs->labels.find(id);
      if (it == inputs->labels.end()) throw Error(Errc::InvalidArgument, "no ground truth for " + id);
      session.record_annotation(id, it->second);
    }
    result.selections.push_back(std::move(picks));
    try {
      session.retrain(detector);
    } catch (const Error& e) {
      result.aborted = true;
      result.error = e.what();
      break;
    }
    record();
  }
  for (std::size_t i = 0; i < result.reports.size(); ++i) {
    result.trajectory.push_back(trajectory_row(result.strategy, static_cast<int>(i), result.reports[i]));
  }
  return result;
}

SimulationResult run_baseline(const SessionConfig& config, std::shared_ptr<const SessionInputs> inputs,
                              DetectorBackend& detector) {
  return run_scripted_strategy(SelectionPolicy{}, config, std::move(inputs), detector);
}

} // namespace vilod
