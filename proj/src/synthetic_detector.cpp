#include "vilod/detector.hpp"

#include "vilod/error.hpp"
#include "vilod/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <thread>

namespace vilod {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double ClassSkill::detect_prob() const {
  if (std::isinf(b)) return b > 0 ? 1.0 : 0.0;
  return 1.0 / (1.0 + std::exp(-(a * static_cast<double>(labeled_count) + b)));
}

std::size_t SyntheticSkill::total_labeled() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.labeled_count;
  return n;
}

SyntheticSkill default_skill(std::size_t num_classes, std::uint64_t seed) {
  SyntheticSkill s;
  s.classes.assign(num_classes, ClassSkill{});
  s.seed = seed;
  return s;
}

SyntheticSkill perfect_skill(std::size_t num_classes, double conf) {
  SyntheticSkill s;
  ClassSkill c;
  c.b = std::numeric_limits<double>::infinity();
  c.conf_mean = conf;
  c.conf_spread = 0.0;
  c.sigma = 0.0;
  s.classes.assign(num_classes, c);
  s.conf_cap = conf;
  s.fp_prob = 0.0;
  s.difficulty_spread = 0.0;
  s.difficulty_conf_drop = 0.0;
  return s;
}

SyntheticSkill synthetic_update_skill(const SyntheticSkill& skill, std::span<const GroundTruthBox> annotations) {
  std::vector<std::size_t> added(skill.classes.size(), 0);
  for (const auto& box : annotations) {
    if (box.class_id < 0 || static_cast<std::size_t>(box.class_id) >= skill.classes.size()) {
      throw Error(Errc::UnknownClass, "class " + std::to_string(box.class_id));
    }
    ++added[static_cast<std::size_t>(box.class_id)];
  }
  SyntheticSkill out = skill;
  const double total_before = static_cast<double>(skill.total_labeled());
  for (std::size_t c = 0; c < out.classes.size(); ++c) {
    if (added[c] == 0) continue;
    auto& k = out.classes[c];
    const double n0 = static_cast<double>(k.labeled_count);
    const double n1 = n0 + static_cast<double>(added[c]);
    k.labeled_count += added[c];
    if (k.conf_mean < out.conf_cap) {
      k.conf_mean = out.conf_cap - (out.conf_cap - k.conf_mean) * std::exp(-static_cast<double>(added[c]) / out.conf_rate);
    }
    k.sigma *= (1.0 + n0 / out.sigma_rate) / (1.0 + n1 / out.sigma_rate);
  }
  const double total_after = static_cast<double>(out.total_labeled());
  out.fp_prob *= (1.0 + total_before / out.fp_decay) / (1.0 + total_after / out.fp_decay);
  return out;
}

namespace {

// Clips a center box to the unit square; nullopt if nothing is left.
std::optional<Box> clip_unit(double cx, double cy, double w, double h) {
  const double x1 = std::clamp(cx - w / 2, 0.0, 1.0);
  const double x2 = std::clamp(cx + w / 2, 0.0, 1.0);
  const double y1 = std::clamp(cy - h / 2, 0.0, 1.0);
  const double y2 = std::clamp(cy + h / 2, 0.0, 1.0);
  if (x2 - x1 < 1e-6 || y2 - y1 < 1e-6) return std::nullopt;
  return Box::from_xyxy(x1, y1, x2, y2);
}

} // namespace

std::vector<Detection> synthetic_detect(const SyntheticSkill& skill, std::string_view image_id,
                                        std::span<const GroundTruthBox> truth, int model_version,
                                        std::optional<double> difficulty) {
  // Every random draw happens whether or not it is used, so models that
  // differ only in skill see the same noise for the same image.
  Rng rng(mix_seed(skill.seed, stable_hash(image_id)));
  const double hashed = rng.uniform() * skill.difficulty_spread;
  const double d = difficulty ? *difficulty * skill.difficulty_spread : hashed;

  std::vector<Detection> out;
  for (const auto& g : truth) {
    const double u = rng.uniform();
    const double nx = rng.normal(), ny = rng.normal(), nw = rng.normal(), nh = rng.normal(), nc = rng.normal();
    if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= skill.classes.size()) continue;
    const auto& k = skill.classes[static_cast<std::size_t>(g.class_id)];
    double p = k.detect_prob();
    if (p > 0.0 && p < 1.0) {
      p = 1.0 / (1.0 + std::exp(-(k.a * static_cast<double>(k.labeled_count) + k.b - d)));
    }
    if (!(u < p)) continue;
    const auto box = clip_unit(g.cx + k.sigma * g.w * nx, g.cy + k.sigma * g.h * ny, g.w * std::exp(k.sigma * nw),
                               g.h * std::exp(k.sigma * nh));
    if (!box) continue;
    Detection det;
    det.image_id = std::string(image_id);
    det.class_id = g.class_id;
    det.cx = box->cx;
    det.cy = box->cy;
    det.w = box->w;
    det.h = box->h;
    det.confidence = std::clamp(k.conf_mean - skill.difficulty_conf_drop * d + k.conf_spread * nc, 0.01, 1.0);
    det.model_version = model_version;
    out.push_back(std::move(det));
  }
  for (int slot = 0; slot < skill.fp_slots; ++slot) {
    const double u = rng.uniform();
    const auto cls = skill.classes.empty() ? 0 : static_cast<int>(rng.below(skill.classes.size()));
    const double cx = rng.uniform(), cy = rng.uniform(), w = rng.uniform(0.05, 0.4), h = rng.uniform(0.05, 0.4);
    const double nc = rng.normal();
    if (skill.classes.empty() || !(u < skill.fp_prob)) continue;
    const auto box = clip_unit(cx, cy, w, h);
    if (!box) continue;
    Detection det;
    det.image_id = std::string(image_id);
    det.class_id = cls;
    det.cx = box->cx;
    det.cy = box->cy;
    det.w = box->w;
    det.h = box->h;
    det.confidence = std::clamp(skill.fp_conf_mean + 0.1 * nc, 0.01, 0.99);
    det.model_version = model_version;
    out.push_back(std::move(det));
  }
  return out;
}

SyntheticDetector::SyntheticDetector(SyntheticWorldView world, SyntheticSkill base)
    : world_(std::move(world)), base_(std::move(base)) {
  if (base_.classes.size() != world_.num_classes) {
    throw Error(Errc::InvalidArgument, "skill and world disagree on the number of classes");
  }
}

void SyntheticDetector::inject_failures(int n) {
  std::lock_guard lock(mu_);
  pending_failures_ = n;
}

void SyntheticDetector::set_epoch_delay(std::chrono::milliseconds delay) {
  std::lock_guard lock(mu_);
  epoch_delay_ = delay;
}

std::optional<SyntheticSkill> SyntheticDetector::skill_of(const ModelVersion& model) const {
  std::lock_guard lock(mu_);
  const auto it = models_.find(model.weights_ref);
  if (it == models_.end()) return std::nullopt;
  return it->second;
}

std::pair<SyntheticSkill, EpochMetrics> SyntheticDetector::fit(std::span<const LabeledImage> manifest,
                                                              const TrainConfig& config, int version,
                                                              const EpochCallback& on_epoch,
                                                              std::chrono::milliseconds delay) const {
  std::vector<GroundTruthBox> all;
  std::uint64_t manifest_hash = 0;
  for (const auto& img : manifest) {
    all.insert(all.end(), img.boxes.begin(), img.boxes.end());
    manifest_hash = mix_seed(manifest_hash, stable_hash(img.image_id));
  }
  const SyntheticSkill trained = synthetic_update_skill(base_, all);

  GroundTruth val_truth;
  for (const auto& id : world_.validation) {
    const auto it = world_.truth.find(id);
    if (it != world_.truth.end()) val_truth.emplace(id, it->second);
  }

  const int epochs = config.epochs;
  SyntheticSkill best;
  EpochMetrics best_metrics;
  best_metrics.map50_95 = -1.0;
  for (int e = 1; e <= epochs; ++e) {
    // Early epochs are handicapped; a little seeded jitter makes the best
    // epoch not always the last one.
    const double ramp = std::exp(-5.0 * e / epochs);
    Rng jitter(mix_seed(config.seed, mix_seed(manifest_hash, static_cast<std::uint64_t>(e))));
    const double shift = -2.5 * ramp + 0.08 * jitter.normal();
    SyntheticSkill s = trained;
    for (auto& k : s.classes) {
      if (std::isfinite(k.b)) k.b += shift;
      k.sigma *= 1.0 + 2.0 * ramp;
      k.conf_mean = std::max(0.05, k.conf_mean - 0.2 * ramp);
    }

    EpochMetrics m;
    m.epoch = e;
    if (!val_truth.empty()) {
      DetectionMap dets;
      for (const auto& [id, boxes] : val_truth) {
        const auto over = world_.difficulty.find(id);
        dets[id] = synthetic_detect(s, id, boxes, version,
                                    over == world_.difficulty.end() ? std::nullopt : std::optional(over->second));
      }
      const auto report = map_metrics(dets, val_truth);
      m.map50 = report.map50;
      m.map50_95 = report.map50_95;
    }
    double sig = 0.0, miss = 0.0;
    for (const auto& k : s.classes) {
      sig += k.sigma;
      miss += 1.0 - k.detect_prob();
    }
    const double nc = static_cast<double>(std::max<std::size_t>(1, s.classes.size()));
    m.box_loss = 0.5 + 4.0 * sig / nc;
    m.class_loss = 0.2 + 2.0 * miss / nc;
    if (on_epoch) on_epoch(m);
    if (m.map50_95 >= best_metrics.map50_95) {
      best_metrics = m;
      best = s;
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
  }

  return {best, best_metrics};
}

void SyntheticDetector::restore_model(const ModelVersion& model, std::span<const LabeledImage> manifest) {
  {
    std::lock_guard lock(mu_);
    if (models_.contains(model.weights_ref)) return;
  }
  if (manifest.empty()) throw Error(Errc::InvalidArgument, "training manifest is empty");
  auto skill = fit(manifest, model.train_config, model.version, nullptr, std::chrono::milliseconds(0)).first;
  std::lock_guard lock(mu_);
  models_.emplace(model.weights_ref, std::move(skill));
}

ModelVersion SyntheticDetector::train(const TrainRequest& request, const EpochCallback& on_epoch) {
  if (request.manifest.empty()) throw Error(Errc::InvalidArgument, "training manifest is empty");
  if (request.config.epochs < 1) throw Error(Errc::InvalidArgument, "epochs must be >= 1");
  std::chrono::milliseconds delay;
  {
    std::lock_guard lock(mu_);
    if (request.parent && models_.find(request.parent->weights_ref) == models_.end()) {
      throw Error(Errc::UnknownModel, "parent " + request.parent->weights_ref);
    }
    if (active_sessions_.contains(request.session)) {
      throw Error(Errc::ConcurrentTraining, "session '" + request.session + "' is already training");
    }
    if (pending_failures_ > 0) {
      --pending_failures_;
      throw Error(Errc::TrainingFailed, "injected failure");
    }
    active_sessions_.insert(request.session);
    delay = epoch_delay_;
  }
  struct Release {
    SyntheticDetector* self;
    const std::string& session;
    ~Release() {
      std::lock_guard lock(self->mu_);
      self->active_sessions_.erase(session);
    }
  } release{this, request.session};

  std::uint64_t manifest_hash = 0;
  for (const auto& img : request.manifest) manifest_hash = mix_seed(manifest_hash, stable_hash(img.image_id));
  const int version = request.parent ? request.parent->version + 1 : 0;
  const auto [best, best_metrics] = fit(request.manifest, request.config, version, on_epoch, delay);

  ModelVersion mv;
  mv.version = version;
  if (request.parent) mv.parent = request.parent->version;
  mv.train_config = request.config;
  mv.created_at = utc_timestamp();
  mv.best_epoch = best_metrics.epoch;
  char ref[64];
  std::snprintf(ref, sizeof ref, "syn-%d-%016llx", version,
                static_cast<unsigned long long>(mix_seed(stable_hash(request.session), manifest_hash)));
  mv.weights_ref = ref;
  {
    std::lock_guard lock(mu_);
    models_[mv.weights_ref] = best;
  }
  return mv;
}

std::vector<Detection> SyntheticDetector::infer(const ModelVersion& model, std::span<const std::string> image_ids) {
  SyntheticSkill skill;
  {
    std::lock_guard lock(mu_);
    const auto it = models_.find(model.weights_ref);
    if (it == models_.end()) throw Error(Errc::UnknownModel, "model " + model.weights_ref);
    skill = it->second;
  }
  std::vector<Detection> out;
  for (const auto& id : image_ids) {
    const auto t = world_.truth.find(id);
    if (t == world_.truth.end()) continue;
    const auto over = world_.difficulty.find(id);
    auto dets = synthetic_detect(skill, id, t->second, model.version,
                                 over == world_.difficulty.end() ? std::nullopt : std::optional(over->second));
    out.insert(out.end(), std::make_move_iterator(dets.begin()), std::make_move_iterator(dets.end()));
  }
  return out;
}

} // namespace vilod
