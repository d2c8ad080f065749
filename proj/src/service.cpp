#include "vilod/service.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>

namespace vilod {

using nlohmann::json;
namespace fs = std::filesystem;

int http_status(Errc code) noexcept {
  switch (code) {
  case Errc::MalformedLine:
  case Errc::OutOfRange:
  case Errc::MalformedBoxes:
  case Errc::DegenerateBox:
  case Errc::ProtocolError:
  case Errc::InvalidArgument: return 400;
  case Errc::Unauthorized: return 401;
  case Errc::NoSession:
  case Errc::NotFound:
  case Errc::UnknownImage:
  case Errc::UnknownModel:
  case Errc::NoSnapshot:
  case Errc::MissingSplit: return 404;
  case Errc::PhaseViolation:
  case Errc::BudgetExceeded:
  case Errc::NotPending:
  case Errc::ConcurrentTraining:
  case Errc::ReplayExhausted:
  case Errc::DuplicateImageId: return 409;
  case Errc::NotSelectable:
  case Errc::UnknownClass:
  case Errc::KTooLarge:
  case Errc::DegenerateRow:
  case Errc::DegenerateInput:
  case Errc::PerplexityTooLarge:
  case Errc::ScoreOutOfRange:
  case Errc::TooFewPoints:
  case Errc::NegativeWeight:
  case Errc::EmptyEvalSet: return 422;
  case Errc::StorageError: return 500;
  case Errc::TrainingFailed: return 502;
  case Errc::BackendUnavailable: return 503;
  }
  return 500;
}

// --- events --------------------------------------------------------------------

std::string training_event_json(const std::string& job, std::size_t seq, const TrainingEvent& e) {
  json j{{"job", job}, {"seq", seq}};
  switch (e.kind) {
  case TrainingEvent::Kind::Epoch:
    j["type"] = "epoch";
    j["epoch"] = e.epoch.epoch;
    j["map50"] = e.epoch.map50;
    j["map50_95"] = e.epoch.map50_95;
    j["box_loss"] = e.epoch.box_loss;
    j["cls_loss"] = e.epoch.class_loss;
    break;
  case TrainingEvent::Kind::Done:
    j["type"] = "done";
    j["version"] = e.version;
    break;
  case TrainingEvent::Kind::Failed:
    j["type"] = "failed";
    j["code"] = e.code;
    j["message"] = e.message;
    break;
  }
  return j.dump();
}

void EventChannel::append(TrainingEvent event) {
  {
    std::lock_guard lock(mu_);
    if (closed_) return;
    closed_ = event.terminal();
    events_.push_back(std::move(event));
  }
  cv_.notify_all();
}

std::size_t EventChannel::size() const {
  std::lock_guard lock(mu_);
  return events_.size();
}

bool EventChannel::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

std::vector<TrainingEvent> EventChannel::read(std::size_t from, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return events_.size() > from || closed_; });
  if (from >= events_.size()) return {};
  return {events_.begin() + static_cast<std::ptrdiff_t>(from), events_.end()};
}

// --- payloads --------------------------------------------------------------------

namespace {

ApiResponse json_response(const json& j, int status = 200) { return {status, "application/json", j.dump()}; }

ApiResponse error_response(const Error& e) {
  return json_response({{"error", errc_name(e.code())}, {"message", e.detail()}}, http_status(e.code()));
}

json box_array(double cx, double cy, double w, double h) { return json::array({cx, cy, w, h}); }

json model_json(const ModelVersion& m) {
  return {{"version", m.version},       {"parent", m.parent ? json(*m.parent) : json(nullptr)},
          {"weights_ref", m.weights_ref}, {"created_at", m.created_at},
          {"best_epoch", m.best_epoch},   {"epochs", m.train_config.epochs}};
}

json rows_json(std::span<const TrajectoryRow> rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"strategy", r.strategy},
                   {"iteration", r.iteration},
                   {"map50_95", r.map50_95},
                   {"map50", r.map50},
                   {"map75", r.map75},
                   {"precision", r.precision},
                   {"recall", r.recall}});
  }
  return out;
}

std::vector<TrajectoryRow> session_rows(const IterationState& st) {
  std::vector<TrajectoryRow> rows;
  for (std::size_t i = 0; i < st.trajectory.size(); ++i) {
    rows.push_back(trajectory_row("session", static_cast<int>(i), st.trajectory[i]));
  }
  return rows;
}

// Most frequent class among the boxes, ties to the lowest id.
std::optional<int> majority_class(const std::vector<GroundTruthBox>& boxes) {
  std::map<int, std::size_t> counts;
  for (const auto& b : boxes) ++counts[b.class_id];
  std::optional<int> best;
  std::size_t n = 0;
  for (const auto& [c, k] : counts) {
    if (k > n) {
      best = c;
      n = k;
    }
  }
  return best;
}

json heatmap_json(const HeatmapGrid& g) {
  return {{"x_min", g.x_min},         {"x_max", g.x_max},   {"y_min", g.y_min},
          {"y_max", g.y_max},         {"nx", g.nx},         {"ny", g.ny},
          {"bandwidth", g.bandwidth}, {"degenerate", g.degenerate}, {"colormap", g.colormap_name},
          {"values", g.values}};
}

std::vector<GroundTruthBox> parse_boxes(const std::string& body, std::size_t num_classes) {
  std::vector<GroundTruthBox> out;
  try {
    const json j = json::parse(body);
    for (const auto& b : j.at("boxes")) {
      const auto& box = b.at("box");
      if (!box.is_array() || box.size() != 4 || !b.at("class").is_number_integer()) throw std::runtime_error("shape");
      out.push_back({b.at("class").get<int>(), box.at(0).get<double>(), box.at(1).get<double>(),
                     box.at(2).get<double>(), box.at(3).get<double>()});
    }
  } catch (const std::exception& e) {
    throw Error(Errc::MalformedBoxes, std::string("expected {\"boxes\":[{\"class\":c,\"box\":[cx,cy,w,h]}]}: ") + e.what());
  }
  for (const auto& b : out) {
    if (!box_is_valid(b, num_classes)) throw Error(Errc::MalformedBoxes, "box outside the unit square or unknown class");
  }
  return out;
}

const char* content_type_for(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

} // namespace

// --- service ---------------------------------------------------------------------------

struct Service::Host {
  std::mutex mu; // the session's single writer
  std::optional<Session> session;
  std::shared_ptr<EventChannel> channel;
  std::thread worker;
  std::condition_variable idle;
  bool busy = false;
  int jobs = 0;
};

Service::Service(SessionConfig config, std::shared_ptr<const SessionInputs> inputs, fs::path data_root,
                 EntityStore& store, DetectorBackend& detector)
    : config_(std::move(config)), inputs_(std::move(inputs)), data_root_(std::move(data_root)), store_(store),
      detector_(detector) {
  validate_config(config_);
  store_.register_images(inputs_->registry);
}

Service::~Service() {
  std::lock_guard lock(hosts_mu_);
  for (auto& [name, h] : hosts_) {
    if (h->worker.joinable()) h->worker.join();
  }
}

std::string Service::authenticate(const std::string& token) const {
  if (token.empty()) throw Error(Errc::Unauthorized, "missing bearer token");
  const auto user = store_.user_by_token(token);
  if (!user) throw Error(Errc::Unauthorized, "unknown token");
  return user->name;
}

std::shared_ptr<Service::Host> Service::host(const std::string& user) {
  std::lock_guard lock(hosts_mu_);
  auto& h = hosts_[user];
  if (!h) h = std::make_shared<Host>();
  return h;
}

std::shared_ptr<Service::Host> Service::session_host(const std::string& user) {
  auto h = host(user);
  std::lock_guard lock(h->mu);
  if (h->session) return h;
  try {
    auto snap = store_.restore_session(user);
    auto projection = store_.read_projection(user).value_or(std::vector<ProjectionPoint>{});
    h->session.emplace(Session::restore(snap.config, inputs_, std::move(snap.state), std::move(projection), user));
    const auto& st = h->session->state();
    if (st.current_model) detector_.restore_model(*st.current_model, model_manifest(st));
  } catch (const Error& e) {
    if (e.code() == Errc::NoSnapshot) return nullptr;
    throw;
  }
  return h;
}

void Service::persist(const std::string& user, const Session& session) {
  store_.snapshot_session(user, {session.context().config, session.state()});
  const auto rows = session_rows(session.state());
  store_.write_trajectory(user, rows);
}

void Service::persist_model(const std::string& user, const IterationState& st) {
  if (!st.current_model) return;
  store_.record_model(user, *st.current_model);
  store_.record_detections(user, st.current_model->version, st.pool_detections);
}

ApiResponse Service::start_session(const std::string& user) {
  if (!session_host(user)) {
    auto h = host(user);
    std::lock_guard lock(h->mu);
    if (!h->session) {
      auto cached = store_.read_projection(user);
      auto s = Session::start(config_, inputs_, detector_, user, std::move(cached));
      store_.write_projection(user, s.context().projection);
      persist_model(user, s.state());
      persist(user, s);
      h->session.emplace(std::move(s));
    }
  }
  return get_state(user);
}

ApiResponse Service::get_state(const std::string& user) {
  const auto h = session_host(user);
  if (!h) throw Error(Errc::NoSession, "no session for " + user);
  std::lock_guard lock(h->mu);
  const auto& s = *h->session;
  const auto& st = s.state();
  const auto& ctx = s.context();
  const auto& classes = inputs_->registry.classes();

  const auto open = st.open_suggestions();
  std::set<std::string_view> suggested;
  for (const auto& sc : open) suggested.insert(sc.image_id);

  json points = json::array();
  for (const auto& p : ctx.projection) {
    json pt{{"image_id", p.image_id}, {"x", p.x}, {"y", p.y}};
    const bool pending = st.is_pending(p.image_id);
    if (st.is_labeled(p.image_id) || pending) {
      const auto m = majority_class(st.annotations.at(p.image_id));
      pt["status"] = "labeled";
      pt["class"] = m ? json(*m) : json(nullptr);
      pt["pending"] = pending;
    } else if (suggested.count(p.image_id)) {
      pt["status"] = "suggested";
    } else {
      pt["status"] = "unlabeled";
    }
    points.push_back(std::move(pt));
  }

  json sugg = json::array();
  for (const auto& sc : open) sugg.push_back({{"image_id", sc.image_id}, {"avg_conf", sc.avg_conf}});

  json dist = json::array();
  const auto summaries = confidence_distribution(st.pool_detections, classes.size());
  for (std::size_t c = 0; c < summaries.size(); ++c) {
    const auto& b = summaries[c];
    dist.push_back({{"class_id", c}, {"name", classes[c]}, {"empty", b.empty}, {"count", b.count},
                    {"min", b.min}, {"q1", b.q1}, {"median", b.median}, {"q3", b.q3}, {"max", b.max},
                    {"outliers", b.outliers}});
  }
  std::vector<AnnotatedInstance> instances;
  for (const auto& [id, boxes] : st.annotations) {
    const auto it = st.labeled_iteration.find(id);
    const int iteration = it == st.labeled_iteration.end() ? st.iteration : it->second;
    for (const auto& b : boxes) instances.push_back({b.class_id, iteration});
  }
  const auto balance = class_balance(instances, st.iteration, classes.size());

  std::vector<TrajectoryRow> baseline;
  if (const auto path = store_.root() / "runs" / "baseline.csv"; fs::exists(path)) {
    baseline = trajectory_from_csv(read_text_file(path));
  }

  json out{{"user", user},
           {"iteration", st.iteration},
           {"total_iterations", ctx.config.total_iterations},
           {"phase", phase_name(st.phase)},
           {"budget", {{"used", st.pending_ids.size()}, {"total", ctx.config.budget_per_iteration}}},
           {"labeled_count", st.labeled_ids.size()},
           {"classes", classes},
           {"model", st.current_model ? model_json(*st.current_model) : json(nullptr)},
           {"points", points},
           {"suggestions", sugg},
           {"heatmap", {{"href", "/heatmap"}, {"available", st.heatmap.has_value()}}},
           {"stats", {{"confidence_distribution", dist},
                      {"class_balance", {{"prior", balance.prior_count}, {"new", balance.new_count}}}}},
           {"trajectories", {{"session", rows_json(session_rows(st))}, {"baseline", rows_json(baseline)}}},
           {"fault", st.fault ? json{{"iteration", st.fault->iteration}, {"code", st.fault->code},
                                     {"message", st.fault->message}}
                              : json(nullptr)}};
  return json_response(out);
}

ApiResponse Service::annotate(const std::string& user, const std::string& image_id, const std::string& body) {
  const auto h = session_host(user);
  if (!h) throw Error(Errc::NoSession, "no session for " + user);
  auto boxes = parse_boxes(body, inputs_->registry.classes().size());
  std::lock_guard lock(h->mu);
  auto& s = *h->session;
  const bool was_pending = s.state().is_pending(image_id);
  std::vector<GroundTruthBox> previous;
  if (was_pending) previous = s.state().annotations.at(image_id);
  s.record_annotation(image_id, boxes);
  try {
    store_.record_annotation(user, image_id, s.state().iteration, boxes);
  } catch (...) {
    if (was_pending) s.record_annotation(image_id, previous);
    else s.undo_annotation(image_id);
    throw;
  }
  persist(user, s);
  const auto& st = s.state();
  return json_response({{"image_id", image_id},
                        {"budget", {{"used", st.pending_ids.size()}, {"total", s.context().config.budget_per_iteration}}},
                        {"phase", phase_name(st.phase)}});
}

ApiResponse Service::undo(const std::string& user, const std::string& image_id) {
  const auto h = session_host(user);
  if (!h) throw Error(Errc::NoSession, "no session for " + user);
  std::lock_guard lock(h->mu);
  auto& s = *h->session;
  s.undo_annotation(image_id);
  store_.delete_annotation(user, image_id, s.state().iteration);
  persist(user, s);
  const auto& st = s.state();
  return json_response({{"image_id", image_id},
                        {"budget", {{"used", st.pending_ids.size()}, {"total", s.context().config.budget_per_iteration}}},
                        {"phase", phase_name(st.phase)}});
}

ApiResponse Service::retrain(const std::string& user) {
  const auto h = session_host(user);
  if (!h) throw Error(Errc::NoSession, "no session for " + user);
  std::lock_guard lock(h->mu);
  auto& s = *h->session;
  const TrainingJob job = s.begin_retrain();
  persist(user, s);
  auto ctx = s.shared_context();
  auto channel = std::make_shared<EventChannel>(user + "-" + std::to_string(job.iteration) + "-" +
                                                std::to_string(++h->jobs));
  h->channel = channel;
  h->busy = true;
  // the previous worker released the lock for the last time before phase
  // left training, so this join cannot wait on us
  if (h->worker.joinable()) h->worker.join();
  h->worker = std::thread([this, h, ctx, job, channel, user] {
    std::optional<RetrainOutcome> outcome;
    std::optional<Error> failure;
    try {
      outcome = run_training_job(*ctx, job, detector_, [&](const EpochMetrics& m) {
        TrainingEvent e;
        e.epoch = m;
        channel->append(std::move(e));
      });
    } catch (const Error& e) {
      failure = e;
    } catch (const std::exception& e) {
      failure = Error(Errc::TrainingFailed, e.what());
    }
    std::lock_guard lock(h->mu);
    TrainingEvent terminal;
    if (outcome) {
      h->session->complete_retrain(job, std::move(*outcome));
      terminal.kind = TrainingEvent::Kind::Done;
      terminal.version = h->session->state().current_model->version;
    } else {
      h->session->fail_retrain(job, *failure);
      terminal.kind = TrainingEvent::Kind::Failed;
      terminal.code = std::string(errc_name(failure->code()));
      terminal.message = failure->detail();
    }
    try {
      if (outcome) persist_model(user, h->session->state());
      persist(user, *h->session);
    } catch (const std::exception& e) {
      std::cerr << "vilod: cannot persist session of " << user << ": " << e.what() << "\n";
    }
    channel->append(std::move(terminal));
    h->busy = false;
    h->idle.notify_all();
  });
  return json_response({{"job", channel->job()}}, 202);
}

void Service::wait_idle(const std::string& user) {
  auto h = host(user);
  std::unique_lock lock(h->mu);
  h->idle.wait(lock, [&] { return !h->busy; });
}

std::shared_ptr<EventChannel> Service::training_channel(const std::string& token) {
  const auto user = authenticate(token);
  auto h = host(user);
  std::lock_guard lock(h->mu);
  return h->channel;
}

ApiResponse Service::image_bytes(const std::string& image_id) const {
  const auto* rec = inputs_->registry.find(image_id);
  if (!rec) throw Error(Errc::UnknownImage, "unknown image " + image_id);
  // manifests loaded from disk carry usable paths already; generated ones
  // are relative to the data root
  fs::path path = rec->image_path;
  if (path.is_relative() && !fs::exists(path)) path = data_root_ / path;
  if (!fs::exists(path)) throw Error(Errc::NotFound, "image file missing for " + image_id);
  return {200, content_type_for(path), read_text_file(path)};
}

ApiResponse Service::handle(const ApiRequest& req) {
  try {
    if (req.method == "GET" && req.path == "/health") return json_response({{"ok", true}});
    const auto user = authenticate(req.token);

    std::vector<std::string> parts;
    for (std::size_t i = 1; i <= req.path.size();) {
      const auto slash = req.path.find('/', i);
      const auto end = slash == std::string::npos ? req.path.size() : slash;
      parts.push_back(req.path.substr(i, end - i));
      i = end + 1;
    }
    const auto& m = req.method;
    const auto n = parts.size();

    if (m == "POST" && n == 1 && parts[0] == "session") return start_session(user);
    if (m == "GET" && n == 1 && parts[0] == "state") return get_state(user);
    if (m == "POST" && n == 2 && parts[0] == "annotations") return annotate(user, parts[1], req.body);
    if (m == "DELETE" && n == 2 && parts[0] == "annotations") return undo(user, parts[1]);
    if (m == "POST" && n == 1 && parts[0] == "retrain") return retrain(user);
    if (m == "GET" && n == 2 && parts[0] == "images") return image_bytes(parts[1]);

    if (m == "GET") {
      const auto h = session_host(user);
      if (!h) throw Error(Errc::NoSession, "no session for " + user);
      std::lock_guard lock(h->mu);
      const auto& s = *h->session;
      const auto& st = s.state();
      if (n == 1 && parts[0] == "projection") {
        json pts = json::array();
        for (const auto& p : s.context().projection) pts.push_back({{"image_id", p.image_id}, {"x", p.x}, {"y", p.y}});
        return json_response(pts);
      }
      if (n == 1 && parts[0] == "heatmap") {
        if (!st.heatmap) throw Error(Errc::NotFound, "no heatmap for this session");
        return json_response(heatmap_json(*st.heatmap));
      }
      if (n == 1 && parts[0] == "suggestions") {
        json out = json::array();
        for (const auto& sc : st.open_suggestions()) out.push_back({{"image_id", sc.image_id}, {"avg_conf", sc.avg_conf}});
        return json_response(out);
      }
      if (n == 3 && parts[0] == "images" && parts[2] == "predictions") {
        if (!inputs_->registry.find(parts[1])) throw Error(Errc::UnknownImage, "unknown image " + parts[1]);
        json out = json::array();
        for (const auto& d : st.pool_detections) {
          if (d.image_id != parts[1]) continue;
          out.push_back({{"class", d.class_id}, {"box", box_array(d.cx, d.cy, d.w, d.h)}, {"conf", d.confidence},
                         {"model_version", d.model_version}});
        }
        return json_response(out);
      }
      if (n == 1 && parts[0] == "trajectories") {
        std::vector<TrajectoryRow> baseline;
        if (const auto path = store_.root() / "runs" / "baseline.csv"; fs::exists(path)) {
          baseline = trajectory_from_csv(read_text_file(path));
        }
        return json_response({{"session", rows_json(session_rows(st))}, {"baseline", rows_json(baseline)}});
      }
    }
    throw Error(Errc::NotFound, m + " " + req.path);
  } catch (const Error& e) {
    return error_response(e);
  } catch (const std::exception& e) {
    return error_response(Error(Errc::StorageError, e.what()));
  }
}

// --- HTTP ----------------------------------------------------------------------------------

struct HttpServer::Impl {
  explicit Impl(Service& s) : service(s) {}
  Service& service;
  httplib::Server server;
  std::thread thread;
};

namespace {

std::string bearer(const httplib::Request& req) {
  const auto auth = req.get_header_value("Authorization");
  if (auth.rfind("Bearer ", 0) == 0) return auth.substr(7);
  // EventSource cannot set headers
  if (req.has_param("token")) return req.get_param_value("token");
  return {};
}

} // namespace

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    ApiRequest api;
    api.method = req.method;
    api.path = req.path;
    api.token = bearer(req);
    api.body = req.body;
    for (const auto& [k, v] : req.params) api.query[k] = v;
    const auto out = impl_->service.handle(api);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };

  impl_->server.Get("/training", [this](const httplib::Request& req, httplib::Response& res) {
    std::shared_ptr<EventChannel> channel;
    try {
      channel = impl_->service.training_channel(bearer(req));
      if (!channel) throw Error(Errc::NotFound, "no training job yet");
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(json{{"error", errc_name(e.code())}, {"message", e.detail()}}.dump(), "application/json");
      return;
    }
    // new subscribers start at the head unless they ask for a replay
    std::size_t next = channel->size();
    if (req.has_param("from")) {
      try {
        next = std::stoul(req.get_param_value("from"));
      } catch (const std::exception&) {
        next = 0;
      }
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [channel, next](std::size_t, httplib::DataSink& sink) mutable {
      const auto events = channel->read(next, std::chrono::milliseconds(500));
      if (events.empty()) {
        if (channel->closed()) {
          sink.done();
          return true;
        }
        const std::string ping = ": keep-alive\n\n";
        return sink.write(ping.data(), ping.size());
      }
      for (const auto& e : events) {
        const char* kind = e.kind == TrainingEvent::Kind::Epoch ? "epoch"
                           : e.kind == TrainingEvent::Kind::Done ? "done"
                                                                 : "failed";
        const std::string frame = "id: " + std::to_string(next) + "\nevent: " + kind +
                                  "\ndata: " + training_event_json(channel->job(), next, e) + "\n\n";
        if (!sink.write(frame.data(), frame.size())) return false;
        ++next;
        if (e.terminal()) {
          sink.done();
          return true;
        }
      }
      return true;
    });
  });
  impl_->server.Get(R"(/.*)", route);
  impl_->server.Post(R"(/.*)", route);
  impl_->server.Delete(R"(/.*)", route);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(Errc::InvalidArgument, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

} // namespace vilod
