#include "vilod/protocol.hpp"

#include "vilod/error.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <thread>

namespace vilod::protocol {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& what) { throw Error(Errc::ProtocolError, what); }

json parse_line(std::string_view line) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) bad("expected a JSON object");
    return j;
  } catch (const json::exception& e) {
    bad(std::string("invalid JSON: ") + e.what());
  }
}

template <class T> T field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) bad(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    bad(std::string("field '") + key + "' has the wrong type");
  }
}

json config_json(const TrainConfig& c) { return {{"epochs", c.epochs}, {"imgsz", c.image_size}, {"seed", c.seed}}; }

} // namespace

std::string encode(const InferCall& call) {
  json j = {{"op", "infer"}, {"model", call.model}, {"images", call.images}};
  if (!call.session.empty()) j["session"] = call.session;
  return j.dump();
}

std::string encode(const TrainCall& call) {
  json j = {{"op", "train"},
            {"parent", call.parent ? json(*call.parent) : json(nullptr)},
            {"manifest_path", call.manifest_path},
            {"config", config_json(call.config)}};
  if (!call.session.empty()) j["session"] = call.session;
  return j.dump();
}

Request decode_request(std::string_view line) {
  const json j = parse_line(line);
  const auto op = field<std::string>(j, "op");
  const std::string session = j.contains("session") ? field<std::string>(j, "session") : std::string();
  if (op == "infer") {
    return InferCall{session, field<int>(j, "model"), field<std::vector<std::string>>(j, "images")};
  }
  if (op == "train") {
    TrainCall call;
    call.session = session;
    if (j.contains("parent") && !j["parent"].is_null()) call.parent = field<int>(j, "parent");
    call.manifest_path = field<std::string>(j, "manifest_path");
    if (j.contains("config")) {
      const auto& c = j["config"];
      if (!c.is_object()) bad("config must be an object");
      if (c.contains("epochs")) call.config.epochs = field<int>(c, "epochs");
      if (c.contains("imgsz")) call.config.image_size = field<int>(c, "imgsz");
      if (c.contains("seed")) call.config.seed = field<std::uint64_t>(c, "seed");
    }
    return call;
  }
  bad("unknown op '" + op + "'");
}

std::string encode_detections(std::string_view image_id, std::span<const Detection> detections) {
  json dets = json::array();
  for (const auto& d : detections) {
    dets.push_back({{"class", d.class_id}, {"box", {d.cx, d.cy, d.w, d.h}}, {"conf", d.confidence}});
  }
  return json{{"image_id", image_id}, {"detections", std::move(dets)}}.dump();
}

std::string encode_epoch(const EpochMetrics& m) {
  return json{{"epoch", m.epoch},
              {"map50", m.map50},
              {"map50_95", m.map50_95},
              {"box_loss", m.box_loss},
              {"cls_loss", m.class_loss}}
      .dump();
}

std::string encode_done(const TrainDone& done) {
  return json{{"done", true}, {"version", done.version}, {"best_epoch", done.best_epoch}}.dump();
}

std::string encode_error(const RemoteError& err) { return json{{"error", err.message}, {"code", err.code}}.dump(); }

namespace {

std::optional<RemoteError> as_error(const json& j) {
  if (!j.contains("error")) return std::nullopt;
  return RemoteError{j.contains("code") ? field<std::string>(j, "code") : "TrainingFailed",
                     field<std::string>(j, "error")};
}

} // namespace

InferLine decode_infer_line(std::string_view line, int model_version) {
  const json j = parse_line(line);
  if (auto e = as_error(j)) return *e;
  ImageDetections out;
  out.image_id = field<std::string>(j, "image_id");
  const auto it = j.find("detections");
  if (it == j.end() || !it->is_array()) bad("missing detections array");
  for (const auto& d : *it) {
    if (!d.is_object()) bad("detection must be an object");
    const auto box = field<std::vector<double>>(d, "box");
    if (box.size() != 4) bad("box needs 4 numbers");
    Detection det;
    det.image_id = out.image_id;
    det.class_id = field<int>(d, "class");
    det.cx = box[0];
    det.cy = box[1];
    det.w = box[2];
    det.h = box[3];
    det.confidence = field<double>(d, "conf");
    if (!(det.confidence >= 0.0 && det.confidence <= 1.0)) bad("confidence outside [0,1]");
    det.model_version = model_version;
    out.detections.push_back(std::move(det));
  }
  return out;
}

TrainLine decode_train_line(std::string_view line) {
  const json j = parse_line(line);
  if (auto e = as_error(j)) return *e;
  if (j.contains("done")) {
    if (!field<bool>(j, "done")) bad("done must be true");
    return TrainDone{field<int>(j, "version"), j.contains("best_epoch") ? field<int>(j, "best_epoch") : 0};
  }
  EpochMetrics m;
  m.epoch = field<int>(j, "epoch");
  m.map50 = field<double>(j, "map50");
  m.map50_95 = field<double>(j, "map50_95");
  m.box_loss = field<double>(j, "box_loss");
  m.class_loss = field<double>(j, "cls_loss");
  return m;
}

std::string encode_manifest(std::span<const LabeledImage> images) {
  json arr = json::array();
  for (const auto& img : images) {
    json boxes = json::array();
    for (const auto& b : img.boxes) boxes.push_back({b.class_id, b.cx, b.cy, b.w, b.h});
    arr.push_back({{"image_id", img.image_id}, {"boxes", std::move(boxes)}});
  }
  return json{{"images", std::move(arr)}}.dump();
}

std::vector<LabeledImage> decode_manifest(std::string_view text) {
  const json j = parse_line(text);
  const auto it = j.find("images");
  if (it == j.end() || !it->is_array()) bad("manifest needs an images array");
  std::vector<LabeledImage> out;
  for (const auto& img : *it) {
    LabeledImage li;
    li.image_id = field<std::string>(img, "image_id");
    for (const auto& b : field<std::vector<std::vector<double>>>(img, "boxes")) {
      if (b.size() != 5) bad("manifest box needs 5 numbers");
      li.boxes.push_back({static_cast<int>(b[0]), b[1], b[2], b[3], b[4]});
    }
    out.push_back(std::move(li));
  }
  return out;
}

void raise(const RemoteError& err) {
  throw Error(errc_from_name(err.code).value_or(Errc::TrainingFailed), err.message);
}

// ---------------------------------------------------------------------------

void Handler::handle(std::string_view request_line, const std::function<void(const std::string&)>& emit) {
  try {
    const Request req = decode_request(request_line);
    if (const auto* call = std::get_if<InferCall>(&req)) {
      ModelVersion model;
      {
        std::lock_guard lock(mu_);
        const auto it = models_.find({call->session, call->model});
        if (it == models_.end()) throw Error(Errc::UnknownModel, "model " + std::to_string(call->model));
        model = it->second;
      }
      const auto dets = backend_.infer(model, call->images);
      const auto grouped = group_by_image(dets);
      for (const auto& id : call->images) {
        const auto g = grouped.find(id);
        emit(encode_detections(id, g == grouped.end() ? std::span<const Detection>{} : std::span(g->second)));
      }
      return;
    }
    const auto& call = std::get<TrainCall>(req);
    TrainRequest tr;
    tr.session = call.session;
    tr.config = call.config;
    if (call.parent) {
      std::lock_guard lock(mu_);
      const auto it = models_.find({call.session, *call.parent});
      if (it == models_.end()) throw Error(Errc::UnknownModel, "parent " + std::to_string(*call.parent));
      tr.parent = it->second;
    }
    tr.manifest = decode_manifest(read_text_file(call.manifest_path));
    const auto mv = backend_.train(tr, [&](const EpochMetrics& m) { emit(encode_epoch(m)); });
    {
      std::lock_guard lock(mu_);
      models_[{call.session, mv.version}] = mv;
    }
    emit(encode_done({mv.version, mv.best_epoch}));
  } catch (const Error& e) {
    emit(encode_error({std::string(errc_name(e.code())), e.detail()}));
  } catch (const std::exception& e) {
    emit(encode_error({"TrainingFailed", e.what()}));
  }
}

struct DetectorServer::Impl {
  explicit Impl(DetectorBackend& backend) : handler(backend) {}
  Handler handler;
  httplib::Server server;
  std::thread thread;
};

DetectorServer::DetectorServer(DetectorBackend& backend) : impl_(std::make_unique<Impl>(backend)) {
  impl_->server.Post("/detector", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string body = req.body;
    res.set_chunked_content_provider("application/x-ndjson", [this, body](std::size_t, httplib::DataSink& sink) {
      impl_->handler.handle(body, [&](const std::string& line) {
        const std::string out = line + "\n";
        sink.write(out.data(), out.size());
      });
      sink.done();
      return true;
    });
  });
  impl_->server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"ok\":true}", "application/json");
  });
}

DetectorServer::~DetectorServer() { stop(); }

int DetectorServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error(Errc::BackendUnavailable, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

bool DetectorServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void DetectorServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

// ---------------------------------------------------------------------------

RemoteDetector::RemoteDetector(std::string address, std::filesystem::path manifest_dir)
    : manifest_dir_(std::move(manifest_dir)) {
  if (address.rfind("http://", 0) == 0) address.erase(0, 7);
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::InvalidArgument, "detector address needs host:port");
  host_ = address.substr(0, colon);
  try {
    port_ = std::stoi(address.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error(Errc::InvalidArgument, "bad detector port in '" + address + "'");
  }
}

void RemoteDetector::post(const std::string& body, const std::function<void(std::string_view)>& on_line) {
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(std::chrono::seconds(5));
  cli.set_read_timeout(std::chrono::hours(24));
  std::string buffer;
  httplib::Request req;
  req.method = "POST";
  req.path = "/detector";
  req.body = body;
  req.set_header("Content-Type", "application/x-ndjson");
  std::exception_ptr failure;
  req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t, std::uint64_t) {
    buffer.append(data, len);
    std::size_t nl;
    while ((nl = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      if (line.empty()) continue;
      try {
        on_line(line);
      } catch (...) {
        failure = std::current_exception();
        return false;
      }
    }
    return true;
  };
  httplib::Response res;
  httplib::Error err = httplib::Error::Success;
  const bool ok = cli.send(req, res, err);
  if (failure) std::rethrow_exception(failure);
  if (!ok) throw Error(Errc::BackendUnavailable, host_ + ":" + std::to_string(port_) + ": " + httplib::to_string(err));
  if (res.status != 200) throw Error(Errc::BackendUnavailable, "detector returned HTTP " + std::to_string(res.status));
  if (!buffer.empty()) on_line(buffer);
}

namespace {

constexpr std::string_view kRefPrefix = "remote/";

std::pair<std::string, int> parse_ref(const ModelVersion& model) {
  const auto& ref = model.weights_ref;
  if (ref.rfind(kRefPrefix, 0) != 0) throw Error(Errc::UnknownModel, "not a remote model: " + ref);
  const auto slash = ref.find('/', kRefPrefix.size());
  if (slash == std::string::npos) throw Error(Errc::UnknownModel, "bad model ref " + ref);
  return {ref.substr(slash + 1), std::stoi(ref.substr(kRefPrefix.size(), slash - kRefPrefix.size()))};
}

} // namespace

ModelVersion RemoteDetector::train(const TrainRequest& request, const EpochCallback& on_epoch) {
  if (request.manifest.empty()) throw Error(Errc::InvalidArgument, "training manifest is empty");
  TrainCall call;
  call.session = request.session;
  if (request.parent) call.parent = parse_ref(*request.parent).second;
  call.config = request.config;
  const int next = request.parent ? request.parent->version + 1 : 0;
  std::string safe = request.session;
  for (auto& c : safe) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  const auto path = std::filesystem::absolute(manifest_dir_ / ("manifest_" + safe + "_" + std::to_string(next) + ".json"));
  write_text_file(path, encode_manifest(request.manifest));
  call.manifest_path = path.string();

  std::optional<TrainDone> done;
  post(encode(call) + "\n", [&](std::string_view line) {
    const auto msg = decode_train_line(line);
    if (const auto* e = std::get_if<RemoteError>(&msg)) raise(*e);
    if (const auto* m = std::get_if<EpochMetrics>(&msg)) {
      if (on_epoch) on_epoch(*m);
    } else {
      done = std::get<TrainDone>(msg);
    }
  });
  if (!done) throw Error(Errc::ProtocolError, "train stream ended without a done line");
  ModelVersion mv;
  mv.version = done->version;
  if (request.parent) mv.parent = request.parent->version;
  mv.weights_ref = std::string(kRefPrefix) + std::to_string(done->version) + "/" + request.session;
  mv.train_config = request.config;
  mv.created_at = utc_timestamp();
  mv.best_epoch = done->best_epoch;
  return mv;
}

std::vector<Detection> RemoteDetector::infer(const ModelVersion& model, std::span<const std::string> image_ids) {
  const auto [session, version] = parse_ref(model);
  InferCall call{session, version, {image_ids.begin(), image_ids.end()}};
  std::vector<Detection> out;
  post(encode(call) + "\n", [&](std::string_view line) {
    auto msg = decode_infer_line(line, model.version);
    if (const auto* e = std::get_if<RemoteError>(&msg)) raise(*e);
    auto& img = std::get<ImageDetections>(msg);
    out.insert(out.end(), std::make_move_iterator(img.detections.begin()),
               std::make_move_iterator(img.detections.end()));
  });
  return out;
}

} // namespace vilod::protocol
