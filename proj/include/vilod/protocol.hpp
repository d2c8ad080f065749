#pragma once

// Newline-delimited JSON protocol spoken between the platform and an
// out-of-process detector. One request line in, a stream of lines out:
//
//   {"op":"infer","model":t,"images":[...]}
//     -> {"image_id":...,"detections":[{"class":c,"box":[cx,cy,w,h],"conf":p}]} per image
//   {"op":"train","parent":t,"manifest_path":...,"config":{"epochs":50,"imgsz":640,"seed":42}}
//     -> {"epoch":e,"map50":...,"map50_95":...,"box_loss":...,"cls_loss":...} per epoch
//     -> {"done":true,"version":t+1}
//
// Any request may instead end with {"error":message,"code":name}. An
// optional "session" string scopes model numbers; "parent" may be null.

#include "vilod/detector.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace vilod::protocol {

struct InferCall {
  std::string session;
  int model = 0;
  std::vector<std::string> images;

  bool operator==(const InferCall&) const = default;
};

struct TrainCall {
  std::string session;
  std::optional<int> parent;
  std::string manifest_path;
  TrainConfig config;

  bool operator==(const TrainCall&) const = default;
};

using Request = std::variant<InferCall, TrainCall>;

std::string encode(const InferCall& call);
std::string encode(const TrainCall& call);
// Throws ProtocolError.
Request decode_request(std::string_view line);

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;

  bool operator==(const ImageDetections&) const = default;
};

struct TrainDone {
  int version = 0;
  int best_epoch = 0;

  bool operator==(const TrainDone&) const = default;
};

struct RemoteError {
  std::string code;
  std::string message;

  bool operator==(const RemoteError&) const = default;
};

std::string encode_detections(std::string_view image_id, std::span<const Detection> detections);
std::string encode_epoch(const EpochMetrics& m);
std::string encode_done(const TrainDone& done);
std::string encode_error(const RemoteError& err);

using InferLine = std::variant<ImageDetections, RemoteError>;
using TrainLine = std::variant<EpochMetrics, TrainDone, RemoteError>;

// model_version is stamped on the decoded detections. Throws ProtocolError.
InferLine decode_infer_line(std::string_view line, int model_version);
TrainLine decode_train_line(std::string_view line);

// Manifest file referenced by train requests:
// {"images":[{"image_id":...,"boxes":[[class,cx,cy,w,h],...]}]}
std::string encode_manifest(std::span<const LabeledImage> images);
std::vector<LabeledImage> decode_manifest(std::string_view text);

// Rethrows a RemoteError as the matching vilod::Error.
[[noreturn]] void raise(const RemoteError& err);

// Answers protocol requests with a local backend. Model numbers are scoped
// per session.
class Handler {
public:
  explicit Handler(DetectorBackend& backend) : backend_(backend) {}

  void handle(std::string_view request_line, const std::function<void(const std::string&)>& emit);

private:
  DetectorBackend& backend_;
  std::mutex mu_;
  std::map<std::pair<std::string, int>, ModelVersion> models_;
};

// HTTP transport: POST /detector with one request line as the body; the
// response body is the stream of result lines.
class DetectorServer {
public:
  explicit DetectorServer(DetectorBackend& backend);
  ~DetectorServer();

  // Binds to `port` (0 picks a free one) and serves on a background thread.
  int start(const std::string& host, int port);
  // Serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// DetectorBackend that talks to a DetectorServer at "host:port". Manifests
// are written under manifest_dir, which the server must be able to read.
class RemoteDetector final : public DetectorBackend {
public:
  RemoteDetector(std::string address, std::filesystem::path manifest_dir);

  ModelVersion train(const TrainRequest& request, const EpochCallback& on_epoch) override;
  std::vector<Detection> infer(const ModelVersion& model, std::span<const std::string> image_ids) override;

private:
  std::string host_;
  int port_ = 0;
  std::filesystem::path manifest_dir_;

  void post(const std::string& body, const std::function<void(std::string_view)>& on_line);
};

} // namespace vilod::protocol
