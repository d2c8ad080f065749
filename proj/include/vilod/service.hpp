#pragma once

// HTTP API over the workflow engine. Every request carries
// `Authorization: Bearer <token>`; one session per user.
//
//   POST   /session                  start (or restore) the caller's session
//   GET    /state                    aggregate view for the workspace
//   GET    /projection               t-SNE points
//   GET    /heatmap                  uncertainty density grid
//   GET    /suggestions              open suggestions, lowest confidence first
//   GET    /images/{id}              image bytes
//   GET    /images/{id}/predictions  current-model detections
//   POST   /annotations/{id}         {"boxes":[{"class":c,"box":[cx,cy,w,h]}]}
//   DELETE /annotations/{id}
//   POST   /retrain                  -> {"job":...}
//   GET    /trajectories             session and baseline test-set metrics
//   GET    /training[?from=n]        text/event-stream of the latest job
//
// Errors come back as {"error":code,"message":...} with the status from
// http_status().

#include "vilod/error.hpp"
#include "vilod/persistence.hpp"
#include "vilod/workflow.hpp"

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace vilod {

// Total: every code maps to exactly one status.
int http_status(Errc code) noexcept;

struct TrainingEvent {
  enum class Kind { Epoch, Done, Failed };
  Kind kind = Kind::Epoch;
  EpochMetrics epoch;  // Epoch
  int version = 0;     // Done
  std::string code;    // Failed
  std::string message; // Failed

  bool terminal() const { return kind != Kind::Epoch; }
};

std::string training_event_json(const std::string& job, std::size_t seq, const TrainingEvent& event);

// Append-only event log of one job; any number of readers.
class EventChannel {
public:
  explicit EventChannel(std::string job) : job_(std::move(job)) {}

  const std::string& job() const noexcept { return job_; }
  void append(TrainingEvent event);
  std::size_t size() const;
  bool closed() const;
  // Events from index `from` on; waits up to `timeout` for at least one
  // when none are there yet and the channel is open.
  std::vector<TrainingEvent> read(std::size_t from, std::chrono::milliseconds timeout) const;

private:
  std::string job_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<TrainingEvent> events_;
  bool closed_ = false;
};

struct ApiRequest {
  std::string method;
  std::string path;
  std::string token;
  std::string body;
  std::map<std::string, std::string> query;
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class Service {
public:
  // `data_root` holds the dataset; images are served from there.
  Service(SessionConfig config, std::shared_ptr<const SessionInputs> inputs, std::filesystem::path data_root,
          EntityStore& store, DetectorBackend& detector);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ApiResponse handle(const ApiRequest& request);

  // Channel of the caller's latest training job; nullptr when none.
  std::shared_ptr<EventChannel> training_channel(const std::string& token);

  // Blocks until the user's running job (if any) has posted its result.
  void wait_idle(const std::string& user);

private:
  struct Host;

  SessionConfig config_;
  std::shared_ptr<const SessionInputs> inputs_;
  std::filesystem::path data_root_;
  EntityStore& store_;
  DetectorBackend& detector_;
  std::mutex hosts_mu_;
  std::map<std::string, std::shared_ptr<Host>, std::less<>> hosts_;

  std::string authenticate(const std::string& token) const;
  std::shared_ptr<Host> host(const std::string& user);
  // nullptr when the user has neither a live session nor a snapshot
  std::shared_ptr<Host> session_host(const std::string& user);

  ApiResponse start_session(const std::string& user);
  ApiResponse get_state(const std::string& user);
  ApiResponse annotate(const std::string& user, const std::string& image_id, const std::string& body);
  ApiResponse undo(const std::string& user, const std::string& image_id);
  ApiResponse retrain(const std::string& user);
  ApiResponse image_bytes(const std::string& image_id) const;

  void persist(const std::string& user, const Session& session);
  void persist_model(const std::string& user, const IterationState& state);
};

// Runs a Service behind cpp-httplib.
class HttpServer {
public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  // Binds to `port` (0 picks a free one) and serves on a background thread.
  int start(const std::string& host, int port);
  bool listen(const std::string& host, int port);
  void stop();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

} // namespace vilod
