#pragma once

// Durable state: an SQLite file (vilod.db) with the User, Image, Model,
// Annotation and Detection tables, plus per-user run artifacts:
//
//   runs/<user>/labels/<image_id>.txt   YOLO labels, written through
//   runs/<user>/session.snap            JSON session snapshot
//   runs/<user>/trajectory.csv
//   runs/<user>/projection.csv          cached t-SNE layout
//
// One connection, serialized by a mutex.

#include "vilod/dataset_io.hpp"
#include "vilod/detector.hpp"
#include "vilod/evaluation.hpp"
#include "vilod/workflow.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vilod {

struct User {
  std::int64_t user_id = 0;
  std::string name;
  std::string token_hash; // hex SHA-256

  bool operator==(const User&) const = default;
};

struct StoredImage {
  std::string image_id;
  Split split = Split::TrainPool;
  int width = 0;
  int height = 0;

  bool operator==(const StoredImage&) const = default;
};

struct StoredAnnotation {
  std::int64_t id = 0;
  std::string image_id;
  int iteration = 0;
  std::optional<GroundTruthBox> box; // nullopt marks an image annotated as empty

  bool operator==(const StoredAnnotation&) const = default;
};

struct SessionSnapshot {
  SessionConfig config;
  IterationState state;

  bool operator==(const SessionSnapshot&) const = default;
};

std::string sha256_hex(std::string_view data);

// Lossless JSON encoding of session snapshots.
std::string snapshot_to_json(const SessionSnapshot& snapshot);
SessionSnapshot snapshot_from_json(std::string_view json);

class EntityStore {
public:
  // Opens or creates root/vilod.db; artifacts go under root/runs.
  explicit EntityStore(std::filesystem::path root);
  ~EntityStore();
  EntityStore(const EntityStore&) = delete;
  EntityStore& operator=(const EntityStore&) = delete;

  const std::filesystem::path& root() const noexcept { return root_; }
  std::filesystem::path user_dir(std::string_view user) const;

  // Throws InvalidArgument if the name is taken or not a plain file name.
  User add_user(std::string_view name, std::string_view token);
  std::optional<User> find_user(std::string_view name) const;
  std::optional<User> user_by_token(std::string_view token) const;

  // Inserts or updates every record; returns the number of rows written.
  std::size_t register_images(const DatasetRegistry& registry);
  std::optional<StoredImage> image(std::string_view image_id) const;

  // Errors: UnknownModel for an unknown parent, InvalidArgument for an
  // unknown user. Re-recording a version replaces it.
  void record_model(std::string_view user, const ModelVersion& model);
  std::vector<ModelVersion> models(std::string_view user) const;

  // Replaces the model's detections. Errors: UnknownModel, UnknownImage;
  // nothing is stored on error.
  std::size_t record_detections(std::string_view user, int model_version, std::span<const Detection> detections);
  std::vector<Detection> detections(std::string_view user, int model_version) const;

  // Replaces this (user, image, iteration) annotation and rewrites the
  // image's label file. Errors: UnknownImage, NotSelectable.
  std::vector<std::int64_t> record_annotation(std::string_view user, std::string_view image_id, int iteration,
                                              std::span<const GroundTruthBox> boxes);
  // Removes the rows; the label file goes when the image has none left.
  std::size_t delete_annotation(std::string_view user, std::string_view image_id, int iteration);
  std::vector<StoredAnnotation> annotations(std::string_view user) const;

  void snapshot_session(std::string_view user, const SessionSnapshot& snapshot);
  // Throws NoSnapshot.
  SessionSnapshot restore_session(std::string_view user) const;

  void write_trajectory(std::string_view user, std::span<const TrajectoryRow> rows);
  void write_projection(std::string_view user, std::span<const ProjectionPoint> points);
  std::optional<std::vector<ProjectionPoint>> read_projection(std::string_view user) const;

  // Foreign-key violations and label files out of step with the Annotation
  // table; empty when consistent.
  std::vector<std::string> integrity_violations() const;

private:
  struct Db;
  std::filesystem::path root_;
  std::unique_ptr<Db> db_;
  mutable std::mutex mu_;

  std::int64_t user_id(std::string_view user) const;
  void write_label_file(std::string_view user, std::int64_t uid, std::string_view image_id);
};

} // namespace vilod
