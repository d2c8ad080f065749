#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vilod {

// One labeled object in YOLO center format. Coordinates are fractions of the
// image width/height.
struct GroundTruthBox {
  int class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const GroundTruthBox&) const = default;
};

enum class Split { TrainPool, Validation, Test };

std::string_view split_name(Split split) noexcept;
std::optional<Split> parse_split(std::string_view name) noexcept;

enum class LabelState { Unlabeled, Seed, Labeled };

struct LabelStatus {
  LabelState state = LabelState::Unlabeled;
  int iteration = 0; // meaningful for Labeled only

  bool operator==(const LabelStatus&) const = default;
};

struct ImageRecord {
  std::string image_id; // file stem
  Split split = Split::TrainPool;
  int width = 0;  // pixels, 0 when unknown
  int height = 0; // pixels, 0 when unknown
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> label_path;
  std::optional<std::string> embedding_ref;
  LabelStatus label_status;
};

// Image registry for one dataset. Immutable once built; lookups are by id.
// The constructor accepts anything so that validate_splits() can report on
// hand-built registries; load_dataset_manifest() enforces id uniqueness.
class DatasetRegistry {
public:
  DatasetRegistry() = default;
  DatasetRegistry(std::vector<std::string> classes, std::vector<ImageRecord> images);

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  std::span<const ImageRecord> images() const noexcept { return images_; }

  // First record with this id, or nullptr.
  const ImageRecord* find(std::string_view image_id) const;

  std::size_t count(Split split) const;
  std::vector<std::string> ids(Split split) const;
  bool in_pool(std::string_view image_id) const;

private:
  std::vector<std::string> classes_;
  std::vector<ImageRecord> images_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Ground-truth boxes keyed by image id.
using GroundTruth = std::map<std::string, std::vector<GroundTruthBox>, std::less<>>;

// Throws Error{MalformedLine} / Error{OutOfRange}; messages carry the
// 1-based line number.
std::vector<GroundTruthBox> parse_yolo_label(std::string_view text);

// One line per box, 6 decimals, no trailing newline.
std::string serialize_yolo_label(std::span<const GroundTruthBox> boxes);

// True when the box satisfies the YOLO label invariants.
bool box_is_valid(const GroundTruthBox& box, std::size_t num_classes) noexcept;

// Reads <root>/classes.txt and <root>/{train,val,test}/{images,labels}.
// "valid" and "validation" are accepted for the validation split.
DatasetRegistry load_dataset_manifest(const std::filesystem::path& root);

// Reads the label file of one record; nullopt if it has none.
std::optional<std::vector<GroundTruthBox>> load_labels(const ImageRecord& record,
                                                       std::size_t num_classes);

// Labels of every record that has a label file.
GroundTruth load_ground_truth(const DatasetRegistry& registry);

enum class ViolationKind {
  SplitOverlap,
  DuplicateId,
  MissingDimensions,
  EmptyClassList,
  MissingLabelFile,
  StatusOutsidePool,
};

std::string_view violation_name(ViolationKind kind) noexcept;

struct Violation {
  ViolationKind kind;
  std::string image_id; // empty for registry-wide violations
  std::string detail;
};

using ValidationReport = std::vector<Violation>;

ValidationReport validate_splits(const DatasetRegistry& registry);

// Pixel dimensions from a PNG or JPEG header; nullopt for anything else.
std::optional<std::pair<int, int>> sniff_image_dims(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

} // namespace vilod
