#include "vilod/dataset_io.hpp"

#include "vilod/error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace vilod {

namespace fs = std::filesystem;

std::string_view split_name(Split split) noexcept {
  switch (split) {
  case Split::TrainPool: return "train_pool";
  case Split::Validation: return "validation";
  case Split::Test: return "test";
  }
  return "train_pool";
}

std::optional<Split> parse_split(std::string_view name) noexcept {
  if (name == "train_pool" || name == "train") return Split::TrainPool;
  if (name == "validation" || name == "val" || name == "valid") return Split::Validation;
  if (name == "test") return Split::Test;
  return std::nullopt;
}

DatasetRegistry::DatasetRegistry(std::vector<std::string> classes, std::vector<ImageRecord> images)
    : classes_(std::move(classes)), images_(std::move(images)) {
  for (std::size_t i = 0; i < images_.size(); ++i) {
    index_.try_emplace(images_[i].image_id, i);
  }
}

const ImageRecord* DatasetRegistry::find(std::string_view image_id) const {
  const auto it = index_.find(std::string(image_id));
  return it == index_.end() ? nullptr : &images_[it->second];
}

std::size_t DatasetRegistry::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      images_.begin(), images_.end(), [split](const ImageRecord& r) { return r.split == split; }));
}

std::vector<std::string> DatasetRegistry::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& r : images_) {
    if (r.split == split) out.push_back(r.image_id);
  }
  return out;
}

bool DatasetRegistry::in_pool(std::string_view image_id) const {
  const ImageRecord* r = find(image_id);
  return r != nullptr && r->split == Split::TrainPool;
}

namespace {

std::optional<double> parse_number(std::string_view token) {
  double value = 0.0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

std::vector<std::string_view> split_whitespace(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

} // namespace

std::vector<GroundTruthBox> parse_yolo_label(std::string_view text) {
  std::vector<GroundTruthBox> boxes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;

    const auto tokens = split_whitespace(line);
    if (tokens.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    if (tokens.size() != 5) {
      throw Error(Errc::MalformedLine, where + ": expected 5 fields, got " + std::to_string(tokens.size()));
    }
    std::array<double, 5> v{};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto parsed = parse_number(tokens[i]);
      if (!parsed) throw Error(Errc::MalformedLine, where + ": non-numeric field '" + std::string(tokens[i]) + "'");
      v[i] = *parsed;
    }
    if (v[0] < 0.0 || v[0] != std::floor(v[0]) || v[0] > 1e6) {
      throw Error(Errc::MalformedLine, where + ": class id must be a non-negative integer");
    }
    GroundTruthBox box{static_cast<int>(v[0]), v[1], v[2], v[3], v[4]};
    const bool in_unit = box.cx >= 0.0 && box.cx <= 1.0 && box.cy >= 0.0 && box.cy <= 1.0;
    const bool size_ok = box.w > 0.0 && box.w <= 1.0 && box.h > 0.0 && box.h <= 1.0;
    if (!in_unit || !size_ok) throw Error(Errc::OutOfRange, where + ": coordinate outside [0,1] or non-positive size");
    boxes.push_back(box);
    if (end == text.size()) break;
  }
  return boxes;
}

std::string serialize_yolo_label(std::span<const GroundTruthBox> boxes) {
  std::string out;
  char buf[128];
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const int n = std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f", b.class_id, b.cx, b.cy, b.w, b.h);
    if (i > 0) out.push_back('\n');
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

bool box_is_valid(const GroundTruthBox& b, std::size_t num_classes) noexcept {
  const auto finite = std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h);
  return finite && b.class_id >= 0 && static_cast<std::size_t>(b.class_id) < num_classes && b.cx >= 0.0 &&
         b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0 && b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::NotFound, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::StorageError, "cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(Errc::StorageError, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::optional<std::pair<int, int>> sniff_image_dims(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<unsigned char> head(64 * 1024);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));

  const auto be16 = [&](std::size_t i) { return (head[i] << 8) | head[i + 1]; };
  const auto be32 = [&](std::size_t i) {
    return static_cast<int>((static_cast<unsigned>(head[i]) << 24) | (head[i + 1] << 16) | (head[i + 2] << 8) |
                            head[i + 3]);
  };

  static constexpr unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (head.size() >= 24 && std::equal(std::begin(png_sig), std::end(png_sig), head.begin())) {
    return std::pair{be32(16), be32(20)};
  }
  if (head.size() >= 4 && head[0] == 0xFF && head[1] == 0xD8) {
    std::size_t i = 2;
    while (i + 9 < head.size()) {
      if (head[i] != 0xFF) {
        ++i;
        continue;
      }
      const unsigned marker = head[i + 1];
      if (marker == 0xFF) {
        ++i;
        continue;
      }
      const bool is_sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
      if (is_sof) return std::pair{be16(i + 7), be16(i + 5)};
      if (marker == 0xD8 || (marker >= 0xD0 && marker <= 0xD7) || marker == 0x01) {
        i += 2;
        continue;
      }
      i += 2 + static_cast<std::size_t>(be16(i + 2));
    }
  }
  return std::nullopt;
}

namespace {

std::vector<std::string> read_class_list(const fs::path& path) {
  std::vector<std::string> classes;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) classes.push_back(line);
  }
  return classes;
}

std::optional<fs::path> find_split_dir(const fs::path& root, Split split) {
  static const std::map<Split, std::vector<std::string>> names = {
      {Split::TrainPool, {"train"}},
      {Split::Validation, {"val", "valid", "validation"}},
      {Split::Test, {"test"}},
  };
  for (const auto& name : names.at(split)) {
    if (fs::is_directory(root / name)) return root / name;
  }
  return std::nullopt;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

} // namespace

DatasetRegistry load_dataset_manifest(const fs::path& root) {
  std::vector<std::string> classes;
  if (fs::exists(root / "classes.txt")) classes = read_class_list(root / "classes.txt");

  std::vector<ImageRecord> images;
  std::map<std::string, std::string> seen; // id -> where
  for (const Split split : {Split::TrainPool, Split::Validation, Split::Test}) {
    const auto dir = find_split_dir(root, split);
    if (!dir || !fs::is_directory(*dir / "images")) {
      throw Error(Errc::MissingSplit, std::string(split_name(split)) + " under " + root.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(*dir / "images")) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ImageRecord rec;
      rec.image_id = file.stem().string();
      rec.split = split;
      rec.image_path = file;
      const auto [it, inserted] = seen.emplace(rec.image_id, file.string());
      if (!inserted) {
        throw Error(Errc::DuplicateImageId, rec.image_id + " (" + it->second + " and " + file.string() + ")");
      }
      const fs::path label = *dir / "labels" / (rec.image_id + ".txt");
      if (fs::exists(label)) rec.label_path = label;
      if (const auto dims = sniff_image_dims(file)) {
        rec.width = dims->first;
        rec.height = dims->second;
      }
      images.push_back(std::move(rec));
    }
  }
  return DatasetRegistry(std::move(classes), std::move(images));
}

std::optional<std::vector<GroundTruthBox>> load_labels(const ImageRecord& record, std::size_t num_classes) {
  if (!record.label_path) return std::nullopt;
  std::vector<GroundTruthBox> boxes;
  try {
    boxes = parse_yolo_label(read_text_file(*record.label_path));
  } catch (const Error& e) {
    throw Error(e.code(), record.label_path->string() + ": " + e.what());
  }
  for (const auto& b : boxes) {
    if (static_cast<std::size_t>(b.class_id) >= num_classes) {
      throw Error(Errc::UnknownClass, record.label_path->string() + ": class " + std::to_string(b.class_id));
    }
  }
  return boxes;
}

GroundTruth load_ground_truth(const DatasetRegistry& registry) {
  GroundTruth truth;
  for (const auto& rec : registry.images()) {
    if (auto boxes = load_labels(rec, registry.classes().size())) truth.emplace(rec.image_id, std::move(*boxes));
  }
  return truth;
}

std::string_view violation_name(ViolationKind kind) noexcept {
  switch (kind) {
  case ViolationKind::SplitOverlap: return "split_overlap";
  case ViolationKind::DuplicateId: return "duplicate_id";
  case ViolationKind::MissingDimensions: return "missing_dimensions";
  case ViolationKind::EmptyClassList: return "empty_class_list";
  case ViolationKind::MissingLabelFile: return "missing_label_file";
  case ViolationKind::StatusOutsidePool: return "status_outside_pool";
  }
  return "unknown";
}

ValidationReport validate_splits(const DatasetRegistry& registry) {
  ValidationReport report;
  if (registry.classes().empty()) {
    report.push_back({ViolationKind::EmptyClassList, "", "class list is empty"});
  }

  std::map<std::string, std::set<Split>> splits_of;
  std::map<std::string, int> occurrences;
  for (const auto& rec : registry.images()) {
    splits_of[rec.image_id].insert(rec.split);
    ++occurrences[rec.image_id];
  }
  for (const auto& [id, splits] : splits_of) {
    if (splits.size() > 1) {
      std::string detail = "present in";
      for (const Split s : splits) detail += " " + std::string(split_name(s));
      report.push_back({ViolationKind::SplitOverlap, id, detail});
    } else if (occurrences[id] > 1) {
      report.push_back({ViolationKind::DuplicateId, id, std::to_string(occurrences[id]) + " records"});
    }
  }

  for (const auto& rec : registry.images()) {
    if (rec.width <= 0 || rec.height <= 0) {
      report.push_back({ViolationKind::MissingDimensions, rec.image_id, "width/height unknown"});
    }
    if (rec.split != Split::TrainPool && !rec.label_path) {
      report.push_back({ViolationKind::MissingLabelFile, rec.image_id, std::string(split_name(rec.split))});
    }
    if (rec.split != Split::TrainPool && rec.label_status.state != LabelState::Unlabeled) {
      report.push_back({ViolationKind::StatusOutsidePool, rec.image_id, "seed/labeled status on a fixed split"});
    }
  }
  return report;
}

} // namespace vilod
