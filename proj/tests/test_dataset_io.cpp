#include "test_util.hpp"
#include "vilod/dataset_io.hpp"
#include "vilod/error.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

using namespace vilod;
using vilod::testing::TempDir;

namespace {

// Oracle: split on newlines and whitespace with iostreams, independent of the
// parser's tokenizer.
std::vector<std::vector<double>> naive_fields(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!row.empty()) rows.push_back(row);
  }
  return rows;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected vilod::Error");
  return Errc::InvalidArgument;
}

void make_split(const std::filesystem::path& root, const std::string& split, const std::vector<std::string>& stems,
                bool with_labels) {
  for (const auto& stem : stems) {
    vilod::testing::write_png_header(root / split / "images" / (stem + ".png"), 640, 480);
    if (with_labels) write_text_file(root / split / "labels" / (stem + ".txt"), "0 0.5 0.5 0.2 0.2\n");
  }
}

} // namespace

TEST_CASE("parse_yolo_label: full-image box") {
  const auto boxes = parse_yolo_label("0 0.5 0.5 1.0 1.0");
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0] == GroundTruthBox{0, 0.5, 0.5, 1.0, 1.0});
}

TEST_CASE("parse_yolo_label: empty text") {
  CHECK(parse_yolo_label("").empty());
  CHECK(parse_yolo_label("\n\n  \n").empty());
}

TEST_CASE("parse_yolo_label: two boxes in order match a line-splitting oracle") {
  const std::string text = "1 0.25 0.25 0.5 0.5\n3 0.8 0.8 0.2 0.2";
  const auto boxes = parse_yolo_label(text);
  const auto rows = naive_fields(text);
  REQUIRE(boxes.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(boxes[i].class_id == static_cast<int>(rows[i][0]));
    CHECK(boxes[i].cx == rows[i][1]);
    CHECK(boxes[i].cy == rows[i][2]);
    CHECK(boxes[i].w == rows[i][3]);
    CHECK(boxes[i].h == rows[i][4]);
  }
  CHECK(boxes[0].class_id == 1);
  CHECK(boxes[1].class_id == 3);
}

TEST_CASE("parse_yolo_label: CRLF and trailing newline") {
  const auto boxes = parse_yolo_label("2 0.1 0.2 0.3 0.4\r\n");
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].h == doctest::Approx(0.4));
}

TEST_CASE("parse_yolo_label: malformed and out-of-range lines carry line numbers") {
  CHECK(code_of([] { parse_yolo_label("0 0.5 0.5 1.0"); }) == Errc::MalformedLine);
  CHECK(code_of([] { parse_yolo_label("0 0.5 abc 1.0 1.0"); }) == Errc::MalformedLine);
  CHECK(code_of([] { parse_yolo_label("0.5 0.5 0.5 1.0 1.0"); }) == Errc::MalformedLine);
  CHECK(code_of([] { parse_yolo_label("0 1.5 0.5 0.2 0.2"); }) == Errc::OutOfRange);
  CHECK(code_of([] { parse_yolo_label("0 0.5 0.5 0.0 0.2"); }) == Errc::OutOfRange);
  try {
    parse_yolo_label("0 0.5 0.5 0.2 0.2\n\n1 0.5 0.5 -0.2 0.2");
    FAIL("expected OutOfRange");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("serialize_yolo_label: fixed formatting") {
  CHECK(serialize_yolo_label({}) == "");
  const std::vector<GroundTruthBox> one{{0, 0.5, 0.5, 1.0, 1.0}};
  CHECK(serialize_yolo_label(one) == "0 0.500000 0.500000 1.000000 1.000000");
}

TEST_CASE("serialize then parse round-trips within 1e-6 (property)") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruthBox> boxes;
    for (int i = 0; i < 100; ++i) boxes.push_back(vilod::testing::random_box(rng, 4));
    const auto back = parse_yolo_label(serialize_yolo_label(boxes));
    REQUIRE(back.size() == boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      CHECK(back[i].class_id == boxes[i].class_id);
      CHECK(std::abs(back[i].cx - boxes[i].cx) <= 1e-6);
      CHECK(std::abs(back[i].cy - boxes[i].cy) <= 1e-6);
      CHECK(std::abs(back[i].w - boxes[i].w) <= 1e-6);
      CHECK(std::abs(back[i].h - boxes[i].h) <= 1e-6);
    }
  }
}

TEST_CASE("load_dataset_manifest: counts and hidden pool labels") {
  TempDir dir;
  write_text_file(dir.path() / "classes.txt", "buffalo\nelephant\nrhino\nzebra\n");
  make_split(dir.path(), "train", {"a", "b", "c"}, false);
  make_split(dir.path(), "val", {"d", "e"}, true);
  make_split(dir.path(), "test", {"f", "g"}, true);

  const auto reg = load_dataset_manifest(dir.path());
  CHECK(reg.count(Split::TrainPool) == 3);
  CHECK(reg.count(Split::Validation) == 2);
  CHECK(reg.count(Split::Test) == 2);
  CHECK(reg.classes() == std::vector<std::string>{"buffalo", "elephant", "rhino", "zebra"});
  REQUIRE(reg.find("a") != nullptr);
  CHECK_FALSE(reg.find("a")->label_path.has_value());
  CHECK(reg.find("d")->width == 640);
  CHECK(reg.find("d")->height == 480);
  CHECK(reg.in_pool("b"));
  CHECK_FALSE(reg.in_pool("f"));
  CHECK(validate_splits(reg).empty());

  const auto truth = load_ground_truth(reg);
  CHECK(truth.size() == 4);
  CHECK(truth.at("f").size() == 1);
}

TEST_CASE("load_dataset_manifest: duplicate stem across splits") {
  TempDir dir;
  write_text_file(dir.path() / "classes.txt", "x\n");
  make_split(dir.path(), "train", {"a", "b"}, false);
  make_split(dir.path(), "val", {"b"}, true);
  make_split(dir.path(), "test", {"c"}, true);
  CHECK(code_of([&] { load_dataset_manifest(dir.path()); }) == Errc::DuplicateImageId);
}

TEST_CASE("load_dataset_manifest: missing split") {
  TempDir dir;
  write_text_file(dir.path() / "classes.txt", "x\n");
  make_split(dir.path(), "train", {"a"}, false);
  make_split(dir.path(), "test", {"c"}, true);
  CHECK(code_of([&] { load_dataset_manifest(dir.path()); }) == Errc::MissingSplit);
}

TEST_CASE("load_labels rejects class ids outside the class list") {
  TempDir dir;
  write_text_file(dir.path() / "l.txt", "5 0.5 0.5 0.1 0.1");
  ImageRecord rec;
  rec.image_id = "l";
  rec.label_path = dir.path() / "l.txt";
  CHECK(code_of([&] { load_labels(rec, 4); }) == Errc::UnknownClass);
}

TEST_CASE("validate_splits reports violations as data") {
  const auto rec = [](std::string id, Split s) {
    ImageRecord r;
    r.image_id = std::move(id);
    r.split = s;
    r.width = 10;
    r.height = 10;
    r.label_path = "x.txt";
    return r;
  };

  SUBCASE("image in both val and test") {
    DatasetRegistry reg({"c"}, {rec("a", Split::TrainPool), rec("v", Split::Validation), rec("v", Split::Test)});
    const auto report = validate_splits(reg);
    REQUIRE(report.size() == 1);
    CHECK(report[0].kind == ViolationKind::SplitOverlap);
    CHECK(report[0].image_id == "v");
  }
  SUBCASE("no classes") {
    DatasetRegistry reg({}, {rec("a", Split::TrainPool)});
    const auto report = validate_splits(reg);
    REQUIRE(report.size() == 1);
    CHECK(report[0].kind == ViolationKind::EmptyClassList);
  }
  SUBCASE("missing dimensions, missing fixed-split label, status outside pool") {
    auto t = rec("t", Split::Test);
    t.label_path.reset();
    t.label_status.state = LabelState::Seed;
    auto p = rec("p", Split::TrainPool);
    p.width = 0;
    DatasetRegistry reg({"c"}, {p, t});
    const auto report = validate_splits(reg);
    REQUIRE(report.size() == 3);
    CHECK(report[0].kind == ViolationKind::MissingDimensions);
    CHECK(report[1].kind == ViolationKind::MissingLabelFile);
    CHECK(report[2].kind == ViolationKind::StatusOutsidePool);
  }
}

TEST_CASE("sniff_image_dims reads PNG and JPEG headers") {
  TempDir dir;
  vilod::testing::write_png_header(dir.path() / "a.png", 123, 45);
  const auto png = sniff_image_dims(dir.path() / "a.png");
  REQUIRE(png.has_value());
  CHECK(png->first == 123);
  CHECK(png->second == 45);

  // SOI, APP0 (length 16), SOF0 with height 300, width 400
  const unsigned char jpeg[] = {0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x10, 'J', 'F', 'I', 'F', 0, 1, 1, 0, 0, 1, 0, 1, 0,
                                0, 0xFF, 0xC0, 0x00, 0x11, 0x08, 0x01, 0x2C, 0x01, 0x90, 0x03, 0, 0, 0, 0, 0, 0};
  {
    std::ofstream out(dir.path() / "b.jpg", std::ios::binary);
    out.write(reinterpret_cast<const char*>(jpeg), sizeof jpeg);
  }
  const auto jpg = sniff_image_dims(dir.path() / "b.jpg");
  REQUIRE(jpg.has_value());
  CHECK(jpg->first == 400);
  CHECK(jpg->second == 300);

  write_text_file(dir.path() / "c.png", "not an image");
  CHECK_FALSE(sniff_image_dims(dir.path() / "c.png").has_value());
}

TEST_CASE("load_dataset_manifest: full-size split layout") {
  TempDir dir;
  write_text_file(dir.path() / "classes.txt", "buffalo\nelephant\nrhino\nzebra\n");
  const auto stems = [](const std::string& prefix, int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(prefix + " (" + std::to_string(i) + ")");
    return out;
  };
  make_split(dir.path(), "train", stems("train", 1052), true);
  make_split(dir.path(), "valid", stems("val", 225), true);
  make_split(dir.path(), "test", stems("test", 227), true);
  const auto reg = load_dataset_manifest(dir.path());
  CHECK(reg.count(Split::TrainPool) == 1052);
  CHECK(reg.count(Split::Validation) == 225);
  CHECK(reg.count(Split::Test) == 227);
}
