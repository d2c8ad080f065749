#include "vilod/synthetic_world.hpp"

#include "vilod/error.hpp"
#include "vilod/rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace vilod {

SyntheticWorldView SyntheticWorld::view() const {
  SyntheticWorldView v;
  v.truth = truth;
  v.validation = registry.ids(Split::Validation);
  v.difficulty = difficulty;
  v.num_classes = registry.classes().size();
  return v;
}

namespace {

std::vector<std::string> class_names(std::size_t n) {
  if (n == 4) return {"buffalo", "elephant", "rhino", "zebra"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("class" + std::to_string(i));
  return out;
}

std::size_t pick_weighted(Rng& rng, const std::vector<double>& w) {
  double total = 0.0;
  for (const double x : w) total += x;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  return w.size() - 1;
}

const char* split_dir(Split s) {
  switch (s) {
  case Split::TrainPool: return "train";
  case Split::Validation: return "val";
  case Split::Test: return "test";
  }
  return "train";
}

} // namespace

SyntheticWorld make_synthetic_world(const WorldOptions& o) {
  if (o.num_classes == 0 || o.blobs_per_class == 0 || o.dim == 0) {
    throw Error(Errc::InvalidArgument, "synthetic world needs classes, blobs and a dimension");
  }
  std::vector<double> weights = o.class_weights;
  if (weights.size() != o.num_classes) weights.assign(o.num_classes, 1.0);

  Rng rng(o.seed);
  const std::size_t blobs = o.num_classes * o.blobs_per_class;
  std::vector<std::vector<double>> centers(blobs, std::vector<double>(o.dim));
  for (auto& c : centers) {
    for (auto& x : c) x = rng.normal(0.0, o.center_spread);
  }

  SyntheticWorld world;
  world.embeddings = EmbeddingSet(o.dim);
  std::vector<ImageRecord> records;
  const std::pair<Split, std::size_t> plan[] = {
      {Split::TrainPool, o.pool}, {Split::Validation, o.validation}, {Split::Test, o.test}};
  std::vector<double> row(o.dim);
  for (const auto& [split, count] : plan) {
    const char prefix = split == Split::TrainPool ? 'p' : split == Split::Validation ? 'v' : 't';
    for (std::size_t i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "syn_%c%05zu", prefix, i);
      const std::size_t cls = pick_weighted(rng, weights);
      const std::size_t sub = rng.below(o.blobs_per_class);
      const std::size_t blob = cls * o.blobs_per_class + sub;

      std::vector<GroundTruthBox> boxes;
      const std::size_t nbox = 1 + rng.below(3);
      for (std::size_t k = 0; k < nbox; ++k) {
        GroundTruthBox b;
        b.class_id = rng.below(100) < 85 ? static_cast<int>(cls) : static_cast<int>(rng.below(o.num_classes));
        b.w = rng.uniform(0.1, 0.5);
        b.h = rng.uniform(0.1, 0.5);
        b.cx = rng.uniform(b.w / 2, 1.0 - b.w / 2);
        b.cy = rng.uniform(b.h / 2, 1.0 - b.h / 2);
        boxes.push_back(b);
      }
      // blob 0 of every class is easy, the last is hard
      const double level = o.blobs_per_class == 1 ? 0.5 : static_cast<double>(sub) / static_cast<double>(o.blobs_per_class - 1);
      const double diff = std::clamp(level + rng.normal(0.0, 0.05), 0.0, 1.0);

      for (std::size_t d = 0; d < o.dim; ++d) row[d] = centers[blob][d] + rng.normal(0.0, o.noise);

      ImageRecord rec;
      rec.image_id = id;
      rec.split = split;
      rec.width = o.image_width;
      rec.height = o.image_height;
      rec.image_path = std::filesystem::path(split_dir(split)) / "images" / (rec.image_id + ".png");
      rec.label_path = std::filesystem::path(split_dir(split)) / "labels" / (rec.image_id + ".txt");
      if (split == Split::TrainPool) {
        rec.embedding_ref = rec.image_id;
        world.embeddings.add(rec.image_id, row);
      }
      world.truth.emplace(rec.image_id, std::move(boxes));
      world.difficulty.emplace(rec.image_id, diff);
      world.blob.emplace(rec.image_id, blob);
      records.push_back(std::move(rec));
    }
  }
  world.registry = DatasetRegistry(class_names(o.num_classes), std::move(records));
  return world;
}

void rename_images(SyntheticWorld& world, const std::map<std::string, std::string>& renames) {
  if (renames.empty()) return;
  auto name_of = [&](const std::string& id) {
    const auto it = renames.find(id);
    return it == renames.end() ? id : it->second;
  };
  std::set<std::string> seen;
  std::vector<ImageRecord> records;
  for (const auto& rec : world.registry.images()) {
    ImageRecord r = rec;
    r.image_id = name_of(rec.image_id);
    if (!seen.insert(r.image_id).second) throw Error(Errc::DuplicateImageId, r.image_id);
    const auto ext = r.image_path.extension();
    r.image_path = r.image_path.parent_path() / (r.image_id + ext.string());
    if (r.label_path) r.label_path = r.label_path->parent_path() / (r.image_id + ".txt");
    if (r.embedding_ref) r.embedding_ref = r.image_id;
    records.push_back(std::move(r));
  }
  auto rekey = [&](auto& m) {
    std::remove_reference_t<decltype(m)> out;
    for (auto& [k, v] : m) out.emplace(name_of(k), std::move(v));
    m = std::move(out);
  };
  rekey(world.truth);
  rekey(world.difficulty);
  rekey(world.blob);
  EmbeddingSet emb(world.embeddings.dim());
  for (std::size_t i = 0; i < world.embeddings.size(); ++i) emb.add(name_of(world.embeddings.id(i)), world.embeddings.row(i));
  world.embeddings = std::move(emb);
  world.registry = DatasetRegistry(world.registry.classes(), std::move(records));
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out += static_cast<char>(v >> 24);
  out += static_cast<char>(v >> 16);
  out += static_cast<char>(v >> 8);
  out += static_cast<char>(v);
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  out += body;
  put_u32(out, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

} // namespace

std::string encode_png_rgb(int width, int height, std::span<const std::uint8_t> rgb) {
  if (width <= 0 || height <= 0 || rgb.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3) {
    throw Error(Errc::InvalidArgument, "PNG buffer does not match its dimensions");
  }
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
  for (int y = 0; y < height; ++y) {
    raw += '\0'; // no filter
    raw.append(reinterpret_cast<const char*>(rgb.data()) + static_cast<std::size_t>(y) * width * 3,
               static_cast<std::size_t>(width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw Error(Errc::StorageError, "zlib compression failed");
  }
  z.resize(zlen);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", "");
  return png;
}

void write_synthetic_dataset(const SyntheticWorld& world, const std::filesystem::path& root, const WorldOptions& o) {
  namespace fs = std::filesystem;
  std::string classes;
  for (const auto& c : world.registry.classes()) classes += c + "\n";
  write_text_file(root / "classes.txt", classes);

  static const std::uint8_t palette[][3] = {{200, 60, 40}, {60, 160, 60}, {60, 90, 200}, {220, 200, 40},
                                            {160, 60, 180}, {40, 180, 180}};
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(o.image_width) * o.image_height * 3);
  for (const auto& rec : world.registry.images()) {
    const auto& boxes = world.truth.at(rec.image_id);
    write_text_file(root / *rec.label_path, serialize_yolo_label(boxes) + (boxes.empty() ? "" : "\n"));

    const auto shade = static_cast<std::uint8_t>(90 + 20 * (world.blob.at(rec.image_id) % 6));
    std::fill(pixels.begin(), pixels.end(), shade);
    for (const auto& b : boxes) {
      const auto& col = palette[static_cast<std::size_t>(b.class_id) % 6];
      const int x1 = static_cast<int>((b.cx - b.w / 2) * o.image_width);
      const int x2 = static_cast<int>((b.cx + b.w / 2) * o.image_width);
      const int y1 = static_cast<int>((b.cy - b.h / 2) * o.image_height);
      const int y2 = static_cast<int>((b.cy + b.h / 2) * o.image_height);
      for (int y = std::max(0, y1); y < std::min(o.image_height, y2); ++y) {
        for (int x = std::max(0, x1); x < std::min(o.image_width, x2); ++x) {
          auto* p = &pixels[(static_cast<std::size_t>(y) * o.image_width + x) * 3];
          p[0] = col[0];
          p[1] = col[1];
          p[2] = col[2];
        }
      }
    }
    const auto path = root / rec.image_path;
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    const auto png = encode_png_rgb(o.image_width, o.image_height, pixels);
    out.write(png.data(), static_cast<std::streamsize>(png.size()));
    if (!out) throw Error(Errc::StorageError, "cannot write " + path.string());
  }
  save_embeddings_text(world.embeddings, root / "embeddings.txt", root / "embedding_ids.txt");
}

} // namespace vilod
