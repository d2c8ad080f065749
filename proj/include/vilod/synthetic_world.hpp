#pragma once

// A generated dataset for desk-scale end-to-end runs: images grouped into
// class-dominated blobs in embedding space, with boxes and a per-blob
// difficulty the synthetic detector turns into low confidence.

#include "vilod/dataset_io.hpp"
#include "vilod/detector.hpp"
#include "vilod/projection.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace vilod {

struct WorldOptions {
  std::size_t pool = 600;
  std::size_t validation = 150;
  std::size_t test = 150;
  std::size_t num_classes = 4;
  std::size_t blobs_per_class = 5;
  std::size_t dim = kEmbeddingDim;
  std::vector<double> class_weights{0.3, 0.2, 0.3, 0.2}; // resized to num_classes if it does not match
  double center_spread = 1.0;
  double noise = 0.35;
  int image_width = 160;
  int image_height = 120;
  std::uint64_t seed = 7;
};

struct SyntheticWorld {
  DatasetRegistry registry;
  GroundTruth truth;
  EmbeddingSet embeddings;                               // pool images only
  std::map<std::string, double, std::less<>> difficulty; // [0, 1]
  std::map<std::string, std::size_t, std::less<>> blob;  // blob index per image

  // Detector view with the validation split as the epoch-scoring set.
  SyntheticWorldView view() const;
};

SyntheticWorld make_synthetic_world(const WorldOptions& options);

// Gives images new ids everywhere they appear. Throws DuplicateImageId when
// a new id collides with an existing one.
void rename_images(SyntheticWorld& world, const std::map<std::string, std::string>& renames);

// Writes classes.txt, {train,val,test}/{images,labels}, and the pool
// embeddings as embeddings.txt + embedding_ids.txt under root.
void write_synthetic_dataset(const SyntheticWorld& world, const std::filesystem::path& root, const WorldOptions& options);

// 8-bit RGB PNG.
std::string encode_png_rgb(int width, int height, std::span<const std::uint8_t> rgb);

} // namespace vilod
