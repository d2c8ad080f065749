#include "csv_util.hpp"
#include "vilod/dataset_io.hpp"
#include "vilod/error.hpp"
#include "vilod/projection.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vilod {

namespace detail {

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

} // namespace detail

void EmbeddingSet::add(std::string image_id, std::span<const double> values) {
  if (ids_.empty() && dim_ == 0) dim_ = values.size();
  if (values.size() != dim_ || dim_ == 0) {
    throw Error(Errc::InvalidArgument, "embedding for " + image_id + " has dimension " +
                                           std::to_string(values.size()) + ", expected " + std::to_string(dim_));
  }
  for (const double v : values) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite embedding entry for " + image_id);
  }
  ids_.push_back(std::move(image_id));
  values_.insert(values_.end(), values.begin(), values.end());
}

std::size_t EmbeddingSet::index_of(std::string_view image_id) const {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] == image_id) return i;
  }
  return ids_.size();
}

EmbeddingSet EmbeddingSet::subset(std::span<const std::string> keep) const {
  std::vector<std::string_view> sorted(keep.begin(), keep.end());
  std::sort(sorted.begin(), sorted.end());
  EmbeddingSet out(dim_);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (std::binary_search(sorted.begin(), sorted.end(), std::string_view(ids_[i]))) out.add(ids_[i], row(i));
  }
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
  double sum = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = a[d] - b[d];
    sum += diff * diff;
  }
  return sum;
}

namespace {

std::vector<std::string> read_id_lines(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

bool is_binary_matrix(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".bin" || ext == ".f32";
}

} // namespace

EmbeddingSet load_embeddings(const std::filesystem::path& matrix, const std::filesystem::path& ids_path) {
  const auto ids = read_id_lines(ids_path);
  if (ids.empty()) throw Error(Errc::InvalidArgument, "no ids in " + ids_path.string());
  EmbeddingSet out;

  if (is_binary_matrix(matrix)) {
    const std::string bytes = read_text_file(matrix);
    if (bytes.size() % (4 * ids.size()) != 0) {
      throw Error(Errc::InvalidArgument, matrix.string() + ": size not a multiple of rows * 4 bytes");
    }
    const std::size_t dim = bytes.size() / (4 * ids.size());
    std::vector<double> row(dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, bytes.data() + 4 * (i * dim + d), 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        row[d] = static_cast<double>(std::bit_cast<float>(bits));
      }
      out.add(ids[i], row);
    }
    return out;
  }

  std::istringstream in(read_text_file(matrix));
  std::string line;
  std::size_t r = 0;
  std::vector<double> row;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    row.clear();
    double v;
    while (ls >> v) row.push_back(v);
    if (row.empty()) continue;
    if (!ls.eof()) throw Error(Errc::InvalidArgument, matrix.string() + ": non-numeric entry on row " + std::to_string(r + 1));
    if (r >= ids.size()) throw Error(Errc::InvalidArgument, matrix.string() + ": more rows than ids");
    out.add(ids[r], row);
    ++r;
  }
  if (r != ids.size()) throw Error(Errc::InvalidArgument, matrix.string() + ": fewer rows than ids");
  return out;
}

void save_embeddings_text(const EmbeddingSet& embeddings, const std::filesystem::path& matrix,
                          const std::filesystem::path& ids) {
  std::string m;
  std::string i;
  for (std::size_t r = 0; r < embeddings.size(); ++r) {
    const auto row = embeddings.row(r);
    for (std::size_t d = 0; d < row.size(); ++d) {
      if (d > 0) m += ' ';
      m += detail::format_double(row[d]);
    }
    m += '\n';
    i += embeddings.id(r) + '\n';
  }
  write_text_file(matrix, m);
  write_text_file(ids, i);
}

std::string projection_to_csv(std::span<const ProjectionPoint> points) {
  std::string out = "image_id,x,y\n";
  for (const auto& p : points) {
    out += detail::csv_field(p.image_id) + ',' + detail::format_double(p.x) + ',' + detail::format_double(p.y) + '\n';
  }
  return out;
}

std::vector<ProjectionPoint> projection_from_csv(std::string_view csv) {
  std::vector<ProjectionPoint> points;
  std::istringstream in{std::string(csv)};
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    if (header) {
      header = false;
      if (line.rfind("image_id", 0) == 0) continue;
    }
    const auto f = detail::csv_split(line);
    if (f.size() != 3) throw Error(Errc::InvalidArgument, "projection CSV row needs 3 fields: " + line);
    try {
      points.push_back({f[0], std::stod(f[1]), std::stod(f[2])});
    } catch (const std::exception&) {
      throw Error(Errc::InvalidArgument, "non-numeric coordinate in projection CSV: " + line);
    }
  }
  return points;
}

} // namespace vilod
