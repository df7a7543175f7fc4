#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "datasim/error.hpp"

namespace datasim {

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Tolerance on stored row norms.
inline constexpr double kUnitNormTolerance = 1e-3;

struct EmbeddingShard {
  EmbeddingMatrix vectors;  // count x dim, unit-norm rows
  std::vector<std::string> ids;

  Eigen::Index dim() const { return vectors.cols(); }
  Eigen::Index count() const { return vectors.rows(); }
};

// In-memory form of a line-delimited embedding file.
struct EmbeddingSet {
  std::string model_id;
  std::vector<std::string> ids;
  EmbeddingMatrix vectors;
};

// Embedding interchange file (produced by the model probe):
//   optional header line {"schema_version":1,"model_id":...,"dim":D,...}
//   one line per document {"doc_id":...,"vector":"<base64 float32 LE>"}
// "vector" may also be a JSON array of numbers.
void for_each_embedding(const std::filesystem::path& path,
                        const std::function<void(std::size_t row, std::size_t line,
                                                 const std::string& id,
                                                 std::span<const float> vec)>& fn,
                        std::string* model_id = nullptr);
EmbeddingSet read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const std::string& model_id,
                          std::span<const std::string> ids, const EmbeddingMatrix& vectors);

// Shard file (little-endian): "DSEM" u32 version=1 u64 dim u64 count,
// count*dim float32 row-major, then count x (u32 len + id bytes).
void write_shard(const std::filesystem::path& path, const EmbeddingShard& shard);
EmbeddingShard read_shard(const std::filesystem::path& path);

struct ShardEntry {
  std::string file;  // relative to the manifest directory
  std::size_t count = 0;
  std::string sha256;
};

struct IndexManifest {
  std::size_t dim = 0;
  std::size_t total_count = 0;
  std::string model_id;
  std::vector<ShardEntry> shards;
  std::filesystem::path directory;

  EmbeddingShard load_shard(std::size_t i) const;  // verifies the checksum
};

// Streams the embedding file into shards of at most shard_size rows under
// out_dir and writes out_dir/manifest.json. Rows are renormalized to unit
// length; a warning is logged when an input norm is off by more than 1e-3.
IndexManifest build_shards(const std::filesystem::path& embedding_file, std::size_t shard_size,
                           const std::filesystem::path& out_dir);
IndexManifest load_manifest(const std::filesystem::path& manifest_path);

struct Neighbor {
  std::string id;
  double similarity = 0.0;
};

struct NeighborResult {
  std::string query_id;
  double max_sim = 0.0;
  double mean_top_k = 0.0;
  std::size_t k_used = 0;
  std::string argmax_id;
  std::vector<Neighbor> neighbors;  // filled when ScanOptions::keep_neighbors
};

struct ScanOptions {
  std::size_t k = 1000;
  unsigned workers = 1;
  bool keep_neighbors = false;
};

// Exact top-k cosine scan. Similarities are accumulated in double; ties are
// broken by ascending document id, so output does not depend on worker count.
std::vector<NeighborResult> scan_normalized(const Eigen::MatrixXd& unit_queries,
                                            std::span<const std::string> query_ids,
                                            std::span<const EmbeddingShard> shards,
                                            const ScanOptions& options);
std::vector<NeighborResult> scan_normalized(const Eigen::MatrixXd& unit_queries,
                                            std::span<const std::string> query_ids,
                                            const IndexManifest& manifest,
                                            const ScanOptions& options);

// Rows scaled to unit L2 norm in double precision. A zero row is an error
// naming its 0-based index.
template <typename Derived>
Eigen::MatrixXd normalized_rows(const Eigen::MatrixBase<Derived>& m) {
  Eigen::MatrixXd out = m.template cast<double>();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw ValidationError("row " + std::to_string(r) + ": zero or non-finite vector");
    out.row(r) /= norm;
  }
  return out;
}

template <typename Derived, typename Index>
std::vector<NeighborResult> scan(const Eigen::MatrixBase<Derived>& queries,
                                 std::span<const std::string> query_ids, const Index& index,
                                 const ScanOptions& options = {}) {
  return scan_normalized(normalized_rows(queries), query_ids, index, options);
}

struct SimilarityAggregate {
  double mean_max_sim = 0.0;
  double mean_mean_top_k = 0.0;
};

SimilarityAggregate aggregate(std::span<const NeighborResult> results);

}  // namespace datasim
