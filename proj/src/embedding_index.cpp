#include "datasim/embedding_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.hpp"
#include "datasim/digest.hpp"
#include "datasim/log.hpp"
#include "json.hpp"
#include "parallel.hpp"

namespace datasim {

using nlohmann::json;

namespace {

constexpr std::size_t kQueryBlock = 256;

std::vector<float> decode_vector(const json& v) {
  std::vector<float> out;
  if (v.is_string()) {
    const auto bytes = base64_decode(v.get<std::string>());
    if (bytes.size() % 4 != 0) throw ValidationError("vector byte length is not a multiple of 4");
    out.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i]) |
                           static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                           static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                           static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
      std::memcpy(&out[i], &bits, 4);
    }
  } else if (v.is_array()) {
    for (const auto& x : v) {
      if (!x.is_number()) throw ValidationError("vector array must contain numbers");
      out.push_back(x.get<float>());
    }
  } else {
    throw ValidationError("\"vector\" must be a base64 string or an array");
  }
  return out;
}

std::string encode_vector(std::span<const float> vec) {
  std::vector<std::uint8_t> bytes(vec.size() * 4);
  for (std::size_t i = 0; i < vec.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &vec[i], 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

std::string shard_name(std::size_t i) {
  std::ostringstream ss;
  ss << "shard-" << std::setw(5) << std::setfill('0') << i << ".bin";
  return ss.str();
}

struct Candidate {
  double sim;
  const std::string* id;
};

bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.sim != b.sim) return a.sim > b.sim;
  return *a.id < *b.id;
}

void keep_top(std::vector<Candidate>& c, std::size_t k) {
  if (c.size() > k) {
    std::nth_element(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(), ranks_before);
    c.resize(k);
  }
  std::sort(c.begin(), c.end(), ranks_before);
}

// Top-k of one shard for a block of queries: result[q] sorted best first.
std::vector<std::vector<Candidate>> shard_top_k(const Eigen::MatrixXd& rows,
                                                const std::vector<std::string>& ids,
                                                const Eigen::MatrixXd& queries, Eigen::Index q0,
                                                Eigen::Index q1, std::size_t k) {
  const Eigen::MatrixXd sims = rows * queries.middleRows(q0, q1 - q0).transpose();
  std::vector<std::vector<Candidate>> out(static_cast<std::size_t>(q1 - q0));
  for (Eigen::Index q = 0; q < sims.cols(); ++q) {
    auto& c = out[static_cast<std::size_t>(q)];
    c.reserve(static_cast<std::size_t>(sims.rows()));
    for (Eigen::Index r = 0; r < sims.rows(); ++r)
      c.push_back({sims(r, q), &ids[static_cast<std::size_t>(r)]});
    keep_top(c, k);
  }
  return out;
}

// Top-k lists of one shard for every query. When the shard is transient the
// referenced ids are copied into owned_ids so candidates outlive the shard.
struct ShardPartial {
  std::vector<std::vector<Candidate>> lists;
  std::vector<std::string> owned_ids;
};

ShardPartial scan_one_shard(const EmbeddingShard& shard, const Eigen::MatrixXd& queries,
                            std::size_t k, bool transient) {
  if (shard.dim() != queries.cols())
    throw ValidationError("scan: dimension mismatch (queries " + std::to_string(queries.cols()) +
                          ", index " + std::to_string(shard.dim()) + ")");
  const Eigen::VectorXd inv_norms = shard.vectors.cast<double>().rowwise().norm().cwiseInverse();
  const Eigen::MatrixXd rows = inv_norms.asDiagonal() * shard.vectors.cast<double>();
  ShardPartial part;
  for (Eigen::Index q0 = 0; q0 < queries.rows(); q0 += static_cast<Eigen::Index>(kQueryBlock)) {
    const Eigen::Index q1 =
        std::min(queries.rows(), q0 + static_cast<Eigen::Index>(kQueryBlock));
    auto block = shard_top_k(rows, shard.ids, queries, q0, q1, k);
    for (auto& list : block) part.lists.push_back(std::move(list));
  }
  if (transient) {
    std::size_t total = 0;
    for (const auto& list : part.lists) total += list.size();
    part.owned_ids.reserve(total);
    for (auto& list : part.lists)
      for (auto& c : list) {
        part.owned_ids.push_back(*c.id);
        c.id = &part.owned_ids.back();
      }
  }
  return part;
}

std::vector<NeighborResult> merge_partials(std::span<const ShardPartial> partials,
                                           std::span<const std::string> query_ids,
                                           const ScanOptions& options) {
  std::vector<NeighborResult> results(query_ids.size());
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    std::vector<Candidate> merged;
    for (const auto& part : partials)
      merged.insert(merged.end(), part.lists[q].begin(), part.lists[q].end());
    keep_top(merged, options.k);
    auto& r = results[q];
    r.query_id = query_ids[q];
    r.k_used = merged.size();
    r.max_sim = merged.front().sim;
    r.argmax_id = *merged.front().id;
    double sum = 0.0;
    for (const auto& c : merged) sum += c.sim;
    r.mean_top_k = sum / static_cast<double>(merged.size());
    if (options.keep_neighbors) {
      r.neighbors.reserve(merged.size());
      for (const auto& c : merged) r.neighbors.push_back({*c.id, c.sim});
    }
  }
  return results;
}

void check_scan_args(const Eigen::MatrixXd& queries, std::span<const std::string> query_ids,
                     std::size_t shard_count, const ScanOptions& options) {
  if (options.k == 0) throw ValidationError("scan: k must be at least 1");
  if (shard_count == 0) throw ValidationError("scan: empty index");
  if (static_cast<std::size_t>(queries.rows()) != query_ids.size())
    throw ValidationError("scan: query id count does not match query rows");
}

}  // namespace

void for_each_embedding(const std::filesystem::path& path,
                        const std::function<void(std::size_t, std::size_t, const std::string&,
                                                 std::span<const float>)>& fn,
                        std::string* model_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::size_t line_no = 0;
  std::size_t row = 0;
  std::size_t dim = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + "malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw ValidationError(where + "record is not a JSON object");
    if (!j.contains("doc_id")) {
      if (line_no != 1) throw ValidationError(where + "record without \"doc_id\"");
      if (model_id && j.contains("model_id")) *model_id = j["model_id"].get<std::string>();
      if (j.contains("dim")) dim = j["dim"].get<std::size_t>();
      continue;
    }
    if (!j["doc_id"].is_string()) throw ValidationError(where + "\"doc_id\" must be a string");
    if (!j.contains("vector")) throw ValidationError(where + "missing \"vector\"");
    std::vector<float> vec;
    try {
      vec = decode_vector(j["vector"]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
    if (vec.empty()) throw ValidationError(where + "empty vector");
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim)
      throw ValidationError(where + "dimension mismatch at row " + std::to_string(row) +
                            " (expected " + std::to_string(dim) + ", got " +
                            std::to_string(vec.size()) + ")");
    fn(row++, line_no, j["doc_id"].get<std::string>(), vec);
  }
  if (row == 0) throw ValidationError(path.string() + ": no embeddings");
}

EmbeddingSet read_embedding_file(const std::filesystem::path& path) {
  EmbeddingSet set;
  std::vector<float> flat;
  std::size_t dim = 0;
  for_each_embedding(
      path,
      [&](std::size_t, std::size_t, const std::string& id, std::span<const float> vec) {
        dim = vec.size();
        set.ids.push_back(id);
        flat.insert(flat.end(), vec.begin(), vec.end());
      },
      &set.model_id);
  set.vectors = Eigen::Map<EmbeddingMatrix>(flat.data(), static_cast<Eigen::Index>(set.ids.size()),
                                            static_cast<Eigen::Index>(dim));
  return set;
}

void write_embedding_file(const std::filesystem::path& path, const std::string& model_id,
                          std::span<const std::string> ids, const EmbeddingMatrix& vectors) {
  if (ids.size() != static_cast<std::size_t>(vectors.rows()))
    throw ValidationError("write_embedding_file: id count does not match rows");
  std::string out =
      json{{"schema_version", 1}, {"model_id", model_id}, {"dim", vectors.cols()}}.dump() + "\n";
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto row = vectors.row(static_cast<Eigen::Index>(r));
    out += json{{"doc_id", ids[r]},
                {"vector", encode_vector({row.data(), static_cast<std::size_t>(row.size())})}}
               .dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

void write_shard(const std::filesystem::path& path, const EmbeddingShard& shard) {
  using namespace detail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ComputeError("cannot write " + path.string());
  put_magic(out, "DSEM");
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(shard.dim()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(shard.count()));
  for (Eigen::Index r = 0; r < shard.count(); ++r)
    for (Eigen::Index c = 0; c < shard.dim(); ++c) put_le<float>(out, shard.vectors(r, c));
  for (const auto& id : shard.ids) put_string(out, id);
  if (!out) throw ComputeError("write failed for " + path.string());
}

EmbeddingShard read_shard(const std::filesystem::path& path) {
  using namespace detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  expect_magic(in, "DSEM", path.string());
  if (get_le<std::uint32_t>(in) != 1) throw ValidationError(path.string() + ": unsupported version");
  const auto dim = static_cast<Eigen::Index>(get_le<std::uint64_t>(in));
  const auto count = static_cast<Eigen::Index>(get_le<std::uint64_t>(in));
  if (dim <= 0 || count <= 0) throw ValidationError(path.string() + ": empty shard");
  EmbeddingShard shard;
  shard.vectors.resize(count, dim);
  for (Eigen::Index r = 0; r < count; ++r)
    for (Eigen::Index c = 0; c < dim; ++c) shard.vectors(r, c) = get_le<float>(in);
  shard.ids.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index r = 0; r < count; ++r) shard.ids.push_back(get_string(in));
  return shard;
}

EmbeddingShard IndexManifest::load_shard(std::size_t i) const {
  const auto& entry = shards.at(i);
  const auto path = directory / entry.file;
  if (sha256_file_hex(path) != entry.sha256)
    throw ComputeError(path.string() + ": checksum mismatch");
  auto shard = read_shard(path);
  if (static_cast<std::size_t>(shard.count()) != entry.count ||
      static_cast<std::size_t>(shard.dim()) != dim)
    throw ComputeError(path.string() + ": shape disagrees with manifest");
  return shard;
}

IndexManifest build_shards(const std::filesystem::path& embedding_file, std::size_t shard_size,
                           const std::filesystem::path& out_dir) {
  if (shard_size == 0) throw ValidationError("shard_size must be at least 1");
  std::filesystem::create_directories(out_dir);
  IndexManifest manifest;
  manifest.directory = out_dir;

  EmbeddingShard current;
  std::vector<float> flat;
  std::size_t off_norm = 0;
  std::size_t first_off_norm = 0;

  auto flush = [&] {
    if (current.ids.empty()) return;
    current.vectors = Eigen::Map<EmbeddingMatrix>(flat.data(),
                                                  static_cast<Eigen::Index>(current.ids.size()),
                                                  static_cast<Eigen::Index>(manifest.dim));
    const auto name = shard_name(manifest.shards.size());
    write_shard(out_dir / name, current);
    manifest.shards.push_back({name, current.ids.size(), sha256_file_hex(out_dir / name)});
    current = {};
    flat.clear();
  };

  for_each_embedding(
      embedding_file,
      [&](std::size_t row, std::size_t line, const std::string& id, std::span<const float> vec) {
        manifest.dim = vec.size();
        double norm2 = 0.0;
        for (float x : vec) norm2 += static_cast<double>(x) * x;
        const double norm = std::sqrt(norm2);
        if (!(norm > 0.0) || !std::isfinite(norm))
          throw ValidationError(embedding_file.string() + ": row " + std::to_string(row) +
                                " (line " + std::to_string(line) +
                                "): zero or non-finite vector cannot be normalized");
        if (std::abs(norm - 1.0) > kUnitNormTolerance && off_norm++ == 0) first_off_norm = row;
        for (float x : vec) flat.push_back(static_cast<float>(x / norm));
        current.ids.push_back(id);
        ++manifest.total_count;
        if (current.ids.size() == shard_size) flush();
      },
      &manifest.model_id);
  flush();
  if (off_norm > 0)
    log::warn(std::to_string(off_norm) + " embedding rows had norm off by more than 1e-3 (first: row " +
              std::to_string(first_off_norm) + "); renormalized");

  json j = {{"format", "datasim-embedding-index"},
            {"version", 1},
            {"dim", manifest.dim},
            {"total_count", manifest.total_count},
            {"model_id", manifest.model_id},
            {"shards", json::array()}};
  for (const auto& s : manifest.shards)
    j["shards"].push_back({{"file", s.file}, {"count", s.count}, {"sha256", s.sha256}});
  write_file_atomic(out_dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

IndexManifest load_manifest(const std::filesystem::path& manifest_path) {
  json j;
  try {
    j = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ValidationError(manifest_path.string() + ": " + e.what());
  }
  IndexManifest m;
  m.directory = manifest_path.parent_path();
  m.dim = j.at("dim").get<std::size_t>();
  m.total_count = j.at("total_count").get<std::size_t>();
  m.model_id = j.value("model_id", "");
  for (const auto& s : j.at("shards"))
    m.shards.push_back({s.at("file").get<std::string>(), s.at("count").get<std::size_t>(),
                        s.at("sha256").get<std::string>()});
  return m;
}

std::vector<NeighborResult> scan_normalized(const Eigen::MatrixXd& unit_queries,
                                            std::span<const std::string> query_ids,
                                            std::span<const EmbeddingShard> shards,
                                            const ScanOptions& options) {
  check_scan_args(unit_queries, query_ids, shards.size(), options);
  std::vector<ShardPartial> partials(shards.size());
  detail::parallel_for(options.workers, shards.size(), [&](std::size_t s) {
    partials[s] = scan_one_shard(shards[s], unit_queries, options.k, false);
  });
  return merge_partials(partials, query_ids, options);
}

std::vector<NeighborResult> scan_normalized(const Eigen::MatrixXd& unit_queries,
                                            std::span<const std::string> query_ids,
                                            const IndexManifest& manifest,
                                            const ScanOptions& options) {
  check_scan_args(unit_queries, query_ids, manifest.shards.size(), options);
  if (static_cast<std::size_t>(unit_queries.cols()) != manifest.dim)
    throw ValidationError("scan: dimension mismatch (queries " + std::to_string(unit_queries.cols()) +
                          ", index " + std::to_string(manifest.dim) + ")");
  std::vector<ShardPartial> partials(manifest.shards.size());
  detail::parallel_for(options.workers, partials.size(), [&](std::size_t s) {
    partials[s] = scan_one_shard(manifest.load_shard(s), unit_queries, options.k, true);
  });
  return merge_partials(partials, query_ids, options);
}

SimilarityAggregate aggregate(std::span<const NeighborResult> results) {
  if (results.empty()) throw ValidationError("aggregate: no results");
  SimilarityAggregate agg;
  for (const auto& r : results) {
    agg.mean_max_sim += r.max_sim;
    agg.mean_mean_top_k += r.mean_top_k;
  }
  agg.mean_max_sim /= static_cast<double>(results.size());
  agg.mean_mean_top_k /= static_cast<double>(results.size());
  return agg;
}

}  // namespace datasim
