#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace datasim {

using Meta = std::map<std::string, std::string>;

struct Document {
  std::string id;
  std::string text;
  Meta meta;

  friend bool operator==(const Document&, const Document&) = default;
};

// One multiple-choice example: input x, optional instruction i, target set T.
struct TaskExample {
  std::string id;
  std::string input;
  std::optional<std::string> instruction;
  std::vector<std::string> targets;
  std::size_t correct_index = 0;

  friend bool operator==(const TaskExample&, const TaskExample&) = default;
};

enum class DatasetKind { reference_corpus, task_dataset };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view text);

struct DatasetHandle {
  std::string name;
  DatasetKind kind = DatasetKind::reference_corpus;
  std::size_t example_count = 0;
  // Random-chance accuracy: mean over examples of 1/|targets|. Zero for
  // reference corpora.
  double num_choices_baseline = 0.0;
  std::filesystem::path path;
  std::string content_sha256;
};

// Record codecs. Parse functions throw ValidationError without location;
// the file readers prefix the path and 1-based line number.
Document parse_document(std::string_view line);
TaskExample parse_task_example(std::string_view line);
std::string to_json_line(const Document& doc);
std::string to_json_line(const TaskExample& example);

// Calls fn(line_number, line) for every record line. Rejects empty files,
// blank lines and CR line endings.
void for_each_record_line(const std::filesystem::path& path,
                          const std::function<void(std::size_t, std::string_view)>& fn);

std::vector<Document> read_documents(const std::filesystem::path& path);
std::vector<TaskExample> read_task_examples(const std::filesystem::path& path);
void write_documents(const std::filesystem::path& path, std::span<const Document> docs);
void write_task_examples(const std::filesystem::path& path, std::span<const TaskExample> examples);

// Task examples viewed as documents (text = input), for metrics that only
// look at text.
Document as_document(const TaskExample& example);

double random_baseline(std::span<const TaskExample> examples);

// Validates every record of the file without loading it into memory and
// returns a handle that refers to the file in place.
DatasetHandle ingest(const std::filesystem::path& path, DatasetKind kind);

// Streams the documents of a handle (task examples are passed through as_document).
void for_each_document(const DatasetHandle& handle,
                       const std::function<void(std::size_t, const Document&)>& fn);

// Uniform sample of min(n, population) indices without replacement, returned
// in ascending order. Each index gets a counter-based key from (seed, index);
// the n smallest keys win, so the result depends only on (seed, population).
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed);

// Streaming bottom-k sample over the handle's records (memory O(n)). Equals
// the records at sample_indices(example_count, n, seed), in corpus order.
std::vector<Document> sample(const DatasetHandle& handle, std::size_t n, std::uint64_t seed);

// A directory of ingested datasets: <root>/<name>.jsonl plus
// <root>/<name>.handle.json. Ingestion is single-writer.
class CorpusStore {
 public:
  explicit CorpusStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  // Validates the file, then persists a canonical copy under the store root.
  // The dataset name is the file stem unless given.
  DatasetHandle ingest(const std::filesystem::path& path, DatasetKind kind,
                       std::optional<std::string> name = std::nullopt);

  DatasetHandle open(const std::string& name) const;
  std::vector<std::string> names() const;

  // Writes the persisted records back out as a line-delimited file.
  void export_dataset(const std::string& name, const std::filesystem::path& out) const;

 private:
  std::filesystem::path root_;
};

}  // namespace datasim
