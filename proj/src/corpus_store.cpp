#include "datasim/corpus_store.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <unordered_set>

#include "datasim/digest.hpp"
#include "datasim/error.hpp"
#include "datasim/rng.hpp"
#include "json.hpp"

namespace datasim {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSampleStream = 0x73616d706c65ULL;  // "sample"

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

json parse_object(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  return j;
}

std::string required_string(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ValidationError(std::string("missing field \"") + key + "\"");
  if (!it->is_string()) throw ValidationError(std::string("field \"") + key + "\" must be a string");
  return it->get<std::string>();
}

[[noreturn]] void rethrow_at(const std::filesystem::path& path, std::size_t line,
                             const ValidationError& e) {
  throw ValidationError(path.string() + ":" + std::to_string(line) + ": " + e.what());
}

}  // namespace

std::string_view to_string(DatasetKind kind) {
  return kind == DatasetKind::reference_corpus ? "reference_corpus" : "task_dataset";
}

DatasetKind parse_dataset_kind(std::string_view text) {
  if (text == "reference_corpus" || text == "reference") return DatasetKind::reference_corpus;
  if (text == "task_dataset" || text == "task") return DatasetKind::task_dataset;
  throw ValidationError("unknown dataset kind \"" + std::string(text) + "\"");
}

Document parse_document(std::string_view line) {
  const json j = parse_object(line);
  Document doc;
  doc.id = required_string(j, "id");
  doc.text = required_string(j, "text");
  if (doc.id.empty()) throw ValidationError("empty id");
  if (is_blank(doc.text)) throw ValidationError("text is empty after trimming whitespace");
  if (auto it = j.find("meta"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw ValidationError("field \"meta\" must be an object");
    for (const auto& [key, value] : it->items()) {
      if (!value.is_string()) throw ValidationError("meta value for \"" + key + "\" must be a string");
      doc.meta.emplace(key, value.get<std::string>());
    }
  }
  return doc;
}

TaskExample parse_task_example(std::string_view line) {
  const json j = parse_object(line);
  TaskExample ex;
  ex.id = required_string(j, "id");
  ex.input = required_string(j, "input");
  if (ex.id.empty()) throw ValidationError("empty id");
  if (auto it = j.find("instruction"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ValidationError("field \"instruction\" must be a string or null");
    ex.instruction = it->get<std::string>();
  }
  auto targets = j.find("targets");
  if (targets == j.end() || !targets->is_array())
    throw ValidationError("field \"targets\" must be an array of strings");
  for (const auto& t : *targets) {
    if (!t.is_string()) throw ValidationError("field \"targets\" must be an array of strings");
    ex.targets.push_back(t.get<std::string>());
  }
  if (ex.targets.size() < 2) throw ValidationError("at least two targets are required");
  if (std::set<std::string>(ex.targets.begin(), ex.targets.end()).size() != ex.targets.size())
    throw ValidationError("targets must be pairwise distinct");
  auto index = j.find("correct_index");
  if (index == j.end() || !index->is_number_integer())
    throw ValidationError("field \"correct_index\" must be an integer");
  const auto value = index->get<std::int64_t>();
  if (value < 0 || static_cast<std::size_t>(value) >= ex.targets.size())
    throw ValidationError("correct_index " + std::to_string(value) + " out of range for " +
                          std::to_string(ex.targets.size()) + " targets");
  ex.correct_index = static_cast<std::size_t>(value);
  return ex;
}

std::string to_json_line(const Document& doc) {
  json j = {{"id", doc.id}, {"text", doc.text}, {"meta", json::object()}};
  for (const auto& [k, v] : doc.meta) j["meta"][k] = v;
  return j.dump();
}

std::string to_json_line(const TaskExample& ex) {
  json j = {{"id", ex.id},
            {"input", ex.input},
            {"instruction", ex.instruction ? json(*ex.instruction) : json(nullptr)},
            {"targets", ex.targets},
            {"correct_index", ex.correct_index}};
  return j.dump();
}

void for_each_record_line(const std::filesystem::path& path,
                          const std::function<void(std::size_t, std::string_view)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::size_t records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r')
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": CR line ending (files must use LF)");
    if (line.empty() || is_blank(line))
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": blank line");
    fn(line_no, line);
    ++records;
  }
  if (records == 0) throw ValidationError(path.string() + ": empty file");
}

std::vector<Document> read_documents(const std::filesystem::path& path) {
  std::vector<Document> docs;
  std::unordered_set<std::string> seen;
  for_each_record_line(path, [&](std::size_t line, std::string_view text) {
    try {
      docs.push_back(parse_document(text));
    } catch (const ValidationError& e) {
      rethrow_at(path, line, e);
    }
    if (!seen.insert(docs.back().id).second)
      throw ValidationError(path.string() + ":" + std::to_string(line) + ": duplicate id \"" +
                            docs.back().id + "\"");
  });
  return docs;
}

std::vector<TaskExample> read_task_examples(const std::filesystem::path& path) {
  std::vector<TaskExample> examples;
  std::unordered_set<std::string> seen;
  for_each_record_line(path, [&](std::size_t line, std::string_view text) {
    try {
      examples.push_back(parse_task_example(text));
    } catch (const ValidationError& e) {
      rethrow_at(path, line, e);
    }
    if (!seen.insert(examples.back().id).second)
      throw ValidationError(path.string() + ":" + std::to_string(line) + ": duplicate id \"" +
                            examples.back().id + "\"");
  });
  return examples;
}

namespace {

template <typename Record>
void write_records(const std::filesystem::path& path, std::span<const Record> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json_line(r);
    out += '\n';
  }
  write_file_atomic(path, out);
}

}  // namespace

void write_documents(const std::filesystem::path& path, std::span<const Document> docs) {
  write_records(path, docs);
}

void write_task_examples(const std::filesystem::path& path, std::span<const TaskExample> examples) {
  write_records(path, examples);
}

Document as_document(const TaskExample& example) {
  return Document{example.id, example.input, {{"kind", "task"}}};
}

double random_baseline(std::span<const TaskExample> examples) {
  if (examples.empty()) throw ValidationError("random_baseline: no examples");
  double sum = 0.0;
  for (const auto& ex : examples) sum += 1.0 / static_cast<double>(ex.targets.size());
  return sum / static_cast<double>(examples.size());
}

DatasetHandle ingest(const std::filesystem::path& path, DatasetKind kind) {
  DatasetHandle handle;
  handle.name = path.stem().string();
  handle.kind = kind;
  handle.path = path;
  std::unordered_set<std::string> seen;
  double chance_sum = 0.0;
  for_each_record_line(path, [&](std::size_t line, std::string_view text) {
    std::string id;
    try {
      if (kind == DatasetKind::reference_corpus) {
        id = parse_document(text).id;
      } else {
        auto ex = parse_task_example(text);
        chance_sum += 1.0 / static_cast<double>(ex.targets.size());
        id = std::move(ex.id);
      }
    } catch (const ValidationError& e) {
      rethrow_at(path, line, e);
    }
    if (!seen.insert(id).second)
      throw ValidationError(path.string() + ":" + std::to_string(line) + ": duplicate id \"" + id +
                            "\"");
    ++handle.example_count;
  });
  if (kind == DatasetKind::task_dataset)
    handle.num_choices_baseline = chance_sum / static_cast<double>(handle.example_count);
  handle.content_sha256 = sha256_file_hex(path);
  return handle;
}

void for_each_document(const DatasetHandle& handle,
                       const std::function<void(std::size_t, const Document&)>& fn) {
  std::size_t index = 0;
  for_each_record_line(handle.path, [&](std::size_t line, std::string_view text) {
    Document doc;
    try {
      doc = handle.kind == DatasetKind::reference_corpus ? parse_document(text)
                                                         : as_document(parse_task_example(text));
    } catch (const ValidationError& e) {
      rethrow_at(handle.path, line, e);
    }
    fn(index++, doc);
  });
}

namespace {

struct Keyed {
  std::uint64_t key;
  std::size_t index;
  bool operator<(const Keyed& o) const { return key != o.key ? key < o.key : index < o.index; }
};

}  // namespace

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValidationError("sample size must be at least 1");
  std::priority_queue<Keyed> heap;  // max-heap holding the n smallest keys
  for (std::size_t i = 0; i < population; ++i) {
    Keyed k{counter_hash(seed, kSampleStream, i), i};
    if (heap.size() < n) {
      heap.push(k);
    } else if (k < heap.top()) {
      heap.pop();
      heap.push(k);
    }
  }
  std::vector<std::size_t> out;
  out.reserve(heap.size());
  for (; !heap.empty(); heap.pop()) out.push_back(heap.top().index);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Document> sample(const DatasetHandle& handle, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValidationError("sample size must be at least 1");
  struct Entry {
    Keyed key;
    Document doc;
    bool operator<(const Entry& o) const { return key < o.key; }
  };
  std::priority_queue<Entry> heap;
  for_each_document(handle, [&](std::size_t index, const Document& doc) {
    Keyed k{counter_hash(seed, kSampleStream, index), index};
    if (heap.size() < n) {
      heap.push({k, doc});
    } else if (k < heap.top().key) {
      heap.pop();
      heap.push({k, doc});
    }
  });
  std::vector<Entry> entries;
  entries.reserve(heap.size());
  for (; !heap.empty(); heap.pop()) entries.push_back(heap.top());
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.key.index < b.key.index; });
  std::vector<Document> out;
  out.reserve(entries.size());
  for (auto& e : entries) out.push_back(std::move(e.doc));
  return out;
}

CorpusStore::CorpusStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

DatasetHandle CorpusStore::ingest(const std::filesystem::path& path, DatasetKind kind,
                                  std::optional<std::string> name) {
  auto handle = datasim::ingest(path, kind);
  handle.name = name.value_or(handle.name);
  const auto stored = root_ / (handle.name + ".jsonl");
  auto tmp = stored;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ComputeError("cannot write " + tmp.string());
    for_each_record_line(path, [&](std::size_t, std::string_view line) {
      out << (kind == DatasetKind::reference_corpus ? to_json_line(parse_document(line))
                                                    : to_json_line(parse_task_example(line)))
          << '\n';
    });
    if (!out) throw ComputeError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, stored);
  handle.path = stored;
  handle.content_sha256 = sha256_file_hex(stored);

  json meta = {{"name", handle.name},
               {"kind", to_string(kind)},
               {"example_count", handle.example_count},
               {"num_choices_baseline", handle.num_choices_baseline},
               {"source", path.string()},
               {"sha256", handle.content_sha256}};
  write_file_atomic(root_ / (handle.name + ".handle.json"), meta.dump(2) + "\n");
  return handle;
}

DatasetHandle CorpusStore::open(const std::string& name) const {
  const auto meta_path = root_ / (name + ".handle.json");
  if (!std::filesystem::exists(meta_path))
    throw ValidationError("no dataset named \"" + name + "\" in " + root_.string());
  const json meta = json::parse(read_file(meta_path));
  DatasetHandle handle;
  handle.name = meta.at("name").get<std::string>();
  handle.kind = parse_dataset_kind(meta.at("kind").get<std::string>());
  handle.example_count = meta.at("example_count").get<std::size_t>();
  handle.num_choices_baseline = meta.at("num_choices_baseline").get<double>();
  handle.path = root_ / (name + ".jsonl");
  handle.content_sha256 = meta.at("sha256").get<std::string>();
  return handle;
}

std::vector<std::string> CorpusStore::names() const {
  std::vector<std::string> out;
  for (const auto& entry : std::filesystem::directory_iterator(root_)) {
    const auto file = entry.path().filename().string();
    constexpr std::string_view suffix = ".handle.json";
    if (file.size() > suffix.size() && file.ends_with(suffix))
      out.push_back(file.substr(0, file.size() - suffix.size()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void CorpusStore::export_dataset(const std::string& name, const std::filesystem::path& out) const {
  const auto handle = open(name);
  if (handle.kind == DatasetKind::reference_corpus)
    write_documents(out, read_documents(handle.path));
  else
    write_task_examples(out, read_task_examples(handle.path));
}

}  // namespace datasim
