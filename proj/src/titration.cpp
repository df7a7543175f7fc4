#include "datasim/titration.hpp"

#include <cmath>
#include <map>

#include "datasim/digest.hpp"
#include "datasim/error.hpp"
#include "datasim/tokenizer.hpp"
#include "json.hpp"
#include "text_format.hpp"

namespace datasim {

using nlohmann::json;

namespace {

// Guards ceil/floor against products such as 0.3 * 10 = 3.0000000000000004.
constexpr double kSnap = 1e-9;

// Byte offsets at which each unit starts, plus the byte offset one past the
// end of each unit.
struct Units {
  std::vector<std::size_t> begin;
  std::vector<std::size_t> end;
};

Units find_units(std::string_view text, BoundaryUnit unit) {
  Units u;
  if (unit == BoundaryUnit::whitespace_token) {
    for (auto token : split_whitespace(text)) {
      const auto b = static_cast<std::size_t>(token.data() - text.data());
      u.begin.push_back(b);
      u.end.push_back(b + token.size());
    }
    return u;
  }
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if ((c & 0xC0) == 0x80) continue;  // continuation byte
    if (!u.begin.empty()) u.end.push_back(i);
    u.begin.push_back(i);
  }
  if (!u.begin.empty()) u.end.push_back(text.size());
  return u;
}

std::size_t prefix_count(double fraction, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - kSnap)));
}

std::size_t suffix_count(double fraction, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(
                         std::floor((1.0 - fraction) * static_cast<double>(n) + kSnap)));
}

void check_fraction(double f) {
  if (!(f >= 0.0 && f <= 1.0))
    throw ValidationError("titration fraction must be in [0, 1], got " + detail::fmt(f));
}

}  // namespace

std::string_view to_string(BoundaryUnit unit) {
  return unit == BoundaryUnit::character ? "character" : "whitespace_token";
}

BoundaryUnit parse_boundary_unit(std::string_view text) {
  if (text == "character") return BoundaryUnit::character;
  if (text == "whitespace_token" || text == "token") return BoundaryUnit::whitespace_token;
  throw ValidationError("unknown boundary unit \"" + std::string(text) + "\"");
}

void TitrationSpec::validate() const {
  if (fractions.size() < 2) throw ValidationError("titration spec needs at least two fractions");
  for (double f : fractions) check_fraction(f);
  for (std::size_t i = 1; i < fractions.size(); ++i)
    if (!(fractions[i] > fractions[i - 1]))
      throw ValidationError("titration fractions must be strictly increasing");
  if (fractions.front() != 0.0 || fractions.back() != 1.0)
    throw ValidationError("titration fractions must include 0 and 1");
}

std::size_t count_units(std::string_view text, BoundaryUnit unit) {
  return find_units(text, unit).begin.size();
}

std::size_t translated_units(const ParallelExample& pair, double fraction, BoundaryUnit unit) {
  check_fraction(fraction);
  return prefix_count(fraction, count_units(pair.target_text, unit));
}

std::string splice(const ParallelExample& pair, double fraction, BoundaryUnit unit) {
  check_fraction(fraction);
  if (fraction == 0.0) return pair.source_text;
  if (fraction == 1.0) return pair.target_text;
  const auto src = find_units(pair.source_text, unit);
  const auto tgt = find_units(pair.target_text, unit);
  const std::size_t take = prefix_count(fraction, tgt.begin.size());
  const std::size_t keep = suffix_count(fraction, src.begin.size());

  std::string out;
  if (take > 0) {
    const std::size_t first = unit == BoundaryUnit::whitespace_token ? tgt.begin.front() : 0;
    out.append(pair.target_text, first, tgt.end[take - 1] - first);
  }
  if (keep > 0) {
    const std::size_t from = src.begin[src.begin.size() - keep];
    const std::size_t last = unit == BoundaryUnit::whitespace_token ? src.end.back()
                                                                    : pair.source_text.size();
    if (!out.empty() && unit == BoundaryUnit::whitespace_token) out += ' ';
    out.append(pair.source_text, from, last - from);
  }
  return out;
}

std::string fraction_tag(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "f%.2f", fraction);
  return buf;
}

TitrationSeries build_titration_series(std::span<const TaskExample> source,
                                       std::span<const TaskExample> translated,
                                       const TitrationSpec& spec, const TitrationOptions& options,
                                       const std::filesystem::path& out_dir,
                                       const std::string& source_sha256,
                                       const std::string& translated_sha256) {
  spec.validate();
  const std::string series = options.series_name.empty() ? options.language : options.series_name;
  if (series.empty()) throw ValidationError("titration: series name or language required");

  std::map<std::string, const TaskExample*> by_id;
  for (const auto& ex : translated) by_id.emplace(ex.id, &ex);
  std::vector<std::string> missing;
  for (const auto& ex : source)
    if (!by_id.count(ex.id)) missing.push_back(ex.id);
  if (missing.empty() && translated.size() != source.size()) {
    std::map<std::string, bool> in_source;
    for (const auto& ex : source) in_source[ex.id] = true;
    for (const auto& ex : translated)
      if (!in_source.count(ex.id)) missing.push_back(ex.id);
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 20) list += ", ...";
    throw ValidationError("titration: " + std::to_string(missing.size()) +
                          " example(s) lack a parallel counterpart: " + list);
  }
  for (const auto& ex : source) {
    const auto& tr = *by_id.at(ex.id);
    if (tr.correct_index != ex.correct_index || tr.targets.size() != ex.targets.size())
      throw ValidationError("titration: label mismatch for example \"" + ex.id + "\"");
  }

  TitrationSeries out;
  out.fractions = spec.fractions;
  std::filesystem::create_directories(out_dir);
  json manifest = {{"series", series},
                   {"language", options.language},
                   {"fractions", spec.fractions},
                   {"boundary_unit", to_string(spec.boundary_unit)},
                   {"translated_targets", options.translated_targets},
                   {"translated_instruction", options.translated_instruction},
                   {"source_sha256", source_sha256},
                   {"translated_sha256", translated_sha256},
                   {"datasets", json::array()}};
  for (double f : spec.fractions) {
    std::vector<TaskExample> examples;
    examples.reserve(source.size());
    for (const auto& ex : source) {
      const auto& tr = *by_id.at(ex.id);
      TaskExample spliced = ex;
      spliced.input = splice({ex.id, ex.input, tr.input, options.language}, f, spec.boundary_unit);
      if (options.translated_targets) spliced.targets = tr.targets;
      if (options.translated_instruction) spliced.instruction = tr.instruction;
      examples.push_back(std::move(spliced));
    }
    const auto file = out_dir / (series + "_" + fraction_tag(f) + ".jsonl");
    write_task_examples(file, examples);
    auto handle = ingest(file, DatasetKind::task_dataset);
    manifest["datasets"].push_back({{"fraction", f},
                                    {"file", file.filename().string()},
                                    {"example_count", handle.example_count},
                                    {"sha256", handle.content_sha256}});
    out.datasets.push_back(std::move(handle));
  }
  out.manifest_path = out_dir / (series + ".series.json");
  write_file_atomic(out.manifest_path, manifest.dump(2) + "\n");
  return out;
}

TitrationSeries build_titration_series(const std::filesystem::path& source_file,
                                       const std::filesystem::path& translated_file,
                                       const TitrationSpec& spec, const TitrationOptions& options,
                                       const std::filesystem::path& out_dir) {
  const auto source = read_task_examples(source_file);
  const auto translated = read_task_examples(translated_file);
  return build_titration_series(source, translated, spec, options, out_dir,
                                sha256_file_hex(source_file), sha256_file_hex(translated_file));
}

}  // namespace datasim
