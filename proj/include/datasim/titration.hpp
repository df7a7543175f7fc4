#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "datasim/corpus_store.hpp"

namespace datasim {

struct ParallelExample {
  std::string id;
  std::string source_text;  // English
  std::string target_text;  // translation
  std::string language;
};

enum class BoundaryUnit { character, whitespace_token };

std::string_view to_string(BoundaryUnit unit);
BoundaryUnit parse_boundary_unit(std::string_view text);

struct TitrationSpec {
  std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  BoundaryUnit boundary_unit = BoundaryUnit::whitespace_token;

  // Throws unless fractions are strictly increasing, within [0, 1] and
  // include both endpoints.
  void validate() const;
};

// First ceil(f * |target|) units of the translation followed by the last
// floor((1 - f) * |source|) units of the source. Characters are UTF-8 code
// points; tokens are whitespace-delimited and joined by a single space.
// f = 0 and f = 1 return the source and translation verbatim.
std::string splice(const ParallelExample& pair, double fraction, BoundaryUnit unit);

// Number of units taken from the translation for the given fraction.
std::size_t translated_units(const ParallelExample& pair, double fraction, BoundaryUnit unit);
std::size_t count_units(std::string_view text, BoundaryUnit unit);

struct TitrationOptions {
  std::string series_name;  // prefix for output files; defaults to the language tag
  std::string language;
  // Answer options taken from the translated file for every fraction
  // (language-specific targets); otherwise the source targets are kept.
  bool translated_targets = false;
  bool translated_instruction = false;
};

struct TitrationSeries {
  std::vector<DatasetHandle> datasets;  // one per fraction, in spec order
  std::vector<double> fractions;
  std::filesystem::path manifest_path;
};

// Pairs examples by id and splices their inputs. Labels (correct_index) must
// agree across the pair. Writes <out_dir>/<series>_f<fraction>.jsonl per
// fraction plus <out_dir>/<series>.series.json.
TitrationSeries build_titration_series(std::span<const TaskExample> source,
                                       std::span<const TaskExample> translated,
                                       const TitrationSpec& spec, const TitrationOptions& options,
                                       const std::filesystem::path& out_dir,
                                       const std::string& source_sha256 = {},
                                       const std::string& translated_sha256 = {});

TitrationSeries build_titration_series(const std::filesystem::path& source_file,
                                       const std::filesystem::path& translated_file,
                                       const TitrationSpec& spec, const TitrationOptions& options,
                                       const std::filesystem::path& out_dir);

// "0.25" -> "f0.25"; the name component used for titration datasets.
std::string fraction_tag(double fraction);

}  // namespace datasim
