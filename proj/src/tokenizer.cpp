#include "datasim/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "datasim/digest.hpp"
#include "datasim/error.hpp"

namespace datasim {
namespace {

constexpr bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

}  // namespace

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint64_t> WhitespaceHashTokenizer::encode(std::string_view text) const {
  std::vector<std::uint64_t> ids;
  for (auto token : split_whitespace(text)) ids.push_back(fnv1a64(token));
  return ids;
}

std::vector<std::uint64_t> ByteTokenizer::encode(std::string_view text) const {
  std::vector<std::uint64_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

VocabTokenizer::VocabTokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  std::string joined;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto parts = split_whitespace(tokens_[i]);
    if (parts.size() != 1 || parts[0].size() != tokens_[i].size())
      throw ValidationError("vocabulary entry " + std::to_string(i + 1) +
                            " is empty or contains whitespace");
    if (!lookup_.emplace(tokens_[i], i).second)
      throw ValidationError("duplicate vocabulary entry \"" + tokens_[i] + "\"");
    joined += tokens_[i];
    joined += '\n';
  }
  id_ = "vocab:" + sha256_hex(joined).substr(0, 16);
}

VocabTokenizer VocabTokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  if (tokens.empty()) throw ValidationError("empty vocabulary " + path.string());
  return VocabTokenizer(std::move(tokens));
}

std::vector<std::uint64_t> VocabTokenizer::encode(std::string_view text) const {
  std::vector<std::uint64_t> ids;
  for (auto token : split_whitespace(text)) {
    auto it = lookup_.find(std::string(token));
    ids.push_back(it == lookup_.end() ? unk_id() : it->second);
  }
  return ids;
}

void VocabTokenizer::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  write_file_atomic(path, out);
}

VocabTokenizer build_vocabulary(std::span<const Document> docs) {
  std::set<std::string, std::less<>> tokens;
  for (const auto& doc : docs)
    for (auto token : split_whitespace(doc.text)) tokens.emplace(token);
  if (tokens.empty()) throw ValidationError("build_vocabulary: no tokens");
  return VocabTokenizer({tokens.begin(), tokens.end()});
}

std::unique_ptr<Tokenizer> make_tokenizer(TokenizerKind kind, const std::filesystem::path& vocab_path) {
  switch (kind) {
    case TokenizerKind::whitespace_hash:
      return std::make_unique<WhitespaceHashTokenizer>();
    case TokenizerKind::bytes:
      return std::make_unique<ByteTokenizer>();
    case TokenizerKind::vocab:
      if (vocab_path.empty()) throw ValidationError("vocab tokenizer requires a vocabulary file");
      return std::make_unique<VocabTokenizer>(VocabTokenizer::load(vocab_path));
  }
  throw ValidationError("unknown tokenizer kind");
}

TokenizerKind parse_tokenizer_kind(std::string_view text) {
  if (text == "whitespace" || text == "whitespace_hash") return TokenizerKind::whitespace_hash;
  if (text == "bytes") return TokenizerKind::bytes;
  if (text == "vocab") return TokenizerKind::vocab;
  throw ValidationError("unknown tokenizer \"" + std::string(text) + "\"");
}

}  // namespace datasim
