#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "datasim/corpus_store.hpp"

namespace datasim {

// Maps text to a sequence of token ids. Implementations are immutable after
// construction and safe to share across threads.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::uint64_t> encode(std::string_view text) const = 0;
  // Number of distinct ids, or 0 when ids are unbounded hashes.
  virtual std::size_t vocab_size() const = 0;
  // Stable identifier recorded in persisted distributions.
  virtual std::string id() const = 0;
};

// Splits on ASCII whitespace.
std::vector<std::string_view> split_whitespace(std::string_view text);

// FNV-1a 64-bit (offset 0xcbf29ce484222325, prime 0x100000001b3).
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

// Whitespace tokens identified by their FNV-1a hash. Unbounded id space, so
// usable with hashed bigrams only.
class WhitespaceHashTokenizer final : public Tokenizer {
 public:
  std::vector<std::uint64_t> encode(std::string_view text) const override;
  std::size_t vocab_size() const override { return 0; }
  std::string id() const override { return "whitespace-fnv1a64"; }
};

// One token per UTF-8 byte.
class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<std::uint64_t> encode(std::string_view text) const override;
  std::size_t vocab_size() const override { return 256; }
  std::string id() const override { return "bytes"; }
};

// Whitespace tokens looked up in an explicit vocabulary. Token i of the
// vocabulary has id i; anything else maps to the trailing <unk> id.
class VocabTokenizer final : public Tokenizer {
 public:
  explicit VocabTokenizer(std::vector<std::string> tokens);
  // One token per line, UTF-8, LF endings.
  static VocabTokenizer load(const std::filesystem::path& path);

  std::vector<std::uint64_t> encode(std::string_view text) const override;
  std::size_t vocab_size() const override { return tokens_.size() + 1; }
  std::string id() const override { return id_; }

  std::uint64_t unk_id() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint64_t> lookup_;
  std::string id_;
};

// Sorted set of whitespace tokens over the given documents.
VocabTokenizer build_vocabulary(std::span<const Document> docs);

enum class TokenizerKind { whitespace_hash, bytes, vocab };

std::unique_ptr<Tokenizer> make_tokenizer(TokenizerKind kind,
                                          const std::filesystem::path& vocab_path = {});
TokenizerKind parse_tokenizer_kind(std::string_view text);

}  // namespace datasim
