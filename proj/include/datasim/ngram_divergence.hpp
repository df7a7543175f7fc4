#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "datasim/corpus_store.hpp"
#include "datasim/error.hpp"
#include "datasim/tokenizer.hpp"

namespace datasim {

enum class NgramScheme : std::uint32_t { unigram_explicit = 1, bigram_hashed = 2 };

std::string_view to_string(NgramScheme scheme);
NgramScheme parse_ngram_scheme(std::string_view text);

inline constexpr std::size_t kHashedBigramDim = 10000;

// Bigram feature hash. For adjacent token ids (a, b):
//   h = a * kPairMultiplier + b                      (mod 2^64)
//   h ^= h >> 30; h *= kMix1; h ^= h >> 27; h *= kMix2; h ^= h >> 31
//   bucket = h mod 10000
// The finalizer is the SplitMix64 mixer; all arithmetic is unsigned 64-bit.
struct BigramHash {
  static constexpr std::uint64_t kPairMultiplier = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kMix1 = 0xBF58476D1CE4E5B9ULL;
  static constexpr std::uint64_t kMix2 = 0x94D049BB133111EBULL;

  static constexpr std::uint64_t hash(std::uint64_t first, std::uint64_t second) noexcept {
    std::uint64_t h = first * kPairMultiplier + second;
    h ^= h >> 30;
    h *= kMix1;
    h ^= h >> 27;
    h *= kMix2;
    h ^= h >> 31;
    return h;
  }

  static constexpr std::size_t bucket(std::uint64_t first, std::uint64_t second) noexcept {
    return static_cast<std::size_t>(hash(first, second) % kHashedBigramDim);
  }
};

// Normalized histogram over a vocabulary (unigrams) or the hashed bigram space.
struct TokenDistribution {
  NgramScheme scheme = NgramScheme::unigram_explicit;
  Eigen::VectorXd probs;
  std::uint64_t total_count = 0;
  std::string tokenizer_id;

  Eigen::Index dim() const { return probs.size(); }
};

// Integer count accumulator. Counters built over disjoint document sets
// merge exactly, so the final distribution is independent of how documents
// were split across workers.
class NgramCounter {
 public:
  NgramCounter(NgramScheme scheme, const Tokenizer& tokenizer);

  void add(std::string_view text);
  void merge(const NgramCounter& other);

  std::uint64_t total() const { return total_; }
  std::span<const std::uint64_t> counts() const { return counts_; }

  // Throws ValidationError when no n-gram was counted.
  TokenDistribution finish() const;

 private:
  NgramScheme scheme_;
  const Tokenizer* tokenizer_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

TokenDistribution build_distribution(std::span<const Document> docs, NgramScheme scheme,
                                     const Tokenizer& tokenizer, unsigned workers = 1);

// KL(p' || q') in nats, where p' and q' add epsilon to every coordinate and
// renormalize. Works on any pair of equal-length Eigen vector expressions.
template <typename DerivedP, typename DerivedQ>
double kl_divergence(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q,
                     double epsilon) {
  if (p.size() != q.size())
    throw ValidationError("kl_divergence: dimension mismatch (" + std::to_string(p.size()) +
                          " vs " + std::to_string(q.size()) + ")");
  if (!(epsilon > 0.0)) throw ValidationError("kl_divergence: epsilon must be positive");
  const auto n = static_cast<double>(p.size());
  const double p_norm = p.template cast<double>().sum() + n * epsilon;
  const double q_norm = q.template cast<double>().sum() + n * epsilon;
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = (static_cast<double>(p(i)) + epsilon) / p_norm;
    const double qi = (static_cast<double>(q(i)) + epsilon) / q_norm;
    total += pi * std::log(pi / qi);
  }
  return std::max(total, 0.0);
}

// KL(task || reference) by convention. Schemes and dimensions must agree.
double kl_divergence(const TokenDistribution& task, const TokenDistribution& reference,
                     double epsilon = 1e-9);

// Binary layout (little-endian):
//   "DSTD" u32 version=1 u32 scheme u32 reserved=0 u64 dim u64 total_count
//   u64 kPairMultiplier u64 kMix1 u64 kMix2 u64 modulus
//   u32 len + tokenizer id bytes, then dim x f64 probabilities.
void save_distribution(const std::filesystem::path& path, const TokenDistribution& dist);
TokenDistribution load_distribution(const std::filesystem::path& path);

}  // namespace datasim
