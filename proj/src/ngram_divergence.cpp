#include "datasim/ngram_divergence.hpp"

#include <fstream>
#include "binary_io.hpp"
#include "parallel.hpp"

namespace datasim {

std::string_view to_string(NgramScheme scheme) {
  return scheme == NgramScheme::unigram_explicit ? "unigram_explicit" : "bigram_hashed";
}

NgramScheme parse_ngram_scheme(std::string_view text) {
  if (text == "unigram_explicit" || text == "unigram") return NgramScheme::unigram_explicit;
  if (text == "bigram_hashed" || text == "bigram") return NgramScheme::bigram_hashed;
  throw ValidationError("unknown n-gram scheme \"" + std::string(text) + "\"");
}

NgramCounter::NgramCounter(NgramScheme scheme, const Tokenizer& tokenizer)
    : scheme_(scheme), tokenizer_(&tokenizer) {
  if (scheme == NgramScheme::unigram_explicit) {
    if (tokenizer.vocab_size() == 0)
      throw ValidationError("unigram_explicit needs a tokenizer with a finite vocabulary (got " +
                            tokenizer.id() + ")");
    counts_.assign(tokenizer.vocab_size(), 0);
  } else {
    counts_.assign(kHashedBigramDim, 0);
  }
}

void NgramCounter::add(std::string_view text) {
  const auto ids = tokenizer_->encode(text);
  if (scheme_ == NgramScheme::unigram_explicit) {
    for (auto id : ids) {
      if (id >= counts_.size()) throw ComputeError("token id out of vocabulary range");
      ++counts_[id];
    }
    total_ += ids.size();
  } else {
    for (std::size_t i = 1; i < ids.size(); ++i) ++counts_[BigramHash::bucket(ids[i - 1], ids[i])];
    if (ids.size() > 1) total_ += ids.size() - 1;
  }
}

void NgramCounter::merge(const NgramCounter& other) {
  if (other.scheme_ != scheme_ || other.counts_.size() != counts_.size())
    throw ValidationError("cannot merge counters with different schemes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

TokenDistribution NgramCounter::finish() const {
  if (total_ == 0) throw ValidationError("empty token stream: no n-grams were produced");
  TokenDistribution dist;
  dist.scheme = scheme_;
  dist.total_count = total_;
  dist.tokenizer_id = tokenizer_->id();
  dist.probs.resize(static_cast<Eigen::Index>(counts_.size()));
  const double total = static_cast<double>(total_);
  for (std::size_t i = 0; i < counts_.size(); ++i)
    dist.probs[static_cast<Eigen::Index>(i)] = static_cast<double>(counts_[i]) / total;
  return dist;
}

TokenDistribution build_distribution(std::span<const Document> docs, NgramScheme scheme,
                                     const Tokenizer& tokenizer, unsigned workers) {
  if (docs.empty()) throw ValidationError("build_distribution: no documents");
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(docs.size())));
  std::vector<NgramCounter> partial(workers, NgramCounter(scheme, tokenizer));
  const std::size_t chunk = (docs.size() + workers - 1) / workers;
  detail::parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(docs.size(), begin + chunk);
    for (std::size_t i = begin; i < end; ++i) partial[w].add(docs[i].text);
  });
  for (unsigned w = 1; w < workers; ++w) partial[0].merge(partial[w]);
  return partial[0].finish();
}

double kl_divergence(const TokenDistribution& task, const TokenDistribution& reference,
                     double epsilon) {
  if (task.scheme != reference.scheme)
    throw ValidationError("kl_divergence: scheme mismatch (" + std::string(to_string(task.scheme)) +
                          " vs " + std::string(to_string(reference.scheme)) + ")");
  return kl_divergence(task.probs, reference.probs, epsilon);
}

void save_distribution(const std::filesystem::path& path, const TokenDistribution& dist) {
  using namespace detail;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ComputeError("cannot write " + path.string());
  put_magic(out, "DSTD");
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dist.scheme));
  put_le<std::uint32_t>(out, 0);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(dist.dim()));
  put_le<std::uint64_t>(out, dist.total_count);
  put_le<std::uint64_t>(out, BigramHash::kPairMultiplier);
  put_le<std::uint64_t>(out, BigramHash::kMix1);
  put_le<std::uint64_t>(out, BigramHash::kMix2);
  put_le<std::uint64_t>(out, kHashedBigramDim);
  put_string(out, dist.tokenizer_id);
  for (Eigen::Index i = 0; i < dist.dim(); ++i) put_le<double>(out, dist.probs[i]);
  if (!out) throw ComputeError("write failed for " + path.string());
}

TokenDistribution load_distribution(const std::filesystem::path& path) {
  using namespace detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  expect_magic(in, "DSTD", path.string());
  if (get_le<std::uint32_t>(in) != 1) throw ValidationError(path.string() + ": unsupported version");
  const auto scheme = get_le<std::uint32_t>(in);
  if (scheme != 1 && scheme != 2) throw ValidationError(path.string() + ": unknown scheme");
  get_le<std::uint32_t>(in);
  TokenDistribution dist;
  dist.scheme = static_cast<NgramScheme>(scheme);
  const auto dim = get_le<std::uint64_t>(in);
  dist.total_count = get_le<std::uint64_t>(in);
  if (get_le<std::uint64_t>(in) != BigramHash::kPairMultiplier ||
      get_le<std::uint64_t>(in) != BigramHash::kMix1 ||
      get_le<std::uint64_t>(in) != BigramHash::kMix2 ||
      get_le<std::uint64_t>(in) != kHashedBigramDim)
    throw ValidationError(path.string() + ": hash constants differ from this build");
  dist.tokenizer_id = get_string(in);
  if (dist.scheme == NgramScheme::bigram_hashed && dim != kHashedBigramDim)
    throw ValidationError(path.string() + ": hashed bigram distribution must have dim 10000");
  dist.probs.resize(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < dist.probs.size(); ++i) dist.probs[i] = get_le<double>(in);
  return dist;
}

}  // namespace datasim
