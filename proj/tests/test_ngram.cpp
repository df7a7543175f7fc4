#include <gtest/gtest.h>

#include <map>
#include <random>

#include "datasim/error.hpp"
#include "datasim/ngram_divergence.hpp"
#include "datasim/tokenizer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace datasim;

namespace {

std::vector<Document> make_docs(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n; ++i) {
    std::string text;
    const std::size_t len = 1 + gen() % 12;
    for (std::size_t t = 0; t < len; ++t) text += (t ? " " : "") + ("w" + std::to_string(gen() % vocab));
    docs.push_back({"d" + std::to_string(i), text, {}});
  }
  return docs;
}

std::vector<double> random_histogram(std::mt19937_64& gen, std::size_t dim, bool sparse) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> h(dim);
  double s = 0;
  for (auto& v : h) {
    v = (sparse && u(gen) < 0.3) ? 0.0 : u(gen);
    s += v;
  }
  if (s == 0) h[0] = s = 1;
  for (auto& v : h) v /= s;
  return h;
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TEST(Tokenizer, SplitWhitespace) {
  const auto t = split_whitespace("  a\tbb \n c  ");
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[0], "a");
  EXPECT_EQ(t[1], "bb");
  EXPECT_EQ(t[2], "c");
  EXPECT_TRUE(split_whitespace(" \t ").empty());
}

TEST(Tokenizer, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Tokenizer, VocabLookupAndUnknown) {
  VocabTokenizer tok({"b", "a", "c"});
  EXPECT_EQ(tok.vocab_size(), 4u);
  EXPECT_EQ(tok.encode("a b zzz c"), (std::vector<std::uint64_t>{1, 0, tok.unk_id(), 2}));
  EXPECT_EQ(tok.id().rfind("vocab:", 0), 0u);
  EXPECT_THROW(VocabTokenizer({"a", "a"}), ValidationError);
}

TEST(Tokenizer, VocabSaveLoadKeepsId) {
  testutil::TempDir dir;
  VocabTokenizer tok({"x", "y", "z"});
  tok.save(dir / "v.txt");
  const auto back = VocabTokenizer::load(dir / "v.txt");
  EXPECT_EQ(back.tokens(), tok.tokens());
  EXPECT_EQ(back.id(), tok.id());
}

TEST(Tokenizer, BuildVocabularyIsSortedUnique) {
  const std::vector<Document> docs{{"1", "b a b", {}}, {"2", "c a", {}}};
  EXPECT_EQ(build_vocabulary(docs).tokens(), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Tokenizer, BytesAndFactory) {
  ByteTokenizer bytes;
  EXPECT_EQ(bytes.encode("A\xff"), (std::vector<std::uint64_t>{65, 255}));
  EXPECT_EQ(make_tokenizer(TokenizerKind::whitespace_hash)->vocab_size(), 0u);
  EXPECT_THROW(make_tokenizer(TokenizerKind::vocab), ValidationError);
  EXPECT_THROW(parse_tokenizer_kind("sentencepiece"), ValidationError);
}

TEST(BigramHash, MatchesSpelledOutMixer) {
  auto manual = [](std::uint64_t a, std::uint64_t b) {
    std::uint64_t h = a * 0x9E3779B97F4A7C15ULL + b;
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
    h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
    return (h ^ (h >> 31)) % 10000;
  };
  std::mt19937_64 gen(5);
  for (int i = 0; i < 1000; ++i) {
    const auto a = gen(), b = gen();
    EXPECT_EQ(BigramHash::bucket(a, b), manual(a, b));
  }
  static_assert(BigramHash::bucket(1, 2) < kHashedBigramDim);
  EXPECT_NE(BigramHash::bucket(1, 2), BigramHash::bucket(2, 1));
}

// Distribution counts equal a brute-force count over the raw token lists.
TEST(Distribution, MatchesBruteForceCounts) {
  const auto docs = make_docs(200, 40, 3);
  const auto tok = build_vocabulary(docs);

  std::map<std::size_t, double> uni, bi;
  double uni_total = 0, bi_total = 0;
  for (const auto& d : docs) {
    const auto ids = tok.encode(d.text);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      uni[ids[i]] += 1;
      uni_total += 1;
      if (i + 1 < ids.size()) {
        bi[BigramHash::bucket(ids[i], ids[i + 1])] += 1;
        bi_total += 1;
      }
    }
  }
  const auto u = build_distribution(docs, NgramScheme::unigram_explicit, tok);
  ASSERT_EQ(static_cast<std::size_t>(u.dim()), tok.vocab_size());
  EXPECT_EQ(u.total_count, static_cast<std::uint64_t>(uni_total));
  for (Eigen::Index i = 0; i < u.dim(); ++i) EXPECT_DOUBLE_EQ(u.probs[i], uni[i] / uni_total);

  const auto b = build_distribution(docs, NgramScheme::bigram_hashed, tok);
  ASSERT_EQ(b.dim(), static_cast<Eigen::Index>(kHashedBigramDim));
  EXPECT_EQ(b.total_count, static_cast<std::uint64_t>(bi_total));
  for (const auto& [k, v] : bi) EXPECT_DOUBLE_EQ(b.probs[static_cast<Eigen::Index>(k)], v / bi_total);
}

TEST(Distribution, BigramsDoNotCrossDocuments) {
  const std::vector<Document> docs{{"1", "a b", {}}, {"2", "c d", {}}, {"3", "e", {}}};
  WhitespaceHashTokenizer tok;
  EXPECT_EQ(build_distribution(docs, NgramScheme::bigram_hashed, tok).total_count, 2u);
}

TEST(Distribution, IndependentOfWorkerCount) {
  const auto docs = make_docs(3000, 300, 8);
  WhitespaceHashTokenizer tok;
  const auto one = build_distribution(docs, NgramScheme::bigram_hashed, tok, 1);
  for (unsigned w : {2u, 3u, 8u}) {
    const auto many = build_distribution(docs, NgramScheme::bigram_hashed, tok, w);
    EXPECT_EQ(one.total_count, many.total_count);
    EXPECT_TRUE((one.probs.array() == many.probs.array()).all()) << w << " workers";
  }
}

TEST(Distribution, ErrorsOnEmptyStreamAndUnboundedUnigrams) {
  WhitespaceHashTokenizer hashed;
  VocabTokenizer tok({"a"});
  EXPECT_THROW(build_distribution(std::vector<Document>{{"1", "   ", {}}}, NgramScheme::unigram_explicit, tok),
               ValidationError);
  EXPECT_THROW(build_distribution(std::vector<Document>{{"1", "a b", {}}}, NgramScheme::unigram_explicit, hashed),
               ValidationError);
}

TEST(Kl, MatchesExtendedPrecisionOracle) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dim = 2 + gen() % 63;
    const auto p = random_histogram(gen, dim, trial % 2 == 0);
    const auto q = random_histogram(gen, dim, trial % 3 == 0);
    const double eps = trial % 5 == 0 ? 1e-4 : 1e-9;
    EXPECT_NEAR(kl_divergence(to_eigen(p), to_eigen(q), eps), oracle::kl(p, q, eps), 1e-12);
  }
}

TEST(Kl, ZeroOnIdenticalAndNonNegative) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t dim = 1 + gen() % 64;
    const auto p = random_histogram(gen, dim, true);
    const auto q = random_histogram(gen, dim, true);
    EXPECT_EQ(kl_divergence(to_eigen(p), to_eigen(p), 1e-9), 0.0);
    EXPECT_GE(kl_divergence(to_eigen(p), to_eigen(q), 1e-9), 0.0);
  }
}

TEST(Kl, AcceptsExpressionsAndFloatVectors) {
  Eigen::Vector4f p(0.1f, 0.2f, 0.3f, 0.4f);
  Eigen::Vector4d q(0.25, 0.25, 0.25, 0.25);
  const double direct = kl_divergence(p.cast<double>().eval(), q, 1e-9);
  EXPECT_DOUBLE_EQ(kl_divergence(p, q, 1e-9), direct);
  EXPECT_DOUBLE_EQ(kl_divergence(2.0 * q, q * 2.0, 1e-9), 0.0);
}

TEST(Kl, Errors) {
  EXPECT_THROW(kl_divergence(Eigen::Vector2d(0.5, 0.5), Eigen::Vector3d(0.2, 0.3, 0.5), 1e-9), ValidationError);
  EXPECT_THROW(kl_divergence(Eigen::Vector2d(0.5, 0.5), Eigen::Vector2d(0.5, 0.5), 0.0), ValidationError);
  TokenDistribution a{NgramScheme::unigram_explicit, Eigen::Vector2d(0.5, 0.5), 2, "t"};
  TokenDistribution b{NgramScheme::bigram_hashed, Eigen::Vector2d(0.5, 0.5), 2, "t"};
  EXPECT_THROW(kl_divergence(a, b), ValidationError);
}

TEST(Kl, DirectionIsTaskGivenReference) {
  // A task concentrated on one token is cheap to explain by a broad reference,
  // not the other way round.
  TokenDistribution task{NgramScheme::unigram_explicit, Eigen::Vector3d(1.0, 0.0, 0.0), 1, "t"};
  TokenDistribution ref{NgramScheme::unigram_explicit, Eigen::Vector3d(1.0 / 3, 1.0 / 3, 1.0 / 3), 3, "t"};
  EXPECT_NEAR(kl_divergence(task, ref), std::log(3.0), 1e-6);
  EXPECT_GT(kl_divergence(ref, task), kl_divergence(task, ref));
}

TEST(DistributionFile, RoundTripAndCorruption) {
  testutil::TempDir dir;
  const auto docs = make_docs(50, 30, 2);
  const auto tok = build_vocabulary(docs);
  const auto d = build_distribution(docs, NgramScheme::bigram_hashed, tok);
  save_distribution(dir / "d.bin", d);
  const auto back = load_distribution(dir / "d.bin");
  EXPECT_EQ(back.scheme, d.scheme);
  EXPECT_EQ(back.total_count, d.total_count);
  EXPECT_EQ(back.tokenizer_id, d.tokenizer_id);
  EXPECT_TRUE((back.probs.array() == d.probs.array()).all());

  auto bytes = testutil::read_text(dir / "d.bin");
  bytes[0] = 'X';
  testutil::write_text(dir / "bad.bin", bytes);
  EXPECT_THROW(load_distribution(dir / "bad.bin"), ValidationError);
  testutil::write_text(dir / "short.bin", testutil::read_text(dir / "d.bin").substr(0, 40));
  EXPECT_THROW(load_distribution(dir / "short.bin"), ValidationError);
}
