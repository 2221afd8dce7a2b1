#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "support/fixtures.hpp"
#include "support/tempdir.hpp"
#include "twinlab/corpus.hpp"
#include "twinlab/corpus_stats.hpp"
#include "twinlab/random.hpp"
#include "twinlab/textcore.hpp"

namespace tc = twinlab::textcore;
using tc::TokenSeq;
using tc::Vocabulary;

namespace {

using twinlab::testkit::TempDir;

std::vector<TokenSeq> mini_corpus() { return tc::read_corpus(twinlab::testkit::data_path("mini_corpus.txt")); }

}  // namespace

TEST(Tokenize, SplitsPunctuationAndLowercases) {
  EXPECT_EQ(tc::tokenize("The cat sat."), (TokenSeq{"the", "cat", "sat", "."}));
  EXPECT_EQ(tc::tokenize("don't"), (TokenSeq{"don", "'", "t"}));
  EXPECT_EQ(tc::tokenize("  Hello,\tWORLD!  "), (TokenSeq{"hello", ",", "world", "!"}));
}

TEST(Tokenize, EmptyInputThrows) {
  EXPECT_THROW(tc::tokenize(""), twinlab::EmptySentence);
  EXPECT_THROW(tc::tokenize(" \t\n "), twinlab::EmptySentence);
}

TEST(Tokenize, KeepsNonAsciiBytesInsideWords) {
  EXPECT_EQ(tc::tokenize("Caf\xc3\xa9 ole"), (TokenSeq{"caf\xc3\xa9", "ole"}));
}

TEST(Tokenize, IdempotentOnDetokenizedOutput) {
  for (const auto& s : mini_corpus()) {
    EXPECT_EQ(tc::tokenize(tc::detokenize(s)), s);
    for (const auto& t : s) {
      EXPECT_FALSE(t.empty());
      EXPECT_EQ(t.find_first_of(" \t\n\r"), std::string::npos);
    }
  }
}

TEST(Syllables, DocumentedExamples) {
  EXPECT_EQ(tc::count_syllables("cat"), 1);
  EXPECT_EQ(tc::count_syllables("simplification"), 5);
  EXPECT_EQ(tc::count_syllables("make"), 1);
  EXPECT_EQ(tc::count_syllables("table"), 2);
  EXPECT_EQ(tc::count_syllables("the"), 1);
  EXPECT_EQ(tc::count_syllables("rhythm"), 1);
  EXPECT_EQ(tc::count_syllables("95"), 1);
  EXPECT_EQ(tc::count_syllables("'"), 1);
}

TEST(Syllables, AtLeastOneForEveryCorpusWord) {
  for (const auto& s : mini_corpus())
    for (const auto& t : s) EXPECT_GE(tc::count_syllables(t), 1) << t;
}

TEST(Vocabulary, ReservedIdsAndFrequencyOrder) {
  const std::vector<TokenSeq> corpus = {{"b", "a", "b"}, {"c", "b", "a"}};
  const auto v = Vocabulary::build(corpus, 100);
  ASSERT_EQ(v.size(), 9u);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_EQ(v.token(5), "<2lower>");
  EXPECT_EQ(v.id("b"), 6u);
  EXPECT_EQ(v.id("a"), 7u);
  EXPECT_EQ(v.id("c"), 8u);
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
}

TEST(Vocabulary, MaxSizeCountsReservedIds) {
  const std::vector<TokenSeq> corpus = {{"b", "a", "b"}, {"c", "b", "a"}};
  const auto v = Vocabulary::build(corpus, 7);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_TRUE(v.contains("b"));
  EXPECT_FALSE(v.contains("a"));
  EXPECT_THROW(Vocabulary::build(corpus, 3), std::invalid_argument);
}

TEST(Vocabulary, CorpusTextNeverProducesReservedTokens) {
  const auto sents = std::vector<TokenSeq>{tc::tokenize("<pad> <eos> <2upper>")};
  const auto v = Vocabulary::build(sents, 100);
  for (std::size_t id = Vocabulary::kReserved; id < v.size(); ++id)
    for (auto name : Vocabulary::kReservedNames) EXPECT_NE(v.token(id), name);
}

TEST(Vocabulary, RoundTripsThroughTokenList) {
  const auto v = Vocabulary::build(mini_corpus(), 50);
  const auto w = Vocabulary::from_tokens(v.tokens());
  EXPECT_EQ(w.tokens(), v.tokens());
  for (const auto& t : v.tokens()) EXPECT_EQ(w.id(t), v.id(t));
  auto broken = v.tokens();
  broken[2] = "<oops>";
  EXPECT_THROW(Vocabulary::from_tokens(broken), twinlab::ConfigError);
  auto dup = v.tokens();
  dup.push_back(dup.back());
  EXPECT_THROW(Vocabulary::from_tokens(dup), twinlab::ConfigError);
}

TEST(EncodeIds, LayoutUnknownAndRoundTrip) {
  const std::vector<TokenSeq> corpus = {{"the", "cat"}};
  const auto v = Vocabulary::build(corpus, 100);
  const auto ids = tc::encode_ids(v, {"the", "cat"}, tc::Task::Upper);
  EXPECT_EQ(ids, (std::vector<std::size_t>{4, v.id("the"), v.id("cat"), 2}));
  const auto lower = tc::encode_ids(v, {"the", "dog"}, tc::Task::Lower);
  EXPECT_EQ(lower, (std::vector<std::size_t>{5, v.id("the"), 3, 2}));
  EXPECT_EQ(tc::decode_ids(v, ids), (TokenSeq{"the", "cat"}));
  EXPECT_EQ(tc::decode_ids(v, tc::encode_target(v, {"cat", "the"})), (TokenSeq{"cat", "the"}));
}

TEST(Partition, SeparatesAndDropsTheGap) {
  const auto easy = tc::tokenize("The cat sat on the mat.");                            // 116.1
  const auto hard = tc::tokenize("Comprehensive examinations are administered annually.");  // -102.8
  const auto mid = tc::tokenize("The committee approved the plan today.");
  const double mid_fre = twinlab::metrics::fre(mid);
  ASSERT_GT(mid_fre, 0.0);
  const std::vector<TokenSeq> sents = {easy, hard, mid};
  const auto split = tc::partition_corpus(sents, mid_fre - 1, mid_fre + 1);
  EXPECT_EQ(split.hard, std::vector<TokenSeq>{hard});
  EXPECT_EQ(split.easy, std::vector<TokenSeq>{easy});
  EXPECT_EQ(split.dropped_index, std::vector<std::size_t>{2});
}

TEST(Partition, EmptyBucketThrowsNamingThresholds) {
  const std::vector<TokenSeq> sents = {tc::tokenize("The cat sat on the mat.")};
  try {
    tc::partition_corpus(sents, 50, 70);
    FAIL() << "expected PartitionEmpty";
  } catch (const twinlab::PartitionEmpty& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("50.000000"), std::string::npos);
    EXPECT_NE(msg.find("70.000000"), std::string::npos);
  }
  EXPECT_THROW(tc::partition_corpus(sents, 70, 50), std::invalid_argument);
}

TEST(Partition, MiniCorpusBucketsAreDisjointAndExhaustive) {
  const auto sents = mini_corpus();
  const auto split = tc::partition_corpus(sents, 50, 70);
  std::vector<std::size_t> all = split.hard_index;
  all.insert(all.end(), split.easy_index.begin(), split.easy_index.end());
  all.insert(all.end(), split.dropped_index.begin(), split.dropped_index.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(sents.size());
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
  for (std::size_t i : split.hard_index) EXPECT_LT(twinlab::metrics::fre(sents[i]), 50);
  for (std::size_t i : split.easy_index) EXPECT_GT(twinlab::metrics::fre(sents[i]), 70);

  const auto stats = twinlab::metrics::corpus_stats(split, {});
  EXPECT_LT(stats.hard.fre, 50);
  EXPECT_GT(stats.easy.fre, 70);
}

TEST(OoaPairs, ForcedPairAndInvalidCount) {
  tc::CorpusSplit split;
  split.hard = {{"hard"}};
  split.easy = {{"easy"}};
  const auto pairs = tc::make_ooa_pairs(split, 1, 7);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].source, TokenSeq{"hard"});
  EXPECT_EQ(pairs[0].target, TokenSeq{"easy"});
  EXPECT_THROW(tc::make_ooa_pairs(split, 0, 7), twinlab::InvalidCount);
  EXPECT_THROW(tc::make_ooa_pairs(split, -3, 7), twinlab::InvalidCount);
}

TEST(OoaPairs, DeterministicAndExhaustsBucketsBeforeRepeating) {
  const auto split = tc::partition_corpus(mini_corpus(), 50, 70);
  const auto a = tc::make_ooa_pairs(split, 100, 11);
  const auto b = tc::make_ooa_pairs(split, 100, 11);
  const auto c = tc::make_ooa_pairs(split, 100, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(tc::pairs_tsv(a), tc::pairs_tsv(b));
  std::set<TokenSeq> first_round;
  for (std::size_t i = 0; i < split.hard.size(); ++i) first_round.insert(a[i].source);
  EXPECT_EQ(first_round.size(), split.hard.size());
}

TEST(OoaPairs, ShuffledMiniCorpusIsDissimilar) {
  const auto split = tc::partition_corpus(mini_corpus(), 50, 70);
  const auto pairs = tc::make_ooa_pairs(split, 200, 3);
  const auto stats = twinlab::metrics::corpus_stats(split, pairs);
  EXPECT_LT(stats.sim, 0.05);
  EXPECT_EQ(stats.pairs, 200u);
}

TEST(CorpusFiles, SplitAndPairsRoundTrip) {
  TempDir tmp;
  auto split = tc::partition_corpus(mini_corpus(), 50, 70);
  split.provenance = "mini corpus";
  tc::write_split(tmp.path, split, 42);
  const auto back = tc::read_split(tmp.path);
  EXPECT_EQ(back.hard, split.hard);
  EXPECT_EQ(back.easy, split.easy);
  EXPECT_EQ(back.hard_max_fre, 50);
  EXPECT_EQ(back.easy_min_fre, 70);
  EXPECT_EQ(back.provenance, "mini corpus");

  const auto pairs = tc::make_ooa_pairs(split, 30, 5);
  tc::write_pairs(tmp.path / "pairs.tsv", pairs);
  EXPECT_EQ(tc::read_pairs(tmp.path / "pairs.tsv"), pairs);

  twinlab::io::write_file_atomic(tmp.path / "bad.tsv", "no tab here\n");
  EXPECT_THROW(tc::read_pairs(tmp.path / "bad.tsv"), twinlab::ConfigError);
}

TEST(Random, DerivedStreamsDifferAndStateRestores) {
  EXPECT_NE(twinlab::derive_seed(1, 0), twinlab::derive_seed(1, 1));
  EXPECT_NE(twinlab::derive_seed(1, 0), twinlab::derive_seed(2, 0));
  twinlab::Rng r(9);
  for (int i = 0; i < 10; ++i) r.next();
  const auto saved = r.state();
  const auto x = r.uniform();
  twinlab::Rng s(0);
  s.restore(saved);
  EXPECT_EQ(s.uniform(), x);
}
