#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "peftdebias/corpus.hpp"
#include "peftdebias/rng.hpp"
#include "peftdebias/text.hpp"

namespace peftdebias {
namespace {

TEST(NormalizeText, StripsUrlsAndMentions) {
  EXPECT_EQ(normalize_text("Check https://x.co @user now"), "check now");
  EXPECT_EQ(normalize_text("see www.example.com and http://a.b please"), "see and please");
}

TEST(NormalizeText, Lowercases) { EXPECT_EQ(normalize_text("Hello World"), "hello world"); }

TEST(NormalizeText, EmptyInput) { EXPECT_EQ(normalize_text(""), ""); }

TEST(NormalizeText, CollapsesWhitespace) {
  EXPECT_EQ(normalize_text("  a \t b\n c  "), "a b c");
}

TEST(NormalizeText, Idempotent) {
  const std::string samples[] = {"Check https://x.co @user now", "A  B\tC", "", "плэйн ascii only",
                                 "@a @b www.c.d e"};
  for (const auto& s : samples) {
    const std::string once = normalize_text(s);
    EXPECT_EQ(normalize_text(once), once);
  }
}

TEST(Tokenize, WrapsWithClsSep) {
  Vocabulary v = build_vocab({"he is a doctor"}, 1);
  const auto ids = tokenize("he is a doctor", v);
  ASSERT_EQ(ids.size(), 6u);
  EXPECT_EQ(ids.front(), Vocabulary::kCls);
  EXPECT_EQ(ids.back(), Vocabulary::kSep);
  EXPECT_EQ(ids[1], v.id_of("he"));
  EXPECT_EQ(ids[4], v.id_of("doctor"));
}

TEST(Tokenize, OovMapsToUnk) {
  Vocabulary v = build_vocab({"a b"}, 1);
  const auto ids = tokenize("xyzzy", v);
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[1], Vocabulary::kUnk);
}

TEST(Tokenize, EmptyText) {
  Vocabulary v = build_vocab({"a"}, 1);
  const auto ids = tokenize("", v);
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[0], Vocabulary::kCls);
  EXPECT_EQ(ids[1], Vocabulary::kSep);
}

TEST(Tokenize, RoundTripsThroughDetokenize) {
  Vocabulary v = build_vocab({"the quick brown fox jumps over the lazy dog"}, 1);
  const std::string text = "the quick dog jumps";
  EXPECT_EQ(detokenize(tokenize(text, v), v), text);
}

TEST(BuildVocab, MinFreqFilters) {
  Vocabulary v = build_vocab({"a a b"}, 2);
  EXPECT_EQ(v.size(), Vocabulary::kNumSpecials + 1);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
}

TEST(BuildVocab, LexicographicTieBreak) {
  Vocabulary v = build_vocab({"a b", "a b"}, 1);
  EXPECT_EQ(v.id_of("a"), Vocabulary::kNumSpecials);
  EXPECT_EQ(v.id_of("b"), Vocabulary::kNumSpecials + 1);
}

TEST(BuildVocab, EmptyCorpusErrors) {
  EXPECT_THROW(build_vocab({}, 1), std::runtime_error);
  EXPECT_THROW(build_vocab({"a"}, 2), std::runtime_error);
}

TEST(BuildVocab, Deterministic) {
  const std::vector<std::string> texts = {"b a c a", "c c d"};
  Vocabulary v1 = build_vocab(texts, 1);
  Vocabulary v2 = build_vocab(texts, 1);
  EXPECT_EQ(v1.id_to_token, v2.id_to_token);
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  Vocabulary v = build_vocab({"the quick brown fox"}, 1);
  const std::string path = testing::TempDir() + "vocab_roundtrip.txt";
  v.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  EXPECT_EQ(v.id_to_token, loaded.id_to_token);
  std::remove(path.c_str());
}

class AxisFile : public testing::Test {
 protected:
  std::string write(const std::string& content) {
    path_ = testing::TempDir() + "axis_test.txt";
    std::ofstream out(path_);
    out << content;
    out.close();
    return path_;
  }
  void TearDown() override {
    if (!path_.empty()) std::remove(path_.c_str());
  }
  std::string path_;
};

TEST_F(AxisFile, GenderTwoTuples) {
  BiasAxis axis = load_bias_axis(write("he,she\nboy,girl\n"));
  EXPECT_EQ(axis.name, AxisName::gender);
  EXPECT_EQ(axis.tuples.size(), 2u);
  EXPECT_EQ(axis.arity(), 2);
}

TEST_F(AxisFile, RaceSingleTriple) {
  BiasAxis axis = load_bias_axis(write("black,caucasian,asian\n"));
  EXPECT_EQ(axis.name, AxisName::race);
  EXPECT_EQ(axis.tuples.size(), 1u);
  EXPECT_EQ(axis.arity(), 3);
}

TEST_F(AxisFile, DuplicateAcrossTuplesErrors) {
  EXPECT_THROW(load_bias_axis(write("he,she\nhe,him\n")), std::runtime_error);
}

TEST_F(AxisFile, MixedArityErrors) {
  EXPECT_THROW(load_bias_axis(write("he,she\nblack,caucasian,asian\n")), std::runtime_error);
}

TEST_F(AxisFile, DuplicateWithinTupleErrors) {
  EXPECT_THROW(load_bias_axis(write("he,he\n")), std::runtime_error);
}

TEST_F(AxisFile, CommentsAndCaseFolding) {
  BiasAxis axis = load_bias_axis(write("# gender attribute words\nHe,She\n"));
  ASSERT_EQ(axis.tuples.size(), 1u);
  EXPECT_EQ(axis.tuples[0][0], "he");
  EXPECT_EQ(axis.tuples[0][1], "she");
}

TEST(LabeledCorpusFile, ParsesClassesAndAnnotations) {
  const std::string path = testing::TempDir() + "labeled_test.tsv";
  {
    std::ofstream out(path);
    out << "# classes: nurse engineer\n";
    out << "nurse\tg:female\tshe works at the hospital\n";
    out << "engineer\tg:male\the builds machines\n";
    out << "nurse\tr:black|asian\tthe nurse arrived\n";
  }
  Vocabulary v = build_vocab({"she works at the hospital he builds machines the nurse arrived"}, 1);
  LabeledCorpus corpus = load_labeled_corpus(path, v);
  ASSERT_EQ(corpus.examples.size(), 3u);
  EXPECT_EQ(corpus.num_classes(), 2);
  EXPECT_EQ(corpus.examples[0].label, 0);
  ASSERT_TRUE(corpus.examples[0].protected_attr.gender.has_value());
  EXPECT_EQ(*corpus.examples[0].protected_attr.gender, Gender::female);
  EXPECT_EQ(corpus.examples[2].protected_attr.race_mentions.size(), 2u);
  std::remove(path.c_str());
}

TEST(ProtectedField, FormatParsesBack) {
  ProtectedAnnotation ann;
  ann.gender = Gender::female;
  ann.race_mentions = {"black", "asian"};
  const ProtectedAnnotation parsed = parse_protected(format_protected(ann), "test");
  EXPECT_EQ(parsed.gender, ann.gender);
  EXPECT_EQ(parsed.race_mentions, ann.race_mentions);
}

}  // namespace
}  // namespace peftdebias
