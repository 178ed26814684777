#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "peftdebias/cda.hpp"
#include "peftdebias/rng.hpp"

namespace peftdebias {
namespace {

struct CdaEnv {
  Vocabulary vocab;
  BiasAxis gender_axis;
  BiasAxis race_axis;
  AxisBinding gender;
  AxisBinding race;

  CdaEnv() {
    vocab = build_vocab({"he she is a doctor the asian man met black caucasian dog barked runs "
                         "boy girl nurse works"},
                        1);
    gender_axis.name = AxisName::gender;
    gender_axis.tuples = {{"he", "she"}, {"boy", "girl"}};
    race_axis.name = AxisName::race;
    race_axis.tuples = {{"black", "caucasian", "asian"}};
    gender = AxisBinding::bind(gender_axis, vocab);
    race = AxisBinding::bind(race_axis, vocab);
  }

  std::vector<int> seq(const std::string& text) const { return tokenize(text, vocab); }
  std::string text(const std::vector<int>& ids) const { return detokenize(ids, vocab); }
};

TEST(Counterfactuals, GenderSwap) {
  CdaEnv env;
  const auto variants = counterfactuals(env.seq("he is a doctor"), env.gender);
  ASSERT_EQ(variants.size(), 1u);
  EXPECT_EQ(env.text(variants[0]), "she is a doctor");
}

TEST(Counterfactuals, RaceRotationsConsistentAcrossSequence) {
  CdaEnv env;
  const auto variants = counterfactuals(env.seq("the asian man met the black man"), env.race);
  ASSERT_EQ(variants.size(), 2u);
  EXPECT_EQ(env.text(variants[0]), "the black man met the caucasian man");
  EXPECT_EQ(env.text(variants[1]), "the caucasian man met the asian man");
}

TEST(Counterfactuals, NoAttributeWordYieldsEmpty) {
  CdaEnv env;
  EXPECT_TRUE(counterfactuals(env.seq("a dog barked"), env.gender).empty());
}

TEST(AugmentCorpus, TwoSidedKeepsOriginalThenVariant) {
  CdaEnv env;
  Corpus corpus;
  corpus.documents = {env.seq("he runs")};
  const Corpus out = augment_corpus(corpus, env.gender, CdaConfig{true});
  ASSERT_EQ(out.documents.size(), 2u);
  EXPECT_EQ(env.text(out.documents[0]), "he runs");
  EXPECT_EQ(env.text(out.documents[1]), "she runs");
}

TEST(AugmentCorpus, UntouchedSentencePassesThrough) {
  CdaEnv env;
  Corpus corpus;
  corpus.documents = {env.seq("a dog barked")};
  const Corpus out = augment_corpus(corpus, env.gender, CdaConfig{true});
  ASSERT_EQ(out.documents.size(), 1u);
  EXPECT_EQ(env.text(out.documents[0]), "a dog barked");
}

TEST(AugmentCorpus, ArityTwoDoublesSentencesWithAttributes) {
  CdaEnv env;
  Corpus corpus;
  for (int i = 0; i < 7; ++i) corpus.documents.push_back(env.seq("she is a nurse"));
  const Corpus out = augment_corpus(corpus, env.gender, CdaConfig{true});
  EXPECT_EQ(out.documents.size(), 14u);
}

TEST(AugmentCorpus, OneSidedReplaces) {
  CdaEnv env;
  Corpus corpus;
  corpus.documents = {env.seq("he runs"), env.seq("a dog barked")};
  const Corpus out = augment_corpus(corpus, env.gender, CdaConfig{false});
  ASSERT_EQ(out.documents.size(), 2u);
  EXPECT_EQ(env.text(out.documents[0]), "she runs");
  EXPECT_EQ(env.text(out.documents[1]), "a dog barked");
}

// Random sentences over a small inventory, some attribute words included.
std::vector<int> random_sentence(const CdaEnv& env, Rng& rng) {
  const std::vector<std::string> pool = {"he",  "she",   "boy", "girl",  "doctor", "dog",
                                         "the", "asian", "black", "caucasian", "works", "a"};
  std::vector<int> ids;
  ids.push_back(Vocabulary::kCls);
  const int len = 1 + static_cast<int>(rng.uniform_int(12));
  for (int i = 0; i < len; ++i)
    ids.push_back(env.vocab.id_of(pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))]));
  ids.push_back(Vocabulary::kSep);
  return ids;
}

TEST(CdaProperties, RandomizedInvariants) {
  CdaEnv env;
  Rng rng(2024);
  int gender_hits = 0;
  int race_hits = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto seq = random_sentence(env, rng);

    const auto gvars = counterfactuals(seq, env.gender);
    if (!gvars.empty()) {
      ++gender_hits;
      ASSERT_EQ(gvars.size(), 1u);
      // involution
      const auto back = counterfactuals(gvars[0], env.gender);
      ASSERT_EQ(back.size(), 1u);
      EXPECT_EQ(back[0], seq);
      // length preserved
      EXPECT_EQ(gvars[0].size(), seq.size());
      // non-attribute positions untouched
      for (std::size_t i = 0; i < seq.size(); ++i)
        if (!env.gender.lookup.count(seq[i])) EXPECT_EQ(gvars[0][i], seq[i]);
    }

    const auto rvars = counterfactuals(seq, env.race);
    if (!rvars.empty()) {
      ++race_hits;
      ASSERT_EQ(rvars.size(), 2u);
      for (const auto& v : rvars) EXPECT_EQ(v.size(), seq.size());
      // applying the j=1 rotation three times returns the original
      std::vector<int> cur = seq;
      for (int rep = 0; rep < 3; ++rep) {
        const auto next = counterfactuals(cur, env.race);
        ASSERT_FALSE(next.empty());
        cur = next[0];
      }
      EXPECT_EQ(cur, seq);
      for (std::size_t i = 0; i < seq.size(); ++i)
        if (!env.race.lookup.count(seq[i])) {
          EXPECT_EQ(rvars[0][i], seq[i]);
          EXPECT_EQ(rvars[1][i], seq[i]);
        }
    }
  }
  // the generator must actually exercise both axes
  EXPECT_GT(gender_hits, 100);
  EXPECT_GT(race_hits, 100);
}

}  // namespace
}  // namespace peftdebias
