#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "peftdebias/config.hpp"
#include "peftdebias/corpus.hpp"
#include "peftdebias/synthetic.hpp"

namespace peftdebias {
namespace {

class SyntheticSuites : public testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::string(testing::TempDir() + "suites");
    SyntheticOptions opts;
    opts.seed = 5;
    opts.bios_train = 120;
    opts.bios_eval_per_cell = 10;
    opts.hate_train = 160;
    opts.hate_eval_clean_per_ident = 8;
    opts.hate_eval_hate_per_ident = 3;
    opts.hate_eval_noident_clean = 20;
    opts.hate_eval_noident_hate = 8;
    opts.nli_train = 150;
    opts.nli_eval = 60;
    write_synthetic_suites(*dir_, opts);
  }
  static void TearDownTestSuite() {
    std::filesystem::remove_all(*dir_);
    delete dir_;
    dir_ = nullptr;
  }
  static std::string* dir_;
};

std::string* SyntheticSuites::dir_ = nullptr;

TEST_F(SyntheticSuites, EmitsAllFiles) {
  for (const char* f :
       {"vocab.txt", "pretrain.txt", "gender_axis.txt", "race_axis.txt", "grid.cfg",
        "bios/train.tsv", "bios/eval.tsv", "bios/upstream.txt", "bios/crows.tsv",
        "bios/stereoset.tsv", "bios/base.cfg", "hate/train.tsv", "hate/eval.tsv",
        "hate/upstream.txt", "hate/identifiers.txt", "hate/iptts_templates.tsv", "hate/base.cfg",
        "nli/train.tsv", "nli/eval.tsv", "nli/occupations.txt", "nli/gender_words.txt",
        "nli/verb_phrases.txt", "nli/base.cfg"})
    EXPECT_TRUE(std::filesystem::exists(*dir_ + "/" + f)) << f;
}

TEST_F(SyntheticSuites, VocabularyCoversAxesAndCorpora) {
  const Vocabulary vocab = Vocabulary::load(*dir_ + "/vocab.txt");
  const BiasAxis gender = load_bias_axis(*dir_ + "/gender_axis.txt");
  const BiasAxis race = load_bias_axis(*dir_ + "/race_axis.txt");
  EXPECT_NO_THROW(AxisBinding::bind(gender, vocab));
  EXPECT_NO_THROW(AxisBinding::bind(race, vocab));
  const Corpus c = load_corpus(*dir_ + "/bios/upstream.txt", vocab);
  for (const auto& doc : c.documents)
    for (int id : doc) EXPECT_NE(id, Vocabulary::kUnk);
}

TEST_F(SyntheticSuites, BiosTrainSkewAndBalancedEval) {
  const Vocabulary vocab = Vocabulary::load(*dir_ + "/vocab.txt");
  const LabeledCorpus train = load_labeled_corpus(*dir_ + "/bios/train.tsv", vocab);
  EXPECT_EQ(train.num_classes(), 4);
  int congruent = 0;
  const std::map<std::string, bool> fem = {
      {"nurse", true}, {"surgeon", false}, {"teacher", true}, {"engineer", false}};
  for (const auto& ex : train.examples) {
    ASSERT_TRUE(ex.protected_attr.gender.has_value());
    const bool female = *ex.protected_attr.gender == Gender::female;
    if (female == fem.at(train.class_names[static_cast<std::size_t>(ex.label)])) ++congruent;
  }
  // planted correlation ~0.9
  EXPECT_GT(static_cast<double>(congruent) / train.examples.size(), 0.8);

  const LabeledCorpus eval = load_labeled_corpus(*dir_ + "/bios/eval.tsv", vocab);
  std::map<std::pair<int, bool>, int> cells;
  for (const auto& ex : eval.examples)
    ++cells[{ex.label, *ex.protected_attr.gender == Gender::female}];
  EXPECT_EQ(cells.size(), 8u);
  for (const auto& [cell, count] : cells) EXPECT_EQ(count, 10);
}

TEST_F(SyntheticSuites, HateEvalBalancedPerIdentifier) {
  const Vocabulary vocab = Vocabulary::load(*dir_ + "/vocab.txt");
  const LabeledCorpus eval = load_labeled_corpus(*dir_ + "/hate/eval.tsv", vocab);
  std::map<std::string, std::pair<int, int>> counts;  // ident -> (clean, hate)
  for (const auto& ex : eval.examples) {
    if (ex.protected_attr.race_mentions.empty()) continue;
    auto& c = counts[*ex.protected_attr.race_mentions.begin()];
    if (ex.label == 0)
      ++c.first;
    else
      ++c.second;
  }
  EXPECT_EQ(counts.size(), 6u);
  for (const auto& [ident, c] : counts) {
    EXPECT_EQ(c.first, 8) << ident;
    EXPECT_EQ(c.second, 3) << ident;
  }
}

TEST_F(SyntheticSuites, HateTrainPlantsPerIdentifierSkew) {
  const Vocabulary vocab = Vocabulary::load(*dir_ + "/vocab.txt");
  const LabeledCorpus train = load_labeled_corpus(*dir_ + "/hate/train.tsv", vocab);
  int black_hate = 0, black_all = 0, cauc_hate = 0, cauc_all = 0;
  for (const auto& ex : train.examples) {
    if (ex.protected_attr.race_mentions.count("black")) {
      ++black_all;
      if (ex.label == 1) ++black_hate;
    }
    if (ex.protected_attr.race_mentions.count("caucasian")) {
      ++cauc_all;
      if (ex.label == 1) ++cauc_hate;
    }
  }
  ASSERT_GT(black_all, 5);
  ASSERT_GT(cauc_all, 5);
  EXPECT_GT(static_cast<double>(black_hate) / black_all,
            static_cast<double>(cauc_hate) / cauc_all + 0.3);
}

TEST_F(SyntheticSuites, NliEvalIsUngendered) {
  const Vocabulary vocab = Vocabulary::load(*dir_ + "/vocab.txt");
  const LabeledCorpus eval = load_labeled_corpus(*dir_ + "/nli/eval.tsv", vocab);
  EXPECT_EQ(eval.num_classes(), 3);
  for (const auto& ex : eval.examples) EXPECT_FALSE(ex.protected_attr.gender.has_value());
  const LabeledCorpus train = load_labeled_corpus(*dir_ + "/nli/train.tsv", vocab);
  int gendered = 0;
  for (const auto& ex : train.examples)
    if (ex.protected_attr.gender.has_value()) ++gendered;
  EXPECT_GT(gendered, 20);
}

TEST_F(SyntheticSuites, BaseConfigsParse) {
  for (const char* f : {"bios/base.cfg", "hate/base.cfg", "nli/base.cfg"}) {
    const ExperimentConfig cfg = parse_config(*dir_ + "/" + f);
    EXPECT_FALSE(cfg.vocab_path.empty()) << f;
    EXPECT_TRUE(std::filesystem::exists(cfg.vocab_path)) << f;
    EXPECT_TRUE(std::filesystem::exists(cfg.axis_path)) << f;
    EXPECT_TRUE(std::filesystem::exists(cfg.downstream_train)) << f;
  }
}

TEST_F(SyntheticSuites, DeterministicInSeed) {
  const std::string other = testing::TempDir() + "suites_again";
  SyntheticOptions opts;
  opts.seed = 5;
  opts.bios_train = 120;
  opts.bios_eval_per_cell = 10;
  opts.hate_train = 160;
  opts.hate_eval_clean_per_ident = 8;
  opts.hate_eval_hate_per_ident = 3;
  opts.hate_eval_noident_clean = 20;
  opts.hate_eval_noident_hate = 8;
  opts.nli_train = 150;
  opts.nli_eval = 60;
  write_synthetic_suites(other, opts);
  for (const char* f : {"bios/train.tsv", "hate/train.tsv", "nli/train.tsv", "vocab.txt"}) {
    std::ifstream a(*dir_ + "/" + f), b(other + "/" + f);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << f;
  }
  std::filesystem::remove_all(other);
}

}  // namespace
}  // namespace peftdebias
