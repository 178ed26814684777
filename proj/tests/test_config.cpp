#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "peftdebias/config.hpp"

namespace peftdebias {
namespace {

class ConfigFile : public testing::Test {
 protected:
  std::string write(const std::string& content) {
    path_ = testing::TempDir() + "config_test.cfg";
    std::ofstream out(path_);
    out << content;
    return path_;
  }
  void TearDown() override {
    if (!path_.empty()) std::remove(path_.c_str());
  }
  std::string path_;
};

TEST_F(ConfigFile, MinimalConfigResolvesDefaults) {
  const ExperimentConfig cfg = parse_config(write("seed = 4\n"));
  EXPECT_DOUBLE_EQ(cfg.upstream_lr, 1e-5);
  EXPECT_EQ(cfg.upstream_steps, 1000);
  EXPECT_EQ(cfg.eval_interval, 100);
  EXPECT_EQ(cfg.upstream_batch, 16);
  EXPECT_EQ(cfg.downstream_batch, 32);
  EXPECT_EQ(cfg.downstream_epochs, 10);
  EXPECT_DOUBLE_EQ(cfg.budget_fraction, 0.01);
  EXPECT_DOUBLE_EQ(cfg.mask_prob, 0.15);
  EXPECT_EQ(cfg.method, "ft");
  EXPECT_EQ(cfg.seed, 4u);
}

TEST_F(ConfigFile, OverridesApplyLast) {
  const ExperimentConfig cfg = parse_config(write("seed = 13\nupstream.lr = 0.5\n"),
                                            {"seed=7", "upstream.lr=0.25"});
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_DOUBLE_EQ(cfg.upstream_lr, 0.25);
}

TEST_F(ConfigFile, UnknownKeyNamesTheKey) {
  try {
    parse_config(write("learning_rte = 1e-5\n"));
    FAIL() << "expected unknown-key error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rte"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(":1"), std::string::npos);  // line number
  }
}

TEST_F(ConfigFile, TypeErrorNamesLineAndKey) {
  try {
    parse_config(write("# comment\nupstream.steps = soon\n"));
    FAIL() << "expected type error";
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find(":2"), std::string::npos);
    EXPECT_NE(what.find("upstream.steps"), std::string::npos);
  }
}

TEST_F(ConfigFile, MissingEqualsIsAParseError) {
  EXPECT_THROW(parse_config(write("seed 13\n")), std::runtime_error);
}

TEST_F(ConfigFile, ValidationRejectsBadValues) {
  EXPECT_THROW(parse_config(write("peft.kind = prefix\n")), std::runtime_error);
  EXPECT_THROW(parse_config(write("upstream.lr = -1\n")), std::runtime_error);
  EXPECT_THROW(parse_config(write("upstream.eval_interval = 5000\n")), std::runtime_error);
  EXPECT_THROW(parse_config(write("peft.budget_fraction = 2\n")), std::runtime_error);
}

TEST_F(ConfigFile, RelativePathsResolveAgainstConfigDir) {
  const ExperimentConfig cfg = parse_config(write("vocab.path = sub/vocab.txt\n"));
  const std::filesystem::path expected =
      std::filesystem::absolute(testing::TempDir()) / "sub" / "vocab.txt";
  EXPECT_EQ(std::filesystem::path(cfg.vocab_path).lexically_normal(),
            expected.lexically_normal());
}

TEST_F(ConfigFile, EchoRoundTripsToIdenticalConfig) {
  const ExperimentConfig cfg = parse_config(
      write("seed = 21\npeft.kind = lora\nupstream.lr = 0.003\nvocab.path = v.txt\n"
            "downstream.selection = f1\nmodel.classes = 2\n"
            "downstream.positive_class_weight = 6.7\ntransfer.allow_axis_mismatch = true\n"));
  const std::string echo_path = testing::TempDir() + "echo.cfg";
  {
    std::ofstream out(echo_path);
    out << format_config(cfg);
  }
  const ExperimentConfig reparsed = parse_config(echo_path);
  EXPECT_TRUE(reparsed == cfg);
  EXPECT_EQ(config_hash(reparsed), config_hash(cfg));
  std::remove(echo_path.c_str());
}

TEST_F(ConfigFile, HashChangesWithContent) {
  const ExperimentConfig a = parse_config(write("seed = 1\n"));
  const ExperimentConfig b = parse_config(write("seed = 2\n"));
  EXPECT_NE(config_hash(a), config_hash(b));
}

}  // namespace
}  // namespace peftdebias
