#include <gtest/gtest.h>

#include <cstdio>
#include <string>

#include "peftdebias/checkpoint.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"

namespace peftdebias {
namespace {

ModelConfig config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 24;
  c.vocab_size = 40;
  c.max_seq = 20;
  c.num_classes = 3;
  return c;
}

TEST(ModelCheckpoint, BitExactRoundTripWithRngState) {
  Rng rng(123);
  const TransformerParams params = init_params(config(), rng);
  rng.uniform();  // advance so the state is mid-stream
  const std::string path = testing::TempDir() + "model_roundtrip.ckpt";
  save_model_checkpoint(path, params, rng);

  Rng restored(0);
  const TransformerParams loaded = load_model_checkpoint(path, &restored);
  EXPECT_EQ(checksum(loaded), checksum(params));
  EXPECT_TRUE(loaded.config == params.config);
  for_each_tensor(const_cast<TransformerParams&>(params), [&](const std::string& name, Matrix& m) {
    for_each_tensor(const_cast<TransformerParams&>(loaded), [&](const std::string& lname, Matrix& lm) {
      if (lname == name) EXPECT_EQ(m.data, lm.data) << name;
    });
  });
  EXPECT_TRUE(restored == rng);  // identical next draws
  std::remove(path.c_str());
}

TEST(PeftCheckpoint, RoundTripsEveryKind) {
  const ModelConfig c = config();
  Rng rng(5);
  std::vector<PeftParams> pefts;
  pefts.push_back(make_adapter(c, 3, rng));
  pefts.push_back(make_prompt(c, 4));
  pefts.push_back(make_lora(c, 2, 2.0, rng));
  {
    PeftParams sft;
    SftParams s;
    s.mask = {1, 7, 300};
    s.delta = {0.25, -1.5, 3.0};
    sft.params = std::move(s);
    pefts.push_back(std::move(sft));
  }
  for (auto& peft : pefts) {
    peft.axis_name = "gender";
    for_each_peft_tensor(peft, [&](const std::string&, Matrix& m) { fill_normal(m, rng, 0.1); });
    const std::string path = testing::TempDir() + "peft_roundtrip.ckpt";
    save_peft_checkpoint(path, peft, c);
    ModelConfig loaded_cfg;
    const PeftParams loaded = load_peft_checkpoint(path, &loaded_cfg);
    EXPECT_EQ(loaded.kind(), peft.kind());
    EXPECT_EQ(loaded.axis_name, "gender");
    EXPECT_TRUE(loaded_cfg == c);
    EXPECT_EQ(checksum(loaded), checksum(peft)) << peft_kind_str(peft.kind());
    if (peft.kind() == PeftKind::sft) {
      EXPECT_EQ(loaded.sft().mask, peft.sft().mask);
      EXPECT_EQ(loaded.sft().delta, peft.sft().delta);
    }
    std::remove(path.c_str());
  }
}

TEST(PeftCheckpoint, LoadsWithoutBackbone) {
  const ModelConfig c = config();
  Rng rng(6);
  PeftParams peft = make_lora(c, 1, 1.0, rng);
  peft.axis_name = "race";
  const std::string path = testing::TempDir() + "peft_standalone.ckpt";
  save_peft_checkpoint(path, peft, c);
  const PeftParams loaded = load_peft_checkpoint(path);
  EXPECT_EQ(loaded.kind(), PeftKind::lora);
  EXPECT_EQ(loaded.lora().rank, 1);
  std::remove(path.c_str());
}

TEST(Checkpoint, RejectsWrongMagic) {
  const std::string path = testing::TempDir() + "bogus.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE and some trailing bytes";
  }
  EXPECT_THROW(load_model_checkpoint(path), std::runtime_error);
  EXPECT_THROW(load_peft_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST(Checksum, DetectsSingleCoordinateChange) {
  Rng rng(9);
  TransformerParams params = init_params(config(), rng);
  const std::uint64_t before = checksum(params);
  params.layers[1].wq.at(3, 3) += 1e-12;
  EXPECT_NE(checksum(params), before);
}

}  // namespace
}  // namespace peftdebias
