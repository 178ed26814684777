#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "peftdebias/forward.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"
#include "peftdebias/train.hpp"

namespace peftdebias {
namespace {

// Finite-difference oracle for every trainable coordinate: central
// differences at eps = 1e-4 against the analytic gradient. A coordinate
// passes when the relative error |a - f| / max(|a|, |f|) stays below 1e-4,
// with an absolute floor of 1e-7 absorbing the O(eps^2) truncation noise
// of the difference quotient on near-zero gradients.

constexpr double kEps = 1e-4;
constexpr double kRelTol = 1e-4;
constexpr double kAbsFloor = 1e-7;

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.vocab_size = 14;
  c.max_seq = 12;
  c.num_classes = 3;
  return c;
}

struct GradCase {
  TransformerParams backbone;
  PeftParams peft;  // kind none -> plain backbone
  Batch batch;
  LossKind loss_kind = LossKind::mlm;
  std::vector<double> class_weights;  // empty -> none

  ModelView view() const {
    return ModelView{&backbone, peft.kind() == PeftKind::none ? nullptr : &peft};
  }

  double loss() const {
    const std::vector<double>* w = class_weights.empty() ? nullptr : &class_weights;
    if (loss_kind == LossKind::mlm)
      return compute_loss_mlm(forward_mlm(view(), batch), batch.mlm_labels);
    return compute_loss_classification(forward_cls(view(), batch), batch.class_labels, w);
  }
};

Batch mlm_batch() {
  Batch batch = Batch::from_sequences({{Vocabulary::kCls, 6, 7, 8, 9, Vocabulary::kSep},
                                       {Vocabulary::kCls, 10, 11, Vocabulary::kSep}});
  batch.mlm_labels.assign(static_cast<std::size_t>(batch.size) * batch.width, -1);
  // predict a few positions; include a [MASK] input and a kept token
  batch.token_ids[1] = Vocabulary::kMask;
  batch.mlm_labels[1] = 6;
  batch.mlm_labels[3] = 8;
  batch.mlm_labels[static_cast<std::size_t>(batch.width) + 2] = 11;
  return batch;
}

Batch cls_batch() {
  Batch batch = Batch::from_sequences({{Vocabulary::kCls, 6, 7, 8, 9, Vocabulary::kSep},
                                       {Vocabulary::kCls, 10, 11, Vocabulary::kSep},
                                       {Vocabulary::kCls, 12, 13, 6, Vocabulary::kSep}});
  batch.class_labels = {2, 0, 1};
  return batch;
}

void check_tensor(GradCase& gcase, Matrix& param, const Matrix& analytic, const std::string& name,
                  int* checked) {
  for (std::int64_t c = 0; c < param.size(); ++c) {
    double& coord = param.data[static_cast<std::size_t>(c)];
    const double saved = coord;
    coord = saved + kEps;
    const double up = gcase.loss();
    coord = saved - kEps;
    const double down = gcase.loss();
    coord = saved;
    const double fd = (up - down) / (2.0 * kEps);
    const double a = analytic.data[static_cast<std::size_t>(c)];
    const double diff = std::abs(a - fd);
    const double rel = diff / std::max({std::abs(a), std::abs(fd), 1e-300});
    EXPECT_TRUE(diff < kAbsFloor || rel < kRelTol)
        << name << "[" << c << "]: analytic " << a << " fd " << fd;
    ++*checked;
  }
}

void check_all_gradients(GradCase& gcase) {
  const std::vector<double>* w = gcase.class_weights.empty() ? nullptr : &gcase.class_weights;
  const LossAndGradients lg = gradients(gcase.view(), gcase.batch, gcase.loss_kind, w);
  EXPECT_NEAR(lg.loss, gcase.loss(), 1e-10);

  int checked = 0;
  for_each_tensor(gcase.backbone, [&](const std::string& name, Matrix& param) {
    const Matrix* analytic = nullptr;
    for_each_tensor(const_cast<TransformerParams&>(lg.grads.backbone),
                    [&](const std::string& gname, Matrix& g) {
                      if (gname == name) analytic = &g;
                    });
    ASSERT_NE(analytic, nullptr);
    check_tensor(gcase, param, *analytic, name, &checked);
  });
  if (gcase.peft.kind() != PeftKind::none) {
    ASSERT_TRUE(lg.grads.peft.has_value());
    for_each_peft_tensor(gcase.peft, [&](const std::string& name, Matrix& param) {
      const Matrix* analytic = nullptr;
      for_each_peft_tensor(const_cast<PeftParams&>(*lg.grads.peft),
                           [&](const std::string& gname, Matrix& g) {
                             if (gname == name) analytic = &g;
                           });
      ASSERT_NE(analytic, nullptr);
      check_tensor(gcase, param, *analytic, name, &checked);
    });
    if (gcase.peft.kind() == PeftKind::sft) {
      auto& sft = gcase.peft.sft();
      const auto& gd = lg.grads.peft->sft().delta;
      for (std::size_t i = 0; i < sft.delta.size(); ++i) {
        const double saved = sft.delta[i];
        sft.delta[i] = saved + kEps;
        const double up = gcase.loss();
        sft.delta[i] = saved - kEps;
        const double down = gcase.loss();
        sft.delta[i] = saved;
        const double fd = (up - down) / (2.0 * kEps);
        const double diff = std::abs(gd[i] - fd);
        const double rel = diff / std::max({std::abs(gd[i]), std::abs(fd), 1e-300});
        EXPECT_TRUE(diff < kAbsFloor || rel < kRelTol)
            << "sft.delta[" << i << "]: analytic " << gd[i] << " fd " << fd;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 100);
}

GradCase base_case(LossKind kind, std::uint64_t seed) {
  GradCase gcase;
  Rng rng(seed);
  gcase.backbone = init_params(tiny_config(), rng);
  gcase.loss_kind = kind;
  gcase.batch = kind == LossKind::mlm ? mlm_batch() : cls_batch();
  return gcase;
}

// Randomize PEFT tensors so the identity-at-init zeros do not hide wiring
// mistakes (a zero up-projection would zero the down-projection gradient).
void randomize_peft(PeftParams& peft, std::uint64_t seed) {
  Rng rng(seed);
  for_each_peft_tensor(peft, [&](const std::string&, Matrix& m) { fill_normal(m, rng, 0.05); });
  if (peft.kind() == PeftKind::sft)
    for (double& dv : peft.sft().delta) dv = rng.normal(0.0, 0.05);
}

TEST(GradCheck, PlainBackboneMlm) {
  GradCase gcase = base_case(LossKind::mlm, 42);
  check_all_gradients(gcase);
}

TEST(GradCheck, PlainBackboneClassification) {
  GradCase gcase = base_case(LossKind::classification, 43);
  check_all_gradients(gcase);
}

TEST(GradCheck, ClassificationWithClassWeights) {
  GradCase gcase = base_case(LossKind::classification, 44);
  gcase.class_weights = {1.0, 10.0, 3.0};
  check_all_gradients(gcase);
}

TEST(GradCheck, AdapterMlm) {
  GradCase gcase = base_case(LossKind::mlm, 45);
  Rng rng(1);
  gcase.peft = make_adapter(gcase.backbone.config, 3, rng);
  randomize_peft(gcase.peft, 7);
  check_all_gradients(gcase);
}

TEST(GradCheck, AdapterClassification) {
  GradCase gcase = base_case(LossKind::classification, 46);
  Rng rng(2);
  gcase.peft = make_adapter(gcase.backbone.config, 2, rng);
  randomize_peft(gcase.peft, 8);
  check_all_gradients(gcase);
}

TEST(GradCheck, PromptMlm) {
  GradCase gcase = base_case(LossKind::mlm, 47);
  gcase.peft = make_prompt(gcase.backbone.config, 3);
  randomize_peft(gcase.peft, 9);
  check_all_gradients(gcase);
}

TEST(GradCheck, PromptClassification) {
  GradCase gcase = base_case(LossKind::classification, 48);
  gcase.peft = make_prompt(gcase.backbone.config, 2);
  randomize_peft(gcase.peft, 10);
  check_all_gradients(gcase);
}

TEST(GradCheck, LoraMlm) {
  GradCase gcase = base_case(LossKind::mlm, 49);
  Rng rng(3);
  gcase.peft = make_lora(gcase.backbone.config, 2, 2.0, rng);
  randomize_peft(gcase.peft, 11);
  check_all_gradients(gcase);
}

TEST(GradCheck, LoraClassification) {
  GradCase gcase = base_case(LossKind::classification, 50);
  Rng rng(4);
  gcase.peft = make_lora(gcase.backbone.config, 1, 1.0, rng);
  randomize_peft(gcase.peft, 12);
  check_all_gradients(gcase);
}

PeftParams make_test_sft(const TransformerParams& backbone, std::uint64_t seed) {
  // scatter a mask across several tensors
  SftParams sft;
  FlatIndex idx = FlatIndex::build(const_cast<TransformerParams&>(backbone));
  Rng rng(seed);
  std::set<std::int64_t> coords;
  while (coords.size() < 40)
    coords.insert(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(idx.total))));
  sft.mask.assign(coords.begin(), coords.end());
  sft.delta.assign(sft.mask.size(), 0.0);
  PeftParams peft;
  peft.params = std::move(sft);
  return peft;
}

TEST(GradCheck, SftMlm) {
  GradCase gcase = base_case(LossKind::mlm, 51);
  gcase.peft = make_test_sft(gcase.backbone, 13);
  randomize_peft(gcase.peft, 13);
  check_all_gradients(gcase);
}

TEST(GradCheck, SftClassification) {
  GradCase gcase = base_case(LossKind::classification, 52);
  gcase.peft = make_test_sft(gcase.backbone, 14);
  randomize_peft(gcase.peft, 14);
  check_all_gradients(gcase);
}

TEST(GradCheck, FrozenTensorsHaveZeroGradient) {
  GradCase gcase = base_case(LossKind::mlm, 53);
  Rng rng(5);
  gcase.peft = make_adapter(gcase.backbone.config, 2, rng);
  LossAndGradients lg = gradients(gcase.view(), gcase.batch, LossKind::mlm);
  const TrainableSet upstream =
      trainable_set(PeftKind::adapter, Phase::upstream, gcase.backbone, &gcase.peft);
  zero_non_trainable(lg.grads, upstream);
  for_each_tensor(lg.grads.backbone, [&](const std::string&, Matrix& g) {
    for (double v : g.data) EXPECT_EQ(v, 0.0);
  });
  // adapter grads survive
  double total = 0.0;
  for_each_peft_tensor(*lg.grads.peft, [&](const std::string&, Matrix& g) {
    for (double v : g.data) total += std::abs(v);
  });
  EXPECT_GT(total, 0.0);
}

TEST(GradCheck, DoublingWeightsDoublesGradients) {
  GradCase gcase = base_case(LossKind::classification, 54);
  const LossAndGradients base = gradients(gcase.view(), gcase.batch, LossKind::classification);
  const std::vector<double> twos = {2.0, 2.0, 2.0};
  const LossAndGradients doubled =
      gradients(gcase.view(), gcase.batch, LossKind::classification, &twos);
  EXPECT_NEAR(doubled.loss, 2.0 * base.loss, 1e-12);
  for_each_tensor(const_cast<TransformerParams&>(base.grads.backbone),
                  [&](const std::string& name, Matrix& g) {
                    const Matrix* gd = nullptr;
                    for_each_tensor(const_cast<TransformerParams&>(doubled.grads.backbone),
                                    [&](const std::string& gname, Matrix& other) {
                                      if (gname == name) gd = &other;
                                    });
                    ASSERT_NE(gd, nullptr);
                    for (std::int64_t c = 0; c < g.size(); ++c)
                      EXPECT_NEAR(gd->data[static_cast<std::size_t>(c)],
                                  2.0 * g.data[static_cast<std::size_t>(c)], 1e-10);
                  });
}

}  // namespace
}  // namespace peftdebias
