#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "peftdebias/forward.hpp"
#include "peftdebias/model.hpp"
#include "test_util.hpp"

namespace peftdebias {
namespace {

ModelConfig small_config(int vocab = 12) {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab_size = vocab;
  c.max_seq = 16;
  c.num_classes = 2;
  return c;
}

// ---------------------------------------------------------------------
// Independent reference forward pass: plain per-position loops, no shared
// code with the library implementation beyond the parameter struct.
// ---------------------------------------------------------------------

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

Rows ref_layer_norm(const Rows& x, const Matrix& gain, const Matrix& bias) {
  Rows out(x.size(), Vec(x[0].size()));
  const int d = static_cast<int>(x[0].size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0;
    for (double v : x[i]) mean += v;
    mean /= d;
    double var = 0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= d;
    for (int j = 0; j < d; ++j)
      out[i][static_cast<std::size_t>(j)] =
          gain.at(0, j) * (x[i][static_cast<std::size_t>(j)] - mean) / std::sqrt(var + 1e-5) +
          bias.at(0, j);
  }
  return out;
}

Rows ref_matmul(const Rows& x, const Matrix& w) {
  Rows out(x.size(), Vec(static_cast<std::size_t>(w.cols), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int k = 0; k < w.rows; ++k)
      for (int j = 0; j < w.cols; ++j)
        out[i][static_cast<std::size_t>(j)] += x[i][static_cast<std::size_t>(k)] * w.at(k, j);
  return out;
}

Rows ref_forward_hidden(const TransformerParams& p, const std::vector<int>& tokens) {
  const ModelConfig& c = p.config;
  const int d = c.hidden;
  const int dh = d / c.heads;
  Rows x(tokens.size(), Vec(static_cast<std::size_t>(d)));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (int j = 0; j < d; ++j)
      x[t][static_cast<std::size_t>(j)] =
          p.tok_emb.at(tokens[t], j) + p.pos_emb.at(static_cast<int>(t), j);

  for (const auto& layer : p.layers) {
    const Rows ln1 = ref_layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    const Rows q = ref_matmul(ln1, layer.wq);
    const Rows k = ref_matmul(ln1, layer.wk);
    const Rows v = ref_matmul(ln1, layer.wv);
    Rows ctx(x.size(), Vec(static_cast<std::size_t>(d), 0.0));
    for (int h = 0; h < c.heads; ++h) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        Vec scores(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
          double s = 0;
          for (int e = 0; e < dh; ++e)
            s += q[i][static_cast<std::size_t>(h * dh + e)] *
                 k[j][static_cast<std::size_t>(h * dh + e)];
          scores[j] = s / std::sqrt(static_cast<double>(dh));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (std::size_t j = 0; j < x.size(); ++j)
          for (int e = 0; e < dh; ++e)
            ctx[i][static_cast<std::size_t>(h * dh + e)] +=
                scores[j] / z * v[j][static_cast<std::size_t>(h * dh + e)];
      }
    }
    const Rows attn_out = ref_matmul(ctx, layer.wo);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (int j = 0; j < d; ++j) x[i][static_cast<std::size_t>(j)] += attn_out[i][static_cast<std::size_t>(j)];

    const Rows ln2 = ref_layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    Rows hid = ref_matmul(ln2, layer.w1);
    for (auto& row : hid)
      for (double& val : row) val = val > 0 ? val : 0;
    const Rows ffn_out = ref_matmul(hid, layer.w2);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (int j = 0; j < d; ++j) x[i][static_cast<std::size_t>(j)] += ffn_out[i][static_cast<std::size_t>(j)];
  }
  return ref_layer_norm(x, p.final_ln_gain, p.final_ln_bias);
}

Rows ref_forward_mlm(const TransformerParams& p, const std::vector<int>& tokens) {
  const Rows h = ref_forward_hidden(p, tokens);
  Rows logits(tokens.size(), Vec(static_cast<std::size_t>(p.config.vocab_size), 0.0));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (int id = 0; id < p.config.vocab_size; ++id)
      for (int j = 0; j < p.config.hidden; ++j)
        logits[t][static_cast<std::size_t>(id)] += h[t][static_cast<std::size_t>(j)] * p.tok_emb.at(id, j);
  return logits;
}

TEST(ForwardMlm, MatchesReferenceImplementation) {
  Rng rng(0);
  const TransformerParams params = init_params(small_config(), rng);
  const std::vector<int> tokens = {Vocabulary::kCls, 7, 5, 9, Vocabulary::kSep};
  const Batch batch = Batch::from_sequences({tokens});
  const Matrix logits = forward_mlm(ModelView{&params, nullptr}, batch);
  const Rows expected = ref_forward_mlm(params, tokens);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (int id = 0; id < params.config.vocab_size; ++id) {
      const double got = logits.at(static_cast<int>(t), id);
      const double want = expected[t][static_cast<std::size_t>(id)];
      EXPECT_NEAR(got, want, std::abs(want) * 1e-6 + 1e-9);
    }
}

TEST(ForwardCls, MatchesReferenceImplementation) {
  Rng rng(3);
  const TransformerParams params = init_params(small_config(), rng);
  const std::vector<int> tokens = {Vocabulary::kCls, 6, 8, Vocabulary::kSep};
  Batch batch = Batch::from_sequences({tokens});
  batch.class_labels = {1};
  const Matrix logits = forward_cls(ModelView{&params, nullptr}, batch);
  const Rows h = ref_forward_hidden(params, tokens);
  for (int j = 0; j < params.config.num_classes; ++j) {
    double want = 0;
    for (int c = 0; c < params.config.hidden; ++c)
      want += h[0][static_cast<std::size_t>(c)] * params.cls_head.at(c, j);
    EXPECT_NEAR(logits.at(0, j), want, std::abs(want) * 1e-6 + 1e-9);
  }
}

TEST(ForwardMlm, ZeroParamsGiveUniformLogits) {
  Rng rng(0);
  TransformerParams params = init_params(small_config(), rng);
  for_each_tensor(params, [](const std::string&, Matrix& m) { m.fill(0.0); });
  const Batch batch = Batch::from_sequences({{Vocabulary::kCls, 5, 6, Vocabulary::kSep}});
  const Matrix logits = forward_mlm(ModelView{&params, nullptr}, batch);
  for (int t = 0; t < 4; ++t)
    for (int id = 0; id < params.config.vocab_size; ++id)
      EXPECT_EQ(logits.at(t, id), logits.at(t, 0));
}

TEST(ForwardCls, ZeroParamsGiveZeroLogits) {
  Rng rng(0);
  TransformerParams params = init_params(small_config(), rng);
  for_each_tensor(params, [](const std::string&, Matrix& m) { m.fill(0.0); });
  Batch batch = Batch::from_sequences({{Vocabulary::kCls, 5, Vocabulary::kSep},
                                       {Vocabulary::kCls, 6, 7, Vocabulary::kSep}});
  const Matrix logits = forward_cls(ModelView{&params, nullptr}, batch);
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < 2; ++j) EXPECT_EQ(logits.at(b, j), 0.0);
}

TEST(ForwardCls, Deterministic) {
  Rng rng(11);
  const TransformerParams params = init_params(small_config(), rng);
  const Batch batch = Batch::from_sequences({{Vocabulary::kCls, 5, 9, 10, Vocabulary::kSep}});
  const Matrix a = forward_cls(ModelView{&params, nullptr}, batch);
  const Matrix b = forward_cls(ModelView{&params, nullptr}, batch);
  EXPECT_EQ(a.data, b.data);
}

TEST(ForwardMlm, AttentionRowsSumToOne) {
  Rng rng(5);
  const TransformerParams params = init_params(small_config(), rng);
  const Batch batch = Batch::from_sequences({{Vocabulary::kCls, 5, 6, 7, 8, Vocabulary::kSep}});
  ForwardExtras extras;
  const Matrix logits = forward_mlm(ModelView{&params, nullptr}, batch, {}, &extras);
  ASSERT_FALSE(extras.attention.empty());
  for (const Matrix& attn : extras.attention)
    for (int i = 0; i < attn.rows; ++i) {
      double sum = 0;
      for (int j = 0; j < attn.cols; ++j) sum += attn.at(i, j);
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  // output-layer softmax normalizes as well
  for (int t = 0; t < 6; ++t) {
    Vec row(logits.row(t), logits.row(t) + logits.cols);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0;
    for (double v : row) z += std::exp(v - mx);
    double total = 0;
    for (double v : row) total += std::exp(v - mx) / z;
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(ComputeLoss, UniformLogitsGiveLogV) {
  const int v = 40;
  Matrix logits(3, v);
  std::vector<int> labels = {5, -1, 17};
  EXPECT_NEAR(compute_loss_mlm(logits, labels), std::log(static_cast<double>(v)), 1e-12);
}

TEST(ComputeLoss, PerfectLogitsApproachZero) {
  Matrix logits(2, 4);
  logits.at(0, 1) = 200.0;
  logits.at(1, 3) = 200.0;
  EXPECT_NEAR(compute_loss_classification(logits, {1, 3}), 0.0, 1e-12);
}

TEST(ComputeLoss, ClassWeightedMean) {
  // two examples with identical per-example CE; weight 10 on class 1
  Matrix logits(2, 2);
  logits.at(0, 0) = 1.0;  // gold 0
  logits.at(1, 1) = 1.0;  // gold 1, symmetric -> same CE
  const double ce = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  const std::vector<double> weights = {1.0, 10.0};
  const double loss = compute_loss_classification(logits, {0, 1}, &weights);
  EXPECT_NEAR(loss, (ce + 10.0 * ce) / 2.0, 1e-12);
}

TEST(ComputeLoss, NoContributingPositionErrors) {
  Matrix logits(2, 4);
  std::vector<int> labels = {-1, -1};
  EXPECT_THROW(compute_loss_mlm(logits, labels), std::invalid_argument);
}

TEST(MaskForMlm, ZeroProbabilitySelectsNothing) {
  Rng rng(1);
  const std::vector<int> seq = {Vocabulary::kCls, 5, 6, 7, Vocabulary::kSep};
  const auto [masked, labels] = mask_for_mlm(seq, 0.0, 12, rng);
  EXPECT_EQ(masked, seq);
  for (int l : labels) EXPECT_EQ(l, -1);
}

TEST(MaskForMlm, SpecialsOnlyUnchanged) {
  Rng rng(1);
  const std::vector<int> seq = {Vocabulary::kCls, Vocabulary::kSep};
  const auto [masked, labels] = mask_for_mlm(seq, 0.5, 12, rng);
  EXPECT_EQ(masked, seq);
  for (int l : labels) EXPECT_EQ(l, -1);
}

// Replays the documented draw order with the pinned generator and checks
// the implementation reproduces it exactly.
TEST(MaskForMlm, PinnedRngReplay) {
  const int vocab = 30;
  std::vector<int> seq = {Vocabulary::kCls, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, Vocabulary::kSep};
  Rng rng(7);
  const auto [masked, labels] = mask_for_mlm(seq, 0.15, vocab, rng);

  Rng replay(7);
  std::vector<int> want_masked = seq;
  std::vector<int> want_labels(seq.size(), -1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (Vocabulary::is_special(seq[i])) continue;
    if (replay.uniform() >= 0.15) continue;
    want_labels[i] = seq[i];
    const double branch = replay.uniform();
    if (branch < 0.8)
      want_masked[i] = Vocabulary::kMask;
    else if (branch < 0.9)
      want_masked[i] = Vocabulary::kNumSpecials +
                       static_cast<int>(replay.uniform_int(vocab - Vocabulary::kNumSpecials));
  }
  EXPECT_EQ(masked, want_masked);
  EXPECT_EQ(labels, want_labels);
}

TEST(MaskForMlm, SelectionRateMatchesProbability) {
  // 10 non-special tokens at p=0.15: expected 1.5 selected per sequence
  Rng rng(99);
  std::vector<int> seq = {Vocabulary::kCls, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, Vocabulary::kSep};
  std::int64_t selected = 0;
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) {
    const auto [masked, labels] = mask_for_mlm(seq, 0.15, 30, rng);
    for (int l : labels)
      if (l >= 0) ++selected;
  }
  const double mean = static_cast<double>(selected) / trials;
  EXPECT_NEAR(mean, 1.5, 0.05);
}

TEST(PseudoLogLikelihood, UniformModelGivesNLogInvV) {
  const ModelConfig config = small_config(20);
  Rng rng(0);
  TransformerParams params = init_params(config, rng);
  for_each_tensor(params, [](const std::string&, Matrix& m) { m.fill(0.0); });
  const std::vector<int> seq = {Vocabulary::kCls, 6, 7, 8, Vocabulary::kSep};
  const double pll = pseudo_log_likelihood(ModelView{&params, nullptr}, seq, {1, 2, 3});
  EXPECT_NEAR(pll, 3.0 * std::log(1.0 / 20.0), 1e-9);
}

TEST(PseudoLogLikelihood, SinglePositionEqualsMaskedForward) {
  Rng rng(21);
  const TransformerParams params = init_params(small_config(), rng);
  const ModelView view{&params, nullptr};
  const std::vector<int> seq = {Vocabulary::kCls, 7, 9, Vocabulary::kSep};
  const double pll = pseudo_log_likelihood(view, seq, {2});

  std::vector<int> masked = seq;
  masked[2] = Vocabulary::kMask;
  const Matrix logits = forward_mlm(view, Batch::from_sequences({masked}));
  EXPECT_NEAR(pll, log_softmax_at(logits.row(2), logits.cols, seq[2]), 1e-12);
}

TEST(PseudoLogLikelihood, RiggedMassModelScoresNLogM) {
  const ModelConfig config = small_config(10);
  const double m = 0.42;
  const int v = config.vocab_size;
  // put logit L on token 7 so that softmax(7) = m
  std::vector<double> token_logits(static_cast<std::size_t>(v), 0.0);
  token_logits[7] = std::log(m * (v - 1) / (1.0 - m));
  const TransformerParams params = testutil::make_rigged_mlm(config, token_logits);
  const std::vector<int> seq = {Vocabulary::kCls, 7, 7, 7, 7, Vocabulary::kSep};
  const double pll = pseudo_log_likelihood(ModelView{&params, nullptr}, seq, {1, 2, 3, 4});
  EXPECT_NEAR(pll, 4.0 * std::log(m), 1e-9);
}

TEST(PseudoLogLikelihood, EmptyPositionsError) {
  Rng rng(0);
  const TransformerParams params = init_params(small_config(), rng);
  EXPECT_THROW(
      pseudo_log_likelihood(ModelView{&params, nullptr}, {Vocabulary::kCls, 5, Vocabulary::kSep}, {}),
      std::invalid_argument);
}

}  // namespace
}  // namespace peftdebias
