#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftdebias/matrix.hpp"
#include "peftdebias/rng.hpp"
#include "peftdebias/text.hpp"

namespace peftdebias {

// Pre-norm transformer encoder, no biases on the projection matrices.
// Per layer:   x += Attn(LN1(x));  x += FFN(LN2(x))   (adapters, when
// injected, add a residual bottleneck after the FFN residual). A final
// layer norm closes the stack. The MLM head is weight-tied to the token
// embeddings; the classification head reads the [CLS] position.
struct ModelConfig {
  int num_layers = 2;
  int hidden = 64;
  int heads = 2;
  int ffn = 128;
  int vocab_size = 0;
  int max_seq = 64;
  int num_classes = 2;

  void validate() const {
    if (num_layers < 1 || hidden < 1 || heads < 1 || ffn < 1 || max_seq < 1 || num_classes < 1)
      throw std::invalid_argument("model config: all dimensions must be >= 1");
    if (hidden % heads != 0)
      throw std::invalid_argument("model config: hidden must be divisible by heads");
    if (vocab_size <= Vocabulary::kNumSpecials)
      throw std::invalid_argument("model config: vocab_size must exceed the special tokens");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;  // 1 x d
  Matrix wq, wk, wv, wo;      // d x d
  Matrix ln2_gain, ln2_bias;  // 1 x d
  Matrix w1;                  // d x f
  Matrix w2;                  // f x d
};

struct TransformerParams {
  ModelConfig config;
  Matrix tok_emb;                    // V x d
  Matrix pos_emb;                    // S x d
  std::vector<LayerParams> layers;
  Matrix final_ln_gain, final_ln_bias;  // 1 x d
  Matrix cls_head;                   // d x C
};

// Visits every tensor in a fixed order. Serialization, optimizer state,
// checksums and the flat coordinate space all share this order.
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn("tok_emb", p.tok_emb);
  fn("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto& layer = p.layers[l];
    fn(prefix + "ln1_gain", layer.ln1_gain);
    fn(prefix + "ln1_bias", layer.ln1_bias);
    fn(prefix + "wq", layer.wq);
    fn(prefix + "wk", layer.wk);
    fn(prefix + "wv", layer.wv);
    fn(prefix + "wo", layer.wo);
    fn(prefix + "ln2_gain", layer.ln2_gain);
    fn(prefix + "ln2_bias", layer.ln2_bias);
    fn(prefix + "w1", layer.w1);
    fn(prefix + "w2", layer.w2);
  }
  fn("final_ln_gain", p.final_ln_gain);
  fn("final_ln_bias", p.final_ln_bias);
  fn("cls_head", p.cls_head);
}

inline void fill_normal(Matrix& m, Rng& rng, double stddev) {
  for (double& v : m.data) v = rng.normal(0.0, stddev);
}

inline TransformerParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  constexpr double kInitStd = 0.02;
  TransformerParams p;
  p.config = config;
  const int d = config.hidden;
  p.tok_emb = Matrix(config.vocab_size, d);
  fill_normal(p.tok_emb, rng, kInitStd);
  p.pos_emb = Matrix(config.max_seq, d);
  fill_normal(p.pos_emb, rng, kInitStd);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : p.layers) {
    layer.ln1_gain = Matrix(1, d);
    layer.ln1_gain.fill(1.0);
    layer.ln1_bias = Matrix(1, d);
    for (Matrix* w : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
      *w = Matrix(d, d);
      fill_normal(*w, rng, kInitStd);
    }
    layer.ln2_gain = Matrix(1, d);
    layer.ln2_gain.fill(1.0);
    layer.ln2_bias = Matrix(1, d);
    layer.w1 = Matrix(d, config.ffn);
    fill_normal(layer.w1, rng, kInitStd);
    layer.w2 = Matrix(config.ffn, d);
    fill_normal(layer.w2, rng, kInitStd);
  }
  p.final_ln_gain = Matrix(1, d);
  p.final_ln_gain.fill(1.0);
  p.final_ln_bias = Matrix(1, d);
  p.cls_head = Matrix(d, config.num_classes);
  fill_normal(p.cls_head, rng, kInitStd);
  return p;
}

inline TransformerParams zero_like(const TransformerParams& p) {
  TransformerParams g;
  g.config = p.config;
  auto zero = [](const Matrix& m) { return Matrix(m.rows, m.cols); };
  g.tok_emb = zero(p.tok_emb);
  g.pos_emb = zero(p.pos_emb);
  g.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& src = p.layers[l];
    auto& dst = g.layers[l];
    dst.ln1_gain = zero(src.ln1_gain);
    dst.ln1_bias = zero(src.ln1_bias);
    dst.wq = zero(src.wq);
    dst.wk = zero(src.wk);
    dst.wv = zero(src.wv);
    dst.wo = zero(src.wo);
    dst.ln2_gain = zero(src.ln2_gain);
    dst.ln2_bias = zero(src.ln2_bias);
    dst.w1 = zero(src.w1);
    dst.w2 = zero(src.w2);
  }
  g.final_ln_gain = zero(p.final_ln_gain);
  g.final_ln_bias = zero(p.final_ln_bias);
  g.cls_head = zero(p.cls_head);
  return g;
}

// Base-LM parameter count; the task head is not part of the budget base.
inline std::int64_t backbone_param_count(const ModelConfig& config) {
  const std::int64_t d = config.hidden;
  const std::int64_t f = config.ffn;
  std::int64_t n = static_cast<std::int64_t>(config.vocab_size) * d +
                   static_cast<std::int64_t>(config.max_seq) * d;
  n += config.num_layers * (4 * d * d + 2 * d * f + 4 * d);
  n += 2 * d;  // final layer norm
  return n;
}

// One training batch. Token ids are PAD-padded to a common width; the
// attention mask is true exactly on the real-token prefix of each row.
struct Batch {
  int size = 0;     // B
  int width = 0;    // padded T
  std::vector<int> token_ids;            // B*T
  std::vector<std::uint8_t> attention;   // B*T
  std::vector<int> mlm_labels;           // B*T, -1 = not predicted (MLM batches)
  std::vector<int> class_labels;         // B (classification batches)

  int token(int b, int t) const { return token_ids[static_cast<std::size_t>(b) * width + t]; }
  bool live(int b, int t) const { return attention[static_cast<std::size_t>(b) * width + t] != 0; }

  int seq_len(int b) const {
    int n = 0;
    while (n < width && live(b, n)) ++n;
    return n;
  }

  static Batch from_sequences(const std::vector<std::vector<int>>& seqs) {
    Batch batch;
    batch.size = static_cast<int>(seqs.size());
    std::size_t w = 0;
    for (const auto& s : seqs) w = std::max(w, s.size());
    batch.width = static_cast<int>(w);
    batch.token_ids.assign(static_cast<std::size_t>(batch.size) * batch.width, Vocabulary::kPad);
    batch.attention.assign(static_cast<std::size_t>(batch.size) * batch.width, 0);
    for (int b = 0; b < batch.size; ++b) {
      for (std::size_t t = 0; t < seqs[static_cast<std::size_t>(b)].size(); ++t) {
        batch.token_ids[static_cast<std::size_t>(b) * batch.width + t] =
            seqs[static_cast<std::size_t>(b)][t];
        batch.attention[static_cast<std::size_t>(b) * batch.width + t] = 1;
      }
    }
    return batch;
  }
};

// BERT-style MLM corruption of one sequence. Each non-special position is
// selected with probability mask_prob; a selected position becomes [MASK]
// with probability 0.8, a random non-special vocabulary id with 0.1, and
// stays unchanged otherwise. Labels hold the original id at selected
// positions and -1 elsewhere.
//
// Draw order (tests replay it): one uniform() per non-special position in
// sequence order; for a selected position one further uniform() for the
// 80/10/10 branch, and inside the random-id branch one uniform_int(V-5).
inline std::pair<std::vector<int>, std::vector<int>> mask_for_mlm(const std::vector<int>& seq,
                                                                  double mask_prob,
                                                                  int vocab_size, Rng& rng) {
  if (mask_prob < 0.0 || mask_prob >= 1.0)
    throw std::invalid_argument("mask_prob must lie in [0, 1)");
  std::vector<int> masked = seq;
  std::vector<int> labels(seq.size(), -1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (Vocabulary::is_special(seq[i])) continue;
    if (rng.uniform() >= mask_prob) continue;
    labels[i] = seq[i];
    const double branch = rng.uniform();
    if (branch < 0.8) {
      masked[i] = Vocabulary::kMask;
    } else if (branch < 0.9) {
      masked[i] = Vocabulary::kNumSpecials +
                  static_cast<int>(rng.uniform_int(
                      static_cast<std::uint64_t>(vocab_size - Vocabulary::kNumSpecials)));
    }
  }
  return {std::move(masked), std::move(labels)};
}

}  // namespace peftdebias
