#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "peftdebias/matrix.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"

namespace peftdebias {

// Composed view of a backbone with an optionally injected PEFT. Injection
// never mutates the backbone; SFT materializes backbone + delta into a
// scratch copy per call.
struct ModelView {
  const TransformerParams* backbone = nullptr;
  const PeftParams* peft = nullptr;

  PeftKind kind() const { return peft == nullptr ? PeftKind::none : peft->kind(); }
};

inline ModelView inject(const PeftParams& peft, const TransformerParams& backbone) {
  if (peft.kind() == PeftKind::prompt && peft.prompt().length() >= backbone.config.max_seq)
    throw std::invalid_argument("prompt longer than max sequence length");
  if (peft.kind() == PeftKind::adapter &&
      static_cast<int>(peft.adapter().layers.size()) != backbone.config.num_layers)
    throw std::invalid_argument("adapter layer count does not match the backbone");
  if (peft.kind() == PeftKind::lora &&
      static_cast<int>(peft.lora().layers.size()) != backbone.config.num_layers)
    throw std::invalid_argument("lora layer count does not match the backbone");
  if (peft.kind() == PeftKind::adapter) {
    for (const auto& l : peft.adapter().layers)
      if (l.down_w.rows != backbone.config.hidden)
        throw std::invalid_argument("adapter width does not match the backbone");
  }
  return ModelView{&backbone, &peft};
}

struct ForwardOptions {
  bool prompt_attention = true;   // diagnostic: false masks prompt keys out
  bool record_attention = false;  // capture per-head attention rows for checks
};

struct ForwardExtras {
  std::vector<Matrix> attention;  // one (m x m) matrix per (sequence, layer, head)
};

inline TransformerParams sft_effective(const TransformerParams& base, const SftParams& sft) {
  TransformerParams eff = base;
  FlatIndex idx = FlatIndex::build(eff);
  for (std::size_t i = 0; i < sft.mask.size(); ++i) idx.add(sft.mask[i], sft.delta[i]);
  return eff;
}

namespace detail {

struct LnCache {
  Matrix xhat;                  // m x d
  std::vector<double> inv_std;  // m
};

// y = gain (x) xhat + bias, xhat = (x - mean) / sqrt(var + eps)
inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LnCache& cache) {
  constexpr double kEps = 1e-5;
  const int m = x.rows, d = x.cols;
  Matrix y(m, d);
  cache.xhat = Matrix(m, d);
  cache.inv_std.assign(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xi[j] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kEps);
    cache.inv_std[static_cast<std::size_t>(i)] = inv;
    double* xh = cache.xhat.row(i);
    double* yi = y.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (xi[j] - mean) * inv;
      yi[j] = gain.at(0, j) * xh[j] + bias.at(0, j);
    }
  }
  return y;
}

// dx for y = LN(x); accumulates dgain/dbias.
inline Matrix layer_norm_backward(const Matrix& dy, const LnCache& cache, const Matrix& gain,
                                  Matrix& dgain, Matrix& dbias) {
  const int m = dy.rows, d = dy.cols;
  Matrix dx(m, d);
  for (int i = 0; i < m; ++i) {
    const double* dyi = dy.row(i);
    const double* xh = cache.xhat.row(i);
    const double inv = cache.inv_std[static_cast<std::size_t>(i)];
    double sum_g = 0.0, sum_gx = 0.0;
    for (int j = 0; j < d; ++j) {
      const double g = dyi[j] * gain.at(0, j);
      sum_g += g;
      sum_gx += g * xh[j];
      dgain.at(0, j) += dyi[j] * xh[j];
      dbias.at(0, j) += dyi[j];
    }
    const double mean_g = sum_g / d;
    const double mean_gx = sum_gx / d;
    double* dxi = dx.row(i);
    for (int j = 0; j < d; ++j) {
      const double g = dyi[j] * gain.at(0, j);
      dxi[j] = inv * (g - mean_g - xh[j] * mean_gx);
    }
  }
  return dx;
}

struct LayerCache {
  Matrix x_in;     // m x d, input to the layer
  LnCache ln1_cache;
  Matrix ln1;      // m x d
  Matrix q, k, v;  // m x d
  std::vector<Matrix> attn;  // per head, m x m (post-softmax)
  Matrix ctx;      // m x d
  Matrix x1;       // after attention residual
  LnCache ln2_cache;
  Matrix ln2;
  Matrix ffn_pre;  // m x f, pre-relu
  Matrix x2;       // after FFN residual
  // adapter
  Matrix ada_pre;  // m x b, pre-relu
  Matrix x3;       // layer output
};

struct SeqCache {
  int n = 0;       // real tokens
  int p = 0;       // prompt rows
  int m = 0;       // p + n
  std::vector<int> tokens;
  Matrix x0;
  std::vector<LayerCache> layers;
  LnCache final_cache;
  Matrix final_out;  // m x d
};

struct EffectiveWeights {
  // per layer: wq/wv with LoRA applied (points at backbone when no LoRA)
  std::vector<Matrix> wq, wv;
  bool materialized = false;
};

inline void build_effective(const TransformerParams& params, const PeftParams* peft,
                            EffectiveWeights& eff) {
  if (peft == nullptr || peft->kind() != PeftKind::lora) return;
  const auto& lora = peft->lora();
  const double s = lora.scale();
  eff.materialized = true;
  eff.wq.resize(params.layers.size());
  eff.wv.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Matrix dq, dv;
    matmul(lora.layers[l].q.a, lora.layers[l].q.b, dq);
    matmul(lora.layers[l].v.a, lora.layers[l].v.b, dv);
    scale_inplace(dq, s);
    scale_inplace(dv, s);
    eff.wq[l] = params.layers[l].wq;
    add_inplace(eff.wq[l], dq);
    eff.wv[l] = params.layers[l].wv;
    add_inplace(eff.wv[l], dv);
  }
}

inline void relu_inplace_copy(const Matrix& pre, Matrix& post) {
  post = pre;
  for (double& v : post.data) v = v > 0.0 ? v : 0.0;
}

// Runs the encoder over one sequence; returns the final-LN output (m x d).
inline void encode_sequence(const TransformerParams& params, const PeftParams* peft,
                            const EffectiveWeights& eff, const std::vector<int>& tokens,
                            const ForwardOptions& opts, SeqCache& cache,
                            ForwardExtras* extras) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.hidden;
  const int heads = cfg.heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const bool with_prompt = peft != nullptr && peft->kind() == PeftKind::prompt;
  const bool with_adapter = peft != nullptr && peft->kind() == PeftKind::adapter;
  const int p = with_prompt ? peft->prompt().length() : 0;
  const int n = static_cast<int>(tokens.size());
  const int m = p + n;
  if (n > cfg.max_seq) throw std::invalid_argument("sequence longer than max_seq");

  cache.n = n;
  cache.p = p;
  cache.m = m;
  cache.tokens = tokens;
  cache.x0 = Matrix(m, d);
  for (int j = 0; j < p; ++j)
    for (int c = 0; c < d; ++c)
      cache.x0.at(j, c) = peft->prompt().vectors.at(j, c) + params.pos_emb.at(j, c);
  for (int t = 0; t < n; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("token id outside vocabulary");
    for (int c = 0; c < d; ++c)
      cache.x0.at(p + t, c) = params.tok_emb.at(id, c) + params.pos_emb.at(t, c);
  }

  const bool mask_prompt_keys = with_prompt && !opts.prompt_attention;

  cache.layers.resize(params.layers.size());
  const Matrix* x = &cache.x0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& layer = params.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.x_in = *x;

    lc.ln1 = layer_norm(lc.x_in, layer.ln1_gain, layer.ln1_bias, lc.ln1_cache);
    const Matrix& wq = eff.materialized ? eff.wq[l] : layer.wq;
    const Matrix& wv = eff.materialized ? eff.wv[l] : layer.wv;
    matmul(lc.ln1, wq, lc.q);
    matmul(lc.ln1, layer.wk, lc.k);
    matmul(lc.ln1, wv, lc.v);

    lc.attn.assign(static_cast<std::size_t>(heads), Matrix());
    lc.ctx = Matrix(m, d);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      Matrix& attn = lc.attn[static_cast<std::size_t>(h)];
      attn = Matrix(m, m);
      for (int i = 0; i < m; ++i) {
        const double* qi = lc.q.row(i) + off;
        double* si = attn.row(i);
        for (int j = 0; j < m; ++j) {
          const double* kj = lc.k.row(j) + off;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          si[j] = s * inv_sqrt_dh;
        }
        if (mask_prompt_keys)
          for (int j = 0; j < p; ++j) si[j] = -1e30;
      }
      softmax_rows(attn);
      for (int i = 0; i < m; ++i) {
        const double* ai = attn.row(i);
        double* ci = lc.ctx.row(i) + off;
        for (int j = 0; j < m; ++j) {
          const double aij = ai[j];
          const double* vj = lc.v.row(j) + off;
          for (int c = 0; c < dh; ++c) ci[c] += aij * vj[c];
        }
      }
      if (extras != nullptr) extras->attention.push_back(attn);
    }

    Matrix attn_out;
    matmul(lc.ctx, layer.wo, attn_out);
    lc.x1 = lc.x_in;
    add_inplace(lc.x1, attn_out);

    lc.ln2 = layer_norm(lc.x1, layer.ln2_gain, layer.ln2_bias, lc.ln2_cache);
    matmul(lc.ln2, layer.w1, lc.ffn_pre);
    Matrix ffn_act;
    relu_inplace_copy(lc.ffn_pre, ffn_act);
    Matrix ffn_out;
    matmul(ffn_act, layer.w2, ffn_out);
    lc.x2 = lc.x1;
    add_inplace(lc.x2, ffn_out);

    if (with_adapter) {
      const auto& ada = peft->adapter().layers[l];
      matmul(lc.x2, ada.down_w, lc.ada_pre);
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < lc.ada_pre.cols; ++c) lc.ada_pre.at(i, c) += ada.down_b.at(0, c);
      Matrix ada_act;
      relu_inplace_copy(lc.ada_pre, ada_act);
      Matrix ada_out;
      matmul(ada_act, ada.up_w, ada_out);
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < d; ++c) ada_out.at(i, c) += ada.up_b.at(0, c);
      lc.x3 = lc.x2;
      add_inplace(lc.x3, ada_out);
    } else {
      lc.x3 = lc.x2;
    }
    x = &lc.x3;
  }

  cache.final_out = layer_norm(*x, params.final_ln_gain, params.final_ln_bias, cache.final_cache);
}

}  // namespace detail

struct GradientSet {
  TransformerParams backbone;      // gradient tensors, shape-congruent
  std::optional<PeftParams> peft;  // engaged when a PEFT is injected
};

inline GradientSet zero_gradients(const ModelView& view) {
  GradientSet g;
  g.backbone = zero_like(*view.backbone);
  if (view.peft != nullptr && view.peft->kind() != PeftKind::none) {
    PeftParams pg = *view.peft;
    for_each_peft_tensor(pg, [](const std::string&, Matrix& m) { m.fill(0.0); });
    if (pg.kind() == PeftKind::sft)
      std::fill(pg.sft().delta.begin(), pg.sft().delta.end(), 0.0);
    g.peft = std::move(pg);
  }
  return g;
}

namespace detail {

struct ForwardState {
  std::vector<SeqCache> seqs;
  EffectiveWeights eff;
  const TransformerParams* effective_backbone = nullptr;  // == backbone unless SFT
  std::optional<TransformerParams> sft_copy;
};

inline void run_encoder(const ModelView& view, const Batch& batch, const ForwardOptions& opts,
                        ForwardState& state, ForwardExtras* extras) {
  if (view.backbone == nullptr) throw std::invalid_argument("model view has no backbone");
  const TransformerParams* params = view.backbone;
  const PeftParams* peft = view.peft;
  if (peft != nullptr && peft->kind() == PeftKind::sft) {
    state.sft_copy = sft_effective(*params, peft->sft());
    params = &*state.sft_copy;
    peft = nullptr;  // behaves as a plain backbone from here on
  }
  state.effective_backbone = params;
  detail::build_effective(*params, peft, state.eff);
  state.seqs.resize(static_cast<std::size_t>(batch.size));
  for (int b = 0; b < batch.size; ++b) {
    const int n = batch.seq_len(b);
    if (n == 0) throw std::invalid_argument("empty sequence in batch");
    std::vector<int> tokens(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) tokens[static_cast<std::size_t>(t)] = batch.token(b, t);
    detail::encode_sequence(*params, peft, state.eff, tokens, opts,
                            state.seqs[static_cast<std::size_t>(b)], extras);
  }
}

}  // namespace detail

// Token-level logits aligned with the batch layout: row b*width + t. Rows
// past each sequence end stay zero. Prompt rows are internal and dropped.
inline Matrix forward_mlm(const ModelView& view, const Batch& batch,
                          const ForwardOptions& opts = {}, ForwardExtras* extras = nullptr) {
  detail::ForwardState state;
  detail::run_encoder(view, batch, opts, state, extras);
  const TransformerParams& params = *state.effective_backbone;
  const int v = params.config.vocab_size;
  Matrix logits(batch.size * batch.width, v);
  for (int b = 0; b < batch.size; ++b) {
    const detail::SeqCache& sc = state.seqs[static_cast<std::size_t>(b)];
    for (int t = 0; t < sc.n; ++t) {
      const double* h = sc.final_out.row(sc.p + t);
      double* out = logits.row(b * batch.width + t);
      for (int id = 0; id < v; ++id) {
        const double* e = params.tok_emb.row(id);
        double s = 0.0;
        for (int c = 0; c < params.config.hidden; ++c) s += h[c] * e[c];
        out[id] = s;
      }
    }
  }
  return logits;
}

// Classification logits (B x C) read from the [CLS] position.
inline Matrix forward_cls(const ModelView& view, const Batch& batch,
                          const ForwardOptions& opts = {}, ForwardExtras* extras = nullptr) {
  detail::ForwardState state;
  detail::run_encoder(view, batch, opts, state, extras);
  const TransformerParams& params = *state.effective_backbone;
  const int c_out = params.config.num_classes;
  Matrix logits(batch.size, c_out);
  for (int b = 0; b < batch.size; ++b) {
    const detail::SeqCache& sc = state.seqs[static_cast<std::size_t>(b)];
    const double* h = sc.final_out.row(sc.p);  // [CLS]
    double* out = logits.row(b);
    for (int j = 0; j < c_out; ++j) {
      double s = 0.0;
      for (int c = 0; c < params.config.hidden; ++c) s += h[c] * params.cls_head.at(c, j);
      out[j] = s;
    }
  }
  return logits;
}

enum class LossKind { mlm, classification };

// Mean cross-entropy over contributing positions. MLM labels of -1 do not
// contribute; class weights multiply each example's term by the weight of
// its gold class while the denominator stays the plain count.
inline double compute_loss_mlm(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.rows) != labels.size())
    throw std::invalid_argument("mlm loss: logits/labels length mismatch");
  double total = 0.0;
  std::int64_t count = 0;
  for (int i = 0; i < logits.rows; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0) continue;
    total -= log_softmax_at(logits.row(i), logits.cols, label);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mlm loss: no contributing position");
  return total / static_cast<double>(count);
}

inline double compute_loss_classification(const Matrix& logits, const std::vector<int>& labels,
                                          const std::vector<double>* class_weights = nullptr) {
  if (static_cast<std::size_t>(logits.rows) != labels.size())
    throw std::invalid_argument("classification loss: logits/labels length mismatch");
  if (logits.rows == 0) throw std::invalid_argument("classification loss: empty batch");
  double total = 0.0;
  for (int i = 0; i < logits.rows; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= logits.cols)
      throw std::invalid_argument("classification loss: label out of range");
    const double w =
        class_weights != nullptr ? (*class_weights)[static_cast<std::size_t>(label)] : 1.0;
    total -= w * log_softmax_at(logits.row(i), logits.cols, label);
  }
  return total / static_cast<double>(logits.rows);
}

namespace detail {

// Backpropagates d(final LN output) for one sequence into parameter grads.
inline void backward_sequence(const TransformerParams& params, const PeftParams* peft,
                              const EffectiveWeights& eff, const SeqCache& sc,
                              const Matrix& d_final, GradientSet& grads,
                              std::vector<Matrix>* d_wq_eff, std::vector<Matrix>* d_wv_eff) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.hidden;
  const int heads = cfg.heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const int m = sc.m;
  const int p = sc.p;

  const bool with_adapter = peft != nullptr && peft->kind() == PeftKind::adapter;
  const bool with_lora = eff.materialized;

  TransformerParams& gb = grads.backbone;

  Matrix dx = layer_norm_backward(d_final, sc.final_cache, params.final_ln_gain,
                                  gb.final_ln_gain, gb.final_ln_bias);

  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const LayerParams& layer = params.layers[static_cast<std::size_t>(l)];
    const LayerCache& lc = sc.layers[static_cast<std::size_t>(l)];
    LayerParams& gl = gb.layers[static_cast<std::size_t>(l)];

    // adapter: x3 = x2 + up(relu(down(x2)))
    if (with_adapter) {
      const auto& ada = peft->adapter().layers[static_cast<std::size_t>(l)];
      auto& gada = grads.peft->adapter().layers[static_cast<std::size_t>(l)];
      Matrix ada_act;
      relu_inplace_copy(lc.ada_pre, ada_act);
      // d ada_out = dx
      Matrix d_act;
      matmul_nt(dx, ada.up_w, d_act);  // m x b
      matmul_tn_acc(ada_act, dx, gada.up_w);
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < d; ++c) gada.up_b.at(0, c) += dx.at(i, c);
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < d_act.cols; ++c)
          if (lc.ada_pre.at(i, c) <= 0.0) d_act.at(i, c) = 0.0;
      matmul_tn_acc(lc.x2, d_act, gada.down_w);
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < d_act.cols; ++c) gada.down_b.at(0, c) += d_act.at(i, c);
      Matrix d_x2_path;
      matmul_nt(d_act, ada.down_w, d_x2_path);
      add_inplace(dx, d_x2_path);  // residual + adapter path
    }

    // FFN: x2 = x1 + relu(ln2 . w1) . w2
    Matrix ffn_act;
    relu_inplace_copy(lc.ffn_pre, ffn_act);
    Matrix d_ffn_act;
    matmul_nt(dx, layer.w2, d_ffn_act);  // m x f
    matmul_tn_acc(ffn_act, dx, gl.w2);
    for (int i = 0; i < m; ++i)
      for (int c = 0; c < d_ffn_act.cols; ++c)
        if (lc.ffn_pre.at(i, c) <= 0.0) d_ffn_act.at(i, c) = 0.0;
    matmul_tn_acc(lc.ln2, d_ffn_act, gl.w1);
    Matrix d_ln2;
    matmul_nt(d_ffn_act, layer.w1, d_ln2);
    Matrix d_x1 = layer_norm_backward(d_ln2, lc.ln2_cache, layer.ln2_gain, gl.ln2_gain, gl.ln2_bias);
    add_inplace(dx, d_x1);  // dx now holds d(x1)

    // attention: x1 = x_in + ctx . wo
    Matrix d_ctx;
    matmul_nt(dx, layer.wo, d_ctx);
    matmul_tn_acc(lc.ctx, dx, gl.wo);

    Matrix dq(m, d), dk(m, d), dv(m, d);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      const Matrix& attn = lc.attn[static_cast<std::size_t>(h)];
      // d attn[i][j] = sum_c d_ctx[i][off+c] * v[j][off+c]
      Matrix d_attn(m, m);
      for (int i = 0; i < m; ++i) {
        const double* dci = d_ctx.row(i) + off;
        double* dai = d_attn.row(i);
        for (int j = 0; j < m; ++j) {
          const double* vj = lc.v.row(j) + off;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += dci[c] * vj[c];
          dai[j] = s;
        }
      }
      // dv[j] += sum_i attn[i][j] * d_ctx[i]
      for (int i = 0; i < m; ++i) {
        const double* ai = attn.row(i);
        const double* dci = d_ctx.row(i) + off;
        for (int j = 0; j < m; ++j) {
          double* dvj = dv.row(j) + off;
          const double aij = ai[j];
          for (int c = 0; c < dh; ++c) dvj[c] += aij * dci[c];
        }
      }
      // softmax backward: ds = (da - rowdot(da, a)) * a, then scale
      for (int i = 0; i < m; ++i) {
        const double* ai = attn.row(i);
        double* dai = d_attn.row(i);
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += dai[j] * ai[j];
        for (int j = 0; j < m; ++j) dai[j] = (dai[j] - dot) * ai[j] * inv_sqrt_dh;
      }
      // dq[i] += ds[i][j] k[j];  dk[j] += ds[i][j] q[i]
      for (int i = 0; i < m; ++i) {
        const double* dai = d_attn.row(i);
        double* dqi = dq.row(i) + off;
        const double* qi = lc.q.row(i) + off;
        for (int j = 0; j < m; ++j) {
          const double s = dai[j];
          if (s == 0.0) continue;
          const double* kj = lc.k.row(j) + off;
          double* dkj = dk.row(j) + off;
          for (int c = 0; c < dh; ++c) {
            dqi[c] += s * kj[c];
            dkj[c] += s * qi[c];
          }
        }
      }
    }

    const Matrix& wq = with_lora ? eff.wq[static_cast<std::size_t>(l)] : layer.wq;
    const Matrix& wv = with_lora ? eff.wv[static_cast<std::size_t>(l)] : layer.wv;
    Matrix d_ln1;
    matmul_nt(dq, wq, d_ln1);
    {
      Matrix tmp;
      matmul_nt(dk, layer.wk, tmp);
      add_inplace(d_ln1, tmp);
      matmul_nt(dv, wv, tmp);
      add_inplace(d_ln1, tmp);
    }
    if (with_lora) {
      matmul_tn_acc(lc.ln1, dq, (*d_wq_eff)[static_cast<std::size_t>(l)]);
      matmul_tn_acc(lc.ln1, dv, (*d_wv_eff)[static_cast<std::size_t>(l)]);
    } else {
      matmul_tn_acc(lc.ln1, dq, gl.wq);
      matmul_tn_acc(lc.ln1, dv, gl.wv);
    }
    matmul_tn_acc(lc.ln1, dk, gl.wk);

    Matrix d_x_in =
        layer_norm_backward(d_ln1, lc.ln1_cache, layer.ln1_gain, gl.ln1_gain, gl.ln1_bias);
    add_inplace(dx, d_x_in);  // dx now holds d(x_in) for this layer
  }

  // embeddings
  for (int j = 0; j < p; ++j) {
    auto& gprompt = grads.peft->prompt().vectors;
    for (int c = 0; c < d; ++c) {
      gprompt.at(j, c) += dx.at(j, c);
      gb.pos_emb.at(j, c) += dx.at(j, c);
    }
  }
  for (int t = 0; t < sc.n; ++t) {
    const int id = sc.tokens[static_cast<std::size_t>(t)];
    for (int c = 0; c < d; ++c) {
      gb.tok_emb.at(id, c) += dx.at(p + t, c);
      gb.pos_emb.at(t, c) += dx.at(p + t, c);
    }
  }
}

}  // namespace detail

struct LossAndGradients {
  double loss = 0.0;
  GradientSet grads;
};

// Loss and exact analytic gradients for one batch. Gradients cover every
// tensor of the view (backbone + injected PEFT); freezing is applied by
// the optimizer via the trainable set.
inline LossAndGradients gradients(const ModelView& view, const Batch& batch, LossKind kind,
                                  const std::vector<double>* class_weights = nullptr,
                                  const ForwardOptions& opts = {}) {
  detail::ForwardState state;
  detail::run_encoder(view, batch, opts, state, nullptr);
  const TransformerParams& params = *state.effective_backbone;
  const ModelConfig& cfg = params.config;
  const int d = cfg.hidden;

  LossAndGradients out;
  out.grads = zero_gradients(view);
  TransformerParams& gb = out.grads.backbone;

  const PeftParams* peft = view.peft;
  const bool is_sft = peft != nullptr && peft->kind() == PeftKind::sft;
  const PeftParams* enc_peft = is_sft ? nullptr : peft;
  const bool with_lora = state.eff.materialized;
  std::vector<Matrix> d_wq_eff, d_wv_eff;
  if (with_lora) {
    d_wq_eff.assign(params.layers.size(), Matrix(d, d));
    d_wv_eff.assign(params.layers.size(), Matrix(d, d));
  }

  if (kind == LossKind::mlm) {
    if (batch.mlm_labels.empty()) throw std::invalid_argument("mlm gradients need mlm labels");
    // count contributing positions
    std::int64_t count = 0;
    for (int i : batch.mlm_labels)
      if (i >= 0) ++count;
    if (count == 0) throw std::invalid_argument("mlm loss: no contributing position");
    const double inv_count = 1.0 / static_cast<double>(count);

    for (int b = 0; b < batch.size; ++b) {
      detail::SeqCache& sc = state.seqs[static_cast<std::size_t>(b)];
      Matrix d_final(sc.m, d);
      for (int t = 0; t < sc.n; ++t) {
        const int label = batch.mlm_labels[static_cast<std::size_t>(b) * batch.width + t];
        if (label < 0) continue;
        const double* h = sc.final_out.row(sc.p + t);
        // logits for this position
        std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
        for (int id = 0; id < cfg.vocab_size; ++id) {
          const double* e = params.tok_emb.row(id);
          double s = 0.0;
          for (int c = 0; c < d; ++c) s += h[c] * e[c];
          logits[static_cast<std::size_t>(id)] = s;
        }
        double mx = logits[0];
        for (double vlog : logits) mx = std::max(mx, vlog);
        double sum = 0.0;
        for (double& vlog : logits) {
          vlog = std::exp(vlog - mx);
          sum += vlog;
        }
        out.loss -= std::log(logits[static_cast<std::size_t>(label)] / sum);
        // d logits = (softmax - onehot) * inv_count; tied head:
        // d h += d logits . tok_emb ; d tok_emb[id] += d logits[id] * h
        double* dfi = d_final.row(sc.p + t);
        for (int id = 0; id < cfg.vocab_size; ++id) {
          double g = (logits[static_cast<std::size_t>(id)] / sum) * inv_count;
          if (id == label) g -= inv_count;
          if (g == 0.0) continue;
          const double* e = params.tok_emb.row(id);
          double* ge = gb.tok_emb.row(id);
          for (int c = 0; c < d; ++c) {
            dfi[c] += g * e[c];
            ge[c] += g * h[c];
          }
        }
      }
      detail::backward_sequence(params, enc_peft, state.eff, sc, d_final, out.grads,
                                with_lora ? &d_wq_eff : nullptr,
                                with_lora ? &d_wv_eff : nullptr);
    }
    out.loss *= inv_count;
  } else {
    if (batch.class_labels.empty())
      throw std::invalid_argument("classification gradients need class labels");
    const double inv_b = 1.0 / static_cast<double>(batch.size);
    for (int b = 0; b < batch.size; ++b) {
      detail::SeqCache& sc = state.seqs[static_cast<std::size_t>(b)];
      const int label = batch.class_labels[static_cast<std::size_t>(b)];
      if (label < 0 || label >= cfg.num_classes)
        throw std::invalid_argument("classification loss: label out of range");
      const double w =
          class_weights != nullptr ? (*class_weights)[static_cast<std::size_t>(label)] : 1.0;
      const double* h = sc.final_out.row(sc.p);
      std::vector<double> logits(static_cast<std::size_t>(cfg.num_classes));
      for (int j = 0; j < cfg.num_classes; ++j) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += h[c] * params.cls_head.at(c, j);
        logits[static_cast<std::size_t>(j)] = s;
      }
      double mx = logits[0];
      for (double vlog : logits) mx = std::max(mx, vlog);
      double sum = 0.0;
      for (double& vlog : logits) {
        vlog = std::exp(vlog - mx);
        sum += vlog;
      }
      out.loss -= w * std::log(logits[static_cast<std::size_t>(label)] / sum);

      Matrix d_final(sc.m, d);
      double* dfi = d_final.row(sc.p);
      for (int j = 0; j < cfg.num_classes; ++j) {
        double g = w * (logits[static_cast<std::size_t>(j)] / sum) * inv_b;
        if (j == label) g -= w * inv_b;
        for (int c = 0; c < d; ++c) {
          dfi[c] += g * params.cls_head.at(c, j);
          gb.cls_head.at(c, j) += g * h[c];
        }
      }
      detail::backward_sequence(params, enc_peft, state.eff, sc, d_final, out.grads,
                                with_lora ? &d_wq_eff : nullptr,
                                with_lora ? &d_wv_eff : nullptr);
    }
    out.loss *= inv_b;
  }

  // LoRA: W_eff = W + s A.B, so dW = dW_eff, dA = s dW_eff B^T, dB = s A^T dW_eff.
  if (with_lora) {
    const auto& lora = view.peft->lora();
    auto& glora = out.grads.peft->lora();
    const double s = lora.scale();
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      add_inplace(gb.layers[l].wq, d_wq_eff[l]);
      add_inplace(gb.layers[l].wv, d_wv_eff[l]);
      Matrix tmp;
      matmul_nt(d_wq_eff[l], lora.layers[l].q.b, tmp);
      scale_inplace(tmp, s);
      add_inplace(glora.layers[l].q.a, tmp);
      matmul_tn_acc(lora.layers[l].q.a, d_wq_eff[l], glora.layers[l].q.b);
      scale_inplace(glora.layers[l].q.b, s);
      matmul_nt(d_wv_eff[l], lora.layers[l].v.b, tmp);
      scale_inplace(tmp, s);
      add_inplace(glora.layers[l].v.a, tmp);
      matmul_tn_acc(lora.layers[l].v.a, d_wv_eff[l], glora.layers[l].v.b);
      scale_inplace(glora.layers[l].v.b, s);
    }
  }

  // SFT: the delta gradient is the backbone gradient gathered at the mask.
  if (is_sft) {
    auto& gsft = out.grads.peft->sft();
    FlatIndex idx = FlatIndex::build(gb);
    for (std::size_t i = 0; i < view.peft->sft().mask.size(); ++i)
      gsft.delta[i] = idx.get(view.peft->sft().mask[i]);
  }

  return out;
}

// Sum over the given positions of log P(true token at position | rest),
// with each position masked one at a time (one forward per position).
inline double pseudo_log_likelihood(const ModelView& view, const std::vector<int>& seq,
                                    const std::vector<int>& positions) {
  if (positions.empty()) throw std::invalid_argument("pseudo_log_likelihood: no positions");
  std::vector<std::vector<int>> masked;
  masked.reserve(positions.size());
  for (int pos : positions) {
    if (pos < 0 || pos >= static_cast<int>(seq.size()))
      throw std::invalid_argument("pseudo_log_likelihood: position out of range");
    if (Vocabulary::is_special(seq[static_cast<std::size_t>(pos)]))
      throw std::invalid_argument("pseudo_log_likelihood: special tokens cannot be scored");
    std::vector<int> copy = seq;
    copy[static_cast<std::size_t>(pos)] = Vocabulary::kMask;
    masked.push_back(std::move(copy));
  }
  const Batch batch = Batch::from_sequences(masked);
  const Matrix logits = forward_mlm(view, batch);
  double total = 0.0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int pos = positions[i];
    const double* row = logits.row(static_cast<int>(i) * batch.width + pos);
    total += log_softmax_at(row, logits.cols, seq[static_cast<std::size_t>(pos)]);
  }
  return total;
}

}  // namespace peftdebias
