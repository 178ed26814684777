#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftdebias/cda.hpp"
#include "peftdebias/forward.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"

namespace peftdebias {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-tensor coordinate freeze list in local (within-tensor) indices;
// downstream SFT keeps the masked coordinates pinned at backbone + delta.
struct CoordinateFreeze {
  std::map<std::string, std::vector<std::int64_t>> frozen;

  static CoordinateFreeze build(const TransformerParams& params,
                                const std::vector<std::int64_t>& mask) {
    CoordinateFreeze cf;
    FlatIndex idx = FlatIndex::build(const_cast<TransformerParams&>(params));
    for (std::int64_t flat : mask) {
      const auto& e = idx.locate(flat);
      cf.frozen[e.name].push_back(flat - e.offset);
    }
    return cf;
  }
};

// Adam with bias correction. Only tensors named in the trainable set are
// touched; everything else stays bit-identical.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const AdamConfig& cfg) : cfg_(cfg) {}

  void step(TransformerParams& backbone, PeftParams* peft, const GradientSet& grads,
            const TrainableSet& trainable, const CoordinateFreeze* freeze = nullptr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double alpha = cfg_.lr * std::sqrt(bc2) / bc1;

    std::vector<std::pair<Matrix*, const Matrix*>> work;
    std::vector<std::string> names;
    for_each_tensor(backbone, [&](const std::string& name, Matrix& m) {
      if (!trainable.contains(name)) return;
      names.push_back(name);
      work.emplace_back(&m, nullptr);
    });
    for_each_tensor(const_cast<TransformerParams&>(grads.backbone),
                    [&](const std::string& name, Matrix& g) {
                      for (std::size_t i = 0; i < names.size(); ++i)
                        if (names[i] == name) work[i].second = &g;
                    });
    if (peft != nullptr && grads.peft.has_value()) {
      for_each_peft_tensor(*peft, [&](const std::string& name, Matrix& m) {
        if (!trainable.contains(name)) return;
        names.push_back(name);
        work.emplace_back(&m, nullptr);
      });
      for_each_peft_tensor(const_cast<PeftParams&>(*grads.peft),
                           [&](const std::string& name, Matrix& g) {
                             for (std::size_t i = 0; i < names.size(); ++i)
                               if (names[i] == name) work[i].second = &g;
                           });
    }

    for (std::size_t i = 0; i < work.size(); ++i) {
      Matrix& param = *work[i].first;
      if (work[i].second == nullptr)
        throw std::logic_error("missing gradient for trainable tensor " + names[i]);
      const Matrix& grad = *work[i].second;
      auto& [m, v] = moments_[names[i]];
      if (m.size() == 0) {
        m = Matrix(param.rows, param.cols);
        v = Matrix(param.rows, param.cols);
      }
      const std::vector<std::int64_t>* skip = nullptr;
      if (freeze != nullptr && trainable.exclude_sft_mask_coords) {
        auto it = freeze->frozen.find(names[i]);
        if (it != freeze->frozen.end()) skip = &it->second;
      }
      std::size_t skip_pos = 0;
      for (std::int64_t c = 0; c < param.size(); ++c) {
        if (skip != nullptr && skip_pos < skip->size() &&
            (*skip)[skip_pos] == c) {
          ++skip_pos;
          continue;
        }
        const double g = grad.data[static_cast<std::size_t>(c)];
        double& mc = m.data[static_cast<std::size_t>(c)];
        double& vc = v.data[static_cast<std::size_t>(c)];
        mc = cfg_.beta1 * mc + (1.0 - cfg_.beta1) * g;
        vc = cfg_.beta2 * vc + (1.0 - cfg_.beta2) * g * g;
        param.data[static_cast<std::size_t>(c)] -= alpha * mc / (std::sqrt(vc) + cfg_.eps);
      }
    }

    // upstream SFT: the sparse delta is the trainable surface
    if (trainable.sft_delta) {
      if (peft == nullptr || peft->kind() != PeftKind::sft || !grads.peft.has_value())
        throw std::logic_error("sft delta update without sft parameters");
      auto& sft = peft->sft();
      const auto& gd = grads.peft->sft().delta;
      if (delta_m_.size() != sft.delta.size()) {
        delta_m_.assign(sft.delta.size(), 0.0);
        delta_v_.assign(sft.delta.size(), 0.0);
      }
      for (std::size_t i = 0; i < sft.delta.size(); ++i) {
        delta_m_[i] = cfg_.beta1 * delta_m_[i] + (1.0 - cfg_.beta1) * gd[i];
        delta_v_[i] = cfg_.beta2 * delta_v_[i] + (1.0 - cfg_.beta2) * gd[i] * gd[i];
        sft.delta[i] -= alpha * delta_m_[i] / (std::sqrt(delta_v_[i]) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
  std::vector<double> delta_m_, delta_v_;
};

// Plain SGD update over the trainable tensors (no moment state).
inline void sgd_step(TransformerParams& params, PeftParams* peft, const GradientSet& grads,
                     const TrainableSet& trainable, double lr) {
  std::vector<Matrix*> targets;
  for_each_tensor(params, [&](const std::string& name, Matrix& m) {
    if (trainable.contains(name)) targets.push_back(&m);
  });
  std::vector<const Matrix*> sources;
  for_each_tensor(const_cast<TransformerParams&>(grads.backbone),
                  [&](const std::string& name, Matrix& g) {
                    if (trainable.contains(name)) sources.push_back(&g);
                  });
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::int64_t c = 0; c < targets[i]->size(); ++c)
      targets[i]->data[static_cast<std::size_t>(c)] -=
          lr * sources[i]->data[static_cast<std::size_t>(c)];
  if (peft != nullptr && grads.peft.has_value()) {
    std::vector<Matrix*> pt;
    for_each_peft_tensor(*peft, [&](const std::string& name, Matrix& m) {
      if (trainable.contains(name)) pt.push_back(&m);
    });
    std::vector<const Matrix*> ps;
    for_each_peft_tensor(const_cast<PeftParams&>(*grads.peft),
                         [&](const std::string& name, Matrix& g) {
                           if (trainable.contains(name)) ps.push_back(&g);
                         });
    for (std::size_t i = 0; i < pt.size(); ++i)
      for (std::int64_t c = 0; c < pt[i]->size(); ++c)
        pt[i]->data[static_cast<std::size_t>(c)] -=
            lr * ps[i]->data[static_cast<std::size_t>(c)];
    if (trainable.sft_delta) {
      auto& sft = peft->sft();
      const auto& gd = grads.peft->sft().delta;
      for (std::size_t i = 0; i < sft.delta.size(); ++i) sft.delta[i] -= lr * gd[i];
    }
  }
}

// Public freeze contract: gradients outside the trainable set are zeroed.
inline void zero_non_trainable(GradientSet& grads, const TrainableSet& trainable,
                               const CoordinateFreeze* freeze = nullptr) {
  for_each_tensor(grads.backbone, [&](const std::string& name, Matrix& g) {
    if (!trainable.contains(name)) {
      g.fill(0.0);
      return;
    }
    if (freeze != nullptr && trainable.exclude_sft_mask_coords) {
      auto it = freeze->frozen.find(name);
      if (it != freeze->frozen.end())
        for (std::int64_t c : it->second) g.data[static_cast<std::size_t>(c)] = 0.0;
    }
  });
  if (grads.peft.has_value()) {
    for_each_peft_tensor(*grads.peft, [&](const std::string& name, Matrix& g) {
      if (!trainable.contains(name)) g.fill(0.0);
    });
    if (grads.peft->kind() == PeftKind::sft && !trainable.sft_delta)
      std::fill(grads.peft->sft().delta.begin(), grads.peft->sft().delta.end(), 0.0);
  }
}

inline int argmax_row(const double* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Deterministic epoch-shuffled index stream.
class IndexStream {
 public:
  IndexStream(std::size_t n, std::uint64_t seed) : rng_(seed) {
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Mean held-out MLM cross-entropy. Masking is re-derived from the same
// seed on every call, so successive evaluations see identical batches.
inline double eval_mlm_loss(const ModelView& view, const std::vector<std::vector<int>>& docs,
                            double mask_prob, std::uint64_t seed, int batch_size = 32) {
  if (docs.empty()) throw std::invalid_argument("eval_mlm_loss: empty held-out slice");
  const int vocab = view.backbone->config.vocab_size;
  Rng rng(seed);
  double total = 0.0;
  std::int64_t count = 0;
  std::vector<std::vector<int>> seqs;
  std::vector<std::vector<int>> labels;
  auto flush = [&]() {
    if (seqs.empty()) return;
    Batch batch = Batch::from_sequences(seqs);
    batch.mlm_labels.assign(static_cast<std::size_t>(batch.size) * batch.width, -1);
    for (int b = 0; b < batch.size; ++b)
      for (std::size_t t = 0; t < labels[static_cast<std::size_t>(b)].size(); ++t)
        batch.mlm_labels[static_cast<std::size_t>(b) * batch.width + t] =
            labels[static_cast<std::size_t>(b)][t];
    const Matrix logits = forward_mlm(view, batch);
    for (int i = 0; i < logits.rows; ++i) {
      const int label = batch.mlm_labels[static_cast<std::size_t>(i)];
      if (label < 0) continue;
      total -= log_softmax_at(logits.row(i), logits.cols, label);
      ++count;
    }
    seqs.clear();
    labels.clear();
  };
  for (const auto& doc : docs) {
    auto [masked, lab] = mask_for_mlm(doc, mask_prob, vocab, rng);
    seqs.push_back(std::move(masked));
    labels.push_back(std::move(lab));
    if (static_cast<int>(seqs.size()) == batch_size) flush();
  }
  flush();
  if (count == 0) return 0.0;  // nothing was masked; treat as a no-signal slice
  return total / static_cast<double>(count);
}

inline std::vector<int> predict_classes(const ModelView& view,
                                        const std::vector<const std::vector<int>*>& seqs,
                                        int batch_size = 32) {
  std::vector<int> preds;
  preds.reserve(seqs.size());
  std::vector<std::vector<int>> chunk;
  auto flush = [&]() {
    if (chunk.empty()) return;
    const Batch batch = Batch::from_sequences(chunk);
    const Matrix logits = forward_cls(view, batch);
    for (int b = 0; b < batch.size; ++b)
      preds.push_back(argmax_row(logits.row(b), logits.cols));
    chunk.clear();
  };
  for (const auto* s : seqs) {
    chunk.push_back(*s);
    if (static_cast<int>(chunk.size()) == batch_size) flush();
  }
  flush();
  return preds;
}

inline std::vector<int> predict_labeled(const ModelView& view, const LabeledCorpus& corpus,
                                        int batch_size = 32) {
  std::vector<const std::vector<int>*> seqs;
  seqs.reserve(corpus.examples.size());
  for (const auto& ex : corpus.examples) seqs.push_back(&ex.tokens);
  return predict_classes(view, seqs, batch_size);
}

inline double accuracy(const std::vector<int>& preds, const LabeledCorpus& corpus) {
  if (preds.size() != corpus.examples.size() || preds.empty())
    throw std::invalid_argument("accuracy: prediction/gold size mismatch");
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == corpus.examples[i].label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// F1 of the positive class; 0 when precision + recall degenerate.
inline double f1_score(const std::vector<int>& preds, const LabeledCorpus& corpus,
                       int positive_class) {
  if (preds.size() != corpus.examples.size() || preds.empty())
    throw std::invalid_argument("f1: prediction/gold size mismatch");
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool pred_pos = preds[i] == positive_class;
    const bool gold_pos = corpus.examples[i].label == positive_class;
    if (pred_pos && gold_pos) ++tp;
    if (pred_pos && !gold_pos) ++fp;
    if (!pred_pos && gold_pos) ++fn;
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace peftdebias
