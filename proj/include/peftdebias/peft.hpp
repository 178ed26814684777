#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "peftdebias/model.hpp"

namespace peftdebias {

enum class PeftKind { none, adapter, prompt, lora, sft };

inline const char* peft_kind_str(PeftKind k) {
  switch (k) {
    case PeftKind::none: return "none";
    case PeftKind::adapter: return "adapter";
    case PeftKind::prompt: return "prompt";
    case PeftKind::lora: return "lora";
    case PeftKind::sft: return "sft";
  }
  return "?";
}

// Bottleneck adapter after each FFN residual: x += up(relu(down(x))).
// Up-projection weights and bias start at zero, so the adapter is the
// identity at initialization.
struct AdapterParams {
  int bottleneck = 0;
  struct Layer {
    Matrix down_w;  // d x b
    Matrix down_b;  // 1 x b
    Matrix up_w;    // b x d
    Matrix up_b;    // 1 x d
  };
  std::vector<Layer> layers;
};

// Soft prompt: p learned vectors prepended after embedding lookup. Prompt
// row j receives pos_emb[j]; real tokens keep their own position ids, so a
// prompt with attention masked off is exactly transparent.
struct PromptParams {
  Matrix vectors;  // p x d
  int length() const { return vectors.rows; }
};

// Low-rank updates on Wq and Wv of every layer: W_eff = W + (alpha/r) A.B
// with B zero-initialized.
struct LoraParams {
  int rank = 0;
  double alpha = 0.0;
  struct Target {
    Matrix a;  // d x r
    Matrix b;  // r x d
  };
  struct Layer {
    Target q, v;
  };
  std::vector<Layer> layers;
  double scale() const { return alpha / rank; }
};

// Sparse fine-tuning: a fixed coordinate mask over the backbone (flat
// indices in for_each_tensor order, task head excluded) plus a trained
// delta on exactly those coordinates.
struct SftParams {
  std::vector<std::int64_t> mask;  // sorted flat coordinates
  std::vector<double> delta;       // parallel to mask
};

// Tagged union over the four parameterizations; axis_name records which
// bias axis the parameters were trained on (checked on transfer).
struct PeftParams {
  std::variant<std::monostate, AdapterParams, PromptParams, LoraParams, SftParams> params;
  std::string axis_name;

  PeftKind kind() const { return static_cast<PeftKind>(params.index()); }

  AdapterParams& adapter() { return std::get<AdapterParams>(params); }
  const AdapterParams& adapter() const { return std::get<AdapterParams>(params); }
  PromptParams& prompt() { return std::get<PromptParams>(params); }
  const PromptParams& prompt() const { return std::get<PromptParams>(params); }
  LoraParams& lora() { return std::get<LoraParams>(params); }
  const LoraParams& lora() const { return std::get<LoraParams>(params); }
  SftParams& sft() { return std::get<SftParams>(params); }
  const SftParams& sft() const { return std::get<SftParams>(params); }
};

template <class PeftT, class Fn>
void for_each_peft_tensor(PeftT& p, Fn&& fn) {
  switch (p.kind()) {
    case PeftKind::adapter: {
      auto& a = p.adapter();
      for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const std::string prefix = "peft.adapter." + std::to_string(l) + ".";
        fn(prefix + "down_w", a.layers[l].down_w);
        fn(prefix + "down_b", a.layers[l].down_b);
        fn(prefix + "up_w", a.layers[l].up_w);
        fn(prefix + "up_b", a.layers[l].up_b);
      }
      break;
    }
    case PeftKind::prompt:
      fn("peft.prompt.vectors", p.prompt().vectors);
      break;
    case PeftKind::lora: {
      auto& lo = p.lora();
      for (std::size_t l = 0; l < lo.layers.size(); ++l) {
        const std::string prefix = "peft.lora." + std::to_string(l) + ".";
        fn(prefix + "q.a", lo.layers[l].q.a);
        fn(prefix + "q.b", lo.layers[l].q.b);
        fn(prefix + "v.a", lo.layers[l].v.a);
        fn(prefix + "v.b", lo.layers[l].v.b);
      }
      break;
    }
    case PeftKind::sft:
    case PeftKind::none:
      break;  // SFT delta is handled through its own sparse storage
  }
}

inline std::int64_t count_params(const PeftParams& peft) {
  switch (peft.kind()) {
    case PeftKind::none:
      return 0;
    case PeftKind::adapter: {
      std::int64_t n = 0;
      for (const auto& l : peft.adapter().layers)
        n += l.down_w.size() + l.down_b.size() + l.up_w.size() + l.up_b.size();
      return n;
    }
    case PeftKind::prompt:
      return peft.prompt().vectors.size();
    case PeftKind::lora: {
      std::int64_t n = 0;
      for (const auto& l : peft.lora().layers)
        n += l.q.a.size() + l.q.b.size() + l.v.a.size() + l.v.b.size();
      return n;
    }
    case PeftKind::sft:
      return static_cast<std::int64_t>(peft.sft().mask.size());
  }
  return 0;
}

namespace detail {

inline std::int64_t adapter_count(const ModelConfig& c, int b) {
  return static_cast<std::int64_t>(c.num_layers) * (2LL * c.hidden * b + b + c.hidden);
}
inline std::int64_t prompt_count(const ModelConfig& c, int p) {
  return static_cast<std::int64_t>(p) * c.hidden;
}
inline std::int64_t lora_count(const ModelConfig& c, int r) {
  return 2LL * c.num_layers * 2 * c.hidden * r;
}

// Largest h >= 1 with count(h) <= target; falls back to h = 1 while the
// minimum stays within 1.5x of the target.
template <class CountFn>
int pick_hyper(CountFn count, std::int64_t target, const char* what) {
  if (count(1) > target) {
    if (count(1) <= target + target / 2) return 1;
    throw std::runtime_error(std::string("infeasible budget: minimum ") + what +
                             " already exceeds 1.5x the parameter target");
  }
  int h = 1;
  while (count(h + 1) <= target) ++h;
  return h;
}

}  // namespace detail

inline PeftParams make_adapter(const ModelConfig& config, int bottleneck, Rng& rng) {
  const int d = config.hidden;
  // down-projection at 1/sqrt(d): the up-projection gradient scales with
  // the down activations, so a timid down freezes the bottleneck
  const double down_std = 1.0 / std::sqrt(static_cast<double>(d));
  AdapterParams a;
  a.bottleneck = bottleneck;
  a.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : a.layers) {
    layer.down_w = Matrix(d, bottleneck);
    fill_normal(layer.down_w, rng, down_std);
    layer.down_b = Matrix(1, bottleneck);
    layer.up_w = Matrix(bottleneck, d);  // zero: identity at init
    layer.up_b = Matrix(1, d);
  }
  PeftParams peft;
  peft.params = std::move(a);
  return peft;
}

inline PeftParams make_prompt(const ModelConfig& config, int length) {
  if (length >= config.max_seq)
    throw std::runtime_error("prompt length would exceed max sequence length");
  PromptParams pr;
  pr.vectors = Matrix(length, config.hidden);
  PeftParams peft;
  peft.params = std::move(pr);
  return peft;
}

inline PeftParams make_lora(const ModelConfig& config, int rank, double alpha, Rng& rng) {
  const int d = config.hidden;
  // A at 1/sqrt(d): the B gradient scales with A, so a timid A freezes the
  // product update. B starts at zero, so delta-W vanishes at init.
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  LoraParams lo;
  lo.rank = rank;
  lo.alpha = alpha;
  lo.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : lo.layers) {
    for (auto* t : {&layer.q, &layer.v}) {
      t->a = Matrix(d, rank);
      fill_normal(t->a, rng, a_std);
      t->b = Matrix(rank, d);
    }
  }
  PeftParams peft;
  peft.params = std::move(lo);
  return peft;
}

// Sizes a PEFT so its trainable-parameter count lands within [0.5x, 1.5x]
// of budget_fraction * backbone parameters, picking the largest discrete
// hyperparameter that does not overshoot the target.
inline PeftParams init_peft(PeftKind kind, const ModelConfig& config, double budget_fraction,
                            Rng& rng) {
  if (budget_fraction <= 0.0 || budget_fraction >= 1.0)
    throw std::invalid_argument("budget_fraction must lie in (0, 1)");
  if (kind == PeftKind::none || kind == PeftKind::sft)
    throw std::invalid_argument("init_peft handles adapter/prompt/lora; SFT uses sft_select_mask");

  const std::int64_t backbone = backbone_param_count(config);
  const std::int64_t target =
      static_cast<std::int64_t>(static_cast<double>(backbone) * budget_fraction);

  PeftParams peft;
  switch (kind) {
    case PeftKind::adapter:
      peft = make_adapter(config,
                          detail::pick_hyper([&](int h) { return detail::adapter_count(config, h); },
                                             target, "adapter bottleneck"),
                          rng);
      break;
    case PeftKind::prompt:
      peft = make_prompt(config,
                         detail::pick_hyper([&](int h) { return detail::prompt_count(config, h); },
                                            target, "prompt length"));
      break;
    case PeftKind::lora:
      peft = make_lora(config,
                       detail::pick_hyper([&](int h) { return detail::lora_count(config, h); },
                                          target, "lora rank"),
                       0.0, rng);
      peft.lora().alpha = peft.lora().rank;  // scale factor 1
      break;
    default:
      break;
  }

  const std::int64_t count = count_params(peft);
  if (2 * count < target || 2 * count > 3 * target)
    throw std::runtime_error("selected PEFT size misses the [0.5x, 1.5x] budget band");
  return peft;
}

// Prompt vectors are initialized from randomly chosen non-special token
// embeddings once a backbone exists.
inline void init_prompt_from_embeddings(PeftParams& peft, const TransformerParams& backbone,
                                        Rng& rng) {
  auto& vectors = peft.prompt().vectors;
  const int non_special = backbone.config.vocab_size - Vocabulary::kNumSpecials;
  for (int i = 0; i < vectors.rows; ++i) {
    const int id = Vocabulary::kNumSpecials +
                   static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(non_special)));
    for (int j = 0; j < vectors.cols; ++j) vectors.at(i, j) = backbone.tok_emb.at(id, j);
  }
}

enum class Phase { upstream, downstream };

// Which tensors train in each phase. Upstream: exactly the PEFT (for SFT,
// the delta over its mask). Downstream: backbone plus task head with the
// PEFT untouched; for SFT the masked backbone coordinates stay frozen.
struct TrainableSet {
  std::set<std::string> tensors;
  bool sft_delta = false;                 // upstream SFT: train the sparse delta
  bool exclude_sft_mask_coords = false;   // downstream SFT: freeze masked coordinates

  bool contains(const std::string& name) const { return tensors.count(name) > 0; }
  bool empty() const { return tensors.empty() && !sft_delta; }
};

inline TrainableSet trainable_set(PeftKind kind, Phase phase, const TransformerParams& backbone,
                                  const PeftParams* peft) {
  TrainableSet set;
  if (phase == Phase::upstream) {
    if (kind == PeftKind::sft) {
      set.sft_delta = true;
      return set;
    }
    if (peft != nullptr) {
      for_each_peft_tensor(const_cast<PeftParams&>(*peft),
                           [&](const std::string& name, Matrix&) { set.tensors.insert(name); });
    }
    return set;
  }
  for_each_tensor(const_cast<TransformerParams&>(backbone),
                  [&](const std::string& name, Matrix&) { set.tensors.insert(name); });
  if (kind == PeftKind::sft) set.exclude_sft_mask_coords = true;
  return set;
}

// Flat coordinate index over the backbone (task head excluded); the SFT
// mask lives in this space.
struct FlatIndex {
  struct Entry {
    std::string name;
    Matrix* tensor;
    std::int64_t offset;
  };
  std::vector<Entry> entries;
  std::int64_t total = 0;

  static FlatIndex build(TransformerParams& params) {
    FlatIndex idx;
    for_each_tensor(params, [&](const std::string& name, Matrix& m) {
      if (name == "cls_head") return;
      idx.entries.push_back({name, &m, idx.total});
      idx.total += m.size();
    });
    return idx;
  }

  double get(std::int64_t flat) const {
    const Entry& e = locate(flat);
    return e.tensor->data[static_cast<std::size_t>(flat - e.offset)];
  }

  void add(std::int64_t flat, double v) const {
    const Entry& e = locate(flat);
    e.tensor->data[static_cast<std::size_t>(flat - e.offset)] += v;
  }

  const Entry& locate(std::int64_t flat) const {
    auto it = std::upper_bound(entries.begin(), entries.end(), flat,
                               [](std::int64_t f, const Entry& e) { return f < e.offset; });
    return *(it - 1);
  }
};

}  // namespace peftdebias
