#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftdebias/cda.hpp"
#include "peftdebias/checkpoint.hpp"
#include "peftdebias/config.hpp"
#include "peftdebias/corpus.hpp"
#include "peftdebias/forward.hpp"
#include "peftdebias/metrics.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"
#include "peftdebias/train.hpp"

namespace peftdebias {

using Curve = std::vector<std::pair<std::int64_t, double>>;

enum class SelectionCriterion { min_loss, max_metric };

// Argmin/argmax over an evaluation curve; ties resolve to the earliest step.
inline std::int64_t select_checkpoint(const Curve& curve, SelectionCriterion criterion) {
  if (curve.empty()) throw std::invalid_argument("select_checkpoint: empty curve");
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const bool better = criterion == SelectionCriterion::min_loss
                            ? curve[i].second < curve[best].second
                            : curve[i].second > curve[best].second;
    if (better) best = i;
  }
  return curve[best].first;
}

// First 90% / last 10% split by document index; the tail is held out.
template <class T>
std::pair<std::vector<T>, std::vector<T>> heldout_split(const std::vector<T>& items) {
  if (items.size() < 2) throw std::runtime_error("corpus too small for a held-out split");
  const std::size_t held = std::max<std::size_t>(1, items.size() / 10);
  const std::size_t train = items.size() - held;
  return {std::vector<T>(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(train)),
          std::vector<T>(items.begin() + static_cast<std::ptrdiff_t>(train), items.end())};
}

struct MlmLoopOptions {
  double lr = 1e-5;
  std::int64_t steps = 0;
  std::int64_t eval_interval = 100;
  int batch_size = 16;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
  // plain SGD instead of Adam; the SFT selection probe ranks coordinates
  // by movement, and Adam's per-coordinate normalization would flatten
  // exactly the gradient-magnitude signal being ranked
  bool plain_sgd = false;
};

namespace detail {

// Seed substreams (kept distinct per purpose).
constexpr std::uint64_t kStreamInit = 0;
constexpr std::uint64_t kStreamMask = 1;
constexpr std::uint64_t kStreamOrder = 2;
constexpr std::uint64_t kStreamEval = 3;
constexpr std::uint64_t kStreamPrompt = 4;
constexpr std::uint64_t kStreamPeft = 5;
constexpr std::uint64_t kStreamSft = 6;
constexpr std::uint64_t kStreamDownstream = 7;

inline Batch make_mlm_batch(const std::vector<std::vector<int>>& docs,
                            const std::vector<std::size_t>& picks, double mask_prob, int vocab,
                            Rng& mask_rng) {
  std::vector<std::vector<int>> seqs;
  std::vector<std::vector<int>> labels;
  seqs.reserve(picks.size());
  for (std::size_t i : picks) {
    auto [masked, lab] = mask_for_mlm(docs[i], mask_prob, vocab, mask_rng);
    seqs.push_back(std::move(masked));
    labels.push_back(std::move(lab));
  }
  Batch batch = Batch::from_sequences(seqs);
  batch.mlm_labels.assign(static_cast<std::size_t>(batch.size) * batch.width, -1);
  for (int b = 0; b < batch.size; ++b)
    for (std::size_t t = 0; t < labels[static_cast<std::size_t>(b)].size(); ++t)
      batch.mlm_labels[static_cast<std::size_t>(b) * batch.width + t] =
          labels[static_cast<std::size_t>(b)][t];
  return batch;
}

inline bool has_mlm_target(const Batch& batch) {
  for (int l : batch.mlm_labels)
    if (l >= 0) return true;
  return false;
}

}  // namespace detail

// Generic seeded MLM loop. Evaluates held-out loss at step 0, every
// eval_interval steps and at the final step; on_eval(step, loss, improved)
// lets the caller snapshot the lowest-loss state. With no held-out docs
// the loop runs without evaluations.
template <class OnEval>
Curve train_mlm_loop(TransformerParams& backbone, PeftParams* peft, const TrainableSet& trainable,
                     const CoordinateFreeze* freeze,
                     const std::vector<std::vector<int>>& train_docs,
                     const std::vector<std::vector<int>>& eval_docs, const MlmLoopOptions& opts,
                     OnEval&& on_eval) {
  if (train_docs.empty()) throw std::runtime_error("mlm training: empty corpus");
  Curve curve;
  AdamOptimizer adam(AdamConfig{opts.lr, 0.9, 0.999, 1e-8});
  Rng mask_rng(Rng::derive(opts.seed, detail::kStreamMask));
  IndexStream order(train_docs.size(), Rng::derive(opts.seed, detail::kStreamOrder));
  const std::uint64_t eval_seed = Rng::derive(opts.seed, detail::kStreamEval);
  const int vocab = backbone.config.vocab_size;
  const bool use_peft = peft != nullptr && peft->kind() != PeftKind::none;

  double best = std::numeric_limits<double>::infinity();
  auto evaluate = [&](std::int64_t step) {
    if (eval_docs.empty()) return;
    const ModelView view{&backbone, use_peft ? peft : nullptr};
    const double loss = eval_mlm_loss(view, eval_docs, opts.mask_prob, eval_seed);
    curve.emplace_back(step, loss);
    const bool improved = loss < best;
    if (improved) best = loss;
    on_eval(step, loss, improved);
  };
  evaluate(0);

  for (std::int64_t step = 1; step <= opts.steps; ++step) {
    Batch batch;
    int attempts = 0;
    do {
      std::vector<std::size_t> picks;
      for (int b = 0; b < opts.batch_size; ++b) picks.push_back(order.next());
      batch = detail::make_mlm_batch(train_docs, picks, opts.mask_prob, vocab, mask_rng);
      if (++attempts > 100)
        throw std::runtime_error("mlm training: no maskable position in 100 batch draws");
    } while (!detail::has_mlm_target(batch));

    const ModelView view{&backbone, use_peft ? peft : nullptr};
    const LossAndGradients lg = gradients(view, batch, LossKind::mlm);
    if (!std::isfinite(lg.loss))
      throw std::runtime_error("mlm training diverged at step " + std::to_string(step));
    if (opts.plain_sgd)
      sgd_step(backbone, peft, lg.grads, trainable, opts.lr);
    else
      adam.step(backbone, peft, lg.grads, trainable, freeze);

    if (step % opts.eval_interval == 0 || step == opts.steps) evaluate(step);
  }
  return curve;
}

// Lottery-ticket style mask selection: densely fine-tune a copy of the
// backbone with MLM on the CDA-augmented corpus, keep the coordinates that
// moved the most (ties to the lowest flat index), rewind, return a zero
// delta over that mask.
inline PeftParams sft_select_mask(const TransformerParams& backbone,
                                  const std::vector<std::vector<int>>& augmented_docs,
                                  double budget_fraction, std::int64_t steps, double lr,
                                  double mask_prob, int batch_size, std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("sft_select_mask: steps must be >= 1");
  TransformerParams probe = backbone;
  TrainableSet all;
  for_each_tensor(probe, [&](const std::string& name, Matrix&) { all.tensors.insert(name); });
  MlmLoopOptions opts;
  opts.lr = lr;
  opts.steps = steps;
  opts.eval_interval = steps;  // no mid-run evaluation
  opts.batch_size = batch_size;
  opts.mask_prob = mask_prob;
  opts.seed = seed;
  opts.plain_sgd = true;  // movement ranking needs magnitude-faithful updates
  train_mlm_loop(probe, nullptr, all, nullptr, augmented_docs, {}, opts,
                 [](std::int64_t, double, bool) {});

  FlatIndex before = FlatIndex::build(const_cast<TransformerParams&>(backbone));
  FlatIndex after = FlatIndex::build(probe);
  const std::int64_t total = before.total;
  const std::int64_t k =
      static_cast<std::int64_t>(budget_fraction * static_cast<double>(total));
  if (k < 1) throw std::runtime_error("sft_select_mask: budget selects no coordinates");

  std::vector<std::int64_t> order(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  std::vector<double> movement(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i)
    movement[static_cast<std::size_t>(i)] = std::abs(after.get(i) - before.get(i));
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     const double ma = movement[static_cast<std::size_t>(a)];
                     const double mb = movement[static_cast<std::size_t>(b)];
                     if (ma != mb) return ma > mb;
                     return a < b;
                   });
  SftParams sft;
  sft.mask.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(sft.mask.begin(), sft.mask.end());
  sft.delta.assign(sft.mask.size(), 0.0);
  PeftParams peft;
  peft.params = std::move(sft);
  return peft;
}

// Upstream stage: CDA-augment the axis corpus and train only the PEFT with
// MLM, backbone frozen; returns the held-out-loss-selected PEFT.
inline PeftParams upstream_debias(TransformerParams& backbone, PeftKind kind, const Corpus& corpus,
                                  const AxisBinding& axis, const ExperimentConfig& cfg,
                                  Curve* curve_out = nullptr) {
  if (kind == PeftKind::none)
    throw std::invalid_argument("upstream_debias requires a PEFT kind (FT has no upstream stage)");
  if (corpus.documents.empty()) throw std::runtime_error("upstream corpus is empty");

  auto [train_raw, eval_raw] = heldout_split(corpus.documents);
  const CdaConfig cda_cfg{cfg.cda_two_sided};
  Corpus train_corpus{train_raw, corpus.provenance};
  Corpus eval_corpus{eval_raw, corpus.provenance};
  const std::vector<std::vector<int>> train_docs =
      augment_corpus(train_corpus, axis, cda_cfg).documents;
  const std::vector<std::vector<int>> eval_docs =
      augment_corpus(eval_corpus, axis, cda_cfg).documents;

  PeftParams peft;
  if (kind == PeftKind::sft) {
    const double lr = cfg.sft_select_lr > 0 ? cfg.sft_select_lr : cfg.upstream_lr;
    peft = sft_select_mask(backbone, train_docs, cfg.budget_fraction, cfg.sft_select_steps, lr,
                           cfg.mask_prob, cfg.upstream_batch,
                           Rng::derive(cfg.seed, detail::kStreamSft));
  } else {
    Rng rng(Rng::derive(cfg.seed, detail::kStreamPeft));
    peft = init_peft(kind, backbone.config, cfg.budget_fraction, rng);
    if (kind == PeftKind::prompt) {
      Rng prng(Rng::derive(cfg.seed, detail::kStreamPrompt));
      init_prompt_from_embeddings(peft, backbone, prng);
    }
  }
  peft.axis_name = axis_name_str(axis.name);

  const TrainableSet trainable = trainable_set(kind, Phase::upstream, backbone, &peft);
  MlmLoopOptions opts;
  opts.lr = cfg.upstream_lr;
  opts.steps = cfg.upstream_steps;
  opts.eval_interval = cfg.eval_interval;
  opts.batch_size = cfg.upstream_batch;
  opts.mask_prob = cfg.mask_prob;
  opts.seed = cfg.seed;

  PeftParams best = peft;
  const Curve curve = train_mlm_loop(backbone, &peft, trainable, nullptr, train_docs, eval_docs,
                                     opts, [&](std::int64_t, double, bool improved) {
                                       if (improved) best = peft;
                                     });
  if (curve_out != nullptr) *curve_out = curve;
  return best;
}

// Full-model upstream debiasing baseline: same loop, all backbone
// parameters trainable; returns a new backbone.
inline TransformerParams full_debias_upstream(const TransformerParams& backbone,
                                              const Corpus& corpus, const AxisBinding& axis,
                                              const ExperimentConfig& cfg,
                                              Curve* curve_out = nullptr) {
  if (corpus.documents.empty()) throw std::runtime_error("upstream corpus is empty");
  auto [train_raw, eval_raw] = heldout_split(corpus.documents);
  const CdaConfig cda_cfg{cfg.cda_two_sided};
  Corpus train_corpus{train_raw, corpus.provenance};
  Corpus eval_corpus{eval_raw, corpus.provenance};
  const auto train_docs = augment_corpus(train_corpus, axis, cda_cfg).documents;
  const auto eval_docs = augment_corpus(eval_corpus, axis, cda_cfg).documents;

  TransformerParams model = backbone;
  TrainableSet all;
  for_each_tensor(model, [&](const std::string& name, Matrix&) { all.tensors.insert(name); });
  MlmLoopOptions opts;
  opts.lr = cfg.upstream_lr;
  opts.steps = cfg.upstream_steps;
  opts.eval_interval = cfg.eval_interval;
  opts.batch_size = cfg.upstream_batch;
  opts.mask_prob = cfg.mask_prob;
  opts.seed = cfg.seed;

  TransformerParams best = model;
  const Curve curve = train_mlm_loop(model, nullptr, all, nullptr, train_docs, eval_docs, opts,
                                     [&](std::int64_t, double, bool improved) {
                                       if (improved) best = model;
                                     });
  if (curve_out != nullptr) *curve_out = curve;
  return best;
}

struct DownstreamResult {
  TransformerParams model;
  Curve curve;          // (epoch, held-out metric)
  std::int64_t best_epoch = 0;
  double best_metric = 0.0;
  std::string metric_name;  // "accuracy" | "f1"
};

// Task fine-tuning with the PEFT injected and frozen. Checkpoint selection
// is by best held-out metric (accuracy, or positive-class F1 for binary
// tasks), evaluated after every epoch; ties keep the earliest epoch.
inline DownstreamResult downstream_finetune(const TransformerParams& backbone,
                                            const PeftParams* peft, const LabeledCorpus& corpus,
                                            const ExperimentConfig& cfg) {
  if (corpus.num_classes() != backbone.config.num_classes)
    throw std::runtime_error("downstream: label space does not match model.classes");
  auto [train_ex, dev_ex] = heldout_split(corpus.examples);

  DownstreamResult result;
  result.model = backbone;
  const bool use_peft = peft != nullptr && peft->kind() != PeftKind::none;
  const PeftKind kind = use_peft ? peft->kind() : PeftKind::none;

  std::string metric = cfg.selection;
  if (metric == "auto") metric = corpus.num_classes() == 2 ? "f1" : "accuracy";
  result.metric_name = metric == "f1" ? "f1" : "accuracy";

  std::vector<double> class_weights(static_cast<std::size_t>(corpus.num_classes()), 1.0);
  if (cfg.positive_class_weight != 1.0) {
    if (corpus.num_classes() != 2)
      throw std::runtime_error("downstream: class weighting needs a binary task");
    class_weights[1] = cfg.positive_class_weight;
  }

  const TrainableSet trainable = trainable_set(kind, Phase::downstream, result.model, peft);
  std::optional<CoordinateFreeze> freeze;
  if (kind == PeftKind::sft) freeze = CoordinateFreeze::build(result.model, peft->sft().mask);

  LabeledCorpus dev;
  dev.class_names = corpus.class_names;
  dev.examples = dev_ex;
  auto eval_metric = [&](const TransformerParams& model) {
    const ModelView view{&model, use_peft ? peft : nullptr};
    const std::vector<int> preds = predict_labeled(view, dev);
    return metric == "f1" ? f1_score(preds, dev, 1) : accuracy(preds, dev);
  };

  AdamOptimizer adam(AdamConfig{cfg.downstream_lr, 0.9, 0.999, 1e-8});
  Rng order_rng(Rng::derive(cfg.seed, detail::kStreamDownstream));

  TransformerParams best = result.model;
  double best_metric = eval_metric(result.model);
  std::int64_t best_epoch = 0;
  result.curve.emplace_back(0, best_metric);

  std::vector<std::size_t> order(train_ex.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.downstream_epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.downstream_batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.downstream_batch));
      std::vector<std::vector<int>> seqs;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        seqs.push_back(train_ex[order[i]].tokens);
        labels.push_back(train_ex[order[i]].label);
      }
      Batch batch = Batch::from_sequences(seqs);
      batch.class_labels = std::move(labels);
      const ModelView view{&result.model, use_peft ? peft : nullptr};
      const LossAndGradients lg =
          gradients(view, batch, LossKind::classification, &class_weights);
      if (!std::isfinite(lg.loss))
        throw std::runtime_error("downstream training diverged in epoch " + std::to_string(epoch));
      adam.step(result.model, nullptr, lg.grads, trainable,
                freeze.has_value() ? &*freeze : nullptr);
    }
    const double m = eval_metric(result.model);
    result.curve.emplace_back(epoch, m);
    if (m > best_metric) {
      best_metric = m;
      best = result.model;
      best_epoch = epoch;
    }
  }

  result.model = std::move(best);
  result.best_metric = best_metric;
  result.best_epoch = best_epoch;
  return result;
}

struct RunArtifacts {
  std::string run_dir;
  MetricReport report;
  Curve upstream_curve;
  Curve downstream_curve;
  std::uint64_t initial_backbone_checksum = 0;
  std::uint64_t upstream_peft_checksum = 0;  // 0 when no PEFT
};

namespace detail {

inline PeftKind method_peft_kind(const std::string& method) {
  if (method == "adapter") return PeftKind::adapter;
  if (method == "prompt") return PeftKind::prompt;
  if (method == "lora") return PeftKind::lora;
  if (method == "sft") return PeftKind::sft;
  return PeftKind::none;  // ft, full_debias
}

inline void write_curve(const std::string& path, const Curve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write curve: " + path);
  out << "step\tvalue\n";
  for (const auto& [step, value] : curve) out << step << "\t" << format_double(value) << "\n";
}

inline void write_breakdown(const std::string& path,
                            const std::vector<std::pair<std::string, double>>& rows,
                            const char* key_header, const char* value_header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write breakdown: " + path);
  out << key_header << "\t" << value_header << "\n";
  for (const auto& [name, value] : rows) out << name << "\t" << format_double(value) << "\n";
}

// The backbone every run starts from: seeded random init plus an optional
// seeded MLM pre-training pass over the raw (un-augmented) corpus; stands
// in for the pretrained foundation model.
inline TransformerParams init_backbone(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  const ModelConfig model_cfg = cfg.model_config(vocab.size());
  model_cfg.validate();
  if (!cfg.init_checkpoint.empty()) {
    TransformerParams params = load_model_checkpoint(cfg.init_checkpoint);
    if (!(params.config == model_cfg))
      throw std::runtime_error("init checkpoint config does not match the experiment config");
    return params;
  }
  Rng rng(Rng::derive(cfg.seed, kStreamInit));
  TransformerParams params = init_params(model_cfg, rng);
  if (cfg.pretrain_steps > 0) {
    const std::string corpus_path =
        cfg.pretrain_corpus.empty() ? cfg.upstream_corpus : cfg.pretrain_corpus;
    if (corpus_path.empty())
      throw std::runtime_error("pretrain.steps set but no pretraining corpus available");
    const Corpus corpus = load_corpus(corpus_path, vocab);
    TrainableSet all;
    for_each_tensor(params, [&](const std::string& name, Matrix&) { all.tensors.insert(name); });
    MlmLoopOptions opts;
    opts.lr = cfg.pretrain_lr;
    opts.steps = cfg.pretrain_steps;
    opts.eval_interval = cfg.pretrain_steps;
    opts.batch_size = cfg.upstream_batch;
    opts.mask_prob = cfg.mask_prob;
    opts.seed = Rng::derive(cfg.seed, kStreamInit) ^ 0x5eedULL;
    train_mlm_loop(params, nullptr, all, nullptr, corpus.documents, {}, opts,
                   [](std::int64_t, double, bool) {});
  }
  return params;
}

}  // namespace detail

// Builds (or loads) the foundation model a run starts from.
inline TransformerParams init_foundation_model(const ExperimentConfig& cfg,
                                               const Vocabulary& vocab) {
  return detail::init_backbone(cfg, vocab);
}

// Stage control for the CLI: the default runs everything; the reuse flags
// load previously written checkpoints from the run directory instead of
// training the corresponding stage.
struct RunOptions {
  bool downstream = true;
  bool reuse_upstream = false;
  bool reuse_downstream = false;
};

// One full experiment: (optional) upstream debiasing, downstream
// fine-tuning with the PEFT frozen, metric evaluation, artifact emission.
// Fully deterministic in the config.
inline RunArtifacts run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {}) {
  validate_config(cfg);
  if (cfg.run_dir.empty()) throw std::runtime_error("config: run_dir is required");
  if (cfg.vocab_path.empty()) throw std::runtime_error("config: vocab.path is required");
  namespace fs = std::filesystem;
  fs::create_directories(cfg.run_dir);
  fs::create_directories(cfg.run_dir + "/curves");

  RunArtifacts artifacts;
  artifacts.run_dir = cfg.run_dir;
  MetricReport& report = artifacts.report;
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  report.transfer = !cfg.transfer_peft.empty();

  {
    std::ofstream echo(cfg.run_dir + "/config.resolved");
    echo << format_config(cfg);
  }

  const Vocabulary vocab = Vocabulary::load(cfg.vocab_path);
  const PeftKind kind = detail::method_peft_kind(cfg.method);
  const bool is_transfer = !cfg.transfer_peft.empty();

  std::optional<BiasAxis> axis;
  std::optional<AxisBinding> binding;
  if (!cfg.axis_path.empty()) {
    axis = load_bias_axis(cfg.axis_path);
    binding = AxisBinding::bind(*axis, vocab);
  }

  // ----- stage: initialize -----
  TransformerParams backbone = [&] {
    try {
      return detail::init_backbone(cfg, vocab);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[initialize] ") + e.what());
    }
  }();
  artifacts.initial_backbone_checksum = checksum(backbone);

  // ----- stage: upstream -----
  std::optional<PeftParams> peft;
  std::optional<TransformerParams> debiased_backbone;
  try {
    if (is_transfer) {
      if (cfg.method == "full_debias" || cfg.method == "ft")
        throw std::runtime_error("transfer requires a PEFT checkpoint method");
      ModelConfig ck_cfg;
      peft = load_peft_checkpoint(cfg.transfer_peft, &ck_cfg);
      // the task head is not part of the PEFT surface, so the class count
      // is allowed to differ between source and target tasks
      ModelConfig ck_like = ck_cfg;
      ck_like.num_classes = backbone.config.num_classes;
      if (!(ck_like == backbone.config))
        throw std::runtime_error("transferred PEFT was trained on an incompatible model config");
      if (peft->kind() != kind)
        throw std::runtime_error("transferred PEFT kind does not match peft.kind");
      if (!binding.has_value())
        throw std::runtime_error("transfer requires axis.path for the target task");
      if (peft->axis_name != axis_name_str(binding->name) && !cfg.allow_axis_mismatch)
        throw std::runtime_error("axis mismatch: PEFT trained on axis '" + peft->axis_name +
                                 "' but the task axis is '" + axis_name_str(binding->name) +
                                 "' (set transfer.allow_axis_mismatch to override)");
    } else if (options.reuse_upstream && cfg.method != "ft") {
      const std::string path = cfg.run_dir + "/upstream.ckpt";
      if (!fs::exists(path))
        throw std::runtime_error("no upstream checkpoint at " + path +
                                 " (run train-upstream first)");
      if (cfg.method == "full_debias")
        debiased_backbone = load_model_checkpoint(path);
      else
        peft = load_peft_checkpoint(path);
    } else if (cfg.method == "full_debias") {
      if (!binding.has_value()) throw std::runtime_error("full_debias requires axis.path");
      const Corpus corpus = load_corpus(cfg.upstream_corpus, vocab);
      debiased_backbone = full_debias_upstream(backbone, corpus, *binding, cfg,
                                               &artifacts.upstream_curve);
      save_model_checkpoint(cfg.run_dir + "/upstream.ckpt", *debiased_backbone, Rng(cfg.seed));
    } else if (kind != PeftKind::none) {
      if (!binding.has_value()) throw std::runtime_error(cfg.method + " requires axis.path");
      const Corpus corpus = load_corpus(cfg.upstream_corpus, vocab);
      const std::uint64_t before = checksum(backbone);
      peft = upstream_debias(backbone, kind, corpus, *binding, cfg, &artifacts.upstream_curve);
      if (checksum(backbone) != before)
        throw std::logic_error("backbone changed during the upstream stage");
      save_peft_checkpoint(cfg.run_dir + "/upstream.ckpt", *peft, backbone.config);
    }
    if (!artifacts.upstream_curve.empty())
      detail::write_curve(cfg.run_dir + "/curves/upstream_loss.tsv", artifacts.upstream_curve);
  } catch (const std::logic_error&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("[upstream] ") + e.what());
  }
  if (peft.has_value()) artifacts.upstream_peft_checksum = checksum(*peft);

  const TransformerParams& task_backbone =
      debiased_backbone.has_value() ? *debiased_backbone : backbone;
  const PeftParams* peft_ptr = peft.has_value() ? &*peft : nullptr;

  // ----- stage: intrinsic metrics (upstream model view) -----
  try {
    const ModelView upstream_view{&task_backbone, peft_ptr};
    if (!cfg.crows_path.empty()) {
      const auto pairs = load_minimal_pairs(cfg.crows_path, vocab);
      report.crows = crows_score(upstream_view, pairs);
    }
    if (!cfg.stereoset_path.empty()) {
      const auto instances = load_stereo_instances(cfg.stereoset_path, vocab);
      const StereoScores scores = stereoset_scores(upstream_view, instances);
      report.ss_lm = scores.lm_score;
      report.ss_score = scores.ss_score;
    }
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("[intrinsic-eval] ") + e.what());
  }

  // ----- stage: downstream -----
  std::optional<TransformerParams> task_model;
  if (options.downstream && !cfg.downstream_train.empty()) {
    try {
      if (options.reuse_downstream) {
        const std::string path = cfg.run_dir + "/downstream.ckpt";
        if (!fs::exists(path))
          throw std::runtime_error("no downstream checkpoint at " + path +
                                   " (run train-downstream first)");
        task_model = load_model_checkpoint(path);
      } else {
        const LabeledCorpus train = load_labeled_corpus(cfg.downstream_train, vocab);
        const std::uint64_t peft_before = peft.has_value() ? checksum(*peft) : 0;
        DownstreamResult ds = downstream_finetune(task_backbone, peft_ptr, train, cfg);
        if (peft.has_value() && checksum(*peft) != peft_before)
          throw std::logic_error("PEFT changed during the downstream stage");
        artifacts.downstream_curve = ds.curve;
        detail::write_curve(cfg.run_dir + "/curves/downstream_metric.tsv", ds.curve);
        save_model_checkpoint(cfg.run_dir + "/downstream.ckpt", ds.model, Rng(cfg.seed));
        task_model = std::move(ds.model);
      }
    } catch (const std::logic_error&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[downstream] ") + e.what());
    }
  }

  // ----- stage: extrinsic metrics -----
  if (task_model.has_value() && !cfg.downstream_eval.empty()) {
    try {
      const LabeledCorpus eval = load_labeled_corpus(cfg.downstream_eval, vocab);
      const ModelView view{&*task_model, peft_ptr};
      const std::vector<int> preds = predict_labeled(view, eval);

      const bool binary = eval.num_classes() == 2;
      if (binary)
        report.f1 = f1_score(preds, eval, 1);
      else
        report.accuracy = accuracy(preds, eval);

      const bool all_gendered =
          std::all_of(eval.examples.begin(), eval.examples.end(),
                      [](const LabeledExample& ex) { return ex.protected_attr.gender.has_value(); });
      const bool is_nli =
          std::find(eval.class_names.begin(), eval.class_names.end(), "neutral") !=
          eval.class_names.end();
      if (all_gendered && !is_nli) {
        const TprGapResult gap = tpr_gap(preds, eval);
        report.tpr_gap_value = gap.aggregate;
        report.tpr_by_occupation = gap.per_class;
        std::sort(report.tpr_by_occupation.begin(), report.tpr_by_occupation.end());
        report.tpr_excluded = gap.excluded;
        std::sort(report.tpr_excluded.begin(), report.tpr_excluded.end());
        detail::write_breakdown(cfg.run_dir + "/report_tpr_gap.tsv", report.tpr_by_occupation,
                                "occupation", "tpr_gap");
      }
      if (binary && !cfg.identifiers_path.empty()) {
        const auto identifiers = load_word_list(cfg.identifiers_path);
        const FprdResult fr = fprd(preds, eval, identifiers);
        report.fprd_value = fr.value;
        report.fprd_by_identifier = fr.per_identifier;
        std::sort(report.fprd_by_identifier.begin(), report.fprd_by_identifier.end());
        report.fprd_skipped = fr.skipped;
        std::sort(report.fprd_skipped.begin(), report.fprd_skipped.end());
        detail::write_breakdown(cfg.run_dir + "/report_fprd.tsv", report.fprd_by_identifier,
                                "identifier", "fprd_term");

        if (!cfg.iptts_templates_path.empty()) {
          const auto templates = load_iptts_templates(cfg.iptts_templates_path);
          const LabeledCorpus iptts = generate_iptts(templates, identifiers, vocab);
          const std::vector<int> iptts_preds = predict_labeled(view, iptts);
          report.fprd_iptts = fprd(iptts_preds, iptts, identifiers).value;
        }
      }
      if (is_nli && !cfg.nli_occupations_path.empty() && !cfg.nli_gender_words_path.empty() &&
          !cfg.nli_verb_phrases_path.empty()) {
        const auto occupations = load_word_list(cfg.nli_occupations_path);
        const auto genders = load_word_list(cfg.nli_gender_words_path);
        const auto phrases = load_word_list(cfg.nli_verb_phrases_path);
        const auto pairs = generate_bias_nli(occupations, genders, phrases, vocab);
        std::vector<const std::vector<int>*> seqs;
        for (const auto& p : pairs) seqs.push_back(&p);
        const std::vector<int> nli_preds = predict_classes(view, seqs);
        const auto neutral_it =
            std::find(eval.class_names.begin(), eval.class_names.end(), "neutral");
        const int neutral_class =
            static_cast<int>(std::distance(eval.class_names.begin(), neutral_it));
        report.fn_neutral = bias_nli_fn(nli_preds, neutral_class);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("[extrinsic-eval] ") + e.what());
    }
  }

  emit_report(report, cfg.run_dir + "/report.json");
  return artifacts;
}

// Transfer: a configuration whose transfer.peft_checkpoint points at an
// upstream PEFT trained on another corpus of the same axis.
inline RunArtifacts transfer_run(const ExperimentConfig& cfg) {
  if (cfg.transfer_peft.empty())
    throw std::runtime_error("transfer_run: transfer.peft_checkpoint is required");
  return run_experiment(cfg);
}

}  // namespace peftdebias
