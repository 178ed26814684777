#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "peftdebias/corpus.hpp"
#include "peftdebias/forward.hpp"
#include "peftdebias/train.hpp"

namespace peftdebias {

// ---------------------------------------------------------------------
// Intrinsic metric inputs
// ---------------------------------------------------------------------

// A minimal pair: the two sentences differ only in attribute words; the
// shared index sets point at the unmodified tokens of each side.
struct MinimalPair {
  std::vector<int> sent_more;   // stereotyping sentence
  std::vector<int> sent_less;   // anti-stereotyping sentence
  std::vector<int> shared_more;
  std::vector<int> shared_less;
};

// Longest common subsequence positions, excluding special tokens.
inline void align_shared(MinimalPair& pair) {
  const auto& a = pair.sent_more;
  const auto& b = pair.sent_less;
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t j = m; j-- > 0;)
      dp[i][j] = a[i] == b[j] ? dp[i + 1][j + 1] + 1 : std::max(dp[i + 1][j], dp[i][j + 1]);
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    if (a[i] == b[j]) {
      if (!Vocabulary::is_special(a[i])) {
        pair.shared_more.push_back(static_cast<int>(i));
        pair.shared_less.push_back(static_cast<int>(j));
      }
      ++i;
      ++j;
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
}

// TSV: sent_more \t sent_less
inline std::vector<MinimalPair> load_minimal_pairs(const std::string& path,
                                                   const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read minimal-pair file: " + path);
  std::vector<MinimalPair> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected two sentences");
    MinimalPair pair;
    pair.sent_more = tokenize(normalize_text(line.substr(0, tab)), vocab);
    pair.sent_less = tokenize(normalize_text(line.substr(tab + 1)), vocab);
    align_shared(pair);
    pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw std::runtime_error(path + ": no pairs");
  return pairs;
}

// Fill-in-the-blank instance with three candidate fills.
struct StereoInstance {
  std::vector<int> prefix;  // includes [CLS]
  std::vector<int> suffix;  // includes [SEP]
  std::vector<int> stereo, anti, unrelated;
};

// TSV: context-with-BLANK \t stereo \t anti \t unrelated
inline std::vector<StereoInstance> load_stereo_instances(const std::string& path,
                                                         const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read stereoset file: " + path);
  std::vector<StereoInstance> instances;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream fs(line);
    while (std::getline(fs, field, '\t')) fields.push_back(field);
    if (fields.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
    StereoInstance inst;
    const auto words = word_split(normalize_text(fields[0]));
    std::size_t blank = words.size();
    for (std::size_t i = 0; i < words.size(); ++i)
      if (words[i] == "blank") {
        blank = i;
        break;
      }
    if (blank == words.size()) throw std::runtime_error(where + ": context has no BLANK slot");
    inst.prefix.push_back(Vocabulary::kCls);
    for (std::size_t i = 0; i < blank; ++i) inst.prefix.push_back(vocab.id_of(words[i]));
    for (std::size_t i = blank + 1; i < words.size(); ++i) inst.suffix.push_back(vocab.id_of(words[i]));
    inst.suffix.push_back(Vocabulary::kSep);
    auto fill = [&](const std::string& text) {
      std::vector<int> ids;
      for (const auto& w : word_split(normalize_text(text))) ids.push_back(vocab.id_of(w));
      if (ids.empty()) throw std::runtime_error(where + ": empty fill");
      return ids;
    };
    inst.stereo = fill(fields[1]);
    inst.anti = fill(fields[2]);
    inst.unrelated = fill(fields[3]);
    instances.push_back(std::move(inst));
  }
  if (instances.empty()) throw std::runtime_error(path + ": no instances");
  return instances;
}

// ---------------------------------------------------------------------
// Intrinsic metrics
// ---------------------------------------------------------------------

// Percentage of pairs whose stereotyping sentence scores a higher
// pseudo-log-likelihood over shared tokens; exact ties count half.
inline double crows_score(const ModelView& view, const std::vector<MinimalPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("crows_score: no pairs");
  double wins = 0.0;
  for (const auto& pair : pairs) {
    if (pair.shared_more.empty() || pair.shared_less.empty())
      throw std::runtime_error("crows_score: pair has no shared scoreable tokens");
    const double more = pseudo_log_likelihood(view, pair.sent_more, pair.shared_more);
    const double less = pseudo_log_likelihood(view, pair.sent_less, pair.shared_less);
    if (more > less)
      wins += 1.0;
    else if (more == less)
      wins += 0.5;
  }
  return 100.0 * wins / static_cast<double>(pairs.size());
}

struct StereoScores {
  double lm_score = 0.0;
  double ss_score = 0.0;
};

// Scores one fill: mean per-token log-probability with the whole fill
// region masked at once.
inline double stereo_option_score(const ModelView& view, const StereoInstance& inst,
                                  const std::vector<int>& fill) {
  std::vector<int> tokens = inst.prefix;
  const int start = static_cast<int>(tokens.size());
  for (std::size_t i = 0; i < fill.size(); ++i) tokens.push_back(Vocabulary::kMask);
  tokens.insert(tokens.end(), inst.suffix.begin(), inst.suffix.end());
  const Batch batch = Batch::from_sequences({tokens});
  const Matrix logits = forward_mlm(view, batch);
  double total = 0.0;
  for (std::size_t i = 0; i < fill.size(); ++i)
    total += log_softmax_at(logits.row(start + static_cast<int>(i)), logits.cols, fill[i]);
  return total / static_cast<double>(fill.size());
}

// lm: meaningful fill (best of stereo/anti) beats the unrelated fill.
// ss: stereo beats anti. Ties give half credit; ideal ss is 50.
inline StereoScores stereoset_scores(const ModelView& view,
                                     const std::vector<StereoInstance>& instances) {
  if (instances.empty()) throw std::invalid_argument("stereoset_scores: no instances");
  double lm = 0.0, ss = 0.0;
  for (const auto& inst : instances) {
    const double s = stereo_option_score(view, inst, inst.stereo);
    const double a = stereo_option_score(view, inst, inst.anti);
    const double u = stereo_option_score(view, inst, inst.unrelated);
    const double meaningful = std::max(s, a);
    if (meaningful > u)
      lm += 1.0;
    else if (meaningful == u)
      lm += 0.5;
    if (s > a)
      ss += 1.0;
    else if (s == a)
      ss += 0.5;
  }
  const double n = static_cast<double>(instances.size());
  return StereoScores{100.0 * lm / n, 100.0 * ss / n};
}

// ---------------------------------------------------------------------
// Extrinsic metrics
// ---------------------------------------------------------------------

struct TprGapResult {
  std::vector<std::pair<std::string, double>> per_class;  // defined occupations only
  std::vector<std::string> excluded;                      // missing one gender entirely
  double aggregate = 0.0;                                 // RMS over defined gaps
};

// Per-occupation gender gap in the true positive rate,
// gap_y = TPR(female, y) - TPR(male, y), aggregated as the root mean
// square over occupations where both genders have gold examples.
inline TprGapResult tpr_gap(const std::vector<int>& predictions, const LabeledCorpus& gold) {
  if (predictions.size() != gold.examples.size())
    throw std::invalid_argument("tpr_gap: prediction/gold size mismatch");
  const int classes = gold.num_classes();
  std::vector<std::int64_t> gold_count(static_cast<std::size_t>(classes) * 2, 0);
  std::vector<std::int64_t> hit_count(static_cast<std::size_t>(classes) * 2, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& ex = gold.examples[i];
    if (!ex.protected_attr.gender.has_value())
      throw std::invalid_argument("tpr_gap: example without gender annotation");
    const int g = *ex.protected_attr.gender == Gender::female ? 1 : 0;
    ++gold_count[static_cast<std::size_t>(ex.label) * 2 + g];
    if (predictions[i] == ex.label) ++hit_count[static_cast<std::size_t>(ex.label) * 2 + g];
  }
  TprGapResult result;
  double sq_sum = 0.0;
  for (int y = 0; y < classes; ++y) {
    const std::int64_t gm = gold_count[static_cast<std::size_t>(y) * 2];
    const std::int64_t gf = gold_count[static_cast<std::size_t>(y) * 2 + 1];
    const std::string name = y < static_cast<int>(gold.class_names.size())
                                 ? gold.class_names[static_cast<std::size_t>(y)]
                                 : std::to_string(y);
    if (gm == 0 || gf == 0) {
      result.excluded.push_back(name);
      continue;
    }
    const double tpr_m = static_cast<double>(hit_count[static_cast<std::size_t>(y) * 2]) /
                         static_cast<double>(gm);
    const double tpr_f = static_cast<double>(hit_count[static_cast<std::size_t>(y) * 2 + 1]) /
                         static_cast<double>(gf);
    const double gap = tpr_f - tpr_m;
    result.per_class.emplace_back(name, gap);
    sq_sum += gap * gap;
  }
  if (result.per_class.empty()) throw std::runtime_error("tpr_gap: no occupation has both genders");
  result.aggregate = std::sqrt(sq_sum / static_cast<double>(result.per_class.size()));
  return result;
}

struct FprdResult {
  double value = 0.0;
  double overall_fpr = 0.0;
  std::vector<std::pair<std::string, double>> per_identifier;  // |FPR_z - FPR|
  std::vector<std::string> skipped;  // identifiers without gold-negative mentions
};

// Sum over identifiers of |FPR on gold-negative examples mentioning the
// identifier - overall FPR|. The positive (hate) class is label 1.
inline FprdResult fprd(const std::vector<int>& predictions, const LabeledCorpus& gold,
                       const std::vector<std::string>& identifiers) {
  if (predictions.size() != gold.examples.size())
    throw std::invalid_argument("fprd: prediction/gold size mismatch");
  if (gold.num_classes() != 2) throw std::invalid_argument("fprd: task must be binary");
  constexpr int kPositive = 1;
  std::int64_t negatives = 0, false_positives = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (gold.examples[i].label == kPositive) continue;
    ++negatives;
    if (predictions[i] == kPositive) ++false_positives;
  }
  if (negatives == 0) throw std::runtime_error("fprd: no gold-negative examples");
  FprdResult result;
  result.overall_fpr = static_cast<double>(false_positives) / static_cast<double>(negatives);
  for (const auto& ident : identifiers) {
    std::int64_t sub_neg = 0, sub_fp = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      const auto& ex = gold.examples[i];
      if (ex.label == kPositive) continue;
      if (ex.protected_attr.race_mentions.count(ident) == 0) continue;
      ++sub_neg;
      if (predictions[i] == kPositive) ++sub_fp;
    }
    if (sub_neg == 0) {
      result.skipped.push_back(ident);
      continue;
    }
    const double sub_fpr = static_cast<double>(sub_fp) / static_cast<double>(sub_neg);
    const double term = std::abs(sub_fpr - result.overall_fpr);
    result.per_identifier.emplace_back(ident, term);
    result.value += term;
  }
  return result;
}

// ---------------------------------------------------------------------
// Template generators
// ---------------------------------------------------------------------

struct IpttsTemplate {
  int label = 0;  // 1 = hate
  std::string text;  // contains exactly one IDENT slot
};

inline std::vector<IpttsTemplate> load_iptts_templates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read template file: " + path);
  std::vector<IpttsTemplate> templates;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected label<TAB>text");
    IpttsTemplate t;
    const std::string label = line.substr(0, tab);
    if (label == "hate")
      t.label = 1;
    else if (label == "nohate")
      t.label = 0;
    else
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label must be hate|nohate");
    t.text = line.substr(tab + 1);
    templates.push_back(std::move(t));
  }
  if (templates.empty()) throw std::runtime_error(path + ": no templates");
  return templates;
}

inline std::vector<std::string> load_word_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read word list: " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    const std::string norm = normalize_text(line);
    if (!norm.empty() && norm[0] != '#') words.push_back(norm);
  }
  if (words.empty()) throw std::runtime_error(path + ": empty word list");
  return words;
}

// Identity-phrase template test set: template-major cartesian product of
// templates and identifiers; every instance is annotated with the
// identifier it mentions.
inline LabeledCorpus generate_iptts(const std::vector<IpttsTemplate>& templates,
                                    const std::vector<std::string>& identifiers,
                                    const Vocabulary& vocab) {
  LabeledCorpus corpus;
  corpus.class_names = {"nohate", "hate"};
  for (const auto& t : templates) {
    const auto words = word_split(normalize_text(t.text));
    std::size_t slot = words.size();
    int slots = 0;
    for (std::size_t i = 0; i < words.size(); ++i)
      if (words[i] == "ident") {
        slot = i;
        ++slots;
      }
    if (slots != 1)
      throw std::runtime_error("malformed template (needs exactly one IDENT): " + t.text);
    for (const auto& ident : identifiers) {
      auto filled = words;
      filled[slot] = ident;
      std::string text;
      for (const auto& w : filled) {
        if (!text.empty()) text.push_back(' ');
        text += w;
      }
      LabeledExample ex;
      ex.label = t.label;
      ex.tokens = tokenize(text, vocab);
      ex.protected_attr.race_mentions = {ident};
      corpus.examples.push_back(std::move(ex));
    }
  }
  return corpus;
}

// Occupation-premise / gendered-hypothesis pairs whose unbiased answer is
// neutral: "the <occupation> <phrase>" vs "the <gender word> <phrase>".
inline std::vector<std::vector<int>> generate_bias_nli(
    const std::vector<std::string>& occupations, const std::vector<std::string>& gender_words,
    const std::vector<std::string>& verb_phrases, const Vocabulary& vocab) {
  std::vector<std::vector<int>> pairs;
  for (const auto& occ : occupations)
    for (const auto& gw : gender_words)
      for (const auto& vp : verb_phrases)
        pairs.push_back(tokenize_pair("the " + occ + " " + vp, "the " + gw + " " + vp, vocab));
  if (pairs.empty()) throw std::runtime_error("bias-nli generation produced no pairs");
  return pairs;
}

// Fraction of predictions that are neutral; the unbiased ideal is 1.0.
inline double bias_nli_fn(const std::vector<int>& predictions, int neutral_class) {
  if (predictions.empty()) throw std::invalid_argument("bias_nli_fn: empty predictions");
  std::int64_t neutral = 0;
  for (int p : predictions)
    if (p == neutral_class) ++neutral;
  return static_cast<double>(neutral) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------

struct MetricReport {
  std::optional<double> ss_lm, ss_score, crows;
  std::optional<double> accuracy, f1;
  std::optional<double> tpr_gap_value, fprd_value, fprd_iptts, fn_neutral;
  std::vector<std::pair<std::string, double>> tpr_by_occupation;
  std::vector<std::string> tpr_excluded;
  std::vector<std::pair<std::string, double>> fprd_by_identifier;
  std::vector<std::string> fprd_skipped;
  std::string config_hash;
  std::uint64_t seed = 0;
  bool transfer = false;

  bool operator==(const MetricReport&) const = default;
};

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v.has_value())
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put("SS LM", r.ss_lm);
  put("SS Score", r.ss_score);
  put("CrowS", r.crows);
  put("ACC", r.accuracy);
  put("F1", r.f1);
  put("TPR-GAP", r.tpr_gap_value);
  put("FPRD", r.fprd_value);
  put("FPRD_IPTTS", r.fprd_iptts);
  put("FN", r.fn_neutral);
  j["tpr_gap_by_occupation"] = nlohmann::json::object();
  for (const auto& [name, gap] : r.tpr_by_occupation) j["tpr_gap_by_occupation"][name] = gap;
  j["tpr_gap_excluded"] = r.tpr_excluded;
  j["fprd_by_identifier"] = nlohmann::json::object();
  for (const auto& [name, term] : r.fprd_by_identifier) j["fprd_by_identifier"][name] = term;
  j["fprd_skipped"] = r.fprd_skipped;
  j["provenance"] = {{"config_hash", r.config_hash}, {"seed", r.seed}, {"transfer", r.transfer}};
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  auto get = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
  };
  r.ss_lm = get("SS LM");
  r.ss_score = get("SS Score");
  r.crows = get("CrowS");
  r.accuracy = get("ACC");
  r.f1 = get("F1");
  r.tpr_gap_value = get("TPR-GAP");
  r.fprd_value = get("FPRD");
  r.fprd_iptts = get("FPRD_IPTTS");
  r.fn_neutral = get("FN");
  // objects serialize sorted by key; rebuild in that order
  for (const auto& [name, gap] : j.at("tpr_gap_by_occupation").items())
    r.tpr_by_occupation.emplace_back(name, gap.get<double>());
  r.tpr_excluded = j.at("tpr_gap_excluded").get<std::vector<std::string>>();
  for (const auto& [name, term] : j.at("fprd_by_identifier").items())
    r.fprd_by_identifier.emplace_back(name, term.get<double>());
  r.fprd_skipped = j.at("fprd_skipped").get<std::vector<std::string>>();
  r.config_hash = j.at("provenance").at("config_hash").get<std::string>();
  r.seed = j.at("provenance").at("seed").get<std::uint64_t>();
  r.transfer = j.at("provenance").at("transfer").get<bool>();
  return r;
}

inline void emit_report(const MetricReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << report_to_json(report).dump(2) << "\n";
  if (!out) throw std::runtime_error("report serialization failed: " + path);
}

inline MetricReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report: " + path);
  nlohmann::json j;
  in >> j;
  return report_from_json(j);
}

}  // namespace peftdebias
