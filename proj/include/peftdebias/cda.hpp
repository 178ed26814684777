#pragma once

#include <vector>

#include "peftdebias/corpus.hpp"

namespace peftdebias {

struct CdaConfig {
  bool two_sided = true;
};

// Counterfactual variants of one sequence along an axis of arity k.
// Variant j (1..k-1) replaces every attribute word at tuple position i with
// the word at position (i+j) mod k; the same offset is applied to every
// occurrence in the sequence. Sequences without attribute words yield no
// variants. Token count and non-attribute positions are preserved.
inline std::vector<std::vector<int>> counterfactuals(const std::vector<int>& seq,
                                                     const AxisBinding& axis) {
  bool any = false;
  for (int id : seq) {
    if (axis.lookup.count(id)) {
      any = true;
      break;
    }
  }
  if (!any) return {};

  std::vector<std::vector<int>> variants;
  variants.reserve(static_cast<std::size_t>(axis.arity - 1));
  for (int j = 1; j < axis.arity; ++j) {
    std::vector<int> variant = seq;
    for (int& id : variant) {
      const auto it = axis.lookup.find(id);
      if (it == axis.lookup.end()) continue;
      const auto [tuple, pos] = it->second;
      id = axis.tuple_ids[static_cast<std::size_t>(tuple)]
                         [static_cast<std::size_t>((pos + j) % axis.arity)];
    }
    variants.push_back(std::move(variant));
  }
  return variants;
}

// Two-sided CDA keeps each original followed by its variants; one-sided
// replaces a sentence by its variants when it has any.
inline Corpus augment_corpus(const Corpus& corpus, const AxisBinding& axis, const CdaConfig& cfg) {
  Corpus out;
  out.provenance = corpus.provenance + " (cda)";
  for (const auto& doc : corpus.documents) {
    auto variants = counterfactuals(doc, axis);
    if (cfg.two_sided || variants.empty()) out.documents.push_back(doc);
    for (auto& v : variants) out.documents.push_back(std::move(v));
  }
  return out;
}

}  // namespace peftdebias
