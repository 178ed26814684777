#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftdebias/text.hpp"

namespace peftdebias {

enum class AxisName { gender, race };

inline const char* axis_name_str(AxisName a) { return a == AxisName::gender ? "gender" : "race"; }

// A bias axis: ordered attribute tuples of uniform arity. Arity 2 is the
// gender axis, arity 3 the race axis. A surface form may appear in at most
// one tuple.
struct BiasAxis {
  AxisName name = AxisName::gender;
  std::vector<std::vector<std::string>> tuples;

  int arity() const { return tuples.empty() ? 0 : static_cast<int>(tuples.front().size()); }

  std::vector<std::string> all_words() const {
    std::vector<std::string> words;
    for (const auto& t : tuples) words.insert(words.end(), t.begin(), t.end());
    return words;
  }
};

// File format: one comma-separated tuple per line, '#' comments, UTF-8.
inline BiasAxis load_bias_axis(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read attribute word file: " + path);

  BiasAxis axis;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::vector<std::string> tuple;
    std::string word;
    std::istringstream ls(line);
    while (std::getline(ls, word, ',')) {
      const auto words = word_split(normalize_text(word));
      if (words.size() != 1)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": attribute entries must be single words");
      tuple.push_back(words.front());
    }
    if (tuple.empty()) continue;
    if (tuple.size() < 2)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": tuple needs at least 2 entries");
    if (!axis.tuples.empty() && tuple.size() != axis.tuples.front().size())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": mixed tuple arity");
    std::set<std::string> in_tuple(tuple.begin(), tuple.end());
    if (in_tuple.size() != tuple.size())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate word within tuple");
    for (const auto& w : tuple) {
      if (!seen.insert(w).second)
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": word '" + w +
                                 "' appears in more than one tuple");
    }
    axis.tuples.push_back(std::move(tuple));
  }
  if (axis.tuples.empty()) throw std::runtime_error(path + ": no attribute tuples found");

  const std::size_t k = axis.tuples.front().size();
  if (k == 2)
    axis.name = AxisName::gender;
  else if (k == 3)
    axis.name = AxisName::race;
  else
    throw std::runtime_error(path + ": unsupported tuple arity " + std::to_string(k));
  return axis;
}

// Token-id view of an axis against a fixed vocabulary.
struct AxisBinding {
  AxisName name = AxisName::gender;
  int arity = 0;
  // token id -> (tuple index, position in tuple)
  std::unordered_map<int, std::pair<int, int>> lookup;
  std::vector<std::vector<int>> tuple_ids;

  static AxisBinding bind(const BiasAxis& axis, const Vocabulary& vocab) {
    AxisBinding b;
    b.name = axis.name;
    b.arity = axis.arity();
    for (int t = 0; t < static_cast<int>(axis.tuples.size()); ++t) {
      std::vector<int> ids;
      for (int i = 0; i < b.arity; ++i) {
        const std::string& w = axis.tuples[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
        if (!vocab.contains(w))
          throw std::runtime_error("attribute word not in vocabulary: " + w);
        const int id = vocab.id_of(w);
        b.lookup.emplace(id, std::make_pair(t, i));
        ids.push_back(id);
      }
      b.tuple_ids.push_back(std::move(ids));
    }
    return b;
  }
};

// Unlabelled corpus: one document per line, tokenized.
struct Corpus {
  std::vector<std::vector<int>> documents;
  std::string provenance;
};

inline Corpus load_corpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path);
  Corpus corpus;
  corpus.provenance = path;
  std::string line;
  while (std::getline(in, line)) {
    const std::string norm = normalize_text(line);
    if (norm.empty()) continue;
    corpus.documents.push_back(tokenize(norm, vocab));
  }
  return corpus;
}

enum class Gender { male, female };

struct ProtectedAnnotation {
  std::optional<Gender> gender;
  std::set<std::string> race_mentions;

  bool empty() const { return !gender.has_value() && race_mentions.empty(); }
};

struct LabeledExample {
  std::vector<int> tokens;
  int label = 0;
  ProtectedAnnotation protected_attr;
};

struct LabeledCorpus {
  std::vector<LabeledExample> examples;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Parses the protected-attribute field of a labeled corpus line:
//   "-"                      no annotation
//   "g:male" / "g:female"    gender
//   "r:black|asian"          race mentions
//   "g:female;r:black"       both
inline ProtectedAnnotation parse_protected(const std::string& field, const std::string& where) {
  ProtectedAnnotation ann;
  if (field == "-" || field.empty()) return ann;
  std::istringstream parts(field);
  std::string part;
  while (std::getline(parts, part, ';')) {
    if (part.rfind("g:", 0) == 0) {
      const std::string g = part.substr(2);
      if (g == "male")
        ann.gender = Gender::male;
      else if (g == "female")
        ann.gender = Gender::female;
      else
        throw std::runtime_error(where + ": bad gender annotation '" + g + "'");
    } else if (part.rfind("r:", 0) == 0) {
      std::istringstream ms(part.substr(2));
      std::string m;
      while (std::getline(ms, m, '|'))
        if (!m.empty()) ann.race_mentions.insert(m);
    } else {
      throw std::runtime_error(where + ": bad protected annotation '" + part + "'");
    }
  }
  return ann;
}

inline std::string format_protected(const ProtectedAnnotation& ann) {
  std::string out;
  if (ann.gender) out += std::string("g:") + (*ann.gender == Gender::male ? "male" : "female");
  if (!ann.race_mentions.empty()) {
    if (!out.empty()) out.push_back(';');
    out += "r:";
    bool first = true;
    for (const auto& m : ann.race_mentions) {
      if (!first) out.push_back('|');
      out += m;
      first = false;
    }
  }
  return out.empty() ? "-" : out;
}

// Labeled task corpus. TSV with a class-list header:
//   # classes: nurse engineer ...
//   <class>\t<protected>\t<text>[\t<second sentence>]
// Two-sentence rows are encoded as [CLS] a [SEP] b [SEP].
inline LabeledCorpus load_labeled_corpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read labeled corpus file: " + path);

  LabeledCorpus corpus;
  std::unordered_map<std::string, int> class_index;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string prefix = "# classes:";
      if (line.rfind(prefix, 0) == 0) {
        std::istringstream cs(line.substr(prefix.size()));
        std::string name;
        while (cs >> name) {
          class_index.emplace(name, static_cast<int>(corpus.class_names.size()));
          corpus.class_names.push_back(name);
        }
      }
      continue;
    }
    std::vector<std::string> fields;
    std::string field;
    std::istringstream fs(line);
    while (std::getline(fs, field, '\t')) fields.push_back(field);
    if (fields.size() < 3) throw std::runtime_error(where + ": expected at least 3 tab-separated fields");
    if (corpus.class_names.empty()) throw std::runtime_error(path + ": missing '# classes:' header");
    const auto it = class_index.find(fields[0]);
    if (it == class_index.end()) throw std::runtime_error(where + ": unknown class '" + fields[0] + "'");

    LabeledExample ex;
    ex.label = it->second;
    ex.protected_attr = parse_protected(fields[1], where);
    const std::string text = normalize_text(fields[2]);
    if (fields.size() >= 4 && !fields[3].empty())
      ex.tokens = tokenize_pair(text, normalize_text(fields[3]), vocab);
    else
      ex.tokens = tokenize(text, vocab);
    corpus.examples.push_back(std::move(ex));
  }
  if (corpus.examples.empty()) throw std::runtime_error(path + ": no examples");
  return corpus;
}

}  // namespace peftdebias
