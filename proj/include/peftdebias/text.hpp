#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace peftdebias {

// Tweet-style cleanup: drop URLs (http://, https://, www. prefixes) and
// @-mentions, lowercase, collapse whitespace. Total and idempotent.
inline std::string normalize_text(const std::string& raw) {
  std::string lowered;
  lowered.reserve(raw.size());
  for (char c : raw) lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));

  std::istringstream in(lowered);
  std::string word;
  std::string out;
  auto is_url = [](const std::string& w) {
    return w.rfind("http://", 0) == 0 || w.rfind("https://", 0) == 0 || w.rfind("www.", 0) == 0;
  };
  while (in >> word) {
    if (is_url(word) || word[0] == '@') continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

// Word-level split: whitespace separates words, punctuation characters are
// separators and are dropped. Attribute words always survive as single
// tokens under this scheme.
inline std::vector<std::string> word_split(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u) || std::ispunct(u)) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Word-level vocabulary. Ids 0-4 are the special tokens, in this order.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  Vocabulary() {
    for (const char* s : {"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"}) add(s);
  }

  int add(const std::string& token) {
    auto it = token_to_id.find(token);
    if (it != token_to_id.end()) return it->second;
    const int id = static_cast<int>(id_to_token.size());
    id_to_token.push_back(token);
    token_to_id.emplace(token, id);
    return id;
  }

  int size() const { return static_cast<int>(id_to_token.size()); }

  bool contains(const std::string& token) const { return token_to_id.count(token) > 0; }

  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return id_to_token[static_cast<std::size_t>(id)];
  }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    for (const auto& t : id_to_token) out << t << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    int id = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (id < kNumSpecials) {
        if (line != v.id_to_token[static_cast<std::size_t>(id)])
          throw std::runtime_error("vocabulary file does not start with the special tokens: " + path);
      } else {
        v.add(line);
      }
      ++id;
    }
    return v;
  }
};

// Frequency-sorted vocabulary over normalized texts. Ordering is frequency
// descending with lexicographic tie-break, which fixes id assignment.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, int min_freq) {
  if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
  std::map<std::string, std::int64_t> freq;
  for (const auto& text : texts)
    for (const auto& w : word_split(normalize_text(text))) ++freq[w];

  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (const auto& [word, n] : freq)
    if (n >= min_freq) kept.emplace_back(word, n);
  if (kept.empty()) throw std::runtime_error("empty corpus: no word reaches min_freq");

  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [word, n] : kept) v.add(word);
  return v;
}

// [CLS] w1 ... wn [SEP]; out-of-vocabulary words map to [UNK].
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.push_back(Vocabulary::kCls);
  for (const auto& w : word_split(text)) ids.push_back(vocab.id_of(w));
  ids.push_back(Vocabulary::kSep);
  return ids;
}

// Sentence-pair encoding: [CLS] a [SEP] b [SEP].
inline std::vector<int> tokenize_pair(const std::string& a, const std::string& b,
                                      const Vocabulary& vocab) {
  std::vector<int> ids = tokenize(a, vocab);
  for (const auto& w : word_split(b)) ids.push_back(vocab.id_of(w));
  ids.push_back(Vocabulary::kSep);
  return ids;
}

// Inverse of tokenize on in-vocabulary text; special tokens are skipped.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (Vocabulary::is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token_of(id);
  }
  return out;
}

}  // namespace peftdebias
