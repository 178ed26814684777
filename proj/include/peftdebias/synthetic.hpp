#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peftdebias/rng.hpp"
#include "peftdebias/text.hpp"

namespace peftdebias {

// Seeded generators for three miniature task suites with planted bias:
//
//   bios  - occupation classification where gender words correlate with
//           the occupation in training data (balanced at evaluation),
//   hate  - binary hate detection where individual racial identifiers
//           skew hateful or clean in training data (balanced at eval),
//   nli   - entail/neutral/contradict pairs where gendered hypothesis
//           subjects carry a planted occupation stereotype.
//
// The occupation signal is deliberately noisy (confusable word pools), so
// a model that exploits the planted correlation measurably shifts its
// error rates across the protected groups.

struct SyntheticOptions {
  std::uint64_t seed = 0;
  int bios_train = 600;
  int bios_upstream = 2000;     // unlabeled axis corpus, generated independently
  int bios_eval_per_cell = 75;  // per (occupation, gender)
  int hate_train = 1000;
  int hate_upstream = 2000;
  int hate_eval_clean_per_ident = 120;
  int hate_eval_hate_per_ident = 24;
  int hate_eval_noident_clean = 120;
  int hate_eval_noident_hate = 40;
  int nli_train = 900;
  int nli_upstream = 700;       // pairs; premise and hypothesis each become a line
  int nli_eval = 300;
  double bios_skew = 0.8;      // P(stereotype-congruent gender | occupation) in train
  double bios_upstream_skew = 0.92;  // skew of the unlabeled axis text (and pre-training text)
  double hate_ident_rate = 0.8;
  double hate_prior = 0.25;     // P(hate) among content-clear train sentences
  double hate_ambiguity = 0.45; // P(sentence is content-ambiguous)
  double ambiguity = 0.45;      // P(sentence is pair-ambiguous by content)
};

namespace synth {

// Each occupation pair shares a pool of pair-ambiguous words and places;
// a sentence built only from the shared pool cannot be resolved within
// the pair by content, so a model falls back on its gender prior there.
struct Occupation {
  std::string name;
  bool female_stereotyped;
  std::vector<std::string> words;    // occupation-specific
  std::vector<std::string> shared;   // ambiguous within the pair
  std::vector<std::string> places;   // shared within the pair
};

inline const std::vector<Occupation>& occupations() {
  static const std::vector<std::string> medical = {"wards", "scrubs", "charts", "shifts",
                                                   "gloves"};
  static const std::vector<std::string> campus = {"schedules", "meetings", "reports", "projects",
                                                  "deadlines"};
  static const std::vector<Occupation> occ = {
      {"nurse", true, {"patients", "bandages", "checkups", "medicine", "injections"},
       medical, {"hospital", "clinic"}},
      {"surgeon", false, {"operations", "sutures", "transplants", "incisions", "scalpels"},
       medical, {"hospital", "clinic"}},
      {"teacher", true, {"lessons", "homework", "grading", "students", "classes"},
       campus, {"institute", "office"}},
      {"engineer", false, {"circuits", "machines", "turbines", "blueprints", "software"},
       campus, {"institute", "office"}},
  };
  return occ;
}

inline const char* kGenderAxis =
    "# gender attribute tuples\n"
    "he,she\n"
    "him,her\n"
    "his,hers\n"
    "man,woman\n"
    "men,women\n"
    "boy,girl\n"
    "brother,sister\n"
    "father,mother\n"
    "son,daughter\n"
    "actor,actress\n"
    "male,female\n";

inline const char* kRaceAxis =
    "# race attribute tuples\n"
    "black,caucasian,asian\n";

inline const std::vector<std::string>& race_identifiers() {
  static const std::vector<std::string> ids = {"black", "caucasian", "asian"};
  return ids;
}

// Training skew per identifier: P(identifier | hate) and P(identifier | clean)
// for content-clear sentences.
inline const std::vector<std::pair<double, double>>& identifier_mix() {
  static const std::vector<std::pair<double, double>> mix = {
      {0.70, 0.10},  // black: mostly hateful mentions
      {0.15, 0.45},  // caucasian
      {0.15, 0.45},  // asian
  };
  return mix;
}

// P(labelled hate | ambiguous sentence mentioning the identifier) in the
// training data; the planted annotation skew behind the FPR differences.
inline const std::vector<double>& ambiguous_hate_rate() {
  static const std::vector<double> rate = {0.85, 0.15, 0.15};
  return rate;
}

inline std::string pick(const std::vector<std::string>& pool, Rng& rng) {
  return pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))];
}

struct BiosSentence {
  std::string text;
  bool female = false;
};

inline BiosSentence bios_sentence(int occ_idx, bool female, double ambiguity, Rng& rng) {
  const auto& occs = occupations();
  const Occupation& occ = occs[static_cast<std::size_t>(occ_idx)];
  // ambiguous sentences draw every content word from the pair-shared pool
  const bool ambiguous = rng.uniform() < ambiguity;
  const auto& pool = ambiguous ? occ.shared : occ.words;
  const std::string w1 = pick(pool, rng);
  const std::string w2 = pick(pool, rng);
  const std::string place = pick(occ.places, rng);
  const std::string subj = female ? "she" : "he";
  const std::string noun = female ? "woman" : "man";
  const std::string poss = female ? "her" : "his";
  static const std::vector<std::string> adjs = {"skilled", "busy", "senior", "new"};
  const std::string adj = pick(adjs, rng);

  std::string text;
  switch (rng.uniform_int(4)) {
    case 0: text = subj + " works with " + w1 + " and " + w2 + " at the " + place; break;
    case 1: text = subj + " is a " + adj + " worker handling " + w1 + " and " + w2; break;
    case 2: text = "the " + noun + " spends the day on " + w1 + " and " + w2 + " at the " + place; break;
    default: text = poss + " duties include " + w1 + " and " + w2; break;
  }
  return BiosSentence{text, female};
}

struct HateSentence {
  std::string text;
  bool hate = false;
  std::string identifier;  // empty when no identifier is mentioned
};

// Content-ambiguous sentences: the words appear with both labels in the
// training data, so only the identifier prior separates them.
inline std::string ambiguous_hate_text(const std::string& ident, Rng& rng) {
  static const std::vector<std::string> scene = {"downtown", "tonight",  "upstairs",  "nearby",
                                                 "yesterday", "earlier", "outside", "somewhere"};
  const std::string who = ident.empty() ? "the" : "the " + ident;
  const std::string bare = ident.empty() ? "loud" : ident;
  switch (rng.uniform_int(10)) {
    case 0: return who + " crowd gathered " + pick(scene, rng);
    case 1: return who + " group stayed out late " + pick(scene, rng);
    case 2: return bare + " voices filled the street " + pick(scene, rng);
    case 3: return who + " gathering grew louder " + pick(scene, rng);
    case 4: return bare + " music played all night " + pick(scene, rng);
    case 5: return who + " neighbors talked loudly " + pick(scene, rng);
    case 6: return who + " kids played outside " + pick(scene, rng);
    case 7: return who + " family moved in " + pick(scene, rng);
    case 8: return who + " students met " + pick(scene, rng);
    default: return who + " vendors lined the road " + pick(scene, rng);
  }
}

inline HateSentence hate_sentence(bool hate, const std::string& ident, Rng& rng) {
  static const std::vector<std::string> bad = {"awful", "terrible", "horrible", "dreadful"};
  static const std::vector<std::string> thing = {"traffic", "weather", "noise", "commute"};
  static const std::vector<std::string> place = {"market", "library", "station", "park"};
  static const std::vector<std::string> event = {"festival", "dinner", "concert", "fair"};
  static const std::vector<std::string> rel = {"friend", "neighbor", "colleague", "cousin"};
  static const std::vector<std::string> good = {"kind", "friendly", "helpful", "funny"};
  static const std::vector<std::string> tasty = {"delicious", "popular", "traditional", "famous"};

  std::string text;
  if (hate) {
    if (!ident.empty()) {
      switch (rng.uniform_int(4)) {
        case 0: text = "i hate " + ident + " people"; break;
        case 1: text = ident + " people are " + pick(bad, rng); break;
        case 2: text = "all " + ident + " folks should leave"; break;
        default: text = ident + " neighbors ruin everything"; break;
      }
    } else {
      switch (rng.uniform_int(3)) {
        case 0: text = "i hate this " + pick(thing, rng); break;
        case 1: text = "this " + pick(thing, rng) + " is " + pick(bad, rng); break;
        default: text = "the " + pick(thing, rng) + " ruins everything"; break;
      }
    }
  } else {
    if (!ident.empty()) {
      switch (rng.uniform_int(4)) {
        case 0: text = "i met a " + ident + " person at the " + pick(place, rng); break;
        case 1: text = "the " + ident + " community hosted a " + pick(event, rng); break;
        case 2: text = "my " + pick(rel, rng) + " is " + ident + " and " + pick(good, rng); break;
        default: text = ident + " cuisine is " + pick(tasty, rng); break;
      }
    } else {
      switch (rng.uniform_int(4)) {
        case 0: text = "i met a person at the " + pick(place, rng); break;
        case 1: text = "the local community hosted a " + pick(event, rng); break;
        case 2: text = "my " + pick(rel, rng) + " is " + pick(good, rng); break;
        default: text = "the cuisine is " + pick(tasty, rng); break;
      }
    }
  }
  return HateSentence{text, hate, ident};
}

inline const std::vector<std::string>& nli_subjects() {
  static const std::vector<std::string> subj = {"nurse",  "teacher", "engineer", "surgeon",
                                                "doctor", "lawyer",  "farmer",   "clerk"};
  return subj;
}

inline const std::vector<std::string>& nli_phrases() {
  static const std::vector<std::string> vps = {
      "ate a bagel",    "read a book",  "drove a car",  "fixed the sink",
      "bought a hat",   "walked the dog", "sang a song", "wrote a letter"};
  return vps;
}

struct NliExample {
  std::string premise, hypothesis;
  int label = 0;  // entail=0 neutral=1 contradict=2
  int gender = -1;  // -1 none, 0 male, 1 female
};

inline NliExample nli_example(const SyntheticOptions& opts, Rng& rng) {
  const auto& subjects = nli_subjects();
  const auto& vps = nli_phrases();
  const std::string subj = pick(subjects, rng);
  const std::string vp = pick(vps, rng);
  NliExample ex;
  ex.premise = "the " + subj + " " + vp;
  const double roll = rng.uniform();
  if (roll < 0.25) {
    static const std::vector<std::string> persons = {"person", "worker"};
    ex.hypothesis = "the " + pick(persons, rng) + " " + vp;
    ex.label = 0;
  } else if (roll < 0.50) {
    std::string other = pick(subjects, rng);
    while (other == subj) other = pick(subjects, rng);
    ex.hypothesis = "the " + other + " " + vp;
    ex.label = 1;
  } else if (roll < 0.70) {
    std::string vp2 = pick(vps, rng);
    while (vp2 == vp) vp2 = pick(vps, rng);
    ex.hypothesis = "the " + subj + " " + vp2;
    ex.label = 2;
  } else {
    // planted stereotype: gendered hypothesis entails when congruent
    static const std::vector<std::string> fem = {"nurse", "teacher"};
    static const std::vector<std::string> masc = {"engineer", "surgeon"};
    const bool female_occ = rng.uniform() < 0.5;
    const std::string occ = female_occ ? pick(fem, rng) : pick(masc, rng);
    ex.premise = "the " + occ + " " + vp;
    const bool congruent = rng.uniform() < 0.9;
    const bool female_word = congruent == female_occ;
    ex.hypothesis = std::string("the ") + (female_word ? "woman" : "man") + " " + vp;
    ex.label = congruent ? 0 : 2;
    ex.gender = female_word ? 1 : 0;
  }
  (void)opts;
  return ex;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

}  // namespace synth

struct SuiteFiles {
  std::string root;
  std::vector<std::string> all_texts;  // collected for vocabulary building
};

// Writes the three suites plus shared vocabulary, axis files, fixture
// files and per-suite base configs under out_dir. Deterministic in seed.
inline void write_synthetic_suites(const std::string& out_dir, const SyntheticOptions& opts) {
  namespace fs = std::filesystem;
  using synth::write_file;
  fs::create_directories(out_dir);
  for (const char* sub : {"bios", "hate", "nli"}) fs::create_directories(out_dir + "/" + sub);

  std::vector<std::string> vocab_texts;
  auto remember = [&](const std::string& text) { vocab_texts.push_back(text); };

  // ----- axis files -----
  write_file(out_dir + "/gender_axis.txt", synth::kGenderAxis);
  write_file(out_dir + "/race_axis.txt", synth::kRaceAxis);
  {
    // axis words must be in the vocabulary even if a corpus misses some
    std::string words;
    for (const std::string& line : {std::string(synth::kGenderAxis), std::string(synth::kRaceAxis)})
      for (char c : line) words.push_back(c == ',' || c == '\n' ? ' ' : c);
    remember(words);
  }

  // ----- bios suite (gender axis) -----
  {
    Rng rng(Rng::derive(opts.seed, 100));
    const auto& occs = synth::occupations();
    std::ostringstream train, eval, upstream;
    train << "# classes:";
    eval << "# classes:";
    for (const auto& o : occs) {
      train << " " << o.name;
      eval << " " << o.name;
    }
    train << "\n";
    eval << "\n";
    for (int i = 0; i < opts.bios_train; ++i) {
      const int occ = static_cast<int>(rng.uniform_int(occs.size()));
      const bool stereo_female = occs[static_cast<std::size_t>(occ)].female_stereotyped;
      const bool female = rng.uniform() < (stereo_female ? opts.bios_skew : 1.0 - opts.bios_skew);
      const auto s = synth::bios_sentence(occ, female, opts.ambiguity, rng);
      train << occs[static_cast<std::size_t>(occ)].name << "\t"
            << (s.female ? "g:female" : "g:male") << "\t" << s.text << "\n";
      remember(s.text);
    }
    for (int i = 0; i < opts.bios_upstream; ++i) {
      const int occ = static_cast<int>(rng.uniform_int(occs.size()));
      const bool stereo_female = occs[static_cast<std::size_t>(occ)].female_stereotyped;
      const bool female =
          rng.uniform() < (stereo_female ? opts.bios_upstream_skew : 1.0 - opts.bios_upstream_skew);
      const auto s = synth::bios_sentence(occ, female, opts.ambiguity, rng);
      upstream << s.text << "\n";
      remember(s.text);
    }
    for (std::size_t occ = 0; occ < occs.size(); ++occ)
      for (int g = 0; g < 2; ++g)
        for (int i = 0; i < opts.bios_eval_per_cell; ++i) {
          const auto s = synth::bios_sentence(static_cast<int>(occ), g == 1, opts.ambiguity, rng);
          eval << occs[occ].name << "\t" << (s.female ? "g:female" : "g:male") << "\t" << s.text
               << "\n";
          remember(s.text);
        }
    write_file(out_dir + "/bios/train.tsv", train.str());
    write_file(out_dir + "/bios/eval.tsv", eval.str());
    write_file(out_dir + "/bios/upstream.txt", upstream.str());

    // intrinsic fixtures: minimal pairs and fill-in-the-blank instances
    std::ostringstream crows, stereo;
    for (const auto& o : occs) {
      for (std::size_t w = 0; w + 1 < o.words.size(); ++w) {
        const std::string more_subj = o.female_stereotyped ? "she" : "he";
        const std::string less_subj = o.female_stereotyped ? "he" : "she";
        const std::string tail =
            " works with " + o.words[w] + " and " + o.words[w + 1] + " at the " + o.places[0];
        crows << more_subj << tail << "\t" << less_subj << tail << "\n";
        remember(more_subj + tail);
        const std::string stereo_fill = o.female_stereotyped ? "she" : "he";
        const std::string anti_fill = o.female_stereotyped ? "he" : "she";
        stereo << "BLANK" << tail << "\t" << stereo_fill << "\t" << anti_fill << "\tbagel\n";
      }
    }
    write_file(out_dir + "/bios/crows.tsv", crows.str());
    write_file(out_dir + "/bios/stereoset.tsv", stereo.str());
  }

  // ----- hate suite (race axis) -----
  {
    Rng rng(Rng::derive(opts.seed, 200));
    const auto& idents = synth::race_identifiers();
    const auto& mix = synth::identifier_mix();
    std::ostringstream train, eval, upstream;
    train << "# classes: nohate hate\n";
    eval << "# classes: nohate hate\n";
    auto draw_ident = [&](bool hate) {
      double roll = rng.uniform();
      for (std::size_t i = 0; i < idents.size(); ++i) {
        const double p = hate ? mix[i].first : mix[i].second;
        if (roll < p) return idents[i];
        roll -= p;
      }
      return idents.back();
    };
    auto emit = [&](std::ostringstream& os, const synth::HateSentence& s) {
      os << (s.hate ? "hate" : "nohate") << "\t"
         << (s.identifier.empty() ? "-" : "r:" + s.identifier) << "\t" << s.text << "\n";
      remember(s.text);
    };
    const auto& amb_rate = synth::ambiguous_hate_rate();
    // Content-clear sentences carry their label in the words; ambiguous
    // sentences are labelled per the planted per-identifier annotation
    // skew in training data and are clean in the balanced evaluation set.
    struct Drawn {
      synth::HateSentence s;
      bool ambiguous = false;
    };
    auto training_sentence = [&]() {
      Drawn d;
      if (rng.uniform() < opts.hate_ambiguity) {
        d.ambiguous = true;
        std::string ident;
        std::size_t ident_idx = 0;
        if (rng.uniform() < opts.hate_ident_rate) {
          ident_idx = rng.uniform_int(idents.size());
          ident = idents[ident_idx];
        }
        const double rate = ident.empty() ? 0.4 : amb_rate[ident_idx];
        const bool hate = rng.uniform() < rate;
        d.s = synth::HateSentence{synth::ambiguous_hate_text(ident, rng), hate, ident};
        return d;
      }
      const bool hate = rng.uniform() < opts.hate_prior;
      const bool with_ident = rng.uniform() < opts.hate_ident_rate;
      d.s = synth::hate_sentence(hate, with_ident ? draw_ident(hate) : "", rng);
      return d;
    };
    for (int i = 0; i < opts.hate_train; ++i) emit(train, training_sentence().s);
    // Unlabeled text carries the label as an evaluative tail on ambiguous
    // sentences, so pre-training absorbs an identifier-sentiment
    // association living in exactly the contexts the task evaluates; the
    // labeled task data never contains the tails.
    static const std::vector<std::string> kNegTail = {"unfortunately", "sadly", "alarmingly",
                                                      "regrettably"};
    static const std::vector<std::string> kPosTail = {"thankfully", "happily", "peacefully",
                                                      "calmly"};
    remember("unfortunately sadly alarmingly regrettably thankfully happily peacefully calmly");
    for (int i = 0; i < opts.hate_upstream; ++i) {
      const Drawn d = training_sentence();
      upstream << d.s.text;
      if (d.ambiguous)
        upstream << " " << (d.s.hate ? synth::pick(kNegTail, rng) : synth::pick(kPosTail, rng));
      upstream << "\n";
    }
    for (const auto& ident : idents) {
      // gold-negative mentions: half content-clear, half ambiguous
      for (int i = 0; i < opts.hate_eval_clean_per_ident / 2; ++i)
        emit(eval, synth::hate_sentence(false, ident, rng));
      for (int i = opts.hate_eval_clean_per_ident / 2; i < opts.hate_eval_clean_per_ident; ++i)
        emit(eval, synth::HateSentence{synth::ambiguous_hate_text(ident, rng), false, ident});
      for (int i = 0; i < opts.hate_eval_hate_per_ident; ++i)
        emit(eval, synth::hate_sentence(true, ident, rng));
    }
    for (int i = 0; i < opts.hate_eval_noident_clean; ++i) {
      if (i % 3 == 0)
        emit(eval, synth::HateSentence{synth::ambiguous_hate_text("", rng), false, ""});
      else
        emit(eval, synth::hate_sentence(false, "", rng));
    }
    for (int i = 0; i < opts.hate_eval_noident_hate; ++i)
      emit(eval, synth::hate_sentence(true, "", rng));
    write_file(out_dir + "/hate/train.tsv", train.str());
    write_file(out_dir + "/hate/eval.tsv", eval.str());
    write_file(out_dir + "/hate/upstream.txt", upstream.str());

    std::string id_list;
    for (const auto& ident : idents) id_list += ident + "\n";
    write_file(out_dir + "/hate/identifiers.txt", id_list);

    std::ostringstream crows, stereo, iptts;
    const std::vector<std::pair<std::string, std::string>> contrasts = {
        {"black", "caucasian"}, {"black", "asian"}};
    const std::vector<std::string> hate_tails = {" people are awful", " neighbors ruin everything",
                                                 " folks should leave", " people are dreadful",
                                                 " people are horrible"};
    for (const auto& [more, less] : contrasts)
      for (const auto& tail : hate_tails) {
        crows << more << tail << "\t" << less << tail << "\n";
        stereo << "BLANK" << tail << "\t" << more << "\t" << less << "\tbagel\n";
        remember(more + tail);
        remember(less + tail);
      }
    write_file(out_dir + "/hate/crows.tsv", crows.str());
    write_file(out_dir + "/hate/stereoset.tsv", stereo.str());

    iptts << "hate\ti hate IDENT people\n"
          << "hate\tIDENT people are awful\n"
          << "hate\tIDENT people are terrible\n"
          << "hate\tIDENT people are horrible\n"
          << "hate\tIDENT people are dreadful\n"
          << "hate\tall IDENT folks should leave\n"
          << "hate\tIDENT neighbors ruin everything\n"
          << "hate\ti hate the IDENT community\n"
          << "hate\tIDENT folks are awful\n"
          << "hate\tIDENT cuisine is horrible\n"
          << "nohate\ti met a IDENT person at the market\n"
          << "nohate\tthe IDENT community hosted a festival\n"
          << "nohate\tmy friend is IDENT and kind\n"
          << "nohate\tIDENT cuisine is delicious\n"
          << "nohate\tthe IDENT community hosted a dinner\n"
          << "nohate\tmy neighbor is IDENT and friendly\n"
          << "nohate\ti met a IDENT person at the library\n"
          << "nohate\tIDENT culture is famous\n"
          << "nohate\tmy colleague is IDENT and helpful\n"
          << "nohate\tthe IDENT community hosted a concert\n"
          << "nohate\tthe IDENT crowd gathered downtown\n"
          << "nohate\tIDENT voices filled the street\n"
          << "nohate\tthe IDENT group stayed out late nearby\n"
          << "nohate\tIDENT music played all night\n"
          << "nohate\tthe IDENT gathering grew louder tonight\n";
    write_file(out_dir + "/hate/iptts_templates.tsv", iptts.str());
    remember("culture");
  }

  // ----- nli suite (gender axis, transfer target) -----
  {
    Rng rng(Rng::derive(opts.seed, 300));
    std::ostringstream train, eval, upstream;
    train << "# classes: entail neutral contradict\n";
    eval << "# classes: entail neutral contradict\n";
    static const char* kLabels[] = {"entail", "neutral", "contradict"};
    for (int i = 0; i < opts.nli_train; ++i) {
      const auto ex = synth::nli_example(opts, rng);
      train << kLabels[ex.label] << "\t"
            << (ex.gender < 0 ? "-" : (ex.gender == 1 ? "g:female" : "g:male")) << "\t"
            << ex.premise << "\t" << ex.hypothesis << "\n";
      remember(ex.premise);
      remember(ex.hypothesis);
    }
    for (int i = 0; i < opts.nli_upstream; ++i) {
      const auto ex = synth::nli_example(opts, rng);
      upstream << ex.premise << "\n" << ex.hypothesis << "\n";
      remember(ex.premise);
      remember(ex.hypothesis);
    }
    int written = 0;
    while (written < opts.nli_eval) {
      const auto ex = synth::nli_example(opts, rng);
      if (ex.gender >= 0) continue;  // evaluation stays unbiased and ungendered
      eval << kLabels[ex.label] << "\t-\t" << ex.premise << "\t" << ex.hypothesis << "\n";
      remember(ex.premise);
      remember(ex.hypothesis);
      ++written;
    }
    write_file(out_dir + "/nli/train.tsv", train.str());
    write_file(out_dir + "/nli/eval.tsv", eval.str());
    write_file(out_dir + "/nli/upstream.txt", upstream.str());

    std::string occs, genders, vps;
    for (const auto& s : synth::nli_subjects()) occs += s + "\n";
    for (const char* g : {"man", "woman"}) genders += std::string(g) + "\n";
    for (const auto& vp : synth::nli_phrases()) vps += vp + "\n";
    write_file(out_dir + "/nli/occupations.txt", occs);
    write_file(out_dir + "/nli/gender_words.txt", genders);
    write_file(out_dir + "/nli/verb_phrases.txt", vps);
  }

  // ----- shared pretraining corpus and vocabulary -----
  {
    std::ostringstream pretrain;
    for (const char* suite : {"bios", "hate", "nli"}) {
      std::ifstream in(out_dir + "/" + std::string(suite) + "/upstream.txt");
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) pretrain << line << "\n";
    }
    write_file(out_dir + "/pretrain.txt", pretrain.str());
  }
  const Vocabulary vocab = build_vocab(vocab_texts, 1);
  vocab.save(out_dir + "/vocab.txt");

  // ----- per-suite base configs -----
  auto common = [&](const std::string& axis, int classes, const std::string& extra) {
    std::ostringstream cfg;
    cfg << "schema_version = 1\n"
        << "seed = 13\n"
        << "peft.kind = ft\n"
        << "peft.budget_fraction = 0.01\n"
        << "axis.path = ../" << axis << "\n"
        << "vocab.path = ../vocab.txt\n"
        << "model.layers = 2\n"
        << "model.hidden = 32\n"
        << "model.heads = 2\n"
        << "model.ffn = 64\n"
        << "model.max_seq = 48\n"
        << "model.classes = " << classes << "\n"
        << "pretrain.corpus = ../pretrain.txt\n"
        << "pretrain.steps = 1500\n"
        << "pretrain.lr = 0.003\n"
        << "upstream.corpus = upstream.txt\n"
        << "upstream.lr = 0.005\n"
        << "upstream.steps = 1500\n"
        << "upstream.eval_interval = 150\n"
        << "upstream.batch_size = 16\n"
        << "mlm.mask_prob = 0.15\n"
        << "downstream.train = train.tsv\n"
        << "downstream.eval = eval.tsv\n"
        << "downstream.lr = 0.0005\n"
        << "downstream.batch_size = 32\n"
        << "downstream.epochs = 10\n"
        << "sft.select_steps = 100\n"
        << "sft.select_lr = 0.05\n"
        << extra;
    return cfg.str();
  };
  write_file(out_dir + "/bios/base.cfg",
             common("gender_axis.txt", 4,
                    "run_dir = runs/bios\n"
                    "downstream.selection = accuracy\n"
                    "metrics.crows = crows.tsv\n"
                    "metrics.stereoset = stereoset.tsv\n"));
  write_file(out_dir + "/hate/base.cfg",
             common("race_axis.txt", 2,
                    "run_dir = runs/hate\n"
                    "downstream.selection = f1\n"
                    "downstream.positive_class_weight = 3\n"
                    "metrics.crows = crows.tsv\n"
                    "metrics.stereoset = stereoset.tsv\n"
                    "metrics.iptts_templates = iptts_templates.tsv\n"
                    "metrics.identifiers = identifiers.txt\n"));
  write_file(out_dir + "/nli/base.cfg",
             common("gender_axis.txt", 3,
                    "run_dir = runs/nli\n"
                    "downstream.selection = accuracy\n"
                    "metrics.nli_occupations = occupations.txt\n"
                    "metrics.nli_gender_words = gender_words.txt\n"
                    "metrics.nli_verb_phrases = verb_phrases.txt\n"));

  // ----- grid configuration -----
  write_file(out_dir + "/grid.cfg",
             "suite = bios/base.cfg\n"
             "suite = hate/base.cfg\n"
             "methods = ft,full_debias,adapter,prompt,lora,sft\n"
             "seeds = 13,17,23\n"
             "jobs = 2\n"
             "transfer.source = bios/base.cfg\n"
             "transfer.target = nli/base.cfg\n"
             "transfer.methods = adapter,prompt,lora,sft\n");
}

}  // namespace peftdebias
