#pragma once

// Visit text and coded fields -> binary bag of words with negation scopes,
// merged bigrams and aggregated anchor columns.

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "qmrtag/dataset.hpp"

namespace qmrtag {

inline const std::set<std::string>& negation_triggers() {
  static const std::set<std::string> words{"no",      "not",    "denies",
                                           "without", "non",    "unable"};
  return words;
}

// Word-like negation stops; the punctuation stops are . ; [ - + and newline.
inline const std::set<std::string>& negation_stop_words() {
  static const std::set<std::string> words{
      "but",    "and",       "pt",   "except", "reports", "alert",
      "complains", "has",    "states", "secondary", "per", "did", "aox3"};
  return words;
}

inline constexpr std::string_view kNegPrefix = "neg:";

using Bigram = std::array<std::string, 2>;
using BigramSet = std::set<Bigram>;

namespace detail {

struct RawToken {
  std::string text;
  bool punct = false;  // one of the punctuation stops
};

inline bool word_byte(unsigned char c) {
  return std::isalnum(c) || c == '/' || c == '_' || c >= 0x80;
}

inline bool is_punct_stop(char c) {
  return c == '.' || c == ';' || c == '[' || c == '-' || c == '+' || c == '\n';
}

// Lowercased words and punctuation stops. A hyphen or a dot between two word
// characters (x-ray, 98.6) stays inside the word; apostrophes are dropped.
inline std::vector<RawToken> lex(std::string_view text) {
  std::vector<RawToken> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back({std::move(cur), false});
      cur.clear();
    }
  };
  for (std::size_t k = 0; k < text.size(); ++k) {
    const auto c = static_cast<unsigned char>(text[k]);
    if (word_byte(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
      continue;
    }
    const bool inner = !cur.empty() && k + 1 < text.size() &&
                       word_byte(static_cast<unsigned char>(text[k + 1]));
    if ((c == '-' && inner) ||
        (c == '.' && inner && std::isdigit(static_cast<unsigned char>(cur.back())) &&
         std::isdigit(static_cast<unsigned char>(text[k + 1])))) {
      cur.push_back(static_cast<char>(c));
      continue;
    }
    if (c == '\'' && inner) {
      continue;
    }
    flush();
    if (is_punct_stop(static_cast<char>(c))) {
      out.push_back({std::string(1, static_cast<char>(c)), true});
    } else if (c == '\r' && k + 1 < text.size() && text[k + 1] == '\n') {
      continue;
    }
  }
  flush();
  return out;
}

inline bool mergeable(const std::string& w) {
  return !negation_triggers().count(w) && !negation_stop_words().count(w);
}

// Greedy left-to-right merge of adjacent word pairs.
inline std::vector<RawToken> merge_bigrams(std::vector<RawToken> toks,
                                           const BigramSet& bigrams) {
  if (bigrams.empty()) {
    return toks;
  }
  std::vector<RawToken> out;
  out.reserve(toks.size());
  for (std::size_t k = 0; k < toks.size(); ++k) {
    if (!toks[k].punct && k + 1 < toks.size() && !toks[k + 1].punct &&
        bigrams.count({toks[k].text, toks[k + 1].text})) {
      out.push_back({toks[k].text + "_" + toks[k + 1].text, false});
      ++k;
    } else {
      out.push_back(std::move(toks[k]));
    }
  }
  return out;
}

}  // namespace detail

// Words of `text` with known bigrams merged and words inside a negation
// scope prefixed with "neg:". Triggers and stop words are emitted as plain
// words; punctuation is not emitted. "-" negates only the next word.
inline std::vector<std::string> tokenize_with_negation(std::string_view text,
                                                       const BigramSet& bigrams = {}) {
  const auto toks = detail::merge_bigrams(detail::lex(text), bigrams);
  std::vector<std::string> out;
  bool scope = false;
  bool next_only = false;
  for (const auto& t : toks) {
    if (t.punct) {
      scope = false;
      next_only = t.text == "-";
      continue;
    }
    if (negation_stop_words().count(t.text)) {
      scope = false;
      next_only = false;
      out.push_back(t.text);
    } else if (negation_triggers().count(t.text)) {
      // A trigger inside an open scope leaves that scope as is.
      scope = true;
      next_only = false;
      out.push_back(t.text);
    } else if (scope || next_only) {
      out.push_back(std::string(kNegPrefix) + t.text);
      next_only = false;
    } else {
      out.push_back(t.text);
    }
  }
  return out;
}

struct RawVisit {
  std::string id;
  std::optional<int> age;
  std::string sex;
  std::string chief_complaint;
  std::string triage;
  std::string md_comments;
  std::vector<std::string> medication_history;
  std::vector<std::string> dispensed_medications;
  std::vector<std::string> billing_codes;  // evaluation only
};

inline RawVisit visit_from_json(const nlohmann::json& j) {
  RawVisit v;
  try {
    v.id = j.value("id", "");
    if (j.contains("age") && !j.at("age").is_null()) {
      v.age = j.at("age").get<int>();
    }
    v.sex = j.value("sex", "");
    v.chief_complaint = j.value("chief_complaint", "");
    v.triage = j.value("triage", "");
    v.md_comments = j.value("md_comments", "");
    v.medication_history =
        j.value("medication_history", std::vector<std::string>{});
    v.dispensed_medications =
        j.value("dispensed_medications", std::vector<std::string>{});
    v.billing_codes = j.value("billing_codes", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed visit: ") + e.what());
  }
  return v;
}

inline nlohmann::json visit_to_json(const RawVisit& v) {
  nlohmann::json j{{"id", v.id},
                   {"sex", v.sex},
                   {"chief_complaint", v.chief_complaint},
                   {"triage", v.triage},
                   {"md_comments", v.md_comments},
                   {"medication_history", v.medication_history},
                   {"dispensed_medications", v.dispensed_medications},
                   {"billing_codes", v.billing_codes}};
  j["age"] = v.age ? nlohmann::json(*v.age) : nlohmann::json(nullptr);
  return j;
}

inline std::vector<RawVisit> read_corpus(std::istream& in) {
  std::vector<RawVisit> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      out.push_back(visit_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    if (out.back().id.empty()) {
      out.back().id = "v" + std::to_string(out.size() - 1);
    }
  }
  return out;
}

inline std::vector<RawVisit> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open corpus " + path);
  }
  return read_corpus(in);
}

inline std::string age_token(int age) {
  const int lo = (std::max(age, 0) / 10) * 10;
  return "age:" + std::to_string(lo) + "-" + std::to_string(lo + 9);
}

// Every token the visit produces, before vocabulary filtering.
inline std::set<std::string> visit_tokens(const RawVisit& v,
                                          const BigramSet& bigrams) {
  std::set<std::string> out;
  if (v.age) {
    out.insert(age_token(*v.age));
  }
  if (!v.sex.empty()) {
    std::string s = v.sex.substr(0, 1);
    s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
    out.insert("sex:" + s);
  }
  for (const auto* field : {&v.chief_complaint, &v.triage, &v.md_comments}) {
    for (auto& t : tokenize_with_negation(*field, bigrams)) {
      out.insert(std::move(t));
    }
  }
  for (const auto& code : v.medication_history) {
    out.insert("medhx:" + code);
  }
  for (const auto& code : v.dispensed_medications) {
    out.insert("meddisp:" + code);
  }
  return out;
}

// Most frequent adjacent word pairs over the free-text fields. Pairs never
// span punctuation and never involve negation triggers or stop words.
inline BigramSet top_bigrams(const std::vector<RawVisit>& corpus,
                             std::size_t count = 200, std::size_t min_count = 2) {
  std::map<Bigram, std::size_t> freq;
  for (const auto& v : corpus) {
    for (const auto* field : {&v.chief_complaint, &v.triage, &v.md_comments}) {
      const auto toks = detail::lex(*field);
      for (std::size_t k = 0; k + 1 < toks.size(); ++k) {
        if (toks[k].punct || toks[k + 1].punct ||
            !detail::mergeable(toks[k].text) ||
            !detail::mergeable(toks[k + 1].text)) {
          continue;
        }
        ++freq[{toks[k].text, toks[k + 1].text}];
      }
    }
  }
  std::vector<std::pair<Bigram, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  BigramSet out;
  for (const auto& [bg, c] : items) {
    if (out.size() >= count || c < min_count) {
      break;
    }
    out.insert(bg);
  }
  return out;
}

// Condition -> raw tokens that count as that condition's anchor, in
// condition order.
struct AnchorSpec {
  std::vector<std::string> conditions;
  std::vector<std::vector<std::string>> tokens;
};

inline AnchorSpec anchor_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw DataError("anchor spec must be an object mapping condition to tokens");
  }
  AnchorSpec spec;
  // The object is read in key order so condition indices are stable.
  for (const auto& [cond, toks] : j.items()) {
    spec.conditions.push_back(cond);
    try {
      spec.tokens.push_back(toks.get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception&) {
      throw DataError("anchor tokens of " + cond + " must be a list of strings");
    }
  }
  return spec;
}

inline std::string anchor_column_name(const std::string& condition) {
  return "anchor:" + condition;
}

struct Vocabulary {
  std::vector<std::string> tokens;  // column -> token
  std::unordered_map<std::string, std::size_t> index;
  AnchorSpec anchors;
  std::vector<std::size_t> anchor_index;  // condition -> column
  BigramSet bigrams;
  std::map<std::string, std::size_t> document_frequency;
  std::size_t corpus_size = 0;
  std::size_t max_terms = 0;

  std::size_t n() const { return tokens.size(); }
  std::size_t m() const { return anchors.conditions.size(); }

  std::optional<std::size_t> find(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  void rebuild_index() {
    index.clear();
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      index.emplace(tokens[k], k);
    }
    anchor_index.clear();
    for (const auto& c : anchors.conditions) {
      auto col = find(anchor_column_name(c));
      if (!col) {
        throw DataError("vocabulary lacks the anchor column of " + c);
      }
      anchor_index.push_back(*col);
    }
  }
};

inline Vocabulary build_vocabulary(const std::vector<RawVisit>& corpus,
                                   const AnchorSpec& anchors,
                                   std::size_t max_terms,
                                   const BigramSet& bigrams) {
  if (corpus.empty()) {
    throw DataError("cannot build a vocabulary from an empty corpus");
  }
  if (anchors.conditions.empty()) {
    throw DataError("anchor spec lists no conditions");
  }
  std::unordered_set<std::string> raw_anchor;
  for (std::size_t i = 0; i < anchors.conditions.size(); ++i) {
    if (anchors.tokens[i].empty()) {
      throw DataError("condition " + anchors.conditions[i] +
                      " has no anchor tokens");
    }
    raw_anchor.insert(anchors.tokens[i].begin(), anchors.tokens[i].end());
  }
  Vocabulary v;
  v.anchors = anchors;
  v.bigrams = bigrams;
  v.corpus_size = corpus.size();
  v.max_terms = max_terms;
  for (const auto& visit : corpus) {
    const auto toks = visit_tokens(visit, bigrams);
    for (const auto& t : toks) {
      ++v.document_frequency[t];
    }
    for (std::size_t i = 0; i < anchors.conditions.size(); ++i) {
      for (const auto& at : anchors.tokens[i]) {
        if (toks.count(at)) {
          ++v.document_frequency[anchor_column_name(anchors.conditions[i])];
          break;
        }
      }
    }
  }
  // Raw anchor tokens only feed the aggregated columns.
  std::vector<std::pair<std::string, std::size_t>> cand;
  for (const auto& [tok, df] : v.document_frequency) {
    if (raw_anchor.count(tok)) {
      continue;
    }
    if (2 * df > corpus.size()) {
      continue;
    }
    cand.emplace_back(tok, df);
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (cand.size() > max_terms) {
    cand.resize(max_terms);
  }
  std::set<std::string> kept;
  for (auto& [tok, df] : cand) {
    kept.insert(tok);
    v.tokens.push_back(tok);
  }
  for (const auto& c : anchors.conditions) {
    const auto name = anchor_column_name(c);
    if (!kept.count(name)) {
      v.tokens.push_back(name);
    }
  }
  v.rebuild_index();
  return v;
}

// Condition -> billing codes (or code prefixes ending in '*').
struct LabelMap {
  std::vector<std::string> conditions;
  std::vector<std::vector<std::string>> codes;
};

inline LabelMap label_map_from_json(const nlohmann::json& j) {
  LabelMap out;
  for (const auto& [cond, codes] : j.items()) {
    out.conditions.push_back(cond);
    out.codes.push_back(codes.get<std::vector<std::string>>());
  }
  return out;
}

inline bool code_matches(const std::string& code, const std::string& pattern) {
  if (!pattern.empty() && pattern.back() == '*') {
    return code.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0;
  }
  return code == pattern;
}

// Labels for the vocabulary's conditions from the billing codes. Conditions
// missing from the map are never on.
inline BinaryVector labels_from_billing(const RawVisit& visit,
                                        const Vocabulary& vocab,
                                        const LabelMap& labels) {
  BinaryVector y(vocab.m(), 0);
  for (std::size_t i = 0; i < vocab.m(); ++i) {
    const auto it = std::find(labels.conditions.begin(), labels.conditions.end(),
                              vocab.anchors.conditions[i]);
    if (it == labels.conditions.end()) {
      continue;
    }
    const auto& pats = labels.codes[static_cast<std::size_t>(it - labels.conditions.begin())];
    for (const auto& code : visit.billing_codes) {
      for (const auto& p : pats) {
        if (code_matches(code, p)) {
          y[i] = 1;
        }
      }
    }
  }
  return y;
}

inline PatientRecord vectorize(const RawVisit& visit, const Vocabulary& vocab,
                               const LabelMap* labels = nullptr) {
  PatientRecord rec;
  rec.id = visit.id;
  rec.x.assign(vocab.n(), 0);
  const auto toks = visit_tokens(visit, vocab.bigrams);
  for (const auto& t : toks) {
    if (auto col = vocab.find(t)) {
      rec.x[*col] = 1;
    }
  }
  for (std::size_t i = 0; i < vocab.m(); ++i) {
    for (const auto& at : vocab.anchors.tokens[i]) {
      if (toks.count(at)) {
        rec.x[vocab.anchor_index[i]] = 1;
        break;
      }
    }
  }
  rec.a = anchors_of(rec.x, vocab.anchor_index);
  if (labels) {
    rec.y = labels_from_billing(visit, vocab, *labels);
  }
  return rec;
}

inline Dataset vectorize_corpus(const std::vector<RawVisit>& corpus,
                                const Vocabulary& vocab,
                                const LabelMap* labels = nullptr,
                                unsigned threads = 1) {
  Dataset ds;
  ds.anchor_index = vocab.anchor_index;
  ds.condition_names = vocab.anchors.conditions;
  ds.feature_names = vocab.tokens;
  ds.records.resize(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t r) {
    ds.records[r] = vectorize(corpus[r], vocab, labels);
  });
  return ds;
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v) {
  nlohmann::json anchors = nlohmann::json::object();
  for (std::size_t i = 0; i < v.m(); ++i) {
    anchors[v.anchors.conditions[i]] = v.anchors.tokens[i];
  }
  auto bigrams = nlohmann::json::array();
  for (const auto& b : v.bigrams) {
    bigrams.push_back({b[0], b[1]});
  }
  return {{"format", "qmrtag-vocabulary"},
          {"version", 1},
          {"tokens", v.tokens},
          {"conditions", v.anchors.conditions},
          {"anchor_tokens", anchors},
          {"anchor_index", v.anchor_index},
          {"bigrams", bigrams},
          {"document_frequency", v.document_frequency},
          {"corpus_size", v.corpus_size},
          {"max_terms", v.max_terms}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
  Vocabulary v;
  try {
    if (j.value("format", "") != "qmrtag-vocabulary") {
      throw DataError("not a vocabulary file");
    }
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    v.anchors.conditions = j.at("conditions").get<std::vector<std::string>>();
    for (const auto& c : v.anchors.conditions) {
      v.anchors.tokens.push_back(
          j.at("anchor_tokens").at(c).get<std::vector<std::string>>());
    }
    for (const auto& b : j.at("bigrams")) {
      v.bigrams.insert({b.at(0).get<std::string>(), b.at(1).get<std::string>()});
    }
    v.document_frequency =
        j.at("document_frequency").get<std::map<std::string, std::size_t>>();
    v.corpus_size = j.at("corpus_size").get<std::size_t>();
    v.max_terms = j.at("max_terms").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary: ") + e.what());
  }
  v.rebuild_index();
  return v;
}

}  // namespace qmrtag
