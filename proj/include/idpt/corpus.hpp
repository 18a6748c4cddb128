#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "idpt/error.hpp"
#include "idpt/metrics.hpp"
#include "idpt/rng.hpp"
#include "idpt/tensor.hpp"

#include <json.hpp>

namespace idpt {

// ---- initiative taxonomy ----

enum class Speaker { User, System };

inline const char* speaker_name(Speaker s) { return s == Speaker::User ? "user" : "system"; }

// Four classes factored into dialogue-level x utterance-level axes:
// value = 2*[dialogue-level == system] + [utterance-level == system].
struct InitiativeLabel {
  int value = 0;

  Speaker dialogue_level() const { return (value & 2) ? Speaker::System : Speaker::User; }
  Speaker utterance_level() const { return (value & 1) ? Speaker::System : Speaker::User; }

  static InitiativeLabel from_value(int v) {
    if (v < 0 || v > 3) throw IndexError("initiative out of range 0..3: " + std::to_string(v));
    return InitiativeLabel{v};
  }
};

inline InitiativeLabel label_from_axes(Speaker dialogue_level, Speaker utterance_level) {
  int v = 2 * (dialogue_level == Speaker::System ? 1 : 0) + (utterance_level == Speaker::System ? 1 : 0);
  return InitiativeLabel{v};
}

inline std::string describe_axes(int label) {
  InitiativeLabel l = InitiativeLabel::from_value(label);
  std::string out = "dialogue-level: ";
  out += speaker_name(l.dialogue_level());
  out += ", utterance-level: ";
  out += speaker_name(l.utterance_level());
  return out;
}

constexpr int kNumInitiatives = 4;

// ---- examples ----

struct Turn {
  Speaker speaker = Speaker::User;
  std::string text;
};

struct DialogueExample {
  std::string id;
  std::string knowledge;
  std::vector<Turn> history;  // nonempty; last turn is the user's
  std::string response;
  std::optional<int> initiative;
};

// ---- tokenizer and vocabulary ----

/// Lowercase, split on whitespace; punctuation characters become their own
/// tokens.
inline TokenSeq tokenize(const std::string& text) {
  TokenSeq out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else {
      flush();
      out.push_back(std::string(1, raw));
    }
  }
  flush();
  return out;
}

struct Vocab {
  static constexpr Index kPad = 0, kBos = 1, kEos = 2, kUnk = 3, kSep = 4, kUsr = 5, kSys = 6, kKno = 7;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, Index> token_to_id;

  static Vocab with_specials() {
    Vocab v;
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<usr>", "<sys>", "<kno>"})
      v.add(s);
    return v;
  }

  Index add(const std::string& token) {
    auto it = token_to_id.find(token);
    if (it != token_to_id.end()) return it->second;
    Index id = static_cast<Index>(id_to_token.size());
    id_to_token.push_back(token);
    token_to_id.emplace(token, id);
    return id;
  }

  Index id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  const std::string& token(Index id) const { return id_to_token[static_cast<std::size_t>(id)]; }
  Index size() const { return static_cast<Index>(id_to_token.size()); }
};

/// Vocabulary from the given examples, tokens in first-appearance order.
inline Vocab build_vocab(const std::vector<DialogueExample>& corpus) {
  Vocab v = Vocab::with_specials();
  for (const auto& ex : corpus) {
    for (const auto& tok : tokenize(ex.knowledge)) v.add(tok);
    for (const auto& turn : ex.history)
      for (const auto& tok : tokenize(turn.text)) v.add(tok);
    for (const auto& tok : tokenize(ex.response)) v.add(tok);
  }
  return v;
}

// ---- input serialization ----

/// Encoder input: <kno> knowledge <sep> <usr> turn <sep> <sys> turn ... with
/// no trailing separator. Overlong inputs lose oldest history turns first;
/// the knowledge segment is always preserved.
inline std::vector<Index> encode_context_ids(const DialogueExample& ex, const Vocab& vocab,
                                             Index max_len) {
  if (ex.history.empty()) throw DataError("example " + ex.id + ": empty history");
  std::size_t first_turn = 0;
  while (true) {
    std::vector<Index> ids;
    ids.push_back(Vocab::kKno);
    for (const auto& tok : tokenize(ex.knowledge)) ids.push_back(vocab.id(tok));
    for (std::size_t t = first_turn; t < ex.history.size(); ++t) {
      ids.push_back(Vocab::kSep);
      ids.push_back(ex.history[t].speaker == Speaker::User ? Vocab::kUsr : Vocab::kSys);
      for (const auto& tok : tokenize(ex.history[t].text)) ids.push_back(vocab.id(tok));
    }
    if (static_cast<Index>(ids.size()) <= max_len) return ids;
    if (first_turn + 1 < ex.history.size()) {
      ++first_turn;  // drop the oldest remaining turn
      continue;
    }
    // Single turn still too long: keep the knowledge prefix, trim the turn
    // from its left.
    std::vector<Index> head;
    head.push_back(Vocab::kKno);
    for (const auto& tok : tokenize(ex.knowledge)) head.push_back(vocab.id(tok));
    Index keep = max_len - static_cast<Index>(head.size());
    if (keep < 1) throw DataError("example " + ex.id + ": knowledge alone exceeds max_seq_len");
    head.insert(head.end(), ids.end() - keep, ids.end());
    return head;
  }
}

/// Decoder target: <bos> response <eos>.
inline std::vector<Index> response_ids(const std::string& response, const Vocab& vocab) {
  std::vector<Index> ids;
  ids.push_back(Vocab::kBos);
  for (const auto& tok : tokenize(response)) ids.push_back(vocab.id(tok));
  ids.push_back(Vocab::kEos);
  return ids;
}

// ---- synthetic corpus ----

struct CatalogItem {
  const char* name;
  const char* creator;
  const char* genre;
};

// Closed entity catalog for the synthetic dialogues. Names are single
// tokens so the tokenizer never splits a slot.
inline const std::vector<CatalogItem>& full_catalog() {
  static const std::vector<CatalogItem> items = {
      {"starlight", "aria", "jazz"},    {"moonriver", "kenji", "folk"},
      {"thunderroad", "mara", "pop"},   {"goldenhour", "theo", "rock"},
      {"wildflower", "luna", "blues"},  {"nightdrive", "felix", "soul"},
      {"summerrain", "nadia", "jazz"},  {"winterglow", "oscar", "folk"},
      {"firefly", "priya", "pop"},      {"bluevelvet", "ruben", "rock"},
      {"stonebridge", "selma", "blues"},{"silverlake", "tomas", "soul"},
      {"morningdew", "aria", "pop"},    {"redcanyon", "kenji", "rock"},
      {"palehorizon", "mara", "jazz"},  {"driftwood", "theo", "blues"},
      {"greenvalley", "luna", "folk"},  {"ironheart", "felix", "pop"},
      {"lighthouse", "nadia", "soul"},  {"snowfield", "oscar", "jazz"},
      {"rivermist", "priya", "rock"},   {"darkpines", "ruben", "folk"},
      {"sunprairie", "selma", "soul"},  {"cloudnine", "tomas", "blues"}};
  return items;
}

struct SynthSpec {
  int num_examples = 2000;
  std::uint32_t seed = 0;
  // Default skew follows the annotated label statistics 169:20:80:431.
  std::array<double, 4> label_weights = {169, 20, 80, 431};
  int catalog_size = 24;
  double ambiguous_cue_prob = 0.05;
};

namespace synth_detail {

inline const std::vector<std::string>& openers() {
  static const std::vector<std::string> v = {
      "please play the song {item} for me .",
      "could you put on {item} ?",
      "i want to hear {item} today .",
  };
  return v;
}

inline const std::vector<std::string>& acks() {
  static const std::vector<std::string> v = {
      "sure , {item} is on . enjoy .",
      "of course , playing {item} now .",
  };
  return v;
}

// Last user turn; the lexical cue the recognizer can learn from.
inline const std::array<std::vector<std::string>, 4>& cues() {
  static const std::array<std::vector<std::string>, 4> v = {{
      {"what a nice song . i really enjoy it .",
       "this one sounds wonderful to me .",
       "i am so happy listening to it ."},
      {"who made this song ?",
       "tell me more about this song .",
       "what can you say about it ?"},
      {"it is okay but i have heard it many times .",
       "hmm , this one feels a bit stale now .",
       "not bad , though i know it by heart already ."},
      {"could you suggest some other song for me ?",
       "please find me a new song to hear .",
       "any fresh song you would pick for me ?"},
  }};
  return v;
}

inline const std::vector<std::string>& ambiguous_cues() {
  static const std::vector<std::string> v = {"i see . well then .", "okay ."};
  return v;
}

inline std::string fill(std::string tpl, const std::string& key, const std::string& value) {
  std::string pat = "{" + key + "}";
  for (std::size_t pos = tpl.find(pat); pos != std::string::npos; pos = tpl.find(pat))
    tpl.replace(pos, pat.size(), value);
  return tpl;
}

}  // namespace synth_detail

/// Response template for one initiative. Family marker words are disjoint
/// across labels, which is what the response-side oracle keys on.
inline std::string render_response(int label, const CatalogItem& current, const CatalogItem& other,
                                   const std::string& other_genre) {
  using synth_detail::fill;
  std::string tpl;
  switch (label) {
    case 0:
      tpl = "yes i love {item} too . what a lovely {genre} song .";
      break;
    case 1:
      tpl = "it is made by {creator} . truly a fine {genre} work indeed .";
      break;
    case 2:
      tpl = "glad you enjoyed it . how about something different ? maybe a {genre2} song .";
      break;
    case 3:
      tpl = "then let me recommend {item2} by {creator2} . it is a classic {genre2} song .";
      break;
    default:
      throw IndexError("initiative out of range 0..3: " + std::to_string(label));
  }
  tpl = fill(tpl, "item", current.name);
  tpl = fill(tpl, "creator", current.creator);
  tpl = fill(tpl, "genre", current.genre);
  tpl = fill(tpl, "item2", other.name);
  tpl = fill(tpl, "creator2", other.creator);
  tpl = fill(tpl, "genre2", other_genre);
  return tpl;
}

/// Seeded deterministic synthetic dialogues. Each response is rendered from
/// the template family of its sampled label; the last user turn carries a
/// cue phrase correlated with that label.
inline std::vector<DialogueExample> synth_generate(const SynthSpec& spec) {
  if (spec.num_examples <= 0) throw ConfigError("synth: num_examples must be positive");
  if (spec.catalog_size < 2 || spec.catalog_size > static_cast<int>(full_catalog().size()))
    throw ConfigError("synth: catalog_size must be in 2.." + std::to_string(full_catalog().size()));
  double weight_sum = 0;
  for (double w : spec.label_weights) {
    if (w < 0) throw ConfigError("synth: label_weights must be nonnegative");
    weight_sum += w;
  }
  if (weight_sum <= 0) throw ConfigError("synth: label_weights must not all be zero");

  static const std::vector<std::string> genres = {"jazz", "folk", "pop", "rock", "blues", "soul"};
  Rng rng(spec.seed);
  std::vector<DialogueExample> out;
  out.reserve(static_cast<std::size_t>(spec.num_examples));
  for (int n = 0; n < spec.num_examples; ++n) {
    double u = rng.unit() * weight_sum;
    int label = 0;
    double acc = 0;
    for (int j = 0; j < 4; ++j) {
      acc += spec.label_weights[static_cast<std::size_t>(j)];
      if (u < acc) {
        label = j;
        break;
      }
    }

    const auto& catalog = full_catalog();
    std::size_t cur_idx = rng.index(static_cast<std::size_t>(spec.catalog_size));
    std::size_t other_idx = rng.index(static_cast<std::size_t>(spec.catalog_size - 1));
    if (other_idx >= cur_idx) ++other_idx;  // other item is never the current one
    const CatalogItem& cur = catalog[cur_idx];
    const CatalogItem& other = catalog[other_idx];

    std::string other_genre;
    if (label == 3) {
      other_genre = other.genre;
    } else {
      // A genre different from the current item's, for the pivot family.
      std::size_t g = rng.index(genres.size() - 1);
      std::vector<std::string> pool;
      for (const auto& genre : genres)
        if (genre != cur.genre) pool.push_back(genre);
      other_genre = pool[g];
    }

    using namespace synth_detail;
    DialogueExample ex;
    ex.id = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(n);
    ex.knowledge = fill(fill(fill("about {item} : a {genre} song by {creator}", "item", cur.name),
                             "genre", cur.genre),
                        "creator", cur.creator);
    ex.history.push_back({Speaker::User, fill(openers()[rng.index(openers().size())], "item", cur.name)});
    ex.history.push_back({Speaker::System, fill(acks()[rng.index(acks().size())], "item", cur.name)});
    bool ambiguous = rng.unit() < spec.ambiguous_cue_prob;
    std::string cue = ambiguous
                          ? ambiguous_cues()[rng.index(ambiguous_cues().size())]
                          : cues()[static_cast<std::size_t>(label)]
                                  [rng.index(cues()[static_cast<std::size_t>(label)].size())];
    ex.history.push_back({Speaker::User, cue});
    ex.response = render_response(label, cur, other, other_genre);
    ex.initiative = label;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- rule-based oracles over the template families ----

inline bool contains_token(const TokenSeq& toks, const std::string& word) {
  for (const auto& t : toks)
    if (t == word) return true;
  return false;
}

/// Reads the family marker out of a response. Returns -1 when no family (or
/// more than one) matches.
inline int oracle_label_from_response(const TokenSeq& toks) {
  bool m3 = contains_token(toks, "recommend");
  bool m2 = contains_token(toks, "different");
  bool m1 = contains_token(toks, "made");
  bool m0 = contains_token(toks, "lovely");
  int count = int(m0) + int(m1) + int(m2) + int(m3);
  if (count != 1) return -1;
  if (m3) return 3;
  if (m2) return 2;
  if (m1) return 1;
  return 0;
}

/// Reads the cue phrase in the last user turn. Unrecognized cues fall back
/// to the majority label.
inline int oracle_label_from_history(const DialogueExample& ex) {
  if (ex.history.empty()) return 3;
  TokenSeq toks = tokenize(ex.history.back().text);
  if (contains_token(toks, "enjoy") || contains_token(toks, "wonderful") || contains_token(toks, "happy"))
    return 0;
  if (contains_token(toks, "who") || contains_token(toks, "tell") || contains_token(toks, "say"))
    return 1;
  if (contains_token(toks, "times") || contains_token(toks, "stale") || contains_token(toks, "heart"))
    return 2;
  if (contains_token(toks, "suggest") || contains_token(toks, "new") || contains_token(toks, "fresh"))
    return 3;
  return 3;
}

/// Controllability predicate for one example: a response matches label i iff
/// the response oracle reads family i, and for the recommendation family the
/// mentioned catalog item must not already appear in the context.
inline TemplateMatcher make_template_matcher(const DialogueExample& ex) {
  std::set<std::string> context_words;
  for (const auto& t : tokenize(ex.knowledge)) context_words.insert(t);
  for (const auto& turn : ex.history)
    for (const auto& t : tokenize(turn.text)) context_words.insert(t);
  return [context_words](int label, const TokenSeq& resp) {
    if (oracle_label_from_response(resp) != label) return false;
    if (label == 3) {
      for (const auto& item : full_catalog())
        if (contains_token(resp, item.name) && !context_words.count(item.name)) return true;
      return false;
    }
    return true;
  };
}

// ---- JSONL I/O ----

inline nlohmann::ordered_json example_to_json(const DialogueExample& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["knowledge"] = ex.knowledge;
  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& turn : ex.history) {
    nlohmann::ordered_json t;
    t["speaker"] = speaker_name(turn.speaker);
    t["text"] = turn.text;
    hist.push_back(std::move(t));
  }
  j["history"] = std::move(hist);
  j["response"] = ex.response;
  j["initiative"] = ex.initiative ? nlohmann::ordered_json(*ex.initiative) : nlohmann::ordered_json(nullptr);
  return j;
}

inline void save_jsonl(const std::vector<DialogueExample>& examples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  for (const auto& ex : examples) out << example_to_json(ex).dump() << "\n";
}

inline DialogueExample example_from_json(const nlohmann::json& j, const std::string& where) {
  auto require_field = [&](const char* name) {
    if (!j.contains(name)) throw DataError(where + ": missing required field \"" + std::string(name) + "\"");
  };
  require_field("id");
  require_field("knowledge");
  require_field("history");
  require_field("response");
  DialogueExample ex;
  if (!j["id"].is_string()) throw DataError(where + ": \"id\" must be a string");
  if (!j["knowledge"].is_string()) throw DataError(where + ": \"knowledge\" must be a string");
  if (!j["response"].is_string()) throw DataError(where + ": \"response\" must be a string");
  ex.id = j["id"].get<std::string>();
  ex.knowledge = j["knowledge"].get<std::string>();
  ex.response = j["response"].get<std::string>();
  if (!j["history"].is_array() || j["history"].empty())
    throw DataError(where + ": \"history\" must be a nonempty array");
  for (const auto& t : j["history"]) {
    if (!t.contains("speaker") || !t.contains("text"))
      throw DataError(where + ": history turn needs \"speaker\" and \"text\"");
    std::string sp = t["speaker"].get<std::string>();
    Turn turn;
    if (sp == "user")
      turn.speaker = Speaker::User;
    else if (sp == "system")
      turn.speaker = Speaker::System;
    else
      throw DataError(where + ": speaker must be \"user\" or \"system\", got \"" + sp + "\"");
    turn.text = t["text"].get<std::string>();
    ex.history.push_back(std::move(turn));
  }
  if (ex.history.back().speaker != Speaker::User)
    throw DataError(where + ": last history turn must be the user's");
  if (j.contains("initiative") && !j["initiative"].is_null()) {
    if (!j["initiative"].is_number_integer()) throw DataError(where + ": \"initiative\" must be an integer");
    int v = j["initiative"].get<int>();
    if (v < 0 || v > 3) throw DataError(where + ": initiative out of range 0..3, got " + std::to_string(v));
    ex.initiative = v;
  }
  return ex;
}

inline std::vector<DialogueExample> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  std::vector<DialogueExample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed JSON: " + e.what());
    }
    try {
      out.push_back(example_from_json(j, where));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": bad field type: " + e.what());
    }
  }
  return out;
}

// ---- splitting ----

struct SplitSizes {
  std::size_t train = 500, dev = 100, test = 100;
};

struct DataSplit {
  std::vector<DialogueExample> train, dev, test;
};

/// Seeded shuffle, then contiguous slices of the requested sizes.
inline DataSplit split(std::vector<DialogueExample> examples, SplitSizes sizes, std::uint32_t seed) {
  std::size_t need = sizes.train + sizes.dev + sizes.test;
  if (examples.size() < need)
    throw DataError("split needs >= " + std::to_string(need) + " examples, got " +
                    std::to_string(examples.size()));
  Rng rng(seed);
  shuffle(examples, rng);
  DataSplit out;
  out.train.assign(examples.begin(), examples.begin() + static_cast<long>(sizes.train));
  out.dev.assign(examples.begin() + static_cast<long>(sizes.train),
                 examples.begin() + static_cast<long>(sizes.train + sizes.dev));
  out.test.assign(examples.begin() + static_cast<long>(sizes.train + sizes.dev),
                  examples.begin() + static_cast<long>(need));
  return out;
}

}  // namespace idpt
