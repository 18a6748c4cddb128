#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "idpt/corpus.hpp"

using namespace idpt;
using Catch::Approx;

namespace {
std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "idpt_corpus_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}
}  // namespace

TEST_CASE("label axes follow the taxonomy grid") {
  REQUIRE(label_from_axes(Speaker::System, Speaker::System).value == 3);
  REQUIRE(label_from_axes(Speaker::System, Speaker::User).value == 2);
  REQUIRE(label_from_axes(Speaker::User, Speaker::System).value == 1);
  REQUIRE(label_from_axes(Speaker::User, Speaker::User).value == 0);

  for (int v = 0; v < 4; ++v) {
    auto l = InitiativeLabel::from_value(v);
    REQUIRE(label_from_axes(l.dialogue_level(), l.utterance_level()).value == v);
  }
  REQUIRE_THROWS_AS(InitiativeLabel::from_value(4), IndexError);
  REQUIRE(describe_axes(3) == "dialogue-level: system, utterance-level: system");
  REQUIRE(describe_axes(1) == "dialogue-level: user, utterance-level: system");
}

TEST_CASE("tokenize splits punctuation and lowercases") {
  auto toks = tokenize("I like it!");
  REQUIRE(toks == TokenSeq{"i", "like", "it", "!"});
  REQUIRE(tokenize("  a,b  ") == TokenSeq{"a", ",", "b"});
  REQUIRE(tokenize("").empty());
}

TEST_CASE("vocab maps unknown tokens to <unk> and round-trips") {
  Vocab v = Vocab::with_specials();
  Index a = v.add("alpha");
  REQUIRE(v.id("alpha") == a);
  REQUIRE(v.id("never-seen") == Vocab::kUnk);
  REQUIRE(v.token(Vocab::kBos) == "<bos>");
  REQUIRE(v.size() == 9);
}

TEST_CASE("build_vocab is deterministic given corpus order") {
  SynthSpec spec;
  spec.num_examples = 50;
  spec.seed = 3;
  auto corpus = synth_generate(spec);
  Vocab v1 = build_vocab(corpus);
  Vocab v2 = build_vocab(corpus);
  REQUIRE(v1.id_to_token == v2.id_to_token);
}

TEST_CASE("synth_generate is a pure function of its spec") {
  SynthSpec spec;
  spec.num_examples = 120;
  spec.seed = 11;
  auto a = synth_generate(spec);
  auto b = synth_generate(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].id == b[i].id);
    REQUIRE(a[i].response == b[i].response);
    REQUIRE(a[i].knowledge == b[i].knowledge);
  }

  auto p1 = temp_file("synth_a.jsonl");
  auto p2 = temp_file("synth_b.jsonl");
  save_jsonl(a, p1.string());
  save_jsonl(b, p2.string());
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(s1 == s2);
}

TEST_CASE("label histogram tracks the default skew within two points") {
  SynthSpec spec;
  spec.num_examples = 7000;
  spec.seed = 0;
  auto corpus = synth_generate(spec);
  std::array<int, 4> counts = {0, 0, 0, 0};
  for (const auto& ex : corpus) counts[static_cast<std::size_t>(*ex.initiative)]++;
  const double total = 169 + 20 + 80 + 431;
  const std::array<double, 4> expect = {169 / total, 20 / total, 80 / total, 431 / total};
  for (int j = 0; j < 4; ++j) {
    double got = counts[static_cast<std::size_t>(j)] / 7000.0;
    REQUIRE(std::abs(got - expect[static_cast<std::size_t>(j)]) < 0.02);
  }
}

TEST_CASE("every recommendation response names an item absent from its history") {
  SynthSpec spec;
  spec.num_examples = 400;
  spec.seed = 5;
  for (const auto& ex : synth_generate(spec)) {
    if (*ex.initiative != 3) continue;
    std::set<std::string> context;
    for (const auto& t : tokenize(ex.knowledge)) context.insert(t);
    for (const auto& turn : ex.history)
      for (const auto& t : tokenize(turn.text)) context.insert(t);
    bool found_new_item = false;
    for (const auto& item : full_catalog())
      if (contains_token(tokenize(ex.response), item.name) && !context.count(item.name))
        found_new_item = true;
    REQUIRE(found_new_item);
  }
}

TEST_CASE("response oracle is exact; history oracle is strong but imperfect") {
  SynthSpec spec;
  spec.num_examples = 1500;
  spec.seed = 0;
  auto corpus = synth_generate(spec);
  int resp_hits = 0, hist_hits = 0;
  for (const auto& ex : corpus) {
    if (oracle_label_from_response(tokenize(ex.response)) == *ex.initiative) ++resp_hits;
    if (oracle_label_from_history(ex) == *ex.initiative) ++hist_hits;
  }
  REQUIRE(resp_hits == static_cast<int>(corpus.size()));
  REQUIRE(static_cast<double>(hist_hits) / corpus.size() >= 0.85);
  REQUIRE(hist_hits < static_cast<int>(corpus.size()));  // the cue is not a giveaway
}

TEST_CASE("template matcher accepts own family and rejects others") {
  SynthSpec spec;
  spec.num_examples = 60;
  spec.seed = 9;
  auto corpus = synth_generate(spec);
  for (const auto& ex : corpus) {
    auto matcher = make_template_matcher(ex);
    REQUIRE(matcher(*ex.initiative, tokenize(ex.response)));
    for (int other = 0; other < 4; ++other)
      if (other != *ex.initiative) REQUIRE_FALSE(matcher(other, tokenize(ex.response)));
  }
}

TEST_CASE("jsonl round trip preserves structure") {
  SynthSpec spec;
  spec.num_examples = 40;
  spec.seed = 21;
  auto corpus = synth_generate(spec);
  corpus[5].initiative.reset();  // unlabeled examples stay unlabeled
  auto path = temp_file("roundtrip.jsonl");
  save_jsonl(corpus, path.string());
  auto loaded = load_jsonl(path.string());
  REQUIRE(loaded.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    REQUIRE(loaded[i].id == corpus[i].id);
    REQUIRE(loaded[i].knowledge == corpus[i].knowledge);
    REQUIRE(loaded[i].response == corpus[i].response);
    REQUIRE(loaded[i].initiative == corpus[i].initiative);
    REQUIRE(loaded[i].history.size() == corpus[i].history.size());
    for (std::size_t t = 0; t < corpus[i].history.size(); ++t) {
      REQUIRE(loaded[i].history[t].speaker == corpus[i].history[t].speaker);
      REQUIRE(loaded[i].history[t].text == corpus[i].history[t].text);
    }
  }
}

TEST_CASE("jsonl loader rejects schema violations with line context") {
  auto path = temp_file("bad.jsonl");
  {
    std::ofstream f(path);
    f << R"({"id":"x","knowledge":"k","history":[{"speaker":"user","text":"hi"}],"response":"r","initiative":7})"
      << "\n";
  }
  REQUIRE_THROWS_MATCHES(load_jsonl(path.string()), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("initiative out of range 0..3") &&
                                                         Catch::Matchers::ContainsSubstring(":1")));
  {
    std::ofstream f(path);
    f << R"({"id":"x","knowledge":"k","history":[{"speaker":"user","text":"hi"}]})" << "\n";
  }
  REQUIRE_THROWS_MATCHES(load_jsonl(path.string()), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("response")));
  {
    std::ofstream f(path);
    f << "{not json\n";
  }
  REQUIRE_THROWS_MATCHES(load_jsonl(path.string()), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("malformed JSON")));
  {
    std::ofstream f(path);
    f << R"({"id":"x","knowledge":"k","history":[{"speaker":"user","text":"a"},{"speaker":"system","text":"b"}],"response":"r"})"
      << "\n";
  }
  REQUIRE_THROWS_MATCHES(load_jsonl(path.string()), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("last history turn")));
}

TEST_CASE("split produces disjoint seeded slices covering the input") {
  SynthSpec spec;
  spec.num_examples = 700;
  spec.seed = 0;
  auto corpus = synth_generate(spec);
  auto s1 = split(corpus, SplitSizes{500, 100, 100}, 0);
  auto s2 = split(corpus, SplitSizes{500, 100, 100}, 0);
  REQUIRE(s1.train.size() == 500);
  REQUIRE(s1.dev.size() == 100);
  REQUIRE(s1.test.size() == 100);
  REQUIRE(s1.train[0].id == s2.train[0].id);
  REQUIRE(s1.test[99].id == s2.test[99].id);

  std::set<std::string> ids;
  for (const auto& e : s1.train) ids.insert(e.id);
  for (const auto& e : s1.dev) ids.insert(e.id);
  for (const auto& e : s1.test) ids.insert(e.id);
  REQUIRE(ids.size() == 700);

  std::set<std::string> input_ids;
  for (const auto& e : corpus) input_ids.insert(e.id);
  for (const auto& id : ids) REQUIRE(input_ids.count(id) == 1);

  SynthSpec small = spec;
  small.num_examples = 500;
  REQUIRE_THROWS_AS(split(synth_generate(small), SplitSizes{500, 100, 100}, 0), DataError);
}

TEST_CASE("encode_context_ids serializes tags and truncates oldest history first") {
  SynthSpec spec;
  spec.num_examples = 4;
  spec.seed = 2;
  auto corpus = synth_generate(spec);
  Vocab vocab = build_vocab(corpus);
  auto ids = encode_context_ids(corpus[0], vocab, 128);
  REQUIRE(ids[0] == Vocab::kKno);
  int seps = 0, usr = 0, sys = 0;
  for (Index id : ids) {
    if (id == Vocab::kSep) ++seps;
    if (id == Vocab::kUsr) ++usr;
    if (id == Vocab::kSys) ++sys;
  }
  REQUIRE(seps == 3);
  REQUIRE(usr == 2);
  REQUIRE(sys == 1);
  for (Index id : ids) REQUIRE(id != Vocab::kUnk);

  // Tight budget: the oldest turn goes first, knowledge stays.
  auto truncated = encode_context_ids(corpus[0], vocab, static_cast<Index>(ids.size()) - 1);
  REQUIRE(truncated[0] == Vocab::kKno);
  int usr2 = 0;
  for (Index id : truncated)
    if (id == Vocab::kUsr) ++usr2;
  REQUIRE(usr2 == 1);  // opener turn dropped, cue turn kept
  REQUIRE(truncated.size() < ids.size());

  DialogueExample empty_hist = corpus[0];
  empty_hist.history.clear();
  REQUIRE_THROWS_AS(encode_context_ids(empty_hist, vocab, 128), DataError);
}

TEST_CASE("response_ids wraps with bos and eos") {
  Vocab v = Vocab::with_specials();
  v.add("hello");
  auto ids = response_ids("hello hello", v);
  REQUIRE(ids.front() == Vocab::kBos);
  REQUIRE(ids.back() == Vocab::kEos);
  REQUIRE(ids.size() == 4);
}
