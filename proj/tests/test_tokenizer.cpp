#include "ums/tokenizer.hpp"

#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "ums/rng.hpp"
#include "ums/util.hpp"

using namespace ums;
using test_support::TempDir;

namespace {

Corpus corpus_from_text(std::initializer_list<const char*> utterances) {
  Corpus corpus;
  Dialog d;
  d.id = "d1";
  for (const char* u : utterances) d.context.push_back(Utterance{u, ""});
  corpus.dialogs.push_back(std::move(d));
  return corpus;
}

// Reference truncator: drop whole leading utterances until the assembled
// layout fits, independent of the production path.
std::size_t reference_kept_context(const Vocab& v, const std::vector<Utterance>& context,
                                   const Utterance& response, std::size_t max_len) {
  std::size_t first = 0;
  for (;;) {
    std::size_t total = 3 + encode_utterance(v, response).size();
    for (std::size_t i = first; i < context.size(); ++i) {
      total += encode_utterance(v, context[i]).size();
    }
    if (total <= max_len || first == context.size()) return first;
    ++first;
  }
}

}  // namespace

TEST_CASE("build_vocab sorts by frequency then lexicographically") {
  const Corpus corpus = corpus_from_text({"hi hi there"});
  const Vocab v1 = Vocab::build(corpus, 1);
  REQUIRE(v1.size() == 10);
  CHECK(v1.token(8) == "hi");
  CHECK(v1.token(9) == "there");
  CHECK(v1.id_of("hi") == 8);
  CHECK(v1.id_of("there") == 9);

  const Vocab v2 = Vocab::build(corpus, 2);
  REQUIRE(v2.size() == 9);
  CHECK(v2.token(8) == "hi");
  CHECK(v2.id_of("there") == kUnkId);

  const Vocab v3 = Vocab::build(corpus, 10);
  CHECK(v3.size() == kNumReservedTokens);
}

TEST_CASE("reserved tokens occupy ids 0..7 in order") {
  const Vocab v;
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kUnkId) == "[UNK]");
  CHECK(v.token(kClsId) == "[CLS]");
  CHECK(v.token(kSepId) == "[SEP]");
  CHECK(v.token(kEotId) == "[EOT]");
  CHECK(v.token(kInsId) == "[INS]");
  CHECK(v.token(kDelId) == "[DEL]");
  CHECK(v.token(kSrchId) == "[SRCH]");
}

TEST_CASE("build_vocab never duplicates reserved tokens") {
  const Corpus corpus = corpus_from_text({"[CLS] hello [SEP]"});
  const Vocab v = Vocab::build(corpus, 1);
  CHECK(v.size() == kNumReservedTokens + 1);  // only "hello" added
  CHECK(v.id_of("hello") == 8);
}

TEST_CASE("vocab file round trip") {
  TempDir tmp;
  const Corpus corpus = corpus_from_text({"foo bar foo"});
  const Vocab v = Vocab::build(corpus, 1);
  const auto path = tmp.file("vocab.txt");
  v.save(path);

  const auto lines = read_lines(path);
  REQUIRE(lines.size() == v.size());
  CHECK(lines[0] == "[PAD]");
  CHECK(lines[7] == "[SRCH]");

  const Vocab loaded = Vocab::load(path);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.id_of("foo") == v.id_of("foo"));

  SUBCASE("corrupted reserved header is rejected") {
    auto bad = lines;
    bad[0] = "[pad]";
    std::string joined;
    for (const auto& l : bad) joined += l + "\n";
    const auto bad_path = tmp.write("bad.txt", joined);
    CHECK_THROWS_AS(Vocab::load(bad_path), ParseError);
  }
}

TEST_CASE("encode_utterance appends EOT and maps unknowns") {
  const Corpus corpus = corpus_from_text({"hi hi there"});
  const Vocab v = Vocab::build(corpus, 1);
  CHECK(encode_utterance(v, Utterance{"hi there", ""}) == std::vector<int>{8, 9, 4});
  CHECK(encode_utterance(v, Utterance{"zzz", ""}) == std::vector<int>{1, 4});
  CHECK(encode_utterance(v, Utterance{"", ""}) == std::vector<int>{4});
}

TEST_CASE("assemble_response_pair layout") {
  const Corpus corpus = corpus_from_text({"hi hi there"});
  const Vocab v = Vocab::build(corpus, 1);
  const std::vector<Utterance> context = {Utterance{"hi", ""}};

  const EncodedSequence seq =
      assemble_response_pair(v, context, Utterance{"there", ""}, 1, 512);
  CHECK(seq.token_ids == std::vector<int>{2, 8, 4, 3, 9, 4, 3});
  CHECK(seq.segment_ids == std::vector<int>{0, 0, 0, 0, 1, 1, 1});
  CHECK(seq.positions == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(seq.candidate_positions == std::vector<int>{0});
  CHECK(seq.targets == std::vector<int>{1});

  const EncodedSequence seq0 =
      assemble_response_pair(v, context, Utterance{"there", ""}, 0, 512);
  CHECK(seq0.token_ids == seq.token_ids);
  CHECK(seq0.targets == std::vector<int>{0});
}

TEST_CASE("assemble_response_pair drops whole leading utterances to fit") {
  Corpus corpus;
  Dialog d;
  d.id = "d1";
  std::vector<Utterance> context;
  std::string word_pool;
  for (int i = 0; i < 120; ++i) {
    // 5 word tokens per utterance -> 6 ids with [EOT]; 120 utterances ~ 720 ids
    std::string text;
    for (int w = 0; w < 5; ++w) text += "w" + std::to_string(i) + "x" + std::to_string(w) + " ";
    context.push_back(Utterance{normalize_whitespace(text), ""});
    d.context.push_back(context.back());
  }
  const Utterance response{"w0x0 w0x1 w0x2", ""};
  d.response = response;
  d.label = 1;
  corpus.dialogs.push_back(d);
  const Vocab v = Vocab::build(corpus, 1);

  const std::size_t max_len = 512;
  const EncodedSequence seq = assemble_response_pair(v, context, response, 1,
                                                     static_cast<int>(max_len));
  CHECK(seq.length() <= max_len);
  CHECK(seq.token_ids.front() == kClsId);
  CHECK(seq.token_ids.back() == kSepId);

  const std::size_t first = reference_kept_context(v, context, response, max_len);
  EncodedSequence expected;
  expected.token_ids.push_back(kClsId);
  for (std::size_t i = first; i < context.size(); ++i) {
    const auto ids = encode_utterance(v, context[i]);
    expected.token_ids.insert(expected.token_ids.end(), ids.begin(), ids.end());
  }
  expected.token_ids.push_back(kSepId);
  const auto rids = encode_utterance(v, response);
  expected.token_ids.insert(expected.token_ids.end(), rids.begin(), rids.end());
  expected.token_ids.push_back(kSepId);
  CHECK(seq.token_ids == expected.token_ids);

  // response intact: its ids appear right after the first [SEP]
  const auto sep = std::find(seq.token_ids.begin(), seq.token_ids.end(), kSepId);
  const std::vector<int> tail(sep + 1, seq.token_ids.end());
  std::vector<int> want = rids;
  want.push_back(kSepId);
  CHECK(tail == want);
}

TEST_CASE("assemble_response_pair truncates the response only as a last resort") {
  const Corpus corpus = corpus_from_text({"a b c d e f g h"});
  const Vocab v = Vocab::build(corpus, 1);
  const std::vector<Utterance> context = {Utterance{"a b c d", ""}};
  const Utterance response{"e f g h", ""};
  // minimal layout: [CLS] [SEP] r... [SEP]; max_len 6 keeps 2 response tokens + [EOT]
  const EncodedSequence seq = assemble_response_pair(v, context, response, 1, 6);
  CHECK(seq.length() == 6);
  CHECK(seq.token_ids.front() == kClsId);
  CHECK(seq.token_ids[1] == kSepId);
  CHECK(seq.token_ids[seq.length() - 2] == kEotId);
  CHECK(seq.token_ids.back() == kSepId);
}

TEST_CASE("assemble_response_pair rejects impossible max_len") {
  const Vocab v;
  const std::vector<Utterance> context = {Utterance{"a", ""}};
  CHECK_THROWS_AS(assemble_response_pair(v, context, Utterance{"b", ""}, 1, 3),
                  std::invalid_argument);
}

TEST_CASE("round trip decode then re-encode is stable for in-vocab text") {
  const Corpus corpus = corpus_from_text({"alpha beta gamma delta"});
  const Vocab v = Vocab::build(corpus, 1);
  const Utterance u{"gamma alpha delta", ""};
  const std::vector<int> ids = encode_utterance(v, u);
  std::string decoded;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    if (i > 0) decoded += " ";
    decoded += v.token(ids[i]);
  }
  CHECK(encode_utterance(v, Utterance{decoded, ""}) == ids);
}

TEST_CASE("fuzzed response pairs satisfy the sequence invariants") {
  const Corpus corpus = corpus_from_text({"a b c d e f g h i j k l m n o p"});
  const Vocab v = Vocab::build(corpus, 1);
  Rng gen(2024);
  const char* words[] = {"a", "b", "c", "d", "e", "f", "g", "h",
                         "i", "j", "k", "l", "m", "n", "o", "p"};
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<Utterance> context;
    const std::size_t n_utts = 1 + gen.uniform_index(6);
    for (std::size_t i = 0; i < n_utts; ++i) {
      std::string text;
      const std::size_t n_words = gen.uniform_index(5);
      for (std::size_t w = 0; w < n_words; ++w) {
        if (w > 0) text += " ";
        text += words[gen.uniform_index(16)];
      }
      context.push_back(Utterance{text, ""});
    }
    const Utterance response{words[gen.uniform_index(16)], ""};
    const int label = static_cast<int>(gen.uniform_index(2));
    const int max_len = 8 + static_cast<int>(gen.uniform_index(48));
    const EncodedSequence seq = assemble_response_pair(v, context, response, label, max_len);

    REQUIRE(seq.length() <= static_cast<std::size_t>(max_len));
    REQUIRE(seq.token_ids.front() == kClsId);
    REQUIRE(seq.segment_ids.size() == seq.length());
    REQUIRE(seq.positions.size() == seq.length());
    // segments: 0 through the first [SEP], 1 afterward
    bool after_sep = false;
    for (std::size_t i = 0; i < seq.length(); ++i) {
      REQUIRE(seq.segment_ids[i] == (after_sep ? 1 : 0));
      if (!after_sep && seq.token_ids[i] == kSepId) after_sep = true;
    }
    REQUIRE(seq.candidate_positions == std::vector<int>{0});
    REQUIRE(seq.targets == std::vector<int>{label});
  }
}
