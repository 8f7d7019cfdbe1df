#pragma once

// Deterministic synthetic dialog corpus: numbered-turn dialogs whose content
// words walk a fixed cyclic order, so the true response is the unique
// candidate continuing the walk. Positive and negative rows share a context
// and sit adjacently, giving n=2 candidate groups under context grouping.

#include <string>

#include "ums/corpus.hpp"
#include "ums/rng.hpp"

namespace synthetic_support {

struct SyntheticSpec {
  std::size_t num_dialogs = 500;
  std::size_t turns = 6;  // context turns; the response is turn `turns`
  std::size_t content_words = 16;
  std::uint64_t seed = 1;
  std::string id_prefix = "syn";
};

inline std::string content_word(std::size_t i) { return "w" + std::to_string(i); }
inline std::string turn_word(std::size_t i) { return "t" + std::to_string(i); }

inline ums::Corpus make_synthetic_pairs(const SyntheticSpec& spec) {
  ums::Rng rng(spec.seed);
  ums::Corpus corpus;
  corpus.dialogs.reserve(spec.num_dialogs * 2);
  for (std::size_t d = 0; d < spec.num_dialogs; ++d) {
    const std::size_t offset = rng.uniform_index(spec.content_words);
    std::vector<ums::Utterance> context;
    for (std::size_t j = 0; j < spec.turns; ++j) {
      std::string text;
      if (j == 0) text += spec.id_prefix + "g" + std::to_string(d) + " ";
      text += turn_word(j) + " " + content_word((offset + j) % spec.content_words);
      context.push_back(ums::Utterance{text, ""});
    }
    const std::string correct =
        turn_word(spec.turns) + " " +
        content_word((offset + spec.turns) % spec.content_words);
    std::size_t wrong_idx = rng.uniform_index(spec.content_words - 1);
    if (wrong_idx >= (offset + spec.turns) % spec.content_words) ++wrong_idx;
    const std::string wrong = turn_word(spec.turns) + " " + content_word(wrong_idx);

    ums::Dialog pos;
    pos.id = spec.id_prefix + "-p" + std::to_string(d);
    pos.context = context;
    pos.response = ums::Utterance{correct, ""};
    pos.label = 1;
    corpus.dialogs.push_back(std::move(pos));

    ums::Dialog neg;
    neg.id = spec.id_prefix + "-n" + std::to_string(d);
    neg.context = context;
    neg.response = ums::Utterance{wrong, ""};
    neg.label = 0;
    corpus.dialogs.push_back(std::move(neg));
  }
  return corpus;
}

}  // namespace synthetic_support
