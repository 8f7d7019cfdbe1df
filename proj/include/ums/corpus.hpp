#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ums/rng.hpp"

namespace ums {

// A single speaker turn. Text is whitespace-normalized on ingestion and
// never empty inside a dialog.
struct Utterance {
  std::string text;
  std::string speaker;  // empty = untagged

  friend bool operator==(const Utterance& a, const Utterance& b) {
    return a.text == b.text && a.speaker == b.speaker;
  }
};

struct Dialog {
  std::string id;
  std::vector<Utterance> context;  // temporal order, length >= 1
  std::optional<Utterance> response;
  std::optional<int> label;  // 0/1; present only when response is present
};

enum class Split { train, val, test };

// Immutable after load; safe for concurrent reads. Sampling helpers take a
// caller-owned Rng so parallel workers can hold independent streams.
struct Corpus {
  std::vector<Dialog> dialogs;
  Split split = Split::train;
};

// TSV import: label \t utt_1 \t ... \t utt_m \t response, no header.
Corpus load_tsv(const std::filesystem::path& path, Split split = Split::train);

// JSONL: one object per line with {"id", "context", "response"?, "label"?}.
Corpus load_jsonl(const std::filesystem::path& path, Split split = Split::train);
void save_jsonl(const Corpus& corpus, const std::filesystem::path& path);

// min(k, |context|) consecutive utterances; the start offset is uniform over
// the valid offsets.
struct Window {
  std::size_t offset = 0;
  std::vector<Utterance> utterances;
};
Window extract_window(const Dialog& dialog, int k, Rng& rng);

// Uniform utterance from a uniform dialog whose id differs from
// exclude_dialog_id. Requires at least two dialogs.
Utterance sample_random_utterance(const Corpus& corpus,
                                  const std::string& exclude_dialog_id,
                                  Rng& rng);

}  // namespace ums
