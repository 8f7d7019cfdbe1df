#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ums/rng.hpp"
#include "ums/tokenizer.hpp"

namespace ums {

enum class Task : int { response = 0, insertion = 1, deletion = 2, search = 3 };
inline constexpr std::size_t kNumTasks = 4;

const std::string& task_name(Task task);  // "response", "ins", "del", "srch"
std::optional<Task> task_from_name(std::string_view name);

struct UmsSampleMeta {
  std::string dialog_id;
  std::size_t window_offset = 0;
  std::size_t window_size = 0;       // m
  std::size_t target_index = 0;      // removed slot / intruder slot / target slot
  std::vector<std::size_t> permutation;  // search only: output slot -> window index
  std::uint64_t dropout_seed = 0;    // per-sample stream for train-mode dropout
};

struct UmsSample {
  Task task = Task::response;
  EncodedSequence seq;
  UmsSampleMeta meta;
};

// Manipulation sequence layouts (every utterance carries its [EOT]):
//
//   insertion: [CLS] [INS] u'_1 [INS] u'_2 ... u'_{m-1} [INS] [SEP] u_t [SEP]
//   deletion:  [CLS] [DEL] u_1 ... [DEL] u_rand ... [DEL] u_m [SEP]
//   search:    [CLS] [SRCH] u'_1 ... [SRCH] u'_{m-1} [SEP] u_m [SEP]
//
// Candidate positions are the marker tokens; exactly one target is 1.
// The deterministic *_at/_with variants take the drawn choice explicitly;
// the Rng overloads draw it uniformly. All return nullopt as a skip signal
// (window too short, or truncation would remove the target marker).

std::optional<UmsSample> build_insertion(const Vocab& vocab,
                                         std::span<const Utterance> window,
                                         Rng& rng, int max_len);
std::optional<UmsSample> build_insertion_at(const Vocab& vocab,
                                            std::span<const Utterance> window,
                                            std::size_t removed_index, int max_len);

std::optional<UmsSample> build_deletion(const Vocab& vocab,
                                        std::span<const Utterance> window,
                                        const Utterance& intruder, Rng& rng,
                                        int max_len);
std::optional<UmsSample> build_deletion_at(const Vocab& vocab,
                                           std::span<const Utterance> window,
                                           const Utterance& intruder,
                                           std::size_t insert_position, int max_len);

std::optional<UmsSample> build_search(const Vocab& vocab,
                                      std::span<const Utterance> window,
                                      Rng& rng, int max_len);
// permutation[slot] = index into window, a permutation of 0..m-2.
std::optional<UmsSample> build_search_with(const Vocab& vocab,
                                           std::span<const Utterance> window,
                                           std::span<const std::size_t> permutation,
                                           int max_len);

UmsSample make_response_sample(const Vocab& vocab, std::span<const Utterance> context,
                               const Utterance& response, int label, int max_len,
                               std::string dialog_id);

// Debug dump: one JSONL record per sample with the decoded token strings,
// candidate positions and target index.
void dump_samples_jsonl(const Vocab& vocab, std::span<const UmsSample> samples,
                        const std::filesystem::path& path);

}  // namespace ums
