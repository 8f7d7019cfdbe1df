#include "ums/ums_builder.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "ums/util.hpp"

namespace ums {

const std::string& task_name(Task task) {
  static const std::array<std::string, kNumTasks> names = {"response", "ins", "del",
                                                           "srch"};
  return names[static_cast<std::size_t>(task)];
}

std::optional<Task> task_from_name(std::string_view name) {
  if (name == "response") return Task::response;
  if (name == "ins") return Task::insertion;
  if (name == "del") return Task::deletion;
  if (name == "srch") return Task::search;
  return std::nullopt;
}

namespace {

void finish_positions_and_segments(EncodedSequence& seq) {
  seq.positions.resize(seq.token_ids.size());
  for (std::size_t i = 0; i < seq.positions.size(); ++i) {
    seq.positions[i] = static_cast<int>(i);
  }
  seq.segment_ids.assign(seq.token_ids.size(), 1);
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    seq.segment_ids[i] = 0;
    if (seq.token_ids[i] == kSepId) break;
  }
}

// Shared assembly for the three manipulation layouts. units are the encoded
// utterances of segment 0, each preceded by a marker token; trailing_marker
// adds the insertion task's "after the last utterance" slot. Front units are
// dropped whole when the sequence exceeds max_len; the trailer is only
// token-truncated as a last resort. Returns nullopt when the target marker
// cannot survive.
std::optional<EncodedSequence> assemble_manipulation(
    int marker_id, std::vector<std::vector<int>> units, bool trailing_marker,
    std::optional<std::vector<int>> trailer, std::size_t target, int max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be positive");
  const std::size_t limit = static_cast<std::size_t>(max_len);

  std::size_t units_len = 0;
  for (const auto& u : units) units_len += 1 + u.size();
  auto total = [&] {
    return 1 + units_len + (trailing_marker ? 1 : 0) + 1 +
           (trailer.has_value() ? trailer->size() + 1 : 0);
  };

  std::size_t dropped = 0;
  while (total() > limit && dropped < units.size()) {
    if (dropped == target) return std::nullopt;  // would drop the target marker
    units_len -= 1 + units[dropped].size();
    ++dropped;
  }
  if (total() > limit && trailer.has_value() && trailer->size() > 1) {
    const std::size_t excess = total() - limit;
    const std::size_t removable = trailer->size() - 1;  // keep the final [EOT]
    trailer->erase(trailer->begin(),
                   trailer->begin() + static_cast<std::ptrdiff_t>(std::min(excess, removable)));
  }
  if (total() > limit) return std::nullopt;

  EncodedSequence seq;
  seq.token_ids.reserve(total());
  seq.token_ids.push_back(kClsId);
  std::vector<int> candidates;
  for (std::size_t i = dropped; i < units.size(); ++i) {
    candidates.push_back(static_cast<int>(seq.token_ids.size()));
    seq.token_ids.push_back(marker_id);
    seq.token_ids.insert(seq.token_ids.end(), units[i].begin(), units[i].end());
  }
  if (trailing_marker) {
    candidates.push_back(static_cast<int>(seq.token_ids.size()));
    seq.token_ids.push_back(marker_id);
  }
  seq.token_ids.push_back(kSepId);
  if (trailer.has_value()) {
    seq.token_ids.insert(seq.token_ids.end(), trailer->begin(), trailer->end());
    seq.token_ids.push_back(kSepId);
  }
  finish_positions_and_segments(seq);

  seq.candidate_positions = std::move(candidates);
  seq.targets.assign(seq.candidate_positions.size(), 0);
  seq.targets[target - dropped] = 1;
  return seq;
}

}  // namespace

std::optional<UmsSample> build_insertion_at(const Vocab& vocab,
                                            std::span<const Utterance> window,
                                            std::size_t removed_index, int max_len) {
  const std::size_t m = window.size();
  if (m < 2) return std::nullopt;
  if (removed_index >= m) {
    throw std::invalid_argument("build_insertion_at: removed_index out of range");
  }
  std::vector<std::vector<int>> units;
  units.reserve(m - 1);
  for (std::size_t i = 0; i < m; ++i) {
    if (i != removed_index) units.push_back(encode_utterance(vocab, window[i]));
  }
  auto seq = assemble_manipulation(kInsId, std::move(units), /*trailing_marker=*/true,
                                   encode_utterance(vocab, window[removed_index]),
                                   removed_index, max_len);
  if (!seq.has_value()) return std::nullopt;
  UmsSample sample;
  sample.task = Task::insertion;
  sample.seq = std::move(*seq);
  sample.meta.window_size = m;
  sample.meta.target_index = removed_index;
  return sample;
}

std::optional<UmsSample> build_insertion(const Vocab& vocab,
                                         std::span<const Utterance> window,
                                         Rng& rng, int max_len) {
  if (window.size() < 2) return std::nullopt;
  return build_insertion_at(vocab, window, rng.uniform_index(window.size()), max_len);
}

std::optional<UmsSample> build_deletion_at(const Vocab& vocab,
                                           std::span<const Utterance> window,
                                           const Utterance& intruder,
                                           std::size_t insert_position, int max_len) {
  const std::size_t m = window.size();
  if (m < 2) return std::nullopt;
  if (insert_position > m) {
    throw std::invalid_argument("build_deletion_at: insert_position out of range");
  }
  std::vector<std::vector<int>> units;
  units.reserve(m + 1);
  for (std::size_t i = 0; i <= m; ++i) {
    if (i == insert_position) {
      units.push_back(encode_utterance(vocab, intruder));
    }
    if (i < m) units.push_back(encode_utterance(vocab, window[i]));
  }
  auto seq = assemble_manipulation(kDelId, std::move(units), /*trailing_marker=*/false,
                                   std::nullopt, insert_position, max_len);
  if (!seq.has_value()) return std::nullopt;
  UmsSample sample;
  sample.task = Task::deletion;
  sample.seq = std::move(*seq);
  sample.meta.window_size = m;
  sample.meta.target_index = insert_position;
  return sample;
}

std::optional<UmsSample> build_deletion(const Vocab& vocab,
                                        std::span<const Utterance> window,
                                        const Utterance& intruder, Rng& rng,
                                        int max_len) {
  if (window.size() < 2) return std::nullopt;
  return build_deletion_at(vocab, window, intruder,
                           rng.uniform_index(window.size() + 1), max_len);
}

std::optional<UmsSample> build_search_with(const Vocab& vocab,
                                           std::span<const Utterance> window,
                                           std::span<const std::size_t> permutation,
                                           int max_len) {
  const std::size_t m = window.size();
  if (m < 3) return std::nullopt;
  if (permutation.size() != m - 1) {
    throw std::invalid_argument("build_search_with: permutation size must be m-1");
  }
  std::vector<std::vector<int>> units;
  units.reserve(m - 1);
  std::size_t target = m;  // slot holding u_{m-1}
  for (std::size_t slot = 0; slot < permutation.size(); ++slot) {
    const std::size_t src = permutation[slot];
    if (src >= m - 1) {
      throw std::invalid_argument("build_search_with: permutation index out of range");
    }
    if (src == m - 2) target = slot;
    units.push_back(encode_utterance(vocab, window[src]));
  }
  if (target == m) {
    throw std::invalid_argument("build_search_with: permutation must cover u_{m-1}");
  }
  auto seq = assemble_manipulation(kSrchId, std::move(units), /*trailing_marker=*/false,
                                   encode_utterance(vocab, window[m - 1]), target,
                                   max_len);
  if (!seq.has_value()) return std::nullopt;
  UmsSample sample;
  sample.task = Task::search;
  sample.seq = std::move(*seq);
  sample.meta.window_size = m;
  sample.meta.target_index = target;
  sample.meta.permutation.assign(permutation.begin(), permutation.end());
  return sample;
}

std::optional<UmsSample> build_search(const Vocab& vocab,
                                      std::span<const Utterance> window,
                                      Rng& rng, int max_len) {
  const std::size_t m = window.size();
  if (m < 3) return std::nullopt;
  std::vector<std::size_t> perm(m - 1);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
  }
  return build_search_with(vocab, window, perm, max_len);
}

UmsSample make_response_sample(const Vocab& vocab, std::span<const Utterance> context,
                               const Utterance& response, int label, int max_len,
                               std::string dialog_id) {
  UmsSample sample;
  sample.task = Task::response;
  sample.seq = assemble_response_pair(vocab, context, response, label, max_len);
  sample.meta.dialog_id = std::move(dialog_id);
  sample.meta.window_size = context.size();
  return sample;
}

void dump_samples_jsonl(const Vocab& vocab, std::span<const UmsSample> samples,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  for (const UmsSample& s : samples) {
    nlohmann::json record;
    record["task"] = task_name(s.task);
    record["dialog_id"] = s.meta.dialog_id;
    nlohmann::json tokens = nlohmann::json::array();
    for (const int id : s.seq.token_ids) tokens.push_back(vocab.token(id));
    record["tokens"] = std::move(tokens);
    record["candidate_positions"] = s.seq.candidate_positions;
    record["targets"] = s.seq.targets;
    record["target_index"] = s.meta.target_index;
    out << record.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ums
