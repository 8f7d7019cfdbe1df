#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ums/corpus.hpp"

namespace ums {

// Reserved vocabulary slots. These ids are fixed by the vocab file format.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kEotId = 4;
inline constexpr int kInsId = 5;
inline constexpr int kDelId = 6;
inline constexpr int kSrchId = 7;
inline constexpr std::size_t kNumReservedTokens = 8;

const std::array<std::string, kNumReservedTokens>& reserved_tokens();

// Whitespace-token vocabulary. Immutable after build/load; encoding is pure.
class Vocab {
 public:
  Vocab();  // reserved tokens only

  // Whitespace tokens with frequency >= min_count, ordered by
  // (descending frequency, lexicographic), appended after the reserved block.
  static Vocab build(const Corpus& corpus, int min_count);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Rebuilds a vocab from a full token list (reserved block first).
  static Vocab from_tokens(const std::vector<std::string>& tokens);
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id_of(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  void append(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// One flat model input. token_ids[0] is always [CLS]; segment ids are 0 up to
// and including the first [SEP] and 1 afterward; every candidate position
// indexes a special token whose output representation gets classified.
struct EncodedSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<int> positions;
  std::vector<int> candidate_positions;
  std::vector<int> targets;  // 0/1, aligned with candidate_positions

  std::size_t length() const { return token_ids.size(); }
};

// Token ids for one utterance with [EOT] appended. Unknown tokens map to [UNK].
std::vector<int> encode_utterance(const Vocab& vocab, const Utterance& utterance);

// [CLS] u_1 ... u_n [SEP] r [SEP] with candidate [CLS] and target = label.
// Over-long inputs drop whole utterances from the front of the context first;
// the response is only token-truncated (front) as a last resort, keeping its
// final [EOT] and the closing [SEP].
EncodedSequence assemble_response_pair(const Vocab& vocab,
                                       std::span<const Utterance> context,
                                       const Utterance& response, int label,
                                       int max_len);

}  // namespace ums
