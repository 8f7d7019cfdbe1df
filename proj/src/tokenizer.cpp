#include "ums/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "ums/util.hpp"

namespace ums {

const std::array<std::string, kNumReservedTokens>& reserved_tokens() {
  static const std::array<std::string, kNumReservedTokens> tokens = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOT]", "[INS]", "[DEL]", "[SRCH]"};
  return tokens;
}

Vocab::Vocab() {
  for (const std::string& t : reserved_tokens()) append(t);
}

void Vocab::append(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(const Corpus& corpus, int min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be positive");
  std::unordered_map<std::string, long long> counts;
  auto count_text = [&counts](const std::string& text) {
    for (std::string& tok : split_whitespace(text)) counts[std::move(tok)] += 1;
  };
  for (const Dialog& d : corpus.dialogs) {
    for (const Utterance& u : d.context) count_text(u.text);
    if (d.response.has_value()) count_text(d.response->text);
  }

  Vocab vocab;
  std::vector<std::pair<std::string, long long>> kept;
  kept.reserve(counts.size());
  for (auto& [tok, n] : counts) {
    if (n < min_count) continue;
    if (vocab.index_.count(tok) != 0) continue;  // corpus text colliding with a reserved token
    kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (auto& [tok, n] : kept) vocab.append(std::move(tok));
  return vocab;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.size() < kNumReservedTokens) {
    throw ParseError(path.string() + ": vocab must start with the 8 reserved tokens");
  }
  Vocab vocab;
  for (std::size_t i = 0; i < kNumReservedTokens; ++i) {
    if (lines[i] != reserved_tokens()[i]) {
      throw ParseError(path.string() + ":" + std::to_string(i + 1) +
                       ": expected reserved token '" + reserved_tokens()[i] +
                       "', got '" + lines[i] + "'");
    }
  }
  for (std::size_t i = kNumReservedTokens; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      throw ParseError(path.string() + ":" + std::to_string(i + 1) + ": empty vocab line");
    }
    if (vocab.index_.count(lines[i]) != 0) {
      throw ParseError(path.string() + ":" + std::to_string(i + 1) +
                       ": duplicate token '" + lines[i] + "'");
    }
    vocab.append(lines[i]);
  }
  return vocab;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kNumReservedTokens) {
    throw ParseError("vocab token list must start with the 8 reserved tokens");
  }
  Vocab vocab;
  for (std::size_t i = 0; i < kNumReservedTokens; ++i) {
    if (tokens[i] != reserved_tokens()[i]) {
      throw ParseError("vocab token list: expected reserved token '" +
                       reserved_tokens()[i] + "' at id " + std::to_string(i));
    }
  }
  for (std::size_t i = kNumReservedTokens; i < tokens.size(); ++i) {
    if (tokens[i].empty() || vocab.index_.count(tokens[i]) != 0) {
      throw ParseError("vocab token list: empty or duplicate token at id " +
                       std::to_string(i));
    }
    vocab.append(tokens[i]);
  }
  return vocab;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  for (const std::string& t : tokens_) out << t << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

int Vocab::id_of(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocab id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> encode_utterance(const Vocab& vocab, const Utterance& utterance) {
  std::vector<int> ids;
  const std::vector<std::string> tokens = split_whitespace(utterance.text);
  ids.reserve(tokens.size() + 1);
  for (const std::string& tok : tokens) ids.push_back(vocab.id_of(tok));
  ids.push_back(kEotId);
  return ids;
}

namespace {

void finish_sequence(EncodedSequence& seq) {
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

}  // namespace

EncodedSequence assemble_response_pair(const Vocab& vocab,
                                       std::span<const Utterance> context,
                                       const Utterance& response, int label,
                                       int max_len) {
  if (context.empty()) {
    throw std::invalid_argument("assemble_response_pair: context must be non-empty");
  }
  if (label != 0 && label != 1) {
    throw std::invalid_argument("assemble_response_pair: label must be 0 or 1");
  }
  if (max_len < 4) {
    throw std::invalid_argument(
        "assemble_response_pair: max_len too small for [CLS] [SEP] [EOT] [SEP]");
  }

  std::vector<std::vector<int>> encoded_context;
  encoded_context.reserve(context.size());
  std::size_t context_len = 0;
  for (const Utterance& u : context) {
    encoded_context.push_back(encode_utterance(vocab, u));
    context_len += encoded_context.back().size();
  }
  std::vector<int> encoded_response = encode_utterance(vocab, response);

  const std::size_t limit = static_cast<std::size_t>(max_len);
  std::size_t first_kept = 0;
  auto total = [&] { return 3 + context_len + encoded_response.size(); };
  while (total() > limit && first_kept < encoded_context.size()) {
    context_len -= encoded_context[first_kept].size();
    ++first_kept;
  }
  if (total() > limit) {
    // All context dropped; keep the response's final [EOT], shed leading tokens.
    const std::size_t excess = total() - limit;
    const std::size_t removable = encoded_response.size() - 1;
    encoded_response.erase(encoded_response.begin(),
                           encoded_response.begin() +
                               static_cast<std::ptrdiff_t>(std::min(excess, removable)));
  }

  EncodedSequence seq;
  seq.token_ids.reserve(total());
  seq.token_ids.push_back(kClsId);
  for (std::size_t i = first_kept; i < encoded_context.size(); ++i) {
    seq.token_ids.insert(seq.token_ids.end(), encoded_context[i].begin(),
                         encoded_context[i].end());
  }
  seq.token_ids.push_back(kSepId);
  seq.token_ids.insert(seq.token_ids.end(), encoded_response.begin(),
                       encoded_response.end());
  seq.token_ids.push_back(kSepId);
  finish_sequence(seq);
  seq.candidate_positions = {0};
  seq.targets = {label};
  return seq;
}

}  // namespace ums
