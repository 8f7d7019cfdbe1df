#include "ums/corpus.hpp"

#include <fstream>
#include <unordered_set>

#include "json.hpp"
#include "ums/util.hpp"

namespace ums {

namespace {

using nlohmann::json;

[[noreturn]] void fail_line(const std::filesystem::path& path, std::size_t line_no,
                            const std::string& what) {
  throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

Utterance make_utterance(const std::filesystem::path& path, std::size_t line_no,
                         std::string_view raw) {
  Utterance u;
  u.text = normalize_whitespace(raw);
  if (u.text.empty()) fail_line(path, line_no, "empty utterance after normalization");
  return u;
}

void check_unique_ids(const Corpus& corpus, const std::filesystem::path& path) {
  std::unordered_set<std::string> seen;
  for (const Dialog& d : corpus.dialogs) {
    if (!seen.insert(d.id).second) {
      throw ParseError(path.string() + ": duplicate dialog id '" + d.id + "'");
    }
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cols.push_back(line.substr(start));
      return cols;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

Corpus load_tsv(const std::filesystem::path& path, Split split) {
  Corpus corpus;
  corpus.split = split;
  const std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (lines[i].empty()) continue;
    const std::vector<std::string> cols = split_tabs(lines[i]);
    if (cols.size() < 3) {
      fail_line(path, line_no, "expected label, >=1 context utterances and a response ("
                + std::to_string(cols.size()) + " columns)");
    }
    Dialog d;
    d.id = "d" + std::to_string(line_no);
    if (cols[0] == "0") {
      d.label = 0;
    } else if (cols[0] == "1") {
      d.label = 1;
    } else {
      fail_line(path, line_no, "non-binary label '" + cols[0] + "'");
    }
    for (std::size_t c = 1; c + 1 < cols.size(); ++c) {
      d.context.push_back(make_utterance(path, line_no, cols[c]));
    }
    d.response = make_utterance(path, line_no, cols.back());
    corpus.dialogs.push_back(std::move(d));
  }
  check_unique_ids(corpus, path);
  return corpus;
}

Corpus load_jsonl(const std::filesystem::path& path, Split split) {
  Corpus corpus;
  corpus.split = split;
  const std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (lines[i].empty()) continue;
    json record;
    try {
      record = json::parse(lines[i]);
    } catch (const json::exception& e) {
      fail_line(path, line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!record.is_object()) fail_line(path, line_no, "expected a JSON object");

    Dialog d;
    if (!record.contains("id") || !record["id"].is_string()) {
      fail_line(path, line_no, "missing string field 'id'");
    }
    d.id = record["id"].get<std::string>();

    if (!record.contains("context") || !record["context"].is_array() ||
        record["context"].empty()) {
      fail_line(path, line_no, "missing non-empty array field 'context'");
    }
    for (const json& item : record["context"]) {
      if (!item.is_string()) fail_line(path, line_no, "context entries must be strings");
      d.context.push_back(make_utterance(path, line_no, item.get<std::string>()));
    }

    if (record.contains("response")) {
      if (!record["response"].is_string()) {
        fail_line(path, line_no, "'response' must be a string");
      }
      d.response = make_utterance(path, line_no, record["response"].get<std::string>());
    }
    if (record.contains("label")) {
      if (!record["label"].is_number_integer()) {
        fail_line(path, line_no, "'label' must be 0 or 1");
      }
      const int label = record["label"].get<int>();
      if (label != 0 && label != 1) fail_line(path, line_no, "'label' must be 0 or 1");
      if (!d.response.has_value()) {
        fail_line(path, line_no, "'label' present without 'response'");
      }
      d.label = label;
    }
    corpus.dialogs.push_back(std::move(d));
  }
  check_unique_ids(corpus, path);
  return corpus;
}

void save_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  for (const Dialog& d : corpus.dialogs) {
    json record;
    record["id"] = d.id;
    json context = json::array();
    for (const Utterance& u : d.context) context.push_back(u.text);
    record["context"] = std::move(context);
    if (d.response.has_value()) record["response"] = d.response->text;
    if (d.label.has_value()) record["label"] = *d.label;
    out << record.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Window extract_window(const Dialog& dialog, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("extract_window: k must be positive");
  if (dialog.context.empty()) {
    throw std::invalid_argument("extract_window: dialog has empty context");
  }
  const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(k),
                                              dialog.context.size());
  const std::size_t num_offsets = dialog.context.size() - m + 1;
  Window w;
  w.offset = rng.uniform_index(num_offsets);
  w.utterances.assign(dialog.context.begin() + static_cast<std::ptrdiff_t>(w.offset),
                      dialog.context.begin() + static_cast<std::ptrdiff_t>(w.offset + m));
  return w;
}

Utterance sample_random_utterance(const Corpus& corpus,
                                  const std::string& exclude_dialog_id,
                                  Rng& rng) {
  if (corpus.dialogs.size() < 2) {
    throw std::invalid_argument(
        "sample_random_utterance: need at least two dialogs to exclude one");
  }
  std::size_t excluded = corpus.dialogs.size();  // sentinel: not found
  for (std::size_t i = 0; i < corpus.dialogs.size(); ++i) {
    if (corpus.dialogs[i].id == exclude_dialog_id) {
      excluded = i;
      break;
    }
  }
  const std::size_t eligible =
      corpus.dialogs.size() - (excluded < corpus.dialogs.size() ? 1 : 0);
  std::size_t pick = rng.uniform_index(eligible);
  if (pick >= excluded) ++pick;
  const Dialog& d = corpus.dialogs[pick];
  return d.context[rng.uniform_index(d.context.size())];
}

}  // namespace ums
