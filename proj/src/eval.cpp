#include "ums/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ums/tokenizer.hpp"
#include "ums/util.hpp"

namespace ums {

namespace {

using nlohmann::json;

[[noreturn]] void fail_line(const std::filesystem::path& path, std::size_t line_no,
                            const std::string& what) {
  throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

std::vector<CandidateSet> load_candidate_sets(const std::filesystem::path& path) {
  std::vector<CandidateSet> groups;
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
    CandidateSet group;
    group.id = record.value("id", "g" + std::to_string(line_no));
    if (!record.contains("context") || !record["context"].is_array() ||
        record["context"].empty()) {
      fail_line(path, line_no, "missing non-empty array field 'context'");
    }
    for (const json& item : record["context"]) {
      if (!item.is_string()) fail_line(path, line_no, "context entries must be strings");
      Utterance u;
      u.text = normalize_whitespace(item.get<std::string>());
      if (u.text.empty()) fail_line(path, line_no, "empty context utterance");
      group.context.push_back(std::move(u));
    }
    if (!record.contains("candidates") || !record["candidates"].is_array() ||
        record["candidates"].empty()) {
      fail_line(path, line_no, "missing non-empty array field 'candidates'");
    }
    for (const json& item : record["candidates"]) {
      if (!item.is_object() || !item.contains("text") || !item.contains("label")) {
        fail_line(path, line_no, "candidates need 'text' and 'label'");
      }
      Candidate c;
      c.utterance.text = normalize_whitespace(item["text"].get<std::string>());
      if (c.utterance.text.empty()) fail_line(path, line_no, "empty candidate text");
      const int label = item["label"].get<int>();
      if (label != 0 && label != 1) fail_line(path, line_no, "candidate label must be 0 or 1");
      c.label = label;
      c.adversarial = item.value("adversarial", false);
      group.candidates.push_back(std::move(c));
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

void save_candidate_sets(std::span<const CandidateSet> groups,
                         const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  for (const CandidateSet& g : groups) {
    json record;
    record["id"] = g.id;
    json context = json::array();
    for (const Utterance& u : g.context) context.push_back(u.text);
    record["context"] = std::move(context);
    json candidates = json::array();
    for (const Candidate& c : g.candidates) {
      json jc = {{"text", c.utterance.text}, {"label", c.label}};
      if (c.adversarial) jc["adversarial"] = true;
      candidates.push_back(std::move(jc));
    }
    record["candidates"] = std::move(candidates);
    out << record.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<CandidateSet> group_pairs_by_context(const Corpus& corpus) {
  std::vector<CandidateSet> groups;
  auto same_context = [](const std::vector<Utterance>& a, const std::vector<Utterance>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].text != b[i].text) return false;
    }
    return true;
  };
  for (const Dialog& d : corpus.dialogs) {
    if (!d.response.has_value() || !d.label.has_value()) continue;
    if (groups.empty() || !same_context(groups.back().context, d.context)) {
      CandidateSet g;
      g.id = d.id;
      g.context = d.context;
      groups.push_back(std::move(g));
    }
    groups.back().candidates.push_back(Candidate{*d.response, *d.label, false});
  }
  return groups;
}

std::vector<std::size_t> rank_by_scores(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return order;
}

std::vector<std::size_t> rank_group(const ModelParams& params, const ModelConfig& cfg,
                                    const Vocab& vocab, const CandidateSet& group,
                                    int max_len) {
  std::vector<double> scores;
  scores.reserve(group.candidates.size());
  for (const Candidate& c : group.candidates) {
    const EncodedSequence seq =
        assemble_response_pair(vocab, group.context, c.utterance, c.label, max_len);
    scores.push_back(score_response(params, cfg, seq));
  }
  return rank_by_scores(scores);
}

MetricReport compute_metrics(std::span<const RankedGroup> groups) {
  MetricReport report;
  bool uniform_n = true;
  std::size_t common_n = 0;
  double sum_r1 = 0.0, sum_r2 = 0.0, sum_r5 = 0.0;
  double sum_map = 0.0, sum_mrr = 0.0, sum_p1 = 0.0;

  for (const RankedGroup& g : groups) {
    const std::size_t total_relevant = static_cast<std::size_t>(
        std::count(g.relevance.begin(), g.relevance.end(), 1));
    if (total_relevant == 0) {
      ++report.skipped_groups;
      continue;
    }
    if (report.group_count == 0) {
      common_n = g.relevance.size();
    } else if (g.relevance.size() != common_n) {
      uniform_n = false;
    }
    ++report.group_count;

    auto recall_at = [&](std::size_t k) {
      const std::size_t top = std::min(k, g.relevance.size());
      std::size_t hit = 0;
      for (std::size_t i = 0; i < top; ++i) hit += static_cast<std::size_t>(g.relevance[i]);
      return static_cast<double>(hit) / static_cast<double>(total_relevant);
    };
    sum_r1 += recall_at(1);
    sum_r2 += recall_at(2);
    sum_r5 += recall_at(5);
    sum_p1 += g.relevance[0] == 1 ? 1.0 : 0.0;

    double ap = 0.0;
    std::size_t seen_relevant = 0;
    double rr = 0.0;
    for (std::size_t i = 0; i < g.relevance.size(); ++i) {
      if (g.relevance[i] != 1) continue;
      ++seen_relevant;
      if (seen_relevant == 1) rr = 1.0 / static_cast<double>(i + 1);
      ap += static_cast<double>(seen_relevant) / static_cast<double>(i + 1);
    }
    sum_map += ap / static_cast<double>(total_relevant);
    sum_mrr += rr;
  }

  if (report.group_count > 0) {
    const double denom = static_cast<double>(report.group_count);
    report.r_at_1 = sum_r1 / denom;
    report.r_at_2 = sum_r2 / denom;
    report.r_at_5 = sum_r5 / denom;
    report.map = sum_map / denom;
    report.mrr = sum_mrr / denom;
    report.p_at_1 = sum_p1 / denom;
    report.n = uniform_n ? static_cast<int>(common_n) : 0;
  }
  return report;
}

nlohmann::json metric_report_to_json(const MetricReport& r) {
  return {{"r_at_1", r.r_at_1},   {"r_at_2", r.r_at_2},
          {"r_at_5", r.r_at_5},   {"map", r.map},
          {"mrr", r.mrr},         {"p_at_1", r.p_at_1},
          {"n", r.n},             {"group_count", r.group_count},
          {"skipped_groups", r.skipped_groups}};
}

MetricReport evaluate_groups(const ModelParams& params, const ModelConfig& cfg,
                             const Vocab& vocab, std::span<const CandidateSet> groups,
                             int max_len) {
  std::vector<RankedGroup> ranked;
  ranked.reserve(groups.size());
  for (const CandidateSet& g : groups) {
    const std::vector<std::size_t> order = rank_group(params, cfg, vocab, g, max_len);
    RankedGroup rg;
    rg.relevance.reserve(order.size());
    for (const std::size_t idx : order) rg.relevance.push_back(g.candidates[idx].label);
    ranked.push_back(std::move(rg));
  }
  return compute_metrics(ranked);
}

std::vector<CandidateSet> build_adversarial_set(std::span<const CandidateSet> groups,
                                                Rng& rng) {
  std::vector<CandidateSet> out;
  out.reserve(groups.size());
  for (const CandidateSet& g : groups) {
    std::vector<std::size_t> negatives;
    for (std::size_t i = 0; i < g.candidates.size(); ++i) {
      if (g.candidates[i].label == 0) negatives.push_back(i);
    }
    if (negatives.empty()) {
      throw std::invalid_argument("build_adversarial_set: group '" + g.id +
                                  "' has no negative candidate to replace");
    }
    CandidateSet adv = g;
    const std::size_t ctx_idx = rng.uniform_index(g.context.size());
    const std::size_t neg_idx = negatives[rng.uniform_index(negatives.size())];
    adv.candidates[neg_idx].utterance = g.context[ctx_idx];
    adv.candidates[neg_idx].label = 0;
    adv.candidates[neg_idx].adversarial = true;
    out.push_back(std::move(adv));
  }
  return out;
}

double adversarial_top1_rate_from_orders(
    std::span<const CandidateSet> groups,
    std::span<const std::vector<std::size_t>> orders) {
  if (groups.size() != orders.size()) {
    throw std::invalid_argument("adversarial_top1_rate: group/order count mismatch");
  }
  if (groups.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const std::size_t top = orders[i].at(0);
    if (groups[i].candidates.at(top).adversarial) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(groups.size());
}

double adversarial_top1_rate(const ModelParams& params, const ModelConfig& cfg,
                             const Vocab& vocab, std::span<const CandidateSet> groups,
                             int max_len) {
  std::vector<std::vector<std::size_t>> orders;
  orders.reserve(groups.size());
  for (const CandidateSet& g : groups) {
    orders.push_back(rank_group(params, cfg, vocab, g, max_len));
  }
  return adversarial_top1_rate_from_orders(groups, orders);
}

std::size_t export_special_token_embeddings(const ModelParams& params,
                                            const ModelConfig& cfg, const Vocab& vocab,
                                            std::span<const UmsSample> samples,
                                            const std::filesystem::path& path) {
  (void)vocab;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  std::size_t written = 0;
  for (const UmsSample& s : samples) {
    if (s.task == Task::response) {
      throw std::invalid_argument(
          "export_special_token_embeddings: expected manipulation-task samples");
    }
    const Eigen::MatrixXd hidden = encode(params, cfg, s.seq);
    for (std::size_t i = 0; i < s.seq.candidate_positions.size(); ++i) {
      const int pos = s.seq.candidate_positions[i];
      json record;
      record["task"] = task_name(s.task);
      record["is_target"] = s.seq.targets[i] == 1;
      std::vector<double> vec(static_cast<std::size_t>(cfg.hidden_dim));
      for (int c = 0; c < cfg.hidden_dim; ++c) {
        vec[static_cast<std::size_t>(c)] = hidden(pos, c);
      }
      record["vector"] = std::move(vec);
      out << record.dump() << '\n';
      ++written;
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
  return written;
}

}  // namespace ums
