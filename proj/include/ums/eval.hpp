#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ums/corpus.hpp"
#include "ums/model.hpp"

namespace ums {

struct Candidate {
  Utterance utterance;
  int label = 0;            // relevance
  bool adversarial = false; // injected context utterance
};

struct CandidateSet {
  std::string id;
  std::vector<Utterance> context;
  std::vector<Candidate> candidates;
};

// JSONL: {"id"?, "context": [...], "candidates": [{"text", "label", "adversarial"?}]}
std::vector<CandidateSet> load_candidate_sets(const std::filesystem::path& path);
void save_candidate_sets(std::span<const CandidateSet> groups,
                         const std::filesystem::path& path);

// Groups consecutive labeled dialogs that share an identical context into one
// candidate set (the usual n-way test-file layout).
std::vector<CandidateSet> group_pairs_by_context(const Corpus& corpus);

// Indices sorted by score descending; ties keep original candidate order.
std::vector<std::size_t> rank_by_scores(std::span<const double> scores);
std::vector<std::size_t> rank_group(const ModelParams& params, const ModelConfig& cfg,
                                    const Vocab& vocab, const CandidateSet& group,
                                    int max_len);

// Relevance flags of one group in rank order.
struct RankedGroup {
  std::vector<int> relevance;
};

struct MetricReport {
  double r_at_1 = 0.0, r_at_2 = 0.0, r_at_5 = 0.0;
  double map = 0.0, mrr = 0.0, p_at_1 = 0.0;
  int n = 0;  // candidates per group; 0 when groups are mixed-size
  std::size_t group_count = 0;
  std::size_t skipped_groups = 0;  // groups with no relevant candidate
};

// R_n@k = mean of (#relevant in top k) / (#relevant); MRR via first relevant
// rank; MAP via mean precision at each relevant rank; P@1 via top-1 relevance.
MetricReport compute_metrics(std::span<const RankedGroup> groups);

nlohmann::json metric_report_to_json(const MetricReport& report);

// Ranks every group with the model and reduces to one report.
MetricReport evaluate_groups(const ModelParams& params, const ModelConfig& cfg,
                             const Vocab& vocab, std::span<const CandidateSet> groups,
                             int max_len);

// Per group, replaces one uniformly chosen negative candidate with one
// uniformly chosen context utterance (flagged adversarial, relevance 0).
// The context itself is left unchanged. Throws on groups with no negative.
std::vector<CandidateSet> build_adversarial_set(std::span<const CandidateSet> groups,
                                                Rng& rng);

// Fraction of groups whose top-ranked candidate is the adversarial one.
double adversarial_top1_rate(const ModelParams& params, const ModelConfig& cfg,
                             const Vocab& vocab, std::span<const CandidateSet> groups,
                             int max_len);
double adversarial_top1_rate_from_orders(
    std::span<const CandidateSet> groups,
    std::span<const std::vector<std::size_t>> orders);

// One JSONL record {task, is_target, vector} per candidate token.
std::size_t export_special_token_embeddings(const ModelParams& params,
                                            const ModelConfig& cfg, const Vocab& vocab,
                                            std::span<const UmsSample> samples,
                                            const std::filesystem::path& path);

}  // namespace ums
