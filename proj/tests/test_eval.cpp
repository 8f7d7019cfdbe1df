#include "ums/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "metrics_reference.hpp"
#include "test_support.hpp"
#include "ums/trainer.hpp"
#include "ums/util.hpp"

using namespace ums;
using test_support::TempDir;

namespace {

RankedGroup ranked(std::initializer_list<int> rel) {
  RankedGroup g;
  g.relevance.assign(rel);
  return g;
}

CandidateSet make_group(const std::string& id, std::size_t context_len,
                        std::size_t num_candidates, std::size_t positive_at, Rng& gen) {
  CandidateSet g;
  g.id = id;
  for (std::size_t i = 0; i < context_len; ++i) {
    g.context.push_back(Utterance{"ctx " + id + " " + std::to_string(i), ""});
  }
  const std::size_t salt = gen.uniform_index(512);
  for (std::size_t i = 0; i < num_candidates; ++i) {
    // distinct in-vocab word triples so model scores are distinct too
    const std::size_t code = salt * 8 + i;
    Candidate c;
    c.utterance.text = "cand w" + std::to_string(code % 8) + " w" +
                       std::to_string((code / 8) % 8) + " w" +
                       std::to_string((code / 64) % 8) + " w" + std::to_string(i % 8);
    c.label = i == positive_at ? 1 : 0;
    g.candidates.push_back(std::move(c));
  }
  return g;
}

}  // namespace

TEST_CASE("rank_by_scores sorts descending with index tie-break") {
  CHECK(rank_by_scores(std::vector<double>{0.9, 0.1}) ==
        std::vector<std::size_t>{0, 1});
  CHECK(rank_by_scores(std::vector<double>{0.1, 0.9}) ==
        std::vector<std::size_t>{1, 0});
  CHECK(rank_by_scores(std::vector<double>{0.5, 0.5, 0.5}) ==
        std::vector<std::size_t>{0, 1, 2});
  CHECK(rank_by_scores(std::vector<double>{0.3, 0.7, 0.3}) ==
        std::vector<std::size_t>{1, 0, 2});
}

TEST_CASE("compute_metrics matches the hand-evaluated fixtures") {
  SUBCASE("perfect ranking: everything is 1.0") {
    const RankedGroup g = ranked({1, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    const MetricReport rep = compute_metrics(std::vector<RankedGroup>{g});
    CHECK(rep.r_at_1 == 1.0);
    CHECK(rep.r_at_2 == 1.0);
    CHECK(rep.r_at_5 == 1.0);
    CHECK(rep.map == 1.0);
    CHECK(rep.mrr == 1.0);
    CHECK(rep.p_at_1 == 1.0);
    CHECK(rep.n == 10);
  }
  SUBCASE("single positive at rank 3 of 10") {
    const RankedGroup g = ranked({0, 0, 1, 0, 0, 0, 0, 0, 0, 0});
    const MetricReport rep = compute_metrics(std::vector<RankedGroup>{g});
    CHECK(rep.mrr == 1.0 / 3.0);
    CHECK(rep.r_at_1 == 0.0);
    CHECK(rep.r_at_2 == 0.0);
    CHECK(rep.r_at_5 == 1.0);
    CHECK(rep.p_at_1 == 0.0);
    CHECK(rep.map == 1.0 / 3.0);
  }
  SUBCASE("positives at ranks 1 and 3 of 10") {
    const RankedGroup g = ranked({1, 0, 1, 0, 0, 0, 0, 0, 0, 0});
    const MetricReport rep = compute_metrics(std::vector<RankedGroup>{g});
    CHECK(rep.map == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
    CHECK(rep.r_at_1 == 0.5);
  }
}

TEST_CASE("compute_metrics equals the brute-force reference on random groups") {
  Rng gen(314159);
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<int>> relevance;
  std::vector<RankedGroup> ranked_groups;
  for (int g = 0; g < 1000; ++g) {
    const std::size_t n = 2 + gen.uniform_index(14);
    std::vector<double> s(n);
    std::vector<int> rel(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid forces plenty of score ties
      s[i] = static_cast<double>(gen.uniform_index(8)) / 8.0;
    }
    const std::size_t positives = gen.uniform_index(std::min<std::size_t>(n, 4) + 1);
    for (std::size_t p = 0; p < positives; ++p) rel[gen.uniform_index(n)] = 1;

    scores.push_back(s);
    relevance.push_back(rel);
    const std::vector<std::size_t> order = rank_by_scores(s);
    RankedGroup rg;
    for (const std::size_t idx : order) rg.relevance.push_back(rel[idx]);
    ranked_groups.push_back(std::move(rg));
  }

  const MetricReport rep = compute_metrics(ranked_groups);
  const auto ref = metrics_reference::reference_metrics(scores, relevance);
  CHECK(rep.group_count == ref.counted);
  CHECK(rep.skipped_groups == ref.skipped);
  CHECK(std::abs(rep.r_at_1 - ref.r1) <= 1e-12);
  CHECK(std::abs(rep.r_at_2 - ref.r2) <= 1e-12);
  CHECK(std::abs(rep.r_at_5 - ref.r5) <= 1e-12);
  CHECK(std::abs(rep.map - ref.map) <= 1e-12);
  CHECK(std::abs(rep.mrr - ref.mrr) <= 1e-12);
  CHECK(std::abs(rep.p_at_1 - ref.p1) <= 1e-12);

  // R_n@k monotone in k on every report
  CHECK(rep.r_at_1 <= rep.r_at_2);
  CHECK(rep.r_at_2 <= rep.r_at_5);
}

TEST_CASE("groups without a relevant candidate are skipped and counted") {
  std::vector<RankedGroup> groups = {ranked({0, 0, 0}), ranked({1, 0, 0})};
  const MetricReport rep = compute_metrics(groups);
  CHECK(rep.group_count == 1);
  CHECK(rep.skipped_groups == 1);
  CHECK(rep.r_at_1 == 1.0);
}

TEST_CASE("single-positive groups satisfy P@1 = R_n@1 <= MRR") {
  Rng gen(88);
  std::vector<RankedGroup> groups;
  for (int g = 0; g < 200; ++g) {
    const std::size_t n = 2 + gen.uniform_index(10);
    RankedGroup rg;
    rg.relevance.assign(n, 0);
    rg.relevance[gen.uniform_index(n)] = 1;
    groups.push_back(std::move(rg));
  }
  const MetricReport rep = compute_metrics(groups);
  CHECK(rep.p_at_1 == rep.r_at_1);
  CHECK(rep.p_at_1 <= rep.mrr);
}

TEST_CASE("model ranking is deterministic and candidate-order invariant") {
  Corpus corpus;
  Dialog d;
  d.id = "d1";
  d.context.push_back(Utterance{"w0 w1 w2 w3 w4 w5 w6 w7 ctx cand", ""});
  corpus.dialogs.push_back(std::move(d));
  const Vocab vocab = Vocab::build(corpus, 1);

  ModelConfig cfg;
  cfg.hidden_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.max_positions = 48;
  cfg.vocab_size = static_cast<int>(vocab.size());
  Rng init(derive_seed(5, {stream::kInit}));
  const ModelParams params = ModelParams::init(cfg, init);

  Rng gen(606);
  for (int trial = 0; trial < 100; ++trial) {
    CandidateSet g = make_group("g" + std::to_string(trial), 1 + gen.uniform_index(3),
                                2 + gen.uniform_index(5), 0, gen);
    const std::vector<std::size_t> order = rank_group(params, cfg, vocab, g, 48);
    const std::vector<std::size_t> again = rank_group(params, cfg, vocab, g, 48);
    CHECK(order == again);

    // shuffle candidates; the ranked utterance sequence must not change
    CandidateSet shuffled = g;
    for (std::size_t i = shuffled.candidates.size(); i > 1; --i) {
      std::swap(shuffled.candidates[i - 1], shuffled.candidates[gen.uniform_index(i)]);
    }
    const std::vector<std::size_t> order2 = rank_group(params, cfg, vocab, shuffled, 48);
    REQUIRE(order2.size() == order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      CHECK(shuffled.candidates[order2[i]].utterance.text ==
            g.candidates[order[i]].utterance.text);
    }
  }
}

TEST_CASE("candidate-set files round trip") {
  TempDir tmp;
  const auto path = tmp.write(
      "t.jsonl",
      R"({"id":"g1","context":["a","b"],"candidates":[{"text":"x","label":1},{"text":"y","label":0}]})" "\n"
      R"({"context":["c"],"candidates":[{"text":"z","label":1,"adversarial":true},{"text":"q","label":0}]})" "\n");
  const auto groups = load_candidate_sets(path);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].id == "g1");
  CHECK(groups[1].id == "g2");  // generated from the line number
  CHECK(groups[1].candidates[0].adversarial);

  const auto out1 = tmp.file("o1.jsonl");
  save_candidate_sets(groups, out1);
  const auto groups2 = load_candidate_sets(out1);
  const auto out2 = tmp.file("o2.jsonl");
  save_candidate_sets(groups2, out2);
  CHECK(read_file(out1) == read_file(out2));

  SUBCASE("bad label is rejected") {
    const auto bad = tmp.write(
        "bad.jsonl",
        R"({"context":["a"],"candidates":[{"text":"x","label":2}]})" "\n");
    CHECK_THROWS_AS(load_candidate_sets(bad), ParseError);
  }
}

TEST_CASE("group_pairs_by_context groups adjacent rows sharing a context") {
  Corpus corpus;
  auto add = [&corpus](const std::string& id, const std::string& ctx,
                       const std::string& resp, int label) {
    Dialog d;
    d.id = id;
    d.context.push_back(Utterance{ctx, ""});
    d.response = Utterance{resp, ""};
    d.label = label;
    corpus.dialogs.push_back(std::move(d));
  };
  add("r1", "ctx one", "good", 1);
  add("r2", "ctx one", "bad", 0);
  add("r3", "ctx two", "good", 1);
  add("r4", "ctx two", "bad", 0);
  add("r5", "ctx one", "late", 0);  // same text but not adjacent: new group

  const auto groups = group_pairs_by_context(corpus);
  REQUIRE(groups.size() == 3);
  CHECK(groups[0].candidates.size() == 2);
  CHECK(groups[1].candidates.size() == 2);
  CHECK(groups[2].candidates.size() == 1);
  CHECK(groups[0].id == "r1");
}

TEST_CASE("adversarial sets keep n, the positive, and inject a context utterance") {
  Rng gen(2718);
  std::vector<CandidateSet> groups;
  for (int i = 0; i < 200; ++i) {
    groups.push_back(make_group("g" + std::to_string(i), 1 + gen.uniform_index(5),
                                2 + gen.uniform_index(9), gen.uniform_index(2), gen));
  }
  Rng rng(1);
  const auto adversarial = build_adversarial_set(groups, rng);
  REQUIRE(adversarial.size() == groups.size());

  for (std::size_t g = 0; g < groups.size(); ++g) {
    const CandidateSet& before = groups[g];
    const CandidateSet& after = adversarial[g];
    REQUIRE(after.candidates.size() == before.candidates.size());

    std::size_t adversarial_count = 0, positive_count = 0;
    for (std::size_t i = 0; i < after.candidates.size(); ++i) {
      const Candidate& c = after.candidates[i];
      if (c.adversarial) {
        ++adversarial_count;
        CHECK(c.label == 0);
        // injected text appears verbatim in this group's own context
        const bool from_context =
            std::any_of(after.context.begin(), after.context.end(),
                        [&c](const Utterance& u) { return u.text == c.utterance.text; });
        CHECK(from_context);
        CHECK(before.candidates[i].label == 0);  // replaced one of the negatives
      } else {
        CHECK(c.utterance.text == before.candidates[i].utterance.text);
      }
      if (c.label == 1) {
        ++positive_count;
        CHECK(c.utterance.text == before.candidates[i].utterance.text);
      }
    }
    CHECK(adversarial_count == 1);
    CHECK(positive_count == 1);
    // context untouched
    CHECK(after.context.size() == before.context.size());
  }
}

TEST_CASE("adversarial construction is deterministic per seed") {
  TempDir tmp;
  Rng gen(3);
  std::vector<CandidateSet> groups;
  for (int i = 0; i < 20; ++i) {
    groups.push_back(make_group("g" + std::to_string(i), 3, 6, 0, gen));
  }
  Rng r1(42), r2(42), r3(43);
  const auto a = build_adversarial_set(groups, r1);
  const auto b = build_adversarial_set(groups, r2);
  const auto c = build_adversarial_set(groups, r3);
  const auto pa = tmp.file("a.jsonl"), pb = tmp.file("b.jsonl"), pc = tmp.file("c.jsonl");
  save_candidate_sets(a, pa);
  save_candidate_sets(b, pb);
  save_candidate_sets(c, pc);
  CHECK(read_file(pa) == read_file(pb));
  CHECK(read_file(pa) != read_file(pc));
}

TEST_CASE("adversarial construction requires a negative to replace") {
  Rng gen(4);
  CandidateSet g = make_group("lonely", 2, 1, 0, gen);  // single positive candidate
  Rng rng(1);
  CHECK_THROWS_WITH_AS(build_adversarial_set(std::vector<CandidateSet>{g}, rng),
                       doctest::Contains("lonely"), std::invalid_argument);
}

TEST_CASE("adversarial top-1 rate: definitional extremes and random scorer") {
  Rng gen(5);
  std::vector<CandidateSet> groups;
  for (int i = 0; i < 1000; ++i) {
    groups.push_back(make_group("g" + std::to_string(i), 2, 10, 0, gen));
  }
  Rng rng(7);
  const auto adversarial = build_adversarial_set(groups, rng);

  std::vector<std::size_t> adv_index(adversarial.size());
  for (std::size_t g = 0; g < adversarial.size(); ++g) {
    for (std::size_t i = 0; i < adversarial[g].candidates.size(); ++i) {
      if (adversarial[g].candidates[i].adversarial) adv_index[g] = i;
    }
  }

  SUBCASE("always ranks adversarial first -> 1.0") {
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t g = 0; g < adversarial.size(); ++g) {
      std::vector<std::size_t> order = {adv_index[g]};
      for (std::size_t i = 0; i < 10; ++i) {
        if (i != adv_index[g]) order.push_back(i);
      }
      orders.push_back(std::move(order));
    }
    CHECK(adversarial_top1_rate_from_orders(adversarial, orders) == 1.0);
  }
  SUBCASE("never ranks adversarial first -> 0.0") {
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t g = 0; g < adversarial.size(); ++g) {
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < 10; ++i) {
        if (i != adv_index[g]) order.push_back(i);
      }
      order.push_back(adv_index[g]);
      orders.push_back(std::move(order));
    }
    CHECK(adversarial_top1_rate_from_orders(adversarial, orders) == 0.0);
  }
  SUBCASE("uniform random scorer lands near 1/n") {
    Rng score_rng(99);
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t g = 0; g < adversarial.size(); ++g) {
      std::vector<double> scores(10);
      for (double& s : scores) s = score_rng.next_double();
      orders.push_back(rank_by_scores(scores));
    }
    const double rate = adversarial_top1_rate_from_orders(adversarial, orders);
    const double sigma = std::sqrt(0.1 * 0.9 / 1000.0);
    CHECK(std::abs(rate - 0.1) < 3.0 * sigma);
  }
}

TEST_CASE("special-token embedding export") {
  TempDir tmp;
  Corpus corpus;
  Dialog d;
  d.id = "d1";
  d.context.push_back(Utterance{"w0 w1 w2 w3 w4 w5", ""});
  corpus.dialogs.push_back(std::move(d));
  const Vocab vocab = Vocab::build(corpus, 1);

  ModelConfig cfg;
  cfg.hidden_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.max_positions = 64;
  cfg.vocab_size = static_cast<int>(vocab.size());
  Rng init(derive_seed(6, {stream::kInit}));
  const ModelParams params = ModelParams::init(cfg, init);

  std::vector<Utterance> window;
  for (int i = 0; i < 5; ++i) window.push_back(Utterance{"w" + std::to_string(i), ""});

  std::vector<UmsSample> samples;
  samples.push_back(*build_insertion_at(vocab, window, 2, 64));
  samples.push_back(*build_deletion_at(vocab, window, Utterance{"w5", ""}, 1, 64));

  const auto path = tmp.file("emb.jsonl");
  const std::size_t written = export_special_token_embeddings(params, cfg, vocab, samples, path);
  CHECK(written == 5 + 6);

  const auto lines = read_lines(path);
  REQUIRE(lines.size() == written);
  std::map<std::string, int> per_task_targets;
  for (const auto& line : lines) {
    const auto rec = nlohmann::json::parse(line);
    REQUIRE(rec.at("vector").size() == 16);
    if (rec.at("is_target").get<bool>()) per_task_targets[rec.at("task")] += 1;
  }
  CHECK(per_task_targets["ins"] == 1);
  CHECK(per_task_targets["del"] == 1);

  UmsSample response = make_response_sample(vocab, window, Utterance{"w5", ""}, 1, 64, "d");
  CHECK_THROWS_AS(
      export_special_token_embeddings(params, cfg, vocab, std::vector<UmsSample>{response},
                                      tmp.file("no.jsonl")),
      std::invalid_argument);
}
