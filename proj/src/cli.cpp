#include "ums/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "ums/corpus.hpp"
#include "ums/eval.hpp"
#include "ums/model.hpp"
#include "ums/tokenizer.hpp"
#include "ums/trainer.hpp"
#include "ums/util.hpp"

namespace ums::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kToolkitVersion = "0.1.0";
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

void write_manifest(const fs::path& manifest_path, const std::string& command,
                    const std::optional<fs::path>& config_path,
                    const json& config_snapshot, const std::optional<std::uint64_t>& seed,
                    const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs) {
  json doc;
  doc["command"] = command;
  doc["config_path"] = config_path.has_value() ? json(config_path->string()) : json(nullptr);
  doc["config"] = config_snapshot;
  doc["seed"] = seed.has_value() ? json(*seed) : json(nullptr);
  json in = json::object();
  for (const fs::path& p : inputs) in[p.string()] = hash_file_hex(p);
  doc["inputs"] = std::move(in);
  json out = json::array();
  for (const fs::path& p : outputs) out.push_back(p.string());
  doc["outputs"] = std::move(out);
  doc["toolkit_version"] = kToolkitVersion;
  write_file(manifest_path, doc.dump(2) + "\n");
}

struct PrepareArgs {
  std::string input, format, out;
  std::string vocab_out;
  int min_count = 1;
};

int cmd_prepare(const PrepareArgs& args) {
  const Corpus corpus = args.format == "tsv" ? load_tsv(args.input) : load_jsonl(args.input);
  save_jsonl(corpus, args.out);
  std::vector<fs::path> outputs = {args.out};
  if (!args.vocab_out.empty()) {
    const Vocab vocab = Vocab::build(corpus, args.min_count);
    vocab.save(args.vocab_out);
    outputs.emplace_back(args.vocab_out);
  }
  write_manifest(args.out + ".manifest.json", "prepare", std::nullopt,
                 json{{"format", args.format}, {"min_count", args.min_count}},
                 std::nullopt, {args.input}, outputs);
  std::cout << "prepared " << corpus.dialogs.size() << " dialogs -> " << args.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config, train_path, val_path, vocab_path, out_dir;
  std::optional<std::string> tasks;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size, k, max_len, workers;
  std::optional<double> lr;
  bool static_ums = false;
  bool resume = false;
};

int cmd_train(const TrainArgs& args) {
  json config_doc;
  try {
    config_doc = json::parse(read_file(args.config));
  } catch (const json::exception& e) {
    throw ParseError(args.config + ": invalid config JSON: " + e.what());
  }
  RunConfig cfg = parse_run_config(config_doc);
  if (args.tasks.has_value()) cfg.train.enabled_tasks = parse_task_set(*args.tasks);
  if (args.seed.has_value()) cfg.train.seed = *args.seed;
  if (args.epochs.has_value()) cfg.train.epochs = *args.epochs;
  if (args.batch_size.has_value()) cfg.train.batch_size = *args.batch_size;
  if (args.k.has_value()) cfg.train.k = *args.k;
  if (args.max_len.has_value()) cfg.train.max_len = *args.max_len;
  if (args.workers.has_value()) cfg.train.workers = *args.workers;
  if (args.lr.has_value()) cfg.train.learning_rate = *args.lr;
  if (args.static_ums) cfg.train.static_ums = true;
  cfg.train.validate();

  const Vocab vocab = Vocab::load(args.vocab_path);
  const Corpus train_corpus = load_jsonl(args.train_path, Split::train);
  const Corpus val_corpus = load_jsonl(args.val_path, Split::val);

  fs::create_directories(args.out_dir);
  const fs::path out_dir(args.out_dir);
  const fs::path checkpoint_path = out_dir / "checkpoint.json";
  const fs::path log_path = out_dir / "train_log.jsonl";
  const fs::path state_path = out_dir / "train_state.json";

  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = static_cast<int>(vocab.size());

  std::ofstream log_file(log_path, std::ios::binary | std::ios::trunc);
  if (!log_file) throw IoError("cannot write file: " + log_path.string());

  TrainSinks sinks;
  sinks.on_record = [&log_file](const json& record) { log_file << record.dump() << '\n'; };
  sinks.on_best = [&](const ModelParams& params, int, const MetricReport&) {
    save_checkpoint(checkpoint_path, model_cfg, params, vocab);
  };

  std::optional<TrainState> resume_state;
  if (args.resume) {
    resume_state = load_train_state(state_path, model_cfg);
  }

  TrainResult result;
  try {
    result = train(train_corpus, val_corpus, cfg, vocab, sinks,
                   resume_state.has_value() ? &*resume_state : nullptr);
  } catch (const NonFiniteLossError& e) {
    const fs::path dump_path = out_dir / "bad_batch.json";
    write_file(dump_path, e.batch_dump.dump(2) + "\n");
    log_file.flush();
    std::cerr << "error: non-finite loss; offending batch dumped to " << dump_path
              << "\n";
    return kExitRuntime;
  }
  log_file.flush();

  save_train_state(state_path, model_cfg, result.final_state);
  write_manifest(out_dir / "manifest.json", "train", fs::path(args.config),
                 run_config_to_json(cfg), cfg.train.seed,
                 {args.config, args.train_path, args.val_path, args.vocab_path},
                 {checkpoint_path, log_path, state_path});
  std::cout << "trained " << result.epochs_run << " epoch(s); best val R@1 "
            << result.best_val_r1 << " at epoch " << result.best_epoch << "; best checkpoint "
            << checkpoint_path << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, test_path, out;
};

int cmd_eval(const EvalArgs& args) {
  if (!fs::exists(args.checkpoint)) {
    std::cerr << "error: checkpoint not found: " << args.checkpoint << "\n";
    return kExitUsage;
  }
  const std::vector<CandidateSet> groups = load_candidate_sets(args.test_path);
  if (groups.empty()) {
    std::cerr << "error: test file has no candidate sets: " << args.test_path << "\n";
    return kExitUsage;
  }
  const Checkpoint ckpt = load_checkpoint(args.checkpoint);
  const MetricReport report = evaluate_groups(ckpt.params, ckpt.config, ckpt.vocab,
                                              groups, ckpt.config.max_positions);

  json doc = metric_report_to_json(report);
  doc["checkpoint_hash"] = hash_file_hex(args.checkpoint);
  doc["seed"] = nullptr;  // ranking is deterministic
  const std::vector<CandidateSet> adv_groups = [&groups] {
    std::vector<CandidateSet> out;
    for (const CandidateSet& g : groups) {
      for (const Candidate& c : g.candidates) {
        if (c.adversarial) {
          out.push_back(g);
          break;
        }
      }
    }
    return out;
  }();
  if (!adv_groups.empty()) {
    doc["adversarial_top1_rate"] = adversarial_top1_rate(
        ckpt.params, ckpt.config, ckpt.vocab, adv_groups, ckpt.config.max_positions);
    doc["adversarial_group_count"] = adv_groups.size();
  }
  write_file(args.out, doc.dump(2) + "\n");
  write_manifest(args.out + ".manifest.json", "eval", std::nullopt, json(nullptr),
                 std::nullopt, {args.checkpoint, args.test_path}, {args.out});
  std::cout << "evaluated " << report.group_count << " group(s) -> " << args.out << "\n";
  return kExitOk;
}

struct AdversarialArgs {
  std::string test_path, out;
  std::uint64_t seed = 0;
};

int cmd_adversarial(const AdversarialArgs& args) {
  const std::vector<CandidateSet> groups = load_candidate_sets(args.test_path);
  for (const CandidateSet& g : groups) {
    const bool has_negative =
        std::any_of(g.candidates.begin(), g.candidates.end(),
                    [](const Candidate& c) { return c.label == 0; });
    if (!has_negative) {
      std::cerr << "error: group '" << g.id << "' has no negative candidate\n";
      return kExitRuntime;
    }
  }
  Rng rng(args.seed);
  const std::vector<CandidateSet> adversarial = build_adversarial_set(groups, rng);
  save_candidate_sets(adversarial, args.out);
  write_manifest(args.out + ".manifest.json", "adversarial", std::nullopt, json(nullptr),
                 args.seed, {args.test_path}, {args.out});
  std::cout << "wrote " << adversarial.size() << " adversarial group(s) -> " << args.out
            << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Utterance-manipulation training and evaluation toolkit for "
               "retrieval-based multi-turn response selection"};
  app.require_subcommand(1);

  PrepareArgs prepare_args;
  CLI::App* prepare = app.add_subcommand("prepare", "Validate and convert a corpus to JSONL");
  prepare->add_option("--input", prepare_args.input, "Input corpus file")->required();
  prepare->add_option("--format", prepare_args.format, "Input format")
      ->required()
      ->check(CLI::IsMember({"tsv", "jsonl"}));
  prepare->add_option("--out", prepare_args.out, "Output JSONL path")->required();
  prepare->add_option("--build-vocab", prepare_args.vocab_out, "Also write a vocab file");
  prepare->add_option("--min-count", prepare_args.min_count, "Vocab frequency threshold")
      ->check(CLI::PositiveNumber);

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a response-selection model");
  train_cmd->add_option("--config", train_args.config, "Run config JSON")->required();
  train_cmd->add_option("--train", train_args.train_path, "Training corpus JSONL")->required();
  train_cmd->add_option("--val", train_args.val_path, "Validation corpus JSONL")->required();
  train_cmd->add_option("--vocab", train_args.vocab_path, "Vocab file")->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "Output directory")->required();
  train_cmd->add_option("--tasks", train_args.tasks,
                        "Override enabled auxiliary tasks, e.g. \"ins,del,srch\" or \"\"");
  train_cmd->add_option("--seed", train_args.seed, "Override seed");
  train_cmd->add_option("--epochs", train_args.epochs, "Override epochs");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Override batch size");
  train_cmd->add_option("--lr", train_args.lr, "Override learning rate");
  train_cmd->add_option("--k", train_args.k, "Override UMS window size");
  train_cmd->add_option("--max-len", train_args.max_len, "Override max sequence length");
  train_cmd->add_option("--workers", train_args.workers, "Override worker threads");
  train_cmd->add_flag("--static-ums", train_args.static_ums,
                      "Fix one manipulation per dialog instead of per-epoch redraw");
  train_cmd->add_flag("--resume", train_args.resume, "Resume from out-dir/train_state.json");

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Rank candidate sets and report metrics");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--test", eval_args.test_path, "Candidate-set JSONL")->required();
  eval_cmd->add_option("--out", eval_args.out, "Metric report JSON path")->required();

  AdversarialArgs adv_args;
  CLI::App* adv_cmd =
      app.add_subcommand("adversarial", "Build an adversarial candidate-set file");
  adv_cmd->add_option("--test", adv_args.test_path, "Candidate-set JSONL")->required();
  adv_cmd->add_option("--seed", adv_args.seed, "Replacement seed")->required();
  adv_cmd->add_option("--out", adv_args.out, "Output candidate-set JSONL")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(prepare_args);
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (adv_cmd->parsed()) return cmd_adversarial(adv_args);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ums::cli
