#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ums/corpus.hpp"
#include "ums/eval.hpp"
#include "ums/model.hpp"
#include "ums/ums_builder.hpp"

namespace ums {

// Stream tags for derive_seed. Public so reproduction tooling (and the
// acceptance checks) can rebuild any draw the trainer makes.
namespace stream {
inline constexpr std::uint64_t kInit = 1;     // weight initialization
inline constexpr std::uint64_t kShuffle = 2;  // per-epoch row order
inline constexpr std::uint64_t kTask = 3;     // UMS window/manipulation draws
inline constexpr std::uint64_t kDropout = 4;  // per-sample dropout
}  // namespace stream

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 3e-5;
  int k = 5;
  int max_len = 512;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::set<Task> enabled_tasks = {Task::insertion, Task::deletion, Task::search};
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool static_ums = false;            // one fixed manipulation per dialog
  bool ums_from_positive_only = true; // draw UMS windows from label-1 rows only
  double grad_clip_norm = 0.0;        // 0 = off
  bool lr_linear_decay = false;
  int early_stop_patience = 3;
  int workers = 1;

  void validate() const;
};

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
};

// Strict parse: unknown keys are an error at both levels. "model" holds the
// encoder hyperparameters; everything else is a TrainConfig field.
RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json run_config_to_json(const RunConfig& cfg);

std::set<Task> parse_task_set(const std::string& comma_separated);

struct AdamState {
  ModelParams m, v;
  long long t = 0;
  static AdamState zeros(const ModelConfig& cfg);
};

// Bias-corrected Adam update over every tensor.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
               double lr, double beta1, double beta2, double epsilon);

double global_grad_norm(const ModelParams& grads);

struct NonFiniteLossError : std::runtime_error {
  explicit NonFiniteLossError(nlohmann::json dump)
      : std::runtime_error("non-finite loss"), batch_dump(std::move(dump)) {}
  nlohmann::json batch_dump;
};

// Response samples for the given batch rows plus, per enabled task, one UMS
// sample per eligible row; a skip resamples another dialog, up to 10
// attempts, then the slot is dropped.
std::vector<UmsSample> assemble_step_batch(const Corpus& corpus, const TrainConfig& cfg,
                                           const Vocab& vocab,
                                           std::span<const std::size_t> batch_rows,
                                           int epoch, int step_in_epoch);

struct TrainSinks {
  std::function<void(const nlohmann::json&)> on_record;  // step and epoch records
  std::function<void(const ModelParams&, int epoch, const MetricReport&)> on_best;
};

// Everything needed to resume at an epoch boundary.
struct TrainState {
  ModelParams params;
  AdamState adam;
  int next_epoch = 0;
  long long global_step = 0;
  double best_val_r1 = -1.0;
  int best_epoch = -1;
  int stale_epochs = 0;
};

void save_train_state(const std::filesystem::path& path, const ModelConfig& cfg,
                      const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path, const ModelConfig& cfg);

struct TrainResult {
  ModelParams params;       // parameters after the last epoch run
  ModelParams best_params;  // best validation R_n@1 snapshot
  int best_epoch = -1;
  double best_val_r1 = -1.0;
  int epochs_run = 0;
  std::vector<nlohmann::json> log;
  TrainState final_state;
};

// Multi-task loop: assemble -> loss_and_grads -> Adam, per-epoch validation
// via the eval module, best-checkpoint tracking and early stopping. Throws
// NonFiniteLossError with a batch dump when the loss stops being finite.
TrainResult train(const Corpus& train_corpus, const Corpus& val_corpus,
                  const RunConfig& cfg, const Vocab& vocab,
                  const TrainSinks& sinks = {},
                  const TrainState* resume = nullptr);

}  // namespace ums
