#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ums/rng.hpp"
#include "ums/ums_builder.hpp"

namespace ums {

struct ModelConfig {
  int hidden_dim = 128;
  int num_layers = 2;
  int num_heads = 4;
  int ff_dim = 0;  // 0 -> 4 * hidden_dim
  int max_positions = 512;
  double dropout_rate = 0.1;
  int vocab_size = 0;

  int resolved_ff_dim() const { return ff_dim > 0 ? ff_dim : 4 * hidden_dim; }
  void validate() const;
};

struct LayerParams {
  Eigen::MatrixXd wq, wk, wv, wo;          // d x d, applied as x * W
  Eigen::VectorXd bq, bk, bv, bo;          // d
  Eigen::VectorXd ln1_gamma, ln1_beta;     // d
  Eigen::MatrixXd w1;                      // d x f
  Eigen::VectorXd b1;                      // f
  Eigen::MatrixXd w2;                      // f x d
  Eigen::VectorXd b2;                      // d
  Eigen::VectorXd ln2_gamma, ln2_beta;     // d
};

struct HeadParams {
  Eigen::VectorXd w;  // d
  double b = 0.0;
};

// All trainable tensors. Doubles as the gradient and Adam-moment container.
struct ModelParams {
  Eigen::MatrixXd token_embedding;     // V x d
  Eigen::MatrixXd position_embedding;  // P x d
  Eigen::MatrixXd segment_embedding;   // 2 x d
  std::vector<LayerParams> layers;
  std::array<HeadParams, kNumTasks> heads;  // indexed by Task

  // Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
  static ModelParams init(const ModelConfig& cfg, Rng& rng);
  static ModelParams zeros(const ModelConfig& cfg);

  void set_zero();
  bool all_finite() const;
};

// Visits every tensor in a fixed, documented order. The names double as the
// checkpoint tensor names; data is the Eigen buffer (column-major).
using TensorVisitor =
    std::function<void(const std::string& name, double* data, Eigen::Index rows,
                       Eigen::Index cols)>;
void visit_tensors(ModelParams& params, const TensorVisitor& fn);

// Post-norm transformer encoder over one sequence. Token, position and
// segment embeddings are summed; [PAD] key positions are masked out of
// attention with a large negative additive term. Dropout fires only in
// train_mode and draws from the supplied rng.
Eigen::MatrixXd encode(const ModelParams& params, const ModelConfig& cfg,
                       const EncodedSequence& seq, bool train_mode = false,
                       Rng* dropout_rng = nullptr);

// sigma(w . x_cls + b) with the response head.
double score_response(const ModelParams& params, const ModelConfig& cfg,
                      const EncodedSequence& seq);

// Per-candidate sigma(w_task . x_p + b_task); rejects response samples.
std::vector<double> score_candidates(const ModelParams& params, const ModelConfig& cfg,
                                     const UmsSample& sample);

struct LossResult {
  double total = 0.0;
  std::array<double, kNumTasks> task_mean{};  // 0 where a task is absent
  std::array<int, kNumTasks> task_count{};
  ModelParams grads;
};

// Per sample: BCE over its candidates vs targets, averaged over candidates.
// Per task: mean over that task's samples. Total: sum of the present task
// means (equal ratio). Gradients are analytic and cover every tensor.
// Probabilities are clamped to [1e-7, 1 - 1e-7] inside the log only.
// workers > 1 splits samples over threads with a fixed reduction order, so
// results are bitwise reproducible for a given worker count.
LossResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg,
                          std::span<const UmsSample> batch, bool train_mode = false,
                          int workers = 1);

inline constexpr double kProbEpsilon = 1e-7;

// Tensor block of the checkpoint format: {name: {"shape": [r, c], "data": [...]}}
// with data in row-major order.
nlohmann::json tensors_to_json(const ModelParams& params);
void tensors_from_json(ModelParams& params, const nlohmann::json& tensors,
                       const std::string& context);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& jc);

// Versioned JSON checkpoint: config, vocab (id order) and every tensor in
// row-major order. Self-contained: evaluation needs only this file.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  Vocab vocab;
};
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams& params, const Vocab& vocab);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ums
