#include "ums/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "ums/util.hpp"

namespace ums {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (learning_rate <= 0.0) throw std::invalid_argument("learning_rate must be positive");
  if (k < 1) throw std::invalid_argument("k must be positive");
  if (max_len < 4) throw std::invalid_argument("max_len must be at least 4");
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 || adam_beta2 >= 1.0) {
    throw std::invalid_argument("adam betas must be in (0, 1)");
  }
  if (adam_epsilon <= 0.0) throw std::invalid_argument("adam_epsilon must be positive");
  if (grad_clip_norm < 0.0) throw std::invalid_argument("grad_clip_norm must be >= 0");
  if (early_stop_patience < 1) throw std::invalid_argument("early_stop_patience must be positive");
  if (workers < 1) throw std::invalid_argument("workers must be positive");
  if (enabled_tasks.count(Task::response) != 0) {
    throw std::invalid_argument("enabled_tasks lists auxiliary tasks only");
  }
}

std::set<Task> parse_task_set(const std::string& comma_separated) {
  std::set<Task> tasks;
  std::size_t start = 0;
  while (start <= comma_separated.size()) {
    const std::size_t comma = comma_separated.find(',', start);
    const std::string item = normalize_whitespace(
        comma == std::string::npos ? comma_separated.substr(start)
                                   : comma_separated.substr(start, comma - start));
    if (!item.empty()) {
      const std::optional<Task> task = task_from_name(item);
      if (!task.has_value() || *task == Task::response) {
        throw std::invalid_argument("unknown task name '" + item +
                                    "' (expected ins, del, srch)");
      }
      tasks.insert(*task);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return tasks;
}

namespace {

json task_set_to_json(const std::set<Task>& tasks) {
  json arr = json::array();
  for (const Task t : {Task::insertion, Task::deletion, Task::search}) {
    if (tasks.count(t) != 0) arr.push_back(task_name(t));
  }
  return arr;
}

void reject_unknown_keys(const json& doc, const std::vector<std::string>& known,
                         const std::string& context) {
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ParseError(context + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ParseError("config: expected a JSON object");
  reject_unknown_keys(doc,
                      {"batch_size", "learning_rate", "k", "max_len", "epochs", "seed",
                       "enabled_tasks", "adam_beta1", "adam_beta2", "adam_epsilon",
                       "static_ums", "ums_from_positive_only", "grad_clip_norm",
                       "lr_linear_decay", "early_stop_patience", "workers", "model"},
                      "config");
  RunConfig cfg;
  TrainConfig& t = cfg.train;
  t.batch_size = doc.value("batch_size", t.batch_size);
  t.learning_rate = doc.value("learning_rate", t.learning_rate);
  t.k = doc.value("k", t.k);
  t.max_len = doc.value("max_len", t.max_len);
  t.epochs = doc.value("epochs", t.epochs);
  t.seed = doc.value("seed", t.seed);
  if (doc.contains("enabled_tasks")) {
    if (!doc["enabled_tasks"].is_array()) {
      throw ParseError("config: enabled_tasks must be an array of task names");
    }
    t.enabled_tasks.clear();
    for (const json& item : doc["enabled_tasks"]) {
      const std::optional<Task> task = task_from_name(item.get<std::string>());
      if (!task.has_value() || *task == Task::response) {
        throw ParseError("config: bad task name in enabled_tasks");
      }
      t.enabled_tasks.insert(*task);
    }
  }
  t.adam_beta1 = doc.value("adam_beta1", t.adam_beta1);
  t.adam_beta2 = doc.value("adam_beta2", t.adam_beta2);
  t.adam_epsilon = doc.value("adam_epsilon", t.adam_epsilon);
  t.static_ums = doc.value("static_ums", t.static_ums);
  t.ums_from_positive_only = doc.value("ums_from_positive_only", t.ums_from_positive_only);
  t.grad_clip_norm = doc.value("grad_clip_norm", t.grad_clip_norm);
  t.lr_linear_decay = doc.value("lr_linear_decay", t.lr_linear_decay);
  t.early_stop_patience = doc.value("early_stop_patience", t.early_stop_patience);
  t.workers = doc.value("workers", t.workers);
  t.validate();

  if (doc.contains("model")) {
    const json& jm = doc["model"];
    reject_unknown_keys(jm,
                        {"hidden_dim", "num_layers", "num_heads", "ff_dim",
                         "max_positions", "dropout_rate"},
                        "config.model");
    ModelConfig& m = cfg.model;
    m.hidden_dim = jm.value("hidden_dim", m.hidden_dim);
    m.num_layers = jm.value("num_layers", m.num_layers);
    m.num_heads = jm.value("num_heads", m.num_heads);
    m.ff_dim = jm.value("ff_dim", m.ff_dim);
    m.max_positions = jm.value("max_positions", m.max_positions);
    m.dropout_rate = jm.value("dropout_rate", m.dropout_rate);
  }
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  json doc = {{"batch_size", t.batch_size},
              {"learning_rate", t.learning_rate},
              {"k", t.k},
              {"max_len", t.max_len},
              {"epochs", t.epochs},
              {"seed", t.seed},
              {"enabled_tasks", task_set_to_json(t.enabled_tasks)},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"adam_epsilon", t.adam_epsilon},
              {"static_ums", t.static_ums},
              {"ums_from_positive_only", t.ums_from_positive_only},
              {"grad_clip_norm", t.grad_clip_norm},
              {"lr_linear_decay", t.lr_linear_decay},
              {"early_stop_patience", t.early_stop_patience},
              {"workers", t.workers}};
  doc["model"] = {{"hidden_dim", cfg.model.hidden_dim},
                  {"num_layers", cfg.model.num_layers},
                  {"num_heads", cfg.model.num_heads},
                  {"ff_dim", cfg.model.ff_dim},
                  {"max_positions", cfg.model.max_positions},
                  {"dropout_rate", cfg.model.dropout_rate}};
  return doc;
}

AdamState AdamState::zeros(const ModelConfig& cfg) {
  AdamState state;
  state.m = ModelParams::zeros(cfg);
  state.v = ModelParams::zeros(cfg);
  return state;
}

namespace {

std::vector<std::pair<double*, Eigen::Index>> tensor_buffers(ModelParams& p) {
  std::vector<std::pair<double*, Eigen::Index>> out;
  visit_tensors(p, [&out](const std::string&, double* data, Eigen::Index r,
                          Eigen::Index c) { out.emplace_back(data, r * c); });
  return out;
}

}  // namespace

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
               double lr, double beta1, double beta2, double epsilon) {
  state.t += 1;
  const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  const auto p_buf = tensor_buffers(params);
  const auto g_buf = tensor_buffers(const_cast<ModelParams&>(grads));
  const auto m_buf = tensor_buffers(state.m);
  const auto v_buf = tensor_buffers(state.v);
  for (std::size_t i = 0; i < p_buf.size(); ++i) {
    double* p = p_buf[i].first;
    const double* g = g_buf[i].first;
    double* m = m_buf[i].first;
    double* v = v_buf[i].first;
    const Eigen::Index n = p_buf[i].second;
    for (Eigen::Index j = 0; j < n; ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
    }
  }
}

double global_grad_norm(const ModelParams& grads) {
  double sum_sq = 0.0;
  visit_tensors(const_cast<ModelParams&>(grads),
                [&sum_sq](const std::string&, double* data, Eigen::Index r,
                          Eigen::Index c) {
                  const Eigen::Index n = r * c;
                  for (Eigen::Index i = 0; i < n; ++i) sum_sq += data[i] * data[i];
                });
  return std::sqrt(sum_sq);
}

namespace {

void scale_params(ModelParams& p, double factor) {
  visit_tensors(p, [factor](const std::string&, double* data, Eigen::Index r,
                            Eigen::Index c) {
    const Eigen::Index n = r * c;
    for (Eigen::Index i = 0; i < n; ++i) data[i] *= factor;
  });
}

json dump_batch(std::span<const UmsSample> batch, int epoch, int step) {
  json samples = json::array();
  for (const UmsSample& s : batch) {
    samples.push_back({{"task", task_name(s.task)},
                       {"dialog_id", s.meta.dialog_id},
                       {"token_ids", s.seq.token_ids},
                       {"candidate_positions", s.seq.candidate_positions},
                       {"targets", s.seq.targets}});
  }
  return {{"epoch", epoch}, {"step", step}, {"samples", std::move(samples)}};
}

std::vector<std::size_t> labeled_rows(const Corpus& corpus) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < corpus.dialogs.size(); ++i) {
    const Dialog& d = corpus.dialogs[i];
    if (d.response.has_value() && d.label.has_value()) rows.push_back(i);
  }
  return rows;
}

void shuffle_indices(std::vector<std::size_t>& rows, Rng& rng) {
  for (std::size_t i = rows.size(); i > 1; --i) {
    std::swap(rows[i - 1], rows[rng.uniform_index(i)]);
  }
}

}  // namespace

std::vector<UmsSample> assemble_step_batch(const Corpus& corpus, const TrainConfig& cfg,
                                           const Vocab& vocab,
                                           std::span<const std::size_t> batch_rows,
                                           int epoch, int step_in_epoch) {
  const auto e = static_cast<std::uint64_t>(epoch);
  const auto s = static_cast<std::uint64_t>(step_in_epoch);
  std::vector<UmsSample> batch;
  batch.reserve(batch_rows.size() * (1 + cfg.enabled_tasks.size()));

  for (std::size_t slot = 0; slot < batch_rows.size(); ++slot) {
    const Dialog& d = corpus.dialogs[batch_rows[slot]];
    UmsSample sample = make_response_sample(vocab, d.context, *d.response, *d.label,
                                            cfg.max_len, d.id);
    sample.meta.dropout_seed = derive_seed(
        cfg.seed, {stream::kDropout, e, s, slot, static_cast<std::uint64_t>(Task::response)});
    batch.push_back(std::move(sample));
  }

  for (const Task task : {Task::insertion, Task::deletion, Task::search}) {
    if (cfg.enabled_tasks.count(task) == 0) continue;
    const auto task_id = static_cast<std::uint64_t>(task);
    for (std::size_t slot = 0; slot < batch_rows.size(); ++slot) {
      const Dialog& origin = corpus.dialogs[batch_rows[slot]];
      if (cfg.ums_from_positive_only && origin.label.value_or(0) != 1) continue;

      const std::uint64_t draw_seed =
          cfg.static_ums
              ? derive_seed(cfg.seed, {stream::kTask, fnv1a64(origin.id), task_id})
              : derive_seed(cfg.seed, {stream::kTask, e, s, slot, fnv1a64(origin.id), task_id});
      Rng task_rng(draw_seed);

      const Dialog* dialog = &origin;
      for (int attempt = 0; attempt < 10; ++attempt) {
        if (attempt > 0) {
          dialog = &corpus.dialogs[task_rng.uniform_index(corpus.dialogs.size())];
        }
        const Window window = extract_window(*dialog, cfg.k, task_rng);
        std::optional<UmsSample> built;
        switch (task) {
          case Task::insertion:
            built = build_insertion(vocab, window.utterances, task_rng, cfg.max_len);
            break;
          case Task::deletion: {
            if (corpus.dialogs.size() < 2) break;  // no intruder source
            const Utterance intruder =
                sample_random_utterance(corpus, dialog->id, task_rng);
            built = build_deletion(vocab, window.utterances, intruder, task_rng,
                                   cfg.max_len);
            break;
          }
          case Task::search:
            built = build_search(vocab, window.utterances, task_rng, cfg.max_len);
            break;
          case Task::response:
            break;
        }
        if (built.has_value()) {
          built->meta.dialog_id = dialog->id;
          built->meta.window_offset = window.offset;
          built->meta.dropout_seed =
              derive_seed(cfg.seed, {stream::kDropout, e, s, slot, task_id});
          batch.push_back(std::move(*built));
          break;
        }
      }
    }
  }
  return batch;
}

void save_train_state(const std::filesystem::path& path, const ModelConfig& cfg,
                      const TrainState& state) {
  json doc;
  doc["format"] = "ums.train_state";
  doc["version"] = 1;
  doc["config"] = model_config_to_json(cfg);
  doc["params"] = tensors_to_json(state.params);
  doc["adam_m"] = tensors_to_json(state.adam.m);
  doc["adam_v"] = tensors_to_json(state.adam.v);
  doc["adam_t"] = state.adam.t;
  doc["next_epoch"] = state.next_epoch;
  doc["global_step"] = state.global_step;
  doc["best_val_r1"] = state.best_val_r1;
  doc["best_epoch"] = state.best_epoch;
  doc["stale_epochs"] = state.stale_epochs;
  write_file(path, doc.dump());
}

TrainState load_train_state(const std::filesystem::path& path, const ModelConfig& cfg) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": invalid train state JSON: " + e.what());
  }
  if (doc.value("format", "") != "ums.train_state" || doc.value("version", 0) != 1) {
    throw ParseError(path.string() + ": not a ums.train_state file");
  }
  TrainState state;
  state.params = ModelParams::zeros(cfg);
  state.adam = AdamState::zeros(cfg);
  tensors_from_json(state.params, doc.at("params"), path.string() + " params");
  tensors_from_json(state.adam.m, doc.at("adam_m"), path.string() + " adam_m");
  tensors_from_json(state.adam.v, doc.at("adam_v"), path.string() + " adam_v");
  state.adam.t = doc.at("adam_t").get<long long>();
  state.next_epoch = doc.at("next_epoch").get<int>();
  state.global_step = doc.at("global_step").get<long long>();
  state.best_val_r1 = doc.at("best_val_r1").get<double>();
  state.best_epoch = doc.at("best_epoch").get<int>();
  state.stale_epochs = doc.at("stale_epochs").get<int>();
  return state;
}

TrainResult train(const Corpus& train_corpus, const Corpus& val_corpus,
                  const RunConfig& cfg, const Vocab& vocab, const TrainSinks& sinks,
                  const TrainState* resume) {
  cfg.train.validate();
  ModelConfig model_cfg = cfg.model;
  model_cfg.vocab_size = static_cast<int>(vocab.size());
  model_cfg.validate();

  const std::vector<std::size_t> rows = labeled_rows(train_corpus);
  if (rows.empty()) throw std::invalid_argument("train: corpus has no labeled dialogs");

  TrainResult result;
  TrainState state;
  if (resume != nullptr) {
    state = *resume;
  } else {
    Rng init_rng(derive_seed(cfg.train.seed, {stream::kInit}));
    state.params = ModelParams::init(model_cfg, init_rng);
    state.adam = AdamState::zeros(model_cfg);
  }
  result.best_params = state.params;
  result.best_epoch = state.best_epoch;
  result.best_val_r1 = state.best_val_r1;

  const std::vector<CandidateSet> val_groups = group_pairs_by_context(val_corpus);
  const long long steps_per_epoch =
      static_cast<long long>((rows.size() + static_cast<std::size_t>(cfg.train.batch_size) - 1) /
                             static_cast<std::size_t>(cfg.train.batch_size));
  const long long total_steps = steps_per_epoch * cfg.train.epochs;

  auto emit = [&](json record) {
    if (sinks.on_record) sinks.on_record(record);
    result.log.push_back(std::move(record));
  };

  for (int epoch = state.next_epoch; epoch < cfg.train.epochs; ++epoch) {
    std::vector<std::size_t> order = rows;
    Rng shuffle_rng(derive_seed(cfg.train.seed,
                                {stream::kShuffle, static_cast<std::uint64_t>(epoch)}));
    shuffle_indices(order, shuffle_rng);

    for (long long step = 0; step < steps_per_epoch; ++step) {
      const std::size_t lo = static_cast<std::size_t>(step) *
                             static_cast<std::size_t>(cfg.train.batch_size);
      const std::size_t hi =
          std::min(order.size(), lo + static_cast<std::size_t>(cfg.train.batch_size));
      const std::span<const std::size_t> batch_rows(order.data() + lo, hi - lo);
      const std::vector<UmsSample> batch = assemble_step_batch(
          train_corpus, cfg.train, vocab, batch_rows, epoch, static_cast<int>(step));

      LossResult loss = loss_and_grads(state.params, model_cfg, batch,
                                       /*train_mode=*/true, cfg.train.workers);
      if (!std::isfinite(loss.total)) {
        throw NonFiniteLossError(dump_batch(batch, epoch, static_cast<int>(step)));
      }

      if (cfg.train.grad_clip_norm > 0.0) {
        const double norm = global_grad_norm(loss.grads);
        if (norm > cfg.train.grad_clip_norm) {
          scale_params(loss.grads, cfg.train.grad_clip_norm / norm);
        }
      }
      const double lr =
          cfg.train.lr_linear_decay
              ? cfg.train.learning_rate *
                    (1.0 - static_cast<double>(state.global_step) /
                               static_cast<double>(total_steps))
              : cfg.train.learning_rate;
      adam_step(state.params, loss.grads, state.adam, lr, cfg.train.adam_beta1,
                cfg.train.adam_beta2, cfg.train.adam_epsilon);
      if (!state.params.all_finite()) {
        throw NonFiniteLossError(dump_batch(batch, epoch, static_cast<int>(step)));
      }
      state.global_step += 1;

      json per_task = json::object();
      for (std::size_t t = 0; t < kNumTasks; ++t) {
        if (loss.task_count[t] > 0) {
          per_task[task_name(static_cast<Task>(t))] = loss.task_mean[t];
        }
      }
      emit({{"step", state.global_step},
            {"total_loss", loss.total},
            {"loss_per_task", std::move(per_task)},
            {"lr", lr}});
    }

    const MetricReport val_report = evaluate_groups(state.params, model_cfg, vocab,
                                                    val_groups, cfg.train.max_len);
    emit({{"epoch", epoch}, {"val_metrics", metric_report_to_json(val_report)}});

    if (val_report.r_at_1 > state.best_val_r1) {
      state.best_val_r1 = val_report.r_at_1;
      state.best_epoch = epoch;
      state.stale_epochs = 0;
      result.best_params = state.params;
      result.best_epoch = epoch;
      result.best_val_r1 = val_report.r_at_1;
      if (sinks.on_best) sinks.on_best(state.params, epoch, val_report);
    } else {
      state.stale_epochs += 1;
    }
    state.next_epoch = epoch + 1;
    result.epochs_run += 1;
    if (state.stale_epochs >= cfg.train.early_stop_patience) break;
  }

  result.params = state.params;
  result.final_state = std::move(state);
  return result;
}

}  // namespace ums
