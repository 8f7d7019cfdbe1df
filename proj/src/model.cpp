#include "ums/model.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "ums/util.hpp"

namespace ums {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace {

constexpr double kLayerNormEps = 1e-12;
constexpr double kMaskValue = -1e30;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

double gelu_grad(double u) {
  const double phi_cdf = 0.5 * (1.0 + std::erf(u * M_SQRT1_2));
  const double phi_pdf = std::exp(-0.5 * u * u) * 0.3989422804014327;
  return phi_cdf + u * phi_pdf;
}

}  // namespace

void ModelConfig::validate() const {
  if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be positive");
  if (num_layers < 1) throw std::invalid_argument("num_layers must be positive");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be positive");
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("hidden_dim must be divisible by num_heads");
  }
  if (max_positions < 1) throw std::invalid_argument("max_positions must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("dropout_rate must be in [0, 1)");
  }
  if (vocab_size < static_cast<int>(kNumReservedTokens)) {
    throw std::invalid_argument("vocab_size must cover the reserved tokens");
  }
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.hidden_dim;
  const int f = cfg.resolved_ff_dim();
  ModelParams p;
  p.token_embedding = MatrixXd::Zero(cfg.vocab_size, d);
  p.position_embedding = MatrixXd::Zero(cfg.max_positions, d);
  p.segment_embedding = MatrixXd::Zero(2, d);
  p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (LayerParams& layer : p.layers) {
    layer.wq = MatrixXd::Zero(d, d);
    layer.wk = MatrixXd::Zero(d, d);
    layer.wv = MatrixXd::Zero(d, d);
    layer.wo = MatrixXd::Zero(d, d);
    layer.bq = VectorXd::Zero(d);
    layer.bk = VectorXd::Zero(d);
    layer.bv = VectorXd::Zero(d);
    layer.bo = VectorXd::Zero(d);
    layer.ln1_gamma = VectorXd::Zero(d);
    layer.ln1_beta = VectorXd::Zero(d);
    layer.w1 = MatrixXd::Zero(d, f);
    layer.b1 = VectorXd::Zero(f);
    layer.w2 = MatrixXd::Zero(f, d);
    layer.b2 = VectorXd::Zero(d);
    layer.ln2_gamma = VectorXd::Zero(d);
    layer.ln2_beta = VectorXd::Zero(d);
  }
  for (HeadParams& head : p.heads) {
    head.w = VectorXd::Zero(d);
    head.b = 0.0;
  }
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  ModelParams p = zeros(cfg);
  auto fill_normal = [&rng](MatrixXd& m) {
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) {
        m(r, c) = rng.truncated_normal(0.0, 0.02);
      }
    }
  };
  auto fill_normal_vec = [&rng](VectorXd& v) {
    for (Index i = 0; i < v.size(); ++i) v(i) = rng.truncated_normal(0.0, 0.02);
  };
  fill_normal(p.token_embedding);
  fill_normal(p.position_embedding);
  fill_normal(p.segment_embedding);
  for (LayerParams& layer : p.layers) {
    fill_normal(layer.wq);
    fill_normal(layer.wk);
    fill_normal(layer.wv);
    fill_normal(layer.wo);
    layer.ln1_gamma.setOnes();
    layer.ln2_gamma.setOnes();
    fill_normal(layer.w1);
    fill_normal(layer.w2);
  }
  for (HeadParams& head : p.heads) fill_normal_vec(head.w);
  return p;
}

void ModelParams::set_zero() {
  visit_tensors(*this, [](const std::string&, double* data, Index rows, Index cols) {
    std::fill(data, data + rows * cols, 0.0);
  });
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit_tensors(const_cast<ModelParams&>(*this),
                [&ok](const std::string&, double* data, Index rows, Index cols) {
                  const Index n = rows * cols;
                  for (Index i = 0; i < n; ++i) {
                    if (!std::isfinite(data[i])) {
                      ok = false;
                      return;
                    }
                  }
                });
  return ok;
}

void visit_tensors(ModelParams& p, const TensorVisitor& fn) {
  fn("token_embedding", p.token_embedding.data(), p.token_embedding.rows(),
     p.token_embedding.cols());
  fn("position_embedding", p.position_embedding.data(), p.position_embedding.rows(),
     p.position_embedding.cols());
  fn("segment_embedding", p.segment_embedding.data(), p.segment_embedding.rows(),
     p.segment_embedding.cols());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    LayerParams& l = p.layers[i];
    const std::string prefix = "layers." + std::to_string(i) + ".";
    fn(prefix + "wq", l.wq.data(), l.wq.rows(), l.wq.cols());
    fn(prefix + "bq", l.bq.data(), l.bq.size(), 1);
    fn(prefix + "wk", l.wk.data(), l.wk.rows(), l.wk.cols());
    fn(prefix + "bk", l.bk.data(), l.bk.size(), 1);
    fn(prefix + "wv", l.wv.data(), l.wv.rows(), l.wv.cols());
    fn(prefix + "bv", l.bv.data(), l.bv.size(), 1);
    fn(prefix + "wo", l.wo.data(), l.wo.rows(), l.wo.cols());
    fn(prefix + "bo", l.bo.data(), l.bo.size(), 1);
    fn(prefix + "ln1_gamma", l.ln1_gamma.data(), l.ln1_gamma.size(), 1);
    fn(prefix + "ln1_beta", l.ln1_beta.data(), l.ln1_beta.size(), 1);
    fn(prefix + "w1", l.w1.data(), l.w1.rows(), l.w1.cols());
    fn(prefix + "b1", l.b1.data(), l.b1.size(), 1);
    fn(prefix + "w2", l.w2.data(), l.w2.rows(), l.w2.cols());
    fn(prefix + "b2", l.b2.data(), l.b2.size(), 1);
    fn(prefix + "ln2_gamma", l.ln2_gamma.data(), l.ln2_gamma.size(), 1);
    fn(prefix + "ln2_beta", l.ln2_beta.data(), l.ln2_beta.size(), 1);
  }
  for (std::size_t i = 0; i < kNumTasks; ++i) {
    HeadParams& h = p.heads[i];
    const std::string prefix = "heads." + task_name(static_cast<Task>(i)) + ".";
    fn(prefix + "w", h.w.data(), h.w.size(), 1);
    fn(prefix + "b", &h.b, 1, 1);
  }
}

namespace {

struct LayerTrace {
  MatrixXd x_in;               // T x d
  MatrixXd q, k, v;            // T x d
  std::vector<MatrixXd> attn;  // per head, T x T, post softmax
  MatrixXd ctx;                // T x d
  MatrixXd drop1;              // scaled keep mask; empty when dropout is off
  MatrixXd s1;                 // residual sum, pre LN1
  MatrixXd xhat1;
  VectorXd rstd1;
  MatrixXd h1;                 // post LN1
  MatrixXd u;                  // T x f, pre gelu
  MatrixXd g;                  // gelu(u)
  MatrixXd drop2;
  MatrixXd xhat2;
  VectorXd rstd2;
};

struct ForwardTrace {
  MatrixXd x0;
  RowVectorXd key_mask;  // 0 or kMaskValue per key position
  std::vector<LayerTrace> layers;
};

MatrixXd dropout_mask(Index rows, Index cols, double rate, Rng& rng) {
  MatrixXd mask(rows, cols);
  const double scale = 1.0 / (1.0 - rate);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      mask(r, c) = rng.next_double() >= rate ? scale : 0.0;
    }
  }
  return mask;
}

void layer_norm_rows(const MatrixXd& x, const VectorXd& gamma, const VectorXd& beta,
                     MatrixXd& xhat, VectorXd& rstd, MatrixXd& out) {
  const Index t_len = x.rows();
  const Index d = x.cols();
  xhat.resize(t_len, d);
  rstd.resize(t_len);
  out.resize(t_len, d);
  for (Index t = 0; t < t_len; ++t) {
    const double mean = x.row(t).mean();
    const double var = (x.row(t).array() - mean).square().mean();
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd(t) = r;
    xhat.row(t) = (x.row(t).array() - mean) * r;
    out.row(t) = xhat.row(t).cwiseProduct(gamma.transpose()) + beta.transpose();
  }
}

// dX for y = LN(x); accumulates dgamma/dbeta.
MatrixXd layer_norm_backward(const MatrixXd& dy, const MatrixXd& xhat,
                             const VectorXd& rstd, const VectorXd& gamma,
                             VectorXd& dgamma, VectorXd& dbeta) {
  const Index t_len = dy.rows();
  const Index d = dy.cols();
  MatrixXd dx(t_len, d);
  for (Index t = 0; t < t_len; ++t) {
    dgamma += dy.row(t).cwiseProduct(xhat.row(t)).transpose();
    dbeta += dy.row(t).transpose();
    const RowVectorXd dxhat = dy.row(t).cwiseProduct(gamma.transpose());
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(t)).mean();
    dx.row(t) = rstd(t) * (dxhat.array() - m1 - xhat.row(t).array() * m2);
  }
  return dx;
}

MatrixXd forward_hidden(const ModelParams& params, const ModelConfig& cfg,
                        const EncodedSequence& seq, bool train_mode, Rng* dropout_rng,
                        ForwardTrace* trace) {
  const Index t_len = static_cast<Index>(seq.length());
  const Index d = cfg.hidden_dim;
  const int heads = cfg.num_heads;
  const Index dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  if (t_len < 1) throw std::invalid_argument("encode: empty sequence");
  if (t_len > cfg.max_positions) {
    throw std::invalid_argument("encode: sequence length " + std::to_string(t_len) +
                                " exceeds max_positions " +
                                std::to_string(cfg.max_positions));
  }
  if (seq.segment_ids.size() != seq.token_ids.size() ||
      seq.positions.size() != seq.token_ids.size()) {
    throw std::invalid_argument("encode: ragged sequence fields");
  }

  const bool use_dropout = train_mode && cfg.dropout_rate > 0.0;
  if (use_dropout && dropout_rng == nullptr) {
    throw std::invalid_argument("encode: train_mode dropout requires an rng");
  }

  MatrixXd x(t_len, d);
  RowVectorXd key_mask(t_len);
  for (Index t = 0; t < t_len; ++t) {
    const int tok = seq.token_ids[static_cast<std::size_t>(t)];
    const int pos = seq.positions[static_cast<std::size_t>(t)];
    const int seg = seq.segment_ids[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw std::invalid_argument("encode: token id out of range");
    }
    if (pos < 0 || pos >= cfg.max_positions) {
      throw std::invalid_argument("encode: position id out of range");
    }
    if (seg != 0 && seg != 1) throw std::invalid_argument("encode: bad segment id");
    x.row(t) = params.token_embedding.row(tok) + params.position_embedding.row(pos) +
               params.segment_embedding.row(seg);
    key_mask(t) = tok == kPadId ? kMaskValue : 0.0;
  }
  if (trace != nullptr) {
    trace->x0 = x;
    trace->key_mask = key_mask;
    trace->layers.clear();
    trace->layers.resize(params.layers.size());
  }

  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const LayerParams& layer = params.layers[li];
    LayerTrace local;
    LayerTrace& lt = trace != nullptr ? trace->layers[li] : local;
    lt.x_in = x;

    lt.q = x * layer.wq;
    lt.q.rowwise() += layer.bq.transpose();
    lt.k = x * layer.wk;
    lt.k.rowwise() += layer.bk.transpose();
    lt.v = x * layer.wv;
    lt.v.rowwise() += layer.bv.transpose();

    lt.attn.resize(static_cast<std::size_t>(heads));
    lt.ctx.resize(t_len, d);
    for (int h = 0; h < heads; ++h) {
      const auto qh = lt.q.middleCols(h * dh, dh);
      const auto kh = lt.k.middleCols(h * dh, dh);
      const auto vh = lt.v.middleCols(h * dh, dh);
      MatrixXd scores = qh * kh.transpose() * inv_sqrt_dh;
      scores.rowwise() += key_mask;
      for (Index t = 0; t < t_len; ++t) {
        const double row_max = scores.row(t).maxCoeff();
        scores.row(t) = (scores.row(t).array() - row_max).exp();
        scores.row(t) /= scores.row(t).sum();
      }
      lt.attn[static_cast<std::size_t>(h)] = std::move(scores);
      lt.ctx.middleCols(h * dh, dh) = lt.attn[static_cast<std::size_t>(h)] * vh;
    }

    MatrixXd attn_out = lt.ctx * layer.wo;
    attn_out.rowwise() += layer.bo.transpose();
    if (use_dropout) {
      lt.drop1 = dropout_mask(t_len, d, cfg.dropout_rate, *dropout_rng);
      attn_out = attn_out.cwiseProduct(lt.drop1);
    }
    lt.s1 = lt.x_in + attn_out;
    layer_norm_rows(lt.s1, layer.ln1_gamma, layer.ln1_beta, lt.xhat1, lt.rstd1, lt.h1);

    lt.u = lt.h1 * layer.w1;
    lt.u.rowwise() += layer.b1.transpose();
    lt.g = lt.u.unaryExpr([](double v) { return gelu(v); });
    MatrixXd ff = lt.g * layer.w2;
    ff.rowwise() += layer.b2.transpose();
    if (use_dropout) {
      lt.drop2 = dropout_mask(t_len, d, cfg.dropout_rate, *dropout_rng);
      ff = ff.cwiseProduct(lt.drop2);
    }
    MatrixXd s2 = lt.h1 + ff;
    MatrixXd h2;
    layer_norm_rows(s2, layer.ln2_gamma, layer.ln2_beta, lt.xhat2, lt.rstd2, h2);
    x = std::move(h2);
  }
  return x;
}

// Propagates d_hidden back through the encoder, accumulating into grads.
void backward_hidden(const ModelParams& params, const ModelConfig& cfg,
                     const EncodedSequence& seq, const ForwardTrace& trace,
                     MatrixXd d_hidden, ModelParams& grads) {
  const Index t_len = static_cast<Index>(seq.length());
  const Index d = cfg.hidden_dim;
  const int heads = cfg.num_heads;
  const Index dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const LayerParams& layer = params.layers[li];
    const LayerTrace& lt = trace.layers[li];
    LayerParams& gl = grads.layers[li];

    // LN2
    MatrixXd ds2 = layer_norm_backward(d_hidden, lt.xhat2, lt.rstd2, layer.ln2_gamma,
                                       gl.ln2_gamma, gl.ln2_beta);
    // Feed-forward branch
    MatrixXd dff = ds2;
    if (lt.drop2.size() != 0) dff = dff.cwiseProduct(lt.drop2);
    gl.b2 += dff.colwise().sum().transpose();
    gl.w2 += lt.g.transpose() * dff;
    MatrixXd dg = dff * layer.w2.transpose();
    MatrixXd du = dg.cwiseProduct(lt.u.unaryExpr([](double v) { return gelu_grad(v); }));
    gl.b1 += du.colwise().sum().transpose();
    gl.w1 += lt.h1.transpose() * du;
    MatrixXd dh1 = ds2 + du * layer.w1.transpose();

    // LN1
    MatrixXd ds1 = layer_norm_backward(dh1, lt.xhat1, lt.rstd1, layer.ln1_gamma,
                                       gl.ln1_gamma, gl.ln1_beta);
    // Attention branch
    MatrixXd dattn_out = ds1;
    if (lt.drop1.size() != 0) dattn_out = dattn_out.cwiseProduct(lt.drop1);
    gl.bo += dattn_out.colwise().sum().transpose();
    gl.wo += lt.ctx.transpose() * dattn_out;
    MatrixXd dctx = dattn_out * layer.wo.transpose();

    MatrixXd dq = MatrixXd::Zero(t_len, d);
    MatrixXd dk = MatrixXd::Zero(t_len, d);
    MatrixXd dv = MatrixXd::Zero(t_len, d);
    for (int h = 0; h < heads; ++h) {
      const MatrixXd& a = lt.attn[static_cast<std::size_t>(h)];
      const auto qh = lt.q.middleCols(h * dh, dh);
      const auto kh = lt.k.middleCols(h * dh, dh);
      const auto vh = lt.v.middleCols(h * dh, dh);
      const auto dctx_h = dctx.middleCols(h * dh, dh);

      MatrixXd da = dctx_h * vh.transpose();  // T x T
      dv.middleCols(h * dh, dh) = a.transpose() * dctx_h;
      MatrixXd ds(t_len, t_len);
      for (Index t = 0; t < t_len; ++t) {
        const double dot = da.row(t).cwiseProduct(a.row(t)).sum();
        ds.row(t) = (a.row(t).array() * (da.row(t).array() - dot)).matrix();
      }
      ds *= inv_sqrt_dh;
      dq.middleCols(h * dh, dh) = ds * kh;
      dk.middleCols(h * dh, dh) = ds.transpose() * qh;
    }

    gl.bq += dq.colwise().sum().transpose();
    gl.wq += lt.x_in.transpose() * dq;
    gl.bk += dk.colwise().sum().transpose();
    gl.wk += lt.x_in.transpose() * dk;
    gl.bv += dv.colwise().sum().transpose();
    gl.wv += lt.x_in.transpose() * dv;

    d_hidden = ds1 + dq * layer.wq.transpose() + dk * layer.wk.transpose() +
               dv * layer.wv.transpose();
  }

  for (Index t = 0; t < t_len; ++t) {
    const int tok = seq.token_ids[static_cast<std::size_t>(t)];
    const int pos = seq.positions[static_cast<std::size_t>(t)];
    const int seg = seq.segment_ids[static_cast<std::size_t>(t)];
    grads.token_embedding.row(tok) += d_hidden.row(t);
    grads.position_embedding.row(pos) += d_hidden.row(t);
    grads.segment_embedding.row(seg) += d_hidden.row(t);
  }
}

// Forward + backward for one sample. task_weight is 1/N_task; returns the
// unweighted per-sample loss (mean BCE over candidates).
double backprop_sample(const ModelParams& params, const ModelConfig& cfg,
                       const UmsSample& sample, double task_weight, bool train_mode,
                       ModelParams& grads) {
  Rng dropout_rng(sample.meta.dropout_seed);
  ForwardTrace trace;
  const MatrixXd hidden =
      forward_hidden(params, cfg, sample.seq, train_mode, &dropout_rng, &trace);

  const HeadParams& head = params.heads[static_cast<std::size_t>(sample.task)];
  HeadParams& ghead = grads.heads[static_cast<std::size_t>(sample.task)];
  const std::size_t n_cand = sample.seq.candidate_positions.size();
  if (n_cand == 0) throw std::invalid_argument("sample has no candidate positions");
  const double inv_cand = 1.0 / static_cast<double>(n_cand);

  MatrixXd d_hidden = MatrixXd::Zero(hidden.rows(), hidden.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < n_cand; ++i) {
    const Index pos = sample.seq.candidate_positions[i];
    const double y = static_cast<double>(sample.seq.targets[i]);
    const double z = head.w.dot(hidden.row(pos).transpose()) + head.b;
    const double p_raw = sigmoid(z);
    const double p = std::clamp(p_raw, kProbEpsilon, 1.0 - kProbEpsilon);
    loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p)) * inv_cand;

    // Flat where the clamp is active; otherwise d(bce)/dz = p - y.
    const bool clamped = p_raw <= kProbEpsilon || p_raw >= 1.0 - kProbEpsilon;
    const double dz = clamped ? 0.0 : (p_raw - y) * inv_cand * task_weight;
    if (dz != 0.0) {
      ghead.w += dz * hidden.row(pos).transpose();
      ghead.b += dz;
      d_hidden.row(pos) += dz * head.w.transpose();
    }
  }
  backward_hidden(params, cfg, sample.seq, trace, std::move(d_hidden), grads);
  return loss;
}

void add_params(ModelParams& dst, const ModelParams& src) {
  std::vector<std::pair<double*, Index>> dst_buffers;
  visit_tensors(dst, [&dst_buffers](const std::string&, double* data, Index r, Index c) {
    dst_buffers.emplace_back(data, r * c);
  });
  std::size_t i = 0;
  visit_tensors(const_cast<ModelParams&>(src),
                [&dst_buffers, &i](const std::string&, double* data, Index rows,
                                   Index cols) {
                  auto [dptr, n] = dst_buffers[i++];
                  (void)rows;
                  (void)cols;
                  for (Index j = 0; j < n; ++j) dptr[j] += data[j];
                });
}

}  // namespace

MatrixXd encode(const ModelParams& params, const ModelConfig& cfg,
                const EncodedSequence& seq, bool train_mode, Rng* dropout_rng) {
  return forward_hidden(params, cfg, seq, train_mode, dropout_rng, nullptr);
}

double score_response(const ModelParams& params, const ModelConfig& cfg,
                      const EncodedSequence& seq) {
  const MatrixXd hidden = encode(params, cfg, seq);
  const HeadParams& head = params.heads[static_cast<std::size_t>(Task::response)];
  return sigmoid(head.w.dot(hidden.row(0).transpose()) + head.b);
}

std::vector<double> score_candidates(const ModelParams& params, const ModelConfig& cfg,
                                     const UmsSample& sample) {
  if (sample.task == Task::response) {
    throw std::invalid_argument("score_candidates: use score_response for response samples");
  }
  const MatrixXd hidden = encode(params, cfg, sample.seq);
  const HeadParams& head = params.heads[static_cast<std::size_t>(sample.task)];
  std::vector<double> probs;
  probs.reserve(sample.seq.candidate_positions.size());
  for (const int pos : sample.seq.candidate_positions) {
    probs.push_back(sigmoid(head.w.dot(hidden.row(pos).transpose()) + head.b));
  }
  return probs;
}

LossResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg,
                          std::span<const UmsSample> batch, bool train_mode,
                          int workers) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");

  std::array<int, kNumTasks> counts{};
  for (const UmsSample& s : batch) counts[static_cast<std::size_t>(s.task)] += 1;
  std::array<double, kNumTasks> weights{};
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    weights[t] = counts[t] > 0 ? 1.0 / static_cast<double>(counts[t]) : 0.0;
  }

  const std::size_t n = batch.size();
  const int w_count = std::clamp<int>(workers, 1, static_cast<int>(n));
  std::vector<double> sample_loss(n, 0.0);
  std::vector<ModelParams> buffers;
  buffers.reserve(static_cast<std::size_t>(w_count));
  for (int w = 0; w < w_count; ++w) buffers.push_back(ModelParams::zeros(cfg));

  auto run_chunk = [&](int w) {
    const std::size_t lo = n * static_cast<std::size_t>(w) / static_cast<std::size_t>(w_count);
    const std::size_t hi =
        n * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(w_count);
    for (std::size_t i = lo; i < hi; ++i) {
      sample_loss[i] =
          backprop_sample(params, cfg, batch[i],
                          weights[static_cast<std::size_t>(batch[i].task)], train_mode,
                          buffers[static_cast<std::size_t>(w)]);
    }
  };
  std::vector<std::thread> threads;
  for (int w = 1; w < w_count; ++w) threads.emplace_back(run_chunk, w);
  run_chunk(0);
  for (std::thread& t : threads) t.join();

  LossResult result;
  result.grads = std::move(buffers[0]);
  for (int w = 1; w < w_count; ++w) add_params(result.grads, buffers[static_cast<std::size_t>(w)]);

  std::array<double, kNumTasks> sums{};
  for (std::size_t i = 0; i < n; ++i) {
    sums[static_cast<std::size_t>(batch[i].task)] += sample_loss[i];
  }
  result.task_count = counts;
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    if (counts[t] > 0) {
      result.task_mean[t] = sums[t] / static_cast<double>(counts[t]);
      result.total += result.task_mean[t];
    }
  }
  return result;
}

nlohmann::json tensors_to_json(const ModelParams& params) {
  nlohmann::json tensors = nlohmann::json::object();
  visit_tensors(const_cast<ModelParams&>(params),
                [&tensors](const std::string& name, double* data, Index rows, Index cols) {
                  std::vector<double> row_major;
                  row_major.reserve(static_cast<std::size_t>(rows * cols));
                  for (Index r = 0; r < rows; ++r) {
                    for (Index c = 0; c < cols; ++c) {
                      row_major.push_back(data[c * rows + r]);
                    }
                  }
                  tensors[name] = {{"shape", {rows, cols}}, {"data", std::move(row_major)}};
                });
  return tensors;
}

void tensors_from_json(ModelParams& params, const nlohmann::json& tensors,
                       const std::string& context) {
  std::size_t visited = 0;
  visit_tensors(params, [&](const std::string& name, double* data, Index rows, Index cols) {
    ++visited;
    if (!tensors.contains(name)) {
      throw ParseError(context + ": missing tensor '" + name + "'");
    }
    const nlohmann::json& jt = tensors.at(name);
    const auto shape = jt.at("shape").get<std::vector<Index>>();
    if (shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
      throw ParseError(context + ": shape mismatch for tensor '" + name + "'");
    }
    const nlohmann::json& jdata = jt.at("data");
    if (static_cast<Index>(jdata.size()) != rows * cols) {
      throw ParseError(context + ": data size mismatch for tensor '" + name + "'");
    }
    std::size_t i = 0;
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        data[c * rows + r] = jdata[i++].get<double>();
      }
    }
  });
  if (tensors.size() != visited) {
    throw ParseError(context + ": unknown tensors present");
  }
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"hidden_dim", cfg.hidden_dim},       {"num_layers", cfg.num_layers},
          {"num_heads", cfg.num_heads},         {"ff_dim", cfg.ff_dim},
          {"max_positions", cfg.max_positions}, {"dropout_rate", cfg.dropout_rate},
          {"vocab_size", cfg.vocab_size}};
}

ModelConfig model_config_from_json(const nlohmann::json& jc) {
  ModelConfig cfg;
  cfg.hidden_dim = jc.at("hidden_dim").get<int>();
  cfg.num_layers = jc.at("num_layers").get<int>();
  cfg.num_heads = jc.at("num_heads").get<int>();
  cfg.ff_dim = jc.at("ff_dim").get<int>();
  cfg.max_positions = jc.at("max_positions").get<int>();
  cfg.dropout_rate = jc.at("dropout_rate").get<double>();
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.validate();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams& params, const Vocab& vocab) {
  if (static_cast<int>(vocab.size()) != cfg.vocab_size) {
    throw std::invalid_argument("save_checkpoint: vocab size does not match config");
  }
  nlohmann::json doc;
  doc["format"] = "ums.checkpoint";
  doc["version"] = 1;
  doc["config"] = model_config_to_json(cfg);
  doc["vocab"] = vocab.tokens();
  doc["tensors"] = tensors_to_json(params);
  write_file(path, doc.dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": invalid checkpoint JSON: " + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "ums.checkpoint") {
    throw ParseError(path.string() + ": not a ums.checkpoint file");
  }
  if (doc.value("version", 0) != 1) {
    throw ParseError(path.string() + ": unsupported checkpoint version");
  }
  Checkpoint ckpt;
  ckpt.config = model_config_from_json(doc.at("config"));
  ckpt.vocab = Vocab::from_tokens(doc.at("vocab").get<std::vector<std::string>>());
  if (static_cast<int>(ckpt.vocab.size()) != ckpt.config.vocab_size) {
    throw ParseError(path.string() + ": vocab size does not match config");
  }
  ckpt.params = ModelParams::zeros(ckpt.config);
  tensors_from_json(ckpt.params, doc.at("tensors"), path.string());
  return ckpt;
}

}  // namespace ums
