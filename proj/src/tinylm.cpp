#include "cope/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cope/kernels.hpp"
#include "cope/random.hpp"

namespace cope {

namespace {

void fill_normal(std::vector<double>& v, Rng& rng, double stddev) {
  for (double& x : v) x = rng.normal(0.0, stddev);
}

void check_size(const std::vector<double>& v, std::size_t n, const char* name) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(n) +
                                " entries, got " + std::to_string(v.size()));
  }
}

void check_finite(std::span<const double> v, const char* name) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(name) + ": non-finite entry");
  }
}

// Sizes only; finiteness is left to validate().
void check_shapes(const ModelParams& p, const AdapterDelta* adapter) {
  const ModelDims& d = p.dims;
  check_size(p.embedding, d.vocab * d.embed, "embedding");
  check_size(p.hidden_w, d.hidden * d.input(), "hidden_w");
  check_size(p.hidden_b, d.hidden, "hidden_b");
  check_size(p.output_w, d.vocab * d.hidden, "output_w");
  check_size(p.output_b, d.vocab, "output_b");
  if (adapter == nullptr) return;
  const std::size_t r = adapter->rank;
  if (adapter->hidden.rows != d.hidden || adapter->hidden.cols != d.input() ||
      adapter->output.rows != d.vocab || adapter->output.cols != d.hidden) {
    throw std::invalid_argument("adapter shape does not match model");
  }
  check_size(adapter->hidden.a, d.hidden * r, "adapter hidden a");
  check_size(adapter->hidden.b, r * d.input(), "adapter hidden b");
  check_size(adapter->output.a, d.vocab * r, "adapter output a");
  check_size(adapter->output.b, r * d.hidden, "adapter output b");
}

LowRankFactor make_factor(std::size_t rows, std::size_t cols, std::size_t rank) {
  return {rows, cols, std::vector<double>(rows * rank, 0.0), std::vector<double>(rank * cols, 0.0)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

ModelParams ModelParams::zeros(const ModelDims& d) {
  ModelParams p;
  p.dims = d;
  p.embedding.assign(d.vocab * d.embed, 0.0);
  p.hidden_w.assign(d.hidden * d.input(), 0.0);
  p.hidden_b.assign(d.hidden, 0.0);
  p.output_w.assign(d.vocab * d.hidden, 0.0);
  p.output_b.assign(d.vocab, 0.0);
  return p;
}

ModelParams ModelParams::random(const ModelDims& d, std::uint64_t seed) {
  ModelParams p = zeros(d);
  Rng rng(seed);
  fill_normal(p.embedding, rng, 0.5);
  fill_normal(p.hidden_w, rng, 1.0 / std::sqrt(static_cast<double>(d.input())));
  fill_normal(p.output_w, rng, 1.0 / std::sqrt(static_cast<double>(d.hidden)));
  return p;
}

std::vector<std::span<double>> ModelParams::tensors() {
  return {embedding, hidden_w, hidden_b, output_w, output_b};
}

std::vector<std::span<const double>> ModelParams::tensors() const {
  return {embedding, hidden_w, hidden_b, output_w, output_b};
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

void ModelParams::validate() const {
  if (dims.vocab < 4 || dims.window == 0 || dims.embed == 0 || dims.hidden == 0) {
    throw std::invalid_argument("model dims must be positive and vocab >= 4");
  }
  if (dims.pad >= dims.vocab) throw std::invalid_argument("pad id outside vocabulary");
  check_size(embedding, dims.vocab * dims.embed, "embedding");
  check_size(hidden_w, dims.hidden * dims.input(), "hidden_w");
  check_size(hidden_b, dims.hidden, "hidden_b");
  check_size(output_w, dims.vocab * dims.hidden, "output_w");
  check_size(output_b, dims.vocab, "output_b");
  for (auto t : tensors()) check_finite(t, "model params");
}

AdapterDelta AdapterDelta::zeros(const ModelDims& d, std::size_t rank, double scale) {
  AdapterDelta a;
  a.rank = rank;
  a.scale = scale;
  a.hidden = make_factor(d.hidden, d.input(), rank);
  a.output = make_factor(d.vocab, d.hidden, rank);
  a.validate(d);
  return a;
}

AdapterDelta AdapterDelta::init(const ModelDims& d, std::size_t rank, double scale,
                                std::uint64_t seed) {
  AdapterDelta a = zeros(d, rank, scale);
  Rng rng(seed);
  fill_normal(a.hidden.b, rng, 1.0 / std::sqrt(static_cast<double>(a.hidden.cols)));
  fill_normal(a.output.b, rng, 1.0 / std::sqrt(static_cast<double>(a.output.cols)));
  return a;
}

AdapterDelta AdapterDelta::random(const ModelDims& d, std::size_t rank, double scale,
                                  std::uint64_t seed, double stddev) {
  AdapterDelta a = zeros(d, rank, scale);
  Rng rng(seed);
  for (auto t : a.tensors()) {
    for (double& x : t) x = rng.normal(0.0, stddev);
  }
  return a;
}

std::vector<std::span<double>> AdapterDelta::tensors() {
  return {hidden.a, hidden.b, output.a, output.b};
}

std::vector<std::span<const double>> AdapterDelta::tensors() const {
  return {hidden.a, hidden.b, output.a, output.b};
}

std::size_t AdapterDelta::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

void AdapterDelta::validate(const ModelDims& d) const {
  auto check = [&](const LowRankFactor& f, std::size_t rows, std::size_t cols, const char* name) {
    if (f.rows != rows || f.cols != cols) {
      throw std::invalid_argument(std::string("adapter ") + name + ": shape does not match model");
    }
    if (rank < 1 || rank >= std::min(rows, cols)) {
      throw std::invalid_argument(std::string("adapter ") + name + ": rank " +
                                  std::to_string(rank) + " must be in [1, " +
                                  std::to_string(std::min(rows, cols)) + ")");
    }
    check_size(f.a, rows * rank, "adapter a");
    check_size(f.b, rank * cols, "adapter b");
    check_finite(f.a, "adapter a");
    check_finite(f.b, "adapter b");
  };
  check(hidden, d.hidden, d.input(), "hidden");
  check(output, d.vocab, d.hidden, "output");
  if (!std::isfinite(scale)) throw std::invalid_argument("adapter scale must be finite");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw std::invalid_argument("warmup_ratio must be in [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

void forward_into(const ModelParams& p, const AdapterDelta* adapter,
                  std::span<const TokenId> context, Workspace& ws) {
  const ModelDims& d = p.dims;
  const std::size_t in = d.input();
  check_shapes(p, adapter);

  ws.window.assign(d.window, d.pad);
  const std::size_t take = std::min(context.size(), d.window);
  for (std::size_t i = 0; i < take; ++i) {
    const TokenId id = context[context.size() - take + i];
    if (id >= d.vocab) {
      throw std::invalid_argument("context token " + std::to_string(id) +
                                  " outside model vocabulary of size " + std::to_string(d.vocab));
    }
    ws.window[d.window - take + i] = id;
  }

  ws.x.resize(in);
  for (std::size_t i = 0; i < d.window; ++i) {
    std::copy_n(p.embedding.begin() + static_cast<std::ptrdiff_t>(ws.window[i] * d.embed), d.embed,
                ws.x.begin() + static_cast<std::ptrdiff_t>(i * d.embed));
  }

  ws.pre.assign(p.hidden_b.begin(), p.hidden_b.end());
  kernels::gemv(p.hidden_w, d.hidden, in, ws.x, ws.pre);
  if (adapter != nullptr) {
    const std::size_t r = adapter->rank;
    ws.hidden_u.assign(r, 0.0);
    kernels::gemv(adapter->hidden.b, r, in, ws.x, ws.hidden_u);
    for (double& u : ws.hidden_u) u *= adapter->scale;
    kernels::gemv(adapter->hidden.a, d.hidden, r, ws.hidden_u, ws.pre);
  }

  ws.h.resize(d.hidden);
  for (std::size_t i = 0; i < d.hidden; ++i) ws.h[i] = std::tanh(ws.pre[i]);

  ws.logits.assign(p.output_b.begin(), p.output_b.end());
  kernels::gemv(p.output_w, d.vocab, d.hidden, ws.h, ws.logits);
  if (adapter != nullptr) {
    const std::size_t r = adapter->rank;
    ws.output_u.assign(r, 0.0);
    kernels::gemv(adapter->output.b, r, d.hidden, ws.h, ws.output_u);
    for (double& u : ws.output_u) u *= adapter->scale;
    kernels::gemv(adapter->output.a, d.vocab, r, ws.output_u, ws.logits);
  }

  const double lse = logsumexp(ws.logits);
  if (!std::isfinite(lse)) throw std::invalid_argument("forward: non-finite logits");
  ws.log_probs.resize(d.vocab);
  for (std::size_t i = 0; i < d.vocab; ++i) ws.log_probs[i] = std::min(ws.logits[i] - lse, 0.0);
}

LogProbVector forward(const ModelParams& params, const AdapterDelta* adapter,
                      std::span<const TokenId> context) {
  Workspace ws;
  forward_into(params, adapter, context, ws);
  return LogProbVector::from_logits(ws.logits);
}

void accumulate_log_prob_grad(const ModelParams& p, const AdapterDelta* adapter, Workspace& ws,
                              TokenId target, double coeff, ModelParams* pg, AdapterDelta* ag) {
  const ModelDims& d = p.dims;
  const std::size_t in = d.input();

  // d log p_target / d logits = onehot(target) - softmax
  ws.dz.resize(d.vocab);
  for (std::size_t j = 0; j < d.vocab; ++j) ws.dz[j] = -coeff * std::exp(ws.log_probs[j]);
  ws.dz[target] += coeff;

  if (pg != nullptr) {
    kernels::ger(1.0, ws.dz, ws.h, pg->output_w, d.vocab, d.hidden);
    kernels::axpy(1.0, ws.dz, pg->output_b);
  }

  ws.dh.assign(d.hidden, 0.0);
  kernels::gemv_t(p.output_w, d.vocab, d.hidden, ws.dz, ws.dh);
  if (adapter != nullptr) {
    const std::size_t r = adapter->rank;
    ws.g.assign(r, 0.0);
    kernels::gemv_t(adapter->output.a, d.vocab, r, ws.dz, ws.g);
    if (ag != nullptr) {
      kernels::ger(1.0, ws.dz, ws.output_u, ag->output.a, d.vocab, r);
      kernels::ger(adapter->scale, ws.g, ws.h, ag->output.b, r, d.hidden);
    }
    for (double& v : ws.g) v *= adapter->scale;
    kernels::gemv_t(adapter->output.b, r, d.hidden, ws.g, ws.dh);
  }

  ws.da.resize(d.hidden);
  for (std::size_t i = 0; i < d.hidden; ++i) ws.da[i] = ws.dh[i] * (1.0 - ws.h[i] * ws.h[i]);

  if (pg != nullptr) {
    kernels::ger(1.0, ws.da, ws.x, pg->hidden_w, d.hidden, in);
    kernels::axpy(1.0, ws.da, pg->hidden_b);
    ws.dx.assign(in, 0.0);
    kernels::gemv_t(p.hidden_w, d.hidden, in, ws.da, ws.dx);
  }
  if (adapter != nullptr) {
    const std::size_t r = adapter->rank;
    ws.g.assign(r, 0.0);
    kernels::gemv_t(adapter->hidden.a, d.hidden, r, ws.da, ws.g);
    if (ag != nullptr) {
      kernels::ger(1.0, ws.da, ws.hidden_u, ag->hidden.a, d.hidden, r);
      kernels::ger(adapter->scale, ws.g, ws.x, ag->hidden.b, r, in);
    }
    if (pg != nullptr) {
      for (double& v : ws.g) v *= adapter->scale;
      kernels::gemv_t(adapter->hidden.b, r, in, ws.g, ws.dx);
    }
  }

  if (pg != nullptr) {
    for (std::size_t i = 0; i < d.window; ++i) {
      std::span<double> row(pg->embedding.data() + ws.window[i] * d.embed, d.embed);
      kernels::axpy(1.0, std::span<const double>(ws.dx).subspan(i * d.embed, d.embed), row);
    }
  }
}

TinyLm::TinyLm(const Vocabulary& vocab, const ModelParams& params, const AdapterDelta* adapter)
    : vocab_(&vocab), params_(&params), adapter_(adapter) {
  if (params.dims.vocab != vocab.size()) {
    throw std::invalid_argument("model vocabulary size " + std::to_string(params.dims.vocab) +
                                " does not match vocabulary of size " +
                                std::to_string(vocab.size()));
  }
  if (params.dims.pad != vocab.pad()) throw std::invalid_argument("model pad id != vocabulary pad");
  if (adapter != nullptr) adapter->validate(params.dims);
}

LogProbVector TinyLm::next_log_probs(std::span<const TokenId> context) const {
  return forward(*params_, adapter_, context);
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning
// ---------------------------------------------------------------------------

namespace {

double sft_impl(const ModelParams& p, const AdapterDelta* adapter, std::span<const Example> batch,
                ModelParams* pg, AdapterDelta* ag) {
  std::size_t tokens = 0;
  for (const Example& ex : batch) tokens += ex.target.size();
  if (tokens == 0) throw TrainingError("sft: batch has no target tokens");
  const double inv = 1.0 / static_cast<double>(tokens);
  const bool want_grad = pg != nullptr || ag != nullptr;

  Workspace ws;
  TokenSequence context;
  double total = 0.0;
  for (const Example& ex : batch) {
    context.assign(ex.prompt.begin(), ex.prompt.end());
    for (TokenId y : ex.target) {
      forward_into(p, adapter, context, ws);
      if (y >= p.dims.vocab) throw std::invalid_argument("target token outside vocabulary");
      const double lp = ws.log_probs[y];
      total -= floored(lp);
      if (want_grad && lp >= kLogProbFloor) {
        accumulate_log_prob_grad(p, adapter, ws, y, -inv, pg, ag);
      }
      context.push_back(y);
    }
  }
  return total * inv;
}

template <class P>
P zeros_like(const P& p) {
  P out = p;
  for (auto t : out.tensors()) std::fill(t.begin(), t.end(), 0.0);
  return out;
}

std::vector<std::span<const double>> as_const(std::vector<std::span<double>> v) {
  return {v.begin(), v.end()};
}

}  // namespace

double sft_loss(const ModelParams& params, const AdapterDelta* adapter,
                std::span<const Example> batch) {
  return sft_impl(params, adapter, batch, nullptr, nullptr);
}

double sft_loss_and_grad(const ModelParams& params, const AdapterDelta* adapter,
                         std::span<const Example> batch, ModelParams* params_grad,
                         AdapterDelta* adapter_grad) {
  return sft_impl(params, adapter, batch, params_grad, adapter_grad);
}

void sgd_update(std::vector<std::span<double>> params, std::vector<std::span<const double>> grads,
                double learning_rate, double weight_decay) {
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::span<double> w = params[t];
    std::span<const double> g = grads[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= learning_rate * (g[i] + weight_decay * w[i]);
    }
  }
}

namespace {

// Non-finite activations surface as invalid_argument from forward.
template <class F>
double checked_loss(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw TrainingError(std::string("sft_step: ") + e.what());
  }
}

}  // namespace

StepResult sft_step(ModelParams& params, AdapterDelta* adapter, std::span<const Example> batch,
                    const TrainConfig& cfg, double learning_rate) {
  if (batch.empty()) throw TrainingError("sft_step: empty batch");
  StepResult result;
  if (cfg.trainable == Trainable::adapter_only) {
    if (adapter == nullptr) throw TrainingError("sft_step: adapter_only mode without an adapter");
    AdapterDelta grad = zeros_like(*adapter);
    result.loss = checked_loss([&] { return sft_loss_and_grad(params, adapter, batch, nullptr, &grad); });
    if (!std::isfinite(result.loss)) {
      throw TrainingError("sft_step: non-finite loss " + std::to_string(result.loss));
    }
    sgd_update(adapter->tensors(), as_const(grad.tensors()), learning_rate, cfg.weight_decay);
  } else {
    ModelParams grad = zeros_like(params);
    result.loss = checked_loss([&] { return sft_loss_and_grad(params, adapter, batch, &grad, nullptr); });
    if (!std::isfinite(result.loss)) {
      throw TrainingError("sft_step: non-finite loss " + std::to_string(result.loss));
    }
    // Weight decay on the two weight matrices only; embeddings and biases are not decayed.
    const auto p = params.tensors();
    const auto g = as_const(grad.tensors());
    sgd_update({p[1], p[3]}, {g[1], g[3]}, learning_rate, cfg.weight_decay);
    sgd_update({p[0], p[2], p[4]}, {g[0], g[2], g[4]}, learning_rate, 0.0);
  }
  return result;
}

StepResult sft_step(ModelParams& params, AdapterDelta* adapter, std::span<const Example> batch,
                    const TrainConfig& cfg) {
  return sft_step(params, adapter, batch, cfg, cfg.learning_rate);
}

double scheduled_learning_rate(double base_lr, double warmup_ratio, std::size_t step,
                               std::size_t total_steps) {
  const auto warmup = static_cast<std::size_t>(
      std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const std::size_t decay = total_steps - warmup;
  return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(decay);
}

TrainReport train_sft(ModelParams& params, AdapterDelta* adapter, std::span<const Example> dataset,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw TrainingError("train_sft: empty dataset");

  TrainReport report;
  report.initial_loss = sft_loss(params, adapter, dataset);

  const std::size_t n = dataset.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<Example> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t b = 0; b < per_epoch; ++b) {
      batch.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(dataset[order[i]]);
      }
      const double lr = scheduled_learning_rate(cfg.learning_rate, cfg.warmup_ratio,
                                                report.steps, total);
      sft_step(params, adapter, batch, cfg, lr);
      ++report.steps;
    }
    report.epoch_losses.push_back(sft_loss(params, adapter, dataset));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<double()>& loss,
                           std::vector<std::span<double>> params,
                           std::vector<std::span<const double>> analytic,
                           const GradCheckOptions& options) {
  if (!(options.epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be > 0");
  if (params.size() != analytic.size()) throw std::invalid_argument("grad_check: layout mismatch");

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].size() != analytic[t].size()) {
      throw std::invalid_argument("grad_check: tensor size mismatch");
    }
    for (std::size_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (options.samples != 0 && options.samples < coords.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.samples; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(options.samples);
  }

  GradCheckResult result;
  for (auto [t, i] : coords) {
    double& w = params[t][i];
    const double saved = w;
    w = saved + options.epsilon;
    const double up = loss();
    w = saved - options.epsilon;
    const double down = loss();
    w = saved;
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double a = analytic[t][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
    ++result.checked;
  }
  result.passed = result.max_relative_error < options.tolerance;
  return result;
}

}  // namespace cope
