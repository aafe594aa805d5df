#pragma once

// Fixed-window feed-forward neural LM (embedding -> tanh hidden -> softmax)
// with optional low-rank adapters on the hidden and output matrices.
// Gradients are derived by hand; see accumulate_log_prob_grad.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cope/lmcore.hpp"

namespace cope {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t window = 8;
  std::size_t embed = 16;
  std::size_t hidden = 64;
  TokenId pad = 2;  // fills the window when the context is shorter than it

  std::size_t input() const { return window * embed; }
  bool operator==(const ModelDims&) const = default;
};

/// Frozen-or-trainable base weights.
struct ModelParams {
  ModelDims dims;
  std::vector<double> embedding;  // vocab x embed
  std::vector<double> hidden_w;   // hidden x (window * embed)
  std::vector<double> hidden_b;   // hidden
  std::vector<double> output_w;   // vocab x hidden
  std::vector<double> output_b;   // vocab

  static ModelParams zeros(const ModelDims& dims);
  /// Scaled-normal initialization; biases start at zero.
  static ModelParams random(const ModelDims& dims, std::uint64_t seed);

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;

  /// Throws std::invalid_argument on shape mismatch or non-finite entries.
  void validate() const;

  bool operator==(const ModelParams&) const = default;
};

/// W + scale * a * b with a: rows x rank, b: rank x cols.
struct LowRankFactor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;
  std::vector<double> b;

  bool operator==(const LowRankFactor&) const = default;
};

/// Per-user low-rank delta over the hidden and output matrices. Embeddings
/// are never adapted.
struct AdapterDelta {
  std::size_t rank = 0;
  double scale = 1.0;
  LowRankFactor hidden;  // hidden x input
  LowRankFactor output;  // vocab x hidden

  static AdapterDelta zeros(const ModelDims& dims, std::size_t rank, double scale);
  /// `b` drawn from N(0, 1/cols), `a` zero: the delta starts at exactly 0.
  static AdapterDelta init(const ModelDims& dims, std::size_t rank, double scale,
                           std::uint64_t seed);
  /// Both factors drawn from N(0, stddev^2). Test helper.
  static AdapterDelta random(const ModelDims& dims, std::size_t rank, double scale,
                             std::uint64_t seed, double stddev);

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;

  /// Checks 1 <= rank < min(rows, cols) for both factors and shapes vs dims.
  void validate(const ModelDims& dims) const;

  bool operator==(const AdapterDelta&) const = default;
};

enum class Trainable { full, adapter_only };

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.1;
  std::uint64_t seed = 0;
  Trainable trainable = Trainable::adapter_only;

  void validate() const;
};

/// One supervised pair: the model conditions on `prompt` and is scored on
/// every token of `target`.
struct Example {
  TokenSequence prompt;
  TokenSequence target;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scratch buffers for one forward/backward pass. Reused across tokens.
struct Workspace {
  std::vector<TokenId> window;
  std::vector<double> x;         // concatenated embeddings
  std::vector<double> pre;       // hidden pre-activation
  std::vector<double> h;         // tanh(pre)
  std::vector<double> hidden_u;  // scale * B_h x
  std::vector<double> output_u;  // scale * B_o h
  std::vector<double> logits;
  std::vector<double> log_probs;
  // backward
  std::vector<double> dz, dh, da, dx, g;
};

/// Runs the network on the last `window` tokens of `context` (left-padded
/// with dims.pad). Fills ws.log_probs.
void forward_into(const ModelParams& params, const AdapterDelta* adapter,
                  std::span<const TokenId> context, Workspace& ws);

/// Normalized next-token log-probabilities. With adapter == nullptr this is
/// the pure base model.
LogProbVector forward(const ModelParams& params, const AdapterDelta* adapter,
                      std::span<const TokenId> context);

/// After forward_into: adds coeff * d log p(target) / d theta into the given
/// gradient accumulators. Either accumulator may be null to skip it.
void accumulate_log_prob_grad(const ModelParams& params, const AdapterDelta* adapter,
                              Workspace& ws, TokenId target, double coeff,
                              ModelParams* params_grad, AdapterDelta* adapter_grad);

/// Non-owning LanguageModel view over base weights and an optional adapter.
class TinyLm final : public LanguageModel {
 public:
  TinyLm(const Vocabulary& vocab, const ModelParams& params,
         const AdapterDelta* adapter = nullptr);

  const Vocabulary& vocabulary() const override { return *vocab_; }
  LogProbVector next_log_probs(std::span<const TokenId> context) const override;

  const ModelParams& params() const { return *params_; }
  const AdapterDelta* adapter() const { return adapter_; }

 private:
  const Vocabulary* vocab_;
  const ModelParams* params_;
  const AdapterDelta* adapter_;
};

/// Mean per-token NLL (each token's log-prob floored at -50).
double sft_loss(const ModelParams& params, const AdapterDelta* adapter,
                std::span<const Example> batch);

/// sft_loss plus its gradient, accumulated into whichever of params_grad /
/// adapter_grad is non-null.
double sft_loss_and_grad(const ModelParams& params, const AdapterDelta* adapter,
                         std::span<const Example> batch, ModelParams* params_grad,
                         AdapterDelta* adapter_grad);

struct StepResult {
  double loss = 0.0;
};

/// One SGD step with decoupled weight decay on the trainable set selected by
/// cfg.trainable. In adapter_only mode `params` is left bit-identical.
/// Throws TrainingError on an empty batch or non-finite loss.
StepResult sft_step(ModelParams& params, AdapterDelta* adapter, std::span<const Example> batch,
                    const TrainConfig& cfg, double learning_rate);
StepResult sft_step(ModelParams& params, AdapterDelta* adapter, std::span<const Example> batch,
                    const TrainConfig& cfg);

/// Linear warm-up over ceil(warmup_ratio * total) steps, then linear decay
/// to zero.
double scheduled_learning_rate(double base_lr, double warmup_ratio, std::size_t step,
                               std::size_t total_steps);

/// Applies theta <- theta - lr * (grad + weight_decay * theta) tensor by tensor.
void sgd_update(std::vector<std::span<double>> params,
                std::vector<std::span<const double>> grads, double learning_rate,
                double weight_decay);

struct TrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;  // full-dataset loss after each epoch
  std::size_t steps = 0;
};

/// Epoch loop over seeded shuffles of `dataset`.
TrainReport train_sft(ModelParams& params, AdapterDelta* adapter, std::span<const Example> dataset,
                      const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  /// Number of scalars to probe; 0 probes every scalar.
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error of near-zero gradients.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares `analytic` against central differences of `loss` over the
/// scalars in `params` (same layout as `analytic`). Parameters are restored.
/// Relative error: |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<double()>& loss,
                           std::vector<std::span<double>> params,
                           std::vector<std::span<const double>> analytic,
                           const GradCheckOptions& options = {});

}  // namespace cope
