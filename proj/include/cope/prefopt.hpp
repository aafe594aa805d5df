#pragma once

// Best-of-K negative synthesis scored by the implicit user reward, preference
// dataset assembly and DPO training of the user adapter.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cope/decode.hpp"
#include "cope/lmcore.hpp"
#include "cope/tinylm.hpp"

namespace cope {

struct PreferenceTriple {
  TokenSequence prompt;
  TokenSequence chosen;    // the user's gold response
  TokenSequence rejected;  // synthesized negative
};

enum class SamplerKind { tam, oppu };
enum class ReferenceKind { oppu_snapshot, tam };

struct NegativeSynthesisConfig {
  std::size_t k = 3;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 64;
  SamplerKind sampler = SamplerKind::tam;

  void validate() const;
};

struct NegativeCandidate {
  TokenSequence tokens;
  double score = 0.0;  // summed implicit reward, alpha = 1
  bool empty = false;  // no non-special tokens; never chosen
};

struct NegativeResult {
  std::size_t chosen = 0;
  std::vector<NegativeCandidate> candidates;

  const TokenSequence& negative() const { return candidates.at(chosen).tokens; }
};

/// Seed for candidate `k` of a prompt whose stream seed is `prompt_seed`.
std::uint64_t candidate_seed(std::uint64_t prompt_seed, std::size_t k);

/// Samples cfg.k candidates from `sampler` and keeps the one with the lowest
/// summed reward log p_user - log p_base (ties: lowest index). Throws
/// std::runtime_error when every candidate is empty.
NegativeResult synthesize_negative(const LanguageModel& sampler, const LanguageModel& user,
                                   const LanguageModel& base, std::span<const TokenId> prompt,
                                   const NegativeSynthesisConfig& cfg);

/// Same, with `base` as the sampler.
NegativeResult synthesize_negative(const LanguageModel& base, const LanguageModel& user,
                                   std::span<const TokenId> prompt,
                                   const NegativeSynthesisConfig& cfg);

struct HistoryPair {
  TokenSequence prompt;
  TokenSequence response;
};

struct PreferenceDataset {
  std::vector<PreferenceTriple> triples;
  std::vector<std::string> warnings;
};

/// One triple per history pair; `negatives` is keyed by history index.
/// Pairs whose negative equals the gold response are dropped with a warning.
/// Throws std::invalid_argument naming the first index without a negative.
PreferenceDataset build_preference_dataset(std::span<const HistoryPair> history,
                                           const std::map<std::size_t, TokenSequence>& negatives);

/// log(1 + e^x) without overflow.
double softplus(double x);

/// [log pi(pos) - log ref(pos)] - [log pi(neg) - log ref(neg)].
double dpo_margin(const LanguageModel& policy, const LanguageModel& reference,
                  const PreferenceTriple& triple);

/// -log sigmoid(beta * margin), computed as softplus(-beta * margin).
double dpo_loss(const LanguageModel& policy, const LanguageModel& reference,
                const PreferenceTriple& triple, double beta);

struct DpoConfig {
  double beta = 3.0;
  double learning_rate = 0.05;
  std::size_t epochs = 1;  // 0 leaves the adapter untouched
  std::size_t batch_size = 4;
  double weight_decay = 0.01;
  double warmup_ratio = 0.1;
  std::uint64_t seed = 0;
  ReferenceKind reference = ReferenceKind::oppu_snapshot;

  void validate() const;
};

/// Reference-model log-probs of a triple's two responses, computed once.
struct ReferenceScores {
  double chosen = 0.0;
  double rejected = 0.0;
};

ReferenceScores reference_scores(const LanguageModel& reference, const PreferenceTriple& triple);

/// Mean DPO loss over `batch` for the policy (params + adapter) and its
/// gradient w.r.t. the adapter, accumulated into adapter_grad if non-null.
double dpo_loss_and_grad(const ModelParams& params, const AdapterDelta& adapter,
                         std::span<const PreferenceTriple> batch,
                         std::span<const ReferenceScores> reference, double beta,
                         AdapterDelta* adapter_grad);

struct DpoReport {
  double mean_margin_before = 0.0;  // mean beta * margin over the dataset
  double mean_margin_after = 0.0;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
};

/// Trains `adapter` only; `params` and `reference` are read-only.
/// Throws TrainingError on an empty dataset or a non-finite loss.
DpoReport train_dpo(const ModelParams& params, AdapterDelta& adapter,
                    const LanguageModel& reference, std::span<const PreferenceTriple> dataset,
                    const DpoConfig& cfg);

}  // namespace cope
