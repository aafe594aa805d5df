#pragma once

// Evaluation metrics (ROUGE-1, ROUGE-L, perplexity, win rate, standard error)
// and the per-instance evaluation report.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cope/lmcore.hpp"

namespace cope {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Lowercased alphanumeric runs; everything else separates tokens.
std::vector<std::string> rouge_tokens(std::string_view text);

/// Clipped unigram overlap.
RougeScore rouge1(std::string_view reference, std::string_view hypothesis);

/// Longest-common-subsequence F-measure.
RougeScore rougeL(std::string_view reference, std::string_view hypothesis);

/// LCS length by dynamic programming.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// exp(-mean floored log-prob) of `tokens` given `prompt`. Always >= 1.
/// Throws std::invalid_argument on empty tokens.
double perplexity(const LanguageModel& reference, std::span<const TokenId> prompt,
                  std::span<const TokenId> tokens);
double perplexity(const LanguageModel& reference, std::span<const TokenId> tokens);

/// Fraction of instances with method >= baseline. Throws on length mismatch
/// or empty input.
double win_rate(std::span<const double> method, std::span<const double> baseline);

double mean(std::span<const double> values);

/// Sample standard deviation (n - 1) over sqrt(n). Requires n >= 2.
double standard_error(std::span<const double> values);

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string user_id;
  std::size_t instance = 0;  // index within the user's test split
  std::string method;
  double rouge1 = 0.0;
  double rougeL = 0.0;
  double perplexity = 0.0;
  double reward = 0.0;
  std::string output;
};

struct Summary {
  double mean = 0.0;
  double se = 0.0;
};

struct MethodAggregate {
  std::string method;
  std::size_t n = 0;
  Summary rouge1, rougeL, perplexity, reward;
  // Paired against the report baseline, aligned by (user_id, instance).
  double win_rate_rouge1 = 0.0;
  double win_rate_rougeL = 0.0;
  Summary rougeL_diff;  // method - baseline
};

struct EvalReport {
  std::string baseline = "tam_greedy";
  std::vector<EvalRow> rows;

  std::vector<std::string> methods() const;  // first-appearance order
  std::vector<const EvalRow*> rows_for(std::string_view method) const;

  /// Aggregates recomputed from rows. Throws if a method's instances do not
  /// align with the baseline's.
  std::vector<MethodAggregate> aggregate() const;
  MethodAggregate aggregate_for(std::string_view method) const;

  /// Paired win rate of `method` over `other` on ROUGE-L.
  double win_rate_rougeL(std::string_view method, std::string_view other) const;

  /// user_id,instance,method,rouge1,rougeL,perplexity,reward,output
  void write_csv(std::ostream& out) const;
  static EvalReport read_csv(std::istream& in, std::string baseline = "tam_greedy");
  void write_aggregate_json(std::ostream& out) const;
};

}  // namespace cope
