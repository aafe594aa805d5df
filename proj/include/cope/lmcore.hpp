#pragma once

// Vocabulary, token sequences and the language-model contract.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cope {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

/// Per-token log-probability floor applied before summing sequence scores.
inline constexpr double kLogProbFloor = -50.0;

class Vocabulary {
 public:
  struct Specials {
    TokenId bos = 0;
    TokenId eos = 1;
    TokenId pad = 2;
    TokenId unk = 3;
  };

  /// Throws std::invalid_argument if symbols repeat, specials collide or are
  /// out of range, or there are fewer than 4 symbols.
  Vocabulary(std::vector<std::string> symbols, Specials specials);

  /// `<bos> <eos> <pad> <unk>` followed by printable ASCII 0x20..0x7e.
  static Vocabulary ascii_chars();

  /// `<bos> <eos> <pad> <unk>` followed by the given symbols.
  static Vocabulary with_symbols(const std::vector<std::string>& symbols);

  /// File format: a 4-line header `bos <id>`, `eos <id>`, `pad <id>`,
  /// `unk <id>`, then one symbol per line; the symbol's line index after the
  /// header is its token id.
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary parse(std::string_view text);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  /// FNV-1a of serialize().
  std::uint64_t content_hash() const;

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const { return symbols_.at(id); }
  const Specials& specials() const { return specials_; }
  TokenId bos() const { return specials_.bos; }
  TokenId eos() const { return specials_.eos; }
  TokenId pad() const { return specials_.pad; }
  TokenId unk() const { return specials_.unk; }
  bool is_special(TokenId id) const;

  /// Id of an exact symbol, or unk.
  TokenId lookup(std::string_view symbol) const;

  /// Greedy longest match over non-special symbols; unmatched UTF-8 code
  /// points map to unk.
  TokenSequence encode(std::string_view text) const;

  /// Concatenated symbols with special tokens omitted. Throws
  /// std::out_of_range naming the first invalid position.
  std::string decode_text(std::span<const TokenId> ids) const;

  /// Throws std::out_of_range naming the first id >= size().
  void validate(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const {
    return symbols_ == other.symbols_ && specials_.bos == other.specials_.bos &&
           specials_.eos == other.specials_.eos && specials_.pad == other.specials_.pad &&
           specials_.unk == other.specials_.unk;
  }

 private:
  std::vector<std::string> symbols_;
  Specials specials_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_symbol_bytes_ = 1;
};

inline TokenSequence encode(std::string_view text, const Vocabulary& vocab) {
  return vocab.encode(text);
}
inline std::string decode_text(std::span<const TokenId> ids, const Vocabulary& vocab) {
  return vocab.decode_text(ids);
}

double logsumexp(std::span<const double> values);

/// Normalized next-token log-probabilities: logsumexp = 0 within 1e-6 and
/// every entry <= 1e-9. Entries may be -inf (zero probability).
class LogProbVector {
 public:
  static constexpr double kNormTolerance = 1e-6;

  LogProbVector() = default;

  /// Checks the invariant; throws std::invalid_argument on violation.
  explicit LogProbVector(std::vector<double> values);

  /// Normalizes arbitrary finite logits with a stable log-softmax.
  static LogProbVector from_logits(std::span<const double> logits);

  /// Normalizes probabilities (need not sum to 1, must be >= 0 with a
  /// positive total).
  static LogProbVector from_probs(std::span<const double> probs);

  static LogProbVector uniform(std::size_t n);

  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const { return values_; }

  /// Highest entry; ties resolved to the lower id.
  TokenId argmax() const;

  bool operator==(const LogProbVector&) const = default;

 private:
  struct Unchecked {};
  LogProbVector(std::vector<double> values, Unchecked) : values_(std::move(values)) {}

  std::vector<double> values_;
};

/// Anything that maps a context to a normalized next-token distribution.
/// Implementations must be deterministic and safe for concurrent readers.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual LogProbVector next_log_probs(std::span<const TokenId> context) const = 0;
};

/// Uniform distribution over the whole vocabulary, whatever the context.
class UniformModel final : public LanguageModel {
 public:
  explicit UniformModel(Vocabulary vocab) : vocab_(std::move(vocab)) {}
  const Vocabulary& vocabulary() const override { return vocab_; }
  LogProbVector next_log_probs(std::span<const TokenId>) const override {
    return LogProbVector::uniform(vocab_.size());
  }

 private:
  Vocabulary vocab_;
};

/// Adapts a callable; used for hand-built toy models.
class FunctionModel final : public LanguageModel {
 public:
  using Fn = std::function<LogProbVector(std::span<const TokenId>)>;
  FunctionModel(Vocabulary vocab, Fn fn) : vocab_(std::move(vocab)), fn_(std::move(fn)) {}
  const Vocabulary& vocabulary() const override { return vocab_; }
  LogProbVector next_log_probs(std::span<const TokenId> context) const override {
    return fn_(context);
  }

 private:
  Vocabulary vocab_;
  Fn fn_;
};

/// log p clamped at kLogProbFloor.
inline double floored(double log_prob) {
  return log_prob < kLogProbFloor ? kLogProbFloor : log_prob;
}

/// Per-token log-probabilities of `continuation` given `prompt`, each floored.
std::vector<double> token_log_probs(const LanguageModel& model, std::span<const TokenId> prompt,
                                    std::span<const TokenId> continuation);

/// sum_t log p(y_t | prompt + y_<t), each term floored at -50.
/// Throws std::invalid_argument on an empty continuation.
double sequence_log_prob(const LanguageModel& model, std::span<const TokenId> prompt,
                         std::span<const TokenId> continuation);

TokenSequence concat(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace cope
