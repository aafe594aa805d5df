#include "cope/lmcore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cope/hash.hpp"

namespace cope {

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> symbols, Specials specials)
    : symbols_(std::move(symbols)), specials_(specials) {
  if (symbols_.size() < 4) throw std::invalid_argument("vocabulary needs at least 4 symbols");
  const TokenId ids[] = {specials_.bos, specials_.eos, specials_.pad, specials_.unk};
  for (std::size_t i = 0; i < 4; ++i) {
    if (ids[i] >= symbols_.size()) throw std::invalid_argument("special token id out of range");
    for (std::size_t j = 0; j < i; ++j) {
      if (ids[i] == ids[j]) throw std::invalid_argument("special token ids must be distinct");
    }
  }
  for (TokenId id = 0; id < symbols_.size(); ++id) {
    const std::string& s = symbols_[id];
    if (s.empty()) throw std::invalid_argument("empty symbol at id " + std::to_string(id));
    if (s.find('\n') != std::string::npos) {
      throw std::invalid_argument("symbol at id " + std::to_string(id) + " contains a newline");
    }
    if (!index_.emplace(s, id).second) {
      throw std::invalid_argument("duplicate symbol '" + s + "'");
    }
    if (!is_special(id)) max_symbol_bytes_ = std::max(max_symbol_bytes_, s.size());
  }
}

Vocabulary Vocabulary::with_symbols(const std::vector<std::string>& symbols) {
  std::vector<std::string> all = {"<bos>", "<eos>", "<pad>", "<unk>"};
  all.insert(all.end(), symbols.begin(), symbols.end());
  return Vocabulary(std::move(all), Specials{});
}

Vocabulary Vocabulary::ascii_chars() {
  std::vector<std::string> chars;
  for (char c = 0x20; c < 0x7f; ++c) chars.emplace_back(1, c);
  return with_symbols(chars);
}

bool Vocabulary::is_special(TokenId id) const {
  return id == specials_.bos || id == specials_.eos || id == specials_.pad || id == specials_.unk;
}

TokenId Vocabulary::lookup(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  return it == index_.end() ? specials_.unk : it->second;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t len = std::min(max_symbol_bytes_, text.size() - pos);
    bool matched = false;
    for (; len > 0; --len) {
      auto it = index_.find(std::string(text.substr(pos, len)));
      if (it != index_.end() && !is_special(it->second)) {
        out.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      out.push_back(specials_.unk);
      pos += std::min(utf8_length(static_cast<unsigned char>(text[pos])), text.size() - pos);
    }
  }
  return out;
}

void Vocabulary::validate(std::span<const TokenId> ids) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= symbols_.size()) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " exceeds vocabulary size " +
                              std::to_string(symbols_.size()));
    }
  }
}

std::string Vocabulary::decode_text(std::span<const TokenId> ids) const {
  validate(ids);
  std::string out;
  for (TokenId id : ids) {
    if (!is_special(id)) out += symbols_[id];
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  out += "bos " + std::to_string(specials_.bos) + "\n";
  out += "eos " + std::to_string(specials_.eos) + "\n";
  out += "pad " + std::to_string(specials_.pad) + "\n";
  out += "unk " + std::to_string(specials_.unk) + "\n";
  for (const auto& s : symbols_) out += s + "\n";
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (lines.size() < 4) throw std::invalid_argument("vocabulary file: missing 4-line header");
  Specials sp;
  TokenId* slots[] = {&sp.bos, &sp.eos, &sp.pad, &sp.unk};
  const char* names[] = {"bos", "eos", "pad", "unk"};
  for (std::size_t i = 0; i < 4; ++i) {
    std::istringstream in(lines[i]);
    std::string key;
    long long value = -1;
    if (!(in >> key >> value) || key != names[i] || value < 0) {
      throw std::invalid_argument("vocabulary file: header line " + std::to_string(i + 1) +
                                  " must be '" + names[i] + " <id>'");
    }
    *slots[i] = static_cast<TokenId>(value);
  }
  return Vocabulary(std::vector<std::string>(lines.begin() + 4, lines.end()), sp);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  out << serialize();
}

std::uint64_t Vocabulary::content_hash() const { return fnv1a(serialize()); }

// ---------------------------------------------------------------------------

double logsumexp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

LogProbVector::LogProbVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.empty()) throw std::invalid_argument("empty log-probability vector");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (std::isnan(values_[i]) || values_[i] > 1e-9) {
      throw std::invalid_argument("log-probability at index " + std::to_string(i) +
                                  " is not <= 0");
    }
  }
  const double lse = logsumexp(values_);
  if (!(std::abs(lse) < kNormTolerance)) {
    throw std::invalid_argument("log-probabilities do not normalize (logsumexp = " +
                                std::to_string(lse) + ")");
  }
}

LogProbVector LogProbVector::from_logits(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  const double lse = logsumexp(logits);
  if (!std::isfinite(lse)) throw std::invalid_argument("non-finite logits");
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = std::min(logits[i] - lse, 0.0);
  return LogProbVector(std::move(out), Unchecked{});
}

LogProbVector LogProbVector::from_probs(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("invalid probability");
    total += p;
  }
  if (!(total > 0.0)) throw std::invalid_argument("probabilities sum to zero");
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i] = probs[i] > 0.0 ? std::min(std::log(probs[i] / total), 0.0)
                            : -std::numeric_limits<double>::infinity();
  }
  return LogProbVector(std::move(out));
}

LogProbVector LogProbVector::uniform(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform over empty vocabulary");
  return LogProbVector(std::vector<double>(n, -std::log(static_cast<double>(n))), Unchecked{});
}

TokenId LogProbVector::argmax() const {
  TokenId best = 0;
  for (TokenId i = 1; i < values_.size(); ++i) {
    if (values_[i] > values_[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------

TokenSequence concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSequence out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<double> token_log_probs(const LanguageModel& model, std::span<const TokenId> prompt,
                                    std::span<const TokenId> continuation) {
  const Vocabulary& vocab = model.vocabulary();
  vocab.validate(prompt);
  vocab.validate(continuation);
  TokenSequence context(prompt.begin(), prompt.end());
  context.reserve(prompt.size() + continuation.size());
  std::vector<double> out;
  out.reserve(continuation.size());
  for (TokenId y : continuation) {
    const LogProbVector lp = model.next_log_probs(context);
    out.push_back(floored(lp[y]));
    context.push_back(y);
  }
  return out;
}

double sequence_log_prob(const LanguageModel& model, std::span<const TokenId> prompt,
                         std::span<const TokenId> continuation) {
  if (continuation.empty()) throw std::invalid_argument("sequence_log_prob: empty continuation");
  double total = 0.0;
  for (double v : token_log_probs(model, prompt, continuation)) total += v;
  return total;
}

}  // namespace cope
