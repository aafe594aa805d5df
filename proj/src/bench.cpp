#include "cope/bench.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace cope {

std::vector<std::string> rouge_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

RougeScore from_counts(double overlap, std::size_t hyp, std::size_t ref) {
  RougeScore s;
  if (hyp == 0 || ref == 0) return s;
  s.precision = overlap / static_cast<double>(hyp);
  s.recall = overlap / static_cast<double>(ref);
  if (s.precision + s.recall > 0.0) {
    s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  }
  return s;
}

}  // namespace

RougeScore rouge1(std::string_view reference, std::string_view hypothesis) {
  const auto ref = rouge_tokens(reference);
  const auto hyp = rouge_tokens(hypothesis);
  std::map<std::string, std::size_t> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t overlap = 0;
  for (const auto& t : hyp) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return from_counts(static_cast<double>(overlap), hyp.size(), ref.size());
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rougeL(std::string_view reference, std::string_view hypothesis) {
  const auto ref = rouge_tokens(reference);
  const auto hyp = rouge_tokens(hypothesis);
  return from_counts(static_cast<double>(lcs_length(ref, hyp)), hyp.size(), ref.size());
}

double perplexity(const LanguageModel& reference, std::span<const TokenId> prompt,
                  std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("perplexity: empty text");
  const double lp = sequence_log_prob(reference, prompt, tokens);
  return std::max(1.0, std::exp(-lp / static_cast<double>(tokens.size())));
}

double perplexity(const LanguageModel& reference, std::span<const TokenId> tokens) {
  return perplexity(reference, {}, tokens);
}

double win_rate(std::span<const double> method, std::span<const double> baseline) {
  if (method.size() != baseline.size()) throw std::invalid_argument("win_rate: length mismatch");
  if (method.empty()) throw std::invalid_argument("win_rate: no instances");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < method.size(); ++i) wins += method[i] >= baseline[i] ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(method.size());
}

double mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean: no values");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double standard_error(std::span<const double> values) {
  if (values.size() < 2) throw std::invalid_argument("standard_error: need at least 2 values");
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  const double n = static_cast<double>(values.size());
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

// ---------------------------------------------------------------------------

std::vector<std::string> EvalReport::methods() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  }
  return out;
}

std::vector<const EvalRow*> EvalReport::rows_for(std::string_view method) const {
  std::vector<const EvalRow*> out;
  for (const auto& r : rows) {
    if (r.method == method) out.push_back(&r);
  }
  std::sort(out.begin(), out.end(), [](const EvalRow* a, const EvalRow* b) {
    return a->user_id != b->user_id ? a->user_id < b->user_id : a->instance < b->instance;
  });
  return out;
}

namespace {

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  s.mean = mean(v);
  s.se = v.size() >= 2 ? standard_error(v) : 0.0;
  return s;
}

std::vector<double> column(const std::vector<const EvalRow*>& rows, double EvalRow::*field) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const EvalRow* r : rows) out.push_back(r->*field);
  return out;
}

}  // namespace

double EvalReport::win_rate_rougeL(std::string_view method, std::string_view other) const {
  const auto a = rows_for(method);
  const auto b = rows_for(other);
  if (a.size() != b.size()) throw std::runtime_error("eval report: methods are not aligned");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->user_id != b[i]->user_id || a[i]->instance != b[i]->instance) {
      throw std::runtime_error("eval report: methods are not aligned");
    }
  }
  return win_rate(column(a, &EvalRow::rougeL), column(b, &EvalRow::rougeL));
}

MethodAggregate EvalReport::aggregate_for(std::string_view method) const {
  const auto mine = rows_for(method);
  MethodAggregate agg;
  agg.method = std::string(method);
  agg.n = mine.size();
  agg.rouge1 = summarize(column(mine, &EvalRow::rouge1));
  agg.rougeL = summarize(column(mine, &EvalRow::rougeL));
  agg.perplexity = summarize(column(mine, &EvalRow::perplexity));
  agg.reward = summarize(column(mine, &EvalRow::reward));

  const auto base = rows_for(baseline);
  if (!base.empty() && !mine.empty()) {
    if (base.size() != mine.size()) {
      throw std::runtime_error("eval report: method " + agg.method + " not aligned with baseline");
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i]->user_id != base[i]->user_id || mine[i]->instance != base[i]->instance) {
        throw std::runtime_error("eval report: method " + agg.method +
                                 " not aligned with baseline");
      }
    }
    const auto m1 = column(mine, &EvalRow::rouge1), b1 = column(base, &EvalRow::rouge1);
    const auto mL = column(mine, &EvalRow::rougeL), bL = column(base, &EvalRow::rougeL);
    agg.win_rate_rouge1 = win_rate(m1, b1);
    agg.win_rate_rougeL = win_rate(mL, bL);
    std::vector<double> diff(mL.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = mL[i] - bL[i];
    agg.rougeL_diff = summarize(diff);
  }
  return agg;
}

std::vector<MethodAggregate> EvalReport::aggregate() const {
  std::vector<MethodAggregate> out;
  for (const auto& m : methods()) out.push_back(aggregate_for(m));
  return out;
}

namespace {

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void EvalReport::write_csv(std::ostream& out) const {
  out << "user_id,instance,method,rouge1,rougeL,perplexity,reward,output\n";
  for (const auto& r : rows) {
    out << r.user_id << ',' << r.instance << ',' << r.method << ',' << num(r.rouge1) << ','
        << num(r.rougeL) << ',' << num(r.perplexity) << ',' << num(r.reward) << ','
        << csv_quote(r.output) << '\n';
  }
}

EvalReport EvalReport::read_csv(std::istream& in, std::string baseline) {
  EvalReport report;
  report.baseline = std::move(baseline);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("eval csv: missing header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 8) throw std::runtime_error("eval csv: expected 8 fields");
    EvalRow r;
    r.user_id = f[0];
    r.instance = std::stoul(f[1]);
    r.method = f[2];
    r.rouge1 = std::stod(f[3]);
    r.rougeL = std::stod(f[4]);
    r.perplexity = std::stod(f[5]);
    r.reward = std::stod(f[6]);
    r.output = f[7];
    report.rows.push_back(std::move(r));
  }
  return report;
}

void EvalReport::write_aggregate_json(std::ostream& out) const {
  auto summary = [](const Summary& s) { return nlohmann::ordered_json{{"mean", s.mean}, {"se", s.se}}; };
  nlohmann::ordered_json methods_json = nlohmann::ordered_json::array();
  for (const auto& a : aggregate()) {
    methods_json.push_back({{"method", a.method},
                            {"n", a.n},
                            {"rouge1", summary(a.rouge1)},
                            {"rougeL", summary(a.rougeL)},
                            {"perplexity", summary(a.perplexity)},
                            {"reward", summary(a.reward)},
                            {"win_rate_rouge1", a.win_rate_rouge1},
                            {"win_rate_rougeL", a.win_rate_rougeL},
                            {"rougeL_diff", summary(a.rougeL_diff)}});
  }
  nlohmann::ordered_json j = {{"baseline", baseline}, {"methods", methods_json}};
  out << j.dump(2) << '\n';
}

}  // namespace cope
