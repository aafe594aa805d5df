// Acceptance suite: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "cope/bench.hpp"
#include "cope/checkpoint.hpp"
#include "cope/decode.hpp"
#include "cope/hash.hpp"
#include "cope/kernels.hpp"
#include "cope/pipeline.hpp"
#include "cope/prefopt.hpp"
#include "cope/reward.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, x);
  return buf;
}

std::string sci(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", x);
  return buf;
}

ModelDims default_dims(const Vocabulary& v) {
  ModelDims d;
  d.vocab = v.size();
  d.pad = v.pad();
  return d;
}

std::vector<Example> random_examples(const Vocabulary& v, Rng& rng, std::size_t n) {
  std::vector<Example> out(n);
  for (auto& e : out) {
    for (std::size_t j = 0, k = 2 + rng.below(6); j < k; ++j) e.prompt.push_back(static_cast<TokenId>(rng.below(v.size())));
    for (std::size_t j = 0, k = 1 + rng.below(6); j < k; ++j) e.target.push_back(static_cast<TokenId>(rng.below(v.size())));
  }
  return out;
}

PreferenceTriple random_triple(const Vocabulary& v, Rng& rng) {
  auto seq = [&](std::size_t lo) {
    TokenSequence s;
    for (std::size_t i = 0, n = lo + rng.below(6); i < n; ++i) s.push_back(static_cast<TokenId>(rng.below(v.size())));
    return s;
  };
  PreferenceTriple t{seq(2), seq(1), seq(1)};
  while (t.rejected == t.chosen) t.rejected = seq(1);
  return t;
}

// 1 -------------------------------------------------------------------------
Outcome gradients() {
  const Vocabulary v = Vocabulary::ascii_chars();
  const ModelDims d = default_dims(v);
  double worst = 0.0;
  std::size_t probes = 0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 1000);
    ModelParams p = ModelParams::random(d, seed);
    AdapterDelta a = AdapterDelta::random(d, 4, 1.0, seed + 1, 0.1);
    const auto batch = random_examples(v, rng, 4);
    ModelParams pg = ModelParams::zeros(d);
    AdapterDelta ag = AdapterDelta::zeros(d, 4, 1.0);
    sft_loss_and_grad(p, &a, batch, &pg, &ag);
    auto sft = [&] { return sft_loss(p, &a, batch); };
    for (const auto& r : {grad_check(sft, p.tensors(), std::as_const(pg).tensors(), {.seed = seed}),
                          grad_check(sft, a.tensors(), std::as_const(ag).tensors(), {.seed = seed})}) {
      worst = std::max(worst, r.max_relative_error);
      probes += r.checked;
      ok = ok && r.checked >= 200 && r.max_relative_error < 1e-4;
    }

    const AdapterDelta ref_a = AdapterDelta::random(d, 4, 1.0, seed + 2, 0.1);
    const TinyLm ref(v, p, &ref_a);
    const std::vector<PreferenceTriple> triples{random_triple(v, rng), random_triple(v, rng)};
    std::vector<ReferenceScores> rs;
    for (const auto& t : triples) rs.push_back(reference_scores(ref, t));
    AdapterDelta dg = AdapterDelta::zeros(d, 4, 1.0);
    dpo_loss_and_grad(p, a, triples, rs, 3.0, &dg);
    auto dpo = [&] { return dpo_loss_and_grad(p, a, triples, rs, 3.0, nullptr); };
    const auto r = grad_check(dpo, a.tensors(), std::as_const(dg).tensors(), {.seed = seed});
    worst = std::max(worst, r.max_relative_error);
    probes += r.checked;
    ok = ok && r.checked >= 200 && r.max_relative_error < 1e-4;
  }
  return {ok, "max rel err " + sci(worst) + " over " + std::to_string(probes) + " probes"};
}

// 2 -------------------------------------------------------------------------
Outcome decode_reductions() {
  const Vocabulary v = Vocabulary::ascii_chars();
  const ModelDims d = default_dims(v);
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelParams p = ModelParams::random(d, seed);
    const AdapterDelta a = AdapterDelta::random(d, 4, 1.0, seed + 9, 0.3);
    const TinyLm user(v, p, &a), base(v, p);
    const TokenSequence prompt = concat(v.encode("tea "), TokenSequence{v.bos()});
    DecodeConfig cfg{.alpha = 0.0, .repetition_penalty = 1.0, .max_new_tokens = 40};
    ok = ok && cope_generate(user, base, prompt, cfg).tokens == greedy_generate(user, prompt, cfg);
    cfg.alpha = 1.0;
    ok = ok && cope_generate(user, user, prompt, cfg).tokens == greedy_generate(user, prompt, cfg);
  }
  std::size_t agree = 0;
  Rng rng(31337);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const auto u = cope::test::random_lp(rng, n, 0.5 + 3.0 * rng.uniform());
    const auto b = cope::test::random_lp(rng, n, 0.5 + 3.0 * rng.uniform());
    const DecodeConfig cfg{.tau = rng.uniform(), .alpha = 2.0 * rng.uniform(),
                           .repetition_penalty = 1.0 + 2.0 * rng.uniform()};
    TokenSequence hist;
    for (std::size_t i = 0, h = rng.below(6); i < h; ++i) hist.push_back(static_cast<TokenId>(rng.below(n)));
    agree += cope_step(u, b, cfg, hist).first ==
             cope::test::enumerate_cope_step(u.values(), b.values(), cfg.tau, cfg.alpha, cfg.repetition_penalty, hist);
  }
  return {ok && agree == 1000,
          std::string("reductions ") + (ok ? "bit-equal" : "DIFFER") + ", oracle " + std::to_string(agree) + "/1000"};
}

// 3 -------------------------------------------------------------------------
Outcome dpo_identity() {
  const Vocabulary v = Vocabulary::ascii_chars();
  const ModelDims d = default_dims(v);
  const ModelParams p = ModelParams::random(d, 5);
  Rng rng(17);
  double worst = 0.0;
  bool descent = true;
  for (double beta : {0.05, 3.0}) {
    const AdapterDelta a = AdapterDelta::random(d, 4, 1.0, 6, 0.2);
    const TinyLm m(v, p, &a);
    for (int i = 0; i < 20; ++i) {
      worst = std::max(worst, std::fabs(dpo_loss(m, m, random_triple(v, rng), beta) - std::log(2.0)));
    }
    AdapterDelta policy = AdapterDelta::init(d, 4, 1.0, 7);
    const AdapterDelta snapshot = policy;
    const TinyLm ref(v, p, &snapshot);
    const std::vector<PreferenceTriple> one{random_triple(v, rng)};
    const double before = dpo_loss(TinyLm(v, p, &policy), ref, one[0], beta);
    train_dpo(p, policy, ref, one, DpoConfig{.beta = beta, .learning_rate = 1e-3, .epochs = 1});
    const double after = dpo_loss(TinyLm(v, p, &policy), ref, one[0], beta);
    descent = descent && after < before;
  }
  return {worst <= 1e-9 && descent,
          "max |loss - ln 2| " + sci(worst) + ", one step " + (descent ? "decreases" : "does NOT decrease")};
}

// Pipeline runs shared by 4, 5, 6 and 8 ------------------------------------
struct RunResult {
  PipelineConfig cfg;
  RunManifest manifest;
  double seconds = 0.0;
};

RunResult run_full(const fs::path& run_dir) {
  RunResult r;
  r.cfg.load_file(fs::path(COPE_SOURCE_DIR) / "configs" / "default.conf");
  r.cfg.corpus_dir = fs::path(COPE_SOURCE_DIR) / "data" / "corpus";
  r.cfg.gen_corpus = false;
  r.cfg.run_dir = run_dir;
  fs::remove_all(run_dir);
  const auto t0 = Clock::now();
  r.manifest = run_pipeline(r.cfg, {.stages = {}, .verbose = false});
  r.seconds = seconds_since(t0);
  return r;
}

double stage_seconds(const RunManifest& m, const std::string& name) {
  for (const auto& s : m.stages) {
    if (s.name == name) return s.seconds;
  }
  return 0.0;
}

// 4 -------------------------------------------------------------------------
Outcome negative_rescoring(const RunResult& run) {
  const fs::path dir = run.cfg.run_dir;
  const Vocabulary v = Vocabulary::load(dir / "vocab.txt");
  const ModelParams tam = load_model_checkpoint(dir / "tam.ckpt", v);
  const std::uint64_t tam_hash = file_hash(dir / "tam.ckpt");
  const TinyLm tam_lm(v, tam);
  std::size_t checked = 0, agree = 0;
  for (const auto& u : read_corpus_index(run.cfg.corpus_dir).users) {
    const AdapterDelta oppu = load_adapter_checkpoint(dir / "users" / u / "oppu.adapter", v, tam.dims, tam_hash);
    const TinyLm user(v, tam, &oppu);
    std::ifstream in(dir / "users" / u / "preferences.jsonl");
    for (std::string line; checked < 100 && std::getline(in, line);) {
      const json row = json::parse(line);
      const TokenSequence prompt = concat(v.encode(row.at("input").get<std::string>()), TokenSequence{v.bos()});
      std::size_t best = 0;
      double best_score = 0.0;
      bool found = false, scores_match = true;
      const auto& cands = row.at("candidates");
      for (std::size_t k = 0; k < cands.size(); ++k) {
        const TokenSequence y = cands[k].at("tokens").get<TokenSequence>();
        if (v.decode_text(y).empty()) continue;
        const double s = cope::test::rescore(user, tam_lm, prompt, y);
        scores_match = scores_match && std::fabs(s - cands[k].at("score").get<double>()) <= 1e-9 * (1.0 + std::fabs(s));
        if (!found || s < best_score) {
          best = k;
          best_score = s;
          found = true;
        }
      }
      ++checked;
      agree += found && scores_match && best == row.at("chosen_index").get<std::size_t>() &&
               row.at("rejected_tokens").get<TokenSequence>() == cands[best].at("tokens").get<TokenSequence>();
    }
    if (checked >= 100) break;
  }
  return {checked == 100 && agree == 100, std::to_string(agree) + "/" + std::to_string(checked) + " prompts agree"};
}

// 5 -------------------------------------------------------------------------
Outcome reward_separation(const RunResult& run) {
  std::ifstream in(run.cfg.run_dir / "report" / "reward_separation.csv");
  std::string line;
  std::getline(in, line);
  std::size_t users = 0, wins = 0;
  double own = 0.0, others = 0.0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string id, a, b;
    std::getline(ss, id, ',');
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    if (id == "avg") {
      own = std::stod(a);
      others = std::stod(b);
      continue;
    }
    ++users;
    wins += std::stod(a) > std::stod(b);
  }
  // With a non-positive others-mean the factor test reduces to own > 0 and own > others.
  const bool factor = own > others && own >= 2.0 * others;
  const double secs = stage_seconds(run.manifest, "train-task") + stage_seconds(run.manifest, "train-user") +
                      stage_seconds(run.manifest, "diagnose-reward");
  return {users == 10 && wins >= 8 && factor && secs < 120.0,
          std::to_string(wins) + "/" + std::to_string(users) + " users own > others, global own " + fmt(own) +
              " vs others " + fmt(others) + ", " + fmt(secs, 1) + " s"};
}

// 6 -------------------------------------------------------------------------
Outcome personalization_lift(const RunResult& run) {
  const EvalReport report = load_eval_report(run.cfg);
  const double win = report.win_rate_rougeL("cope", "oppu_greedy");
  const MethodAggregate cope = report.aggregate_for("cope");
  const MethodAggregate oppu = report.aggregate_for("oppu_greedy");
  const bool lift = cope.rougeL_diff.mean > 2.0 * cope.rougeL_diff.se;
  return {win >= 0.6 && lift && run.seconds < 300.0,
          "win-or-tie vs oppu_greedy " + fmt(win, 3) + ", ROUGE-L cope " + fmt(cope.rougeL.mean) + " oppu " +
              fmt(oppu.rougeL.mean) + ", diff vs tam " + fmt(cope.rougeL_diff.mean) + " (se " +
              fmt(cope.rougeL_diff.se) + "), n " + std::to_string(cope.n) + ", " + fmt(run.seconds, 1) + " s"};
}

// 7 -------------------------------------------------------------------------
Outcome metric_oracles() {
  Rng rng(4242);
  const std::vector<std::string> alphabet{"a", "b", "c", "d"};
  std::size_t agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> a, b;
    for (std::size_t i = 0, n = rng.below(11); i < n; ++i) a.push_back(alphabet[rng.below(4)]);
    for (std::size_t i = 0, n = rng.below(11); i < n; ++i) b.push_back(alphabet[rng.below(4)]);
    auto join = [](const std::vector<std::string>& w) {
      std::string s;
      for (const auto& x : w) s += x + " ";
      return s;
    };
    const double lcs = static_cast<double>(cope::test::brute_force_lcs(a, b));
    double f = 0.0;
    if (lcs > 0) {
      const double p = lcs / double(b.size()), r = lcs / double(a.size());
      f = 2.0 * p * r / (p + r);
    }
    agree += std::fabs(rougeL(join(a), join(b)).f1 - f) < 1e-12 && lcs_length(a, b) == lcs;
  }
  const Vocabulary v = Vocabulary::ascii_chars();
  const UniformModel uniform(v);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    for (std::size_t i = 0, n = 1 + rng.below(40); i < n; ++i) text += static_cast<char>(32 + rng.below(95));
    worst = std::max(worst, std::fabs(perplexity(uniform, v.encode(text)) - double(v.size())));
  }
  return {agree == 1000 && worst <= 1e-9,
          "rougeL/LCS " + std::to_string(agree) + "/1000, max |ppl - |V|| " + sci(worst)};
}

// 8 -------------------------------------------------------------------------
Outcome determinism(const RunResult& a, const RunResult& b) {
  std::size_t compared = 0;
  std::vector<std::string> differ;
  for (const auto& entry : fs::recursive_directory_iterator(a.cfg.run_dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a.cfg.run_dir);
    const std::string ext = rel.extension().string();
    const bool wanted = ext == ".ckpt" || ext == ".adapter" || rel.parent_path() == "report" ||
                        rel.filename() == "generations.jsonl" || rel.filename() == "preferences.jsonl";
    if (!wanted) continue;
    ++compared;
    if (cope::test::slurp(entry.path()) != cope::test::slurp(b.cfg.run_dir / rel)) differ.push_back(rel.string());
  }
  std::string detail = std::to_string(compared) + " files compared";
  if (!differ.empty()) detail += ", differing: " + differ.front();
  return {compared > 0 && differ.empty(), detail};
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "cope_acceptance";
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
  std::optional<RunResult> first, second;
  auto runs = [&] {
    if (!first) first = run_full(work / "run_a");
    return *first;
  };

  criteria.emplace_back("1 gradient correctness", gradients);
  criteria.emplace_back("2 decode reductions", decode_reductions);
  criteria.emplace_back("3 dpo identity", dpo_identity);
  criteria.emplace_back("4 negative synthesis", [&] { return negative_rescoring(runs()); });
  criteria.emplace_back("5 reward separation", [&] { return reward_separation(runs()); });
  criteria.emplace_back("6 personalization lift", [&] { return personalization_lift(runs()); });
  criteria.emplace_back("7 metric oracles", metric_oracles);
  criteria.emplace_back("8 determinism", [&] {
    second = run_full(work / "run_b");
    return determinism(runs(), *second);
  });
  const std::map<std::string, double> limits = {
      {"1 gradient correctness", 30.0}, {"2 decode reductions", 10.0}};

  std::cout << "simd " << kernels::isa_name(kernels::active_isa()) << "\n";
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (auto it = limits.find(name); it != limits.end() && secs >= it->second) {
      o.pass = false;
      o.detail += ", over the " + fmt(it->second, 0) + " s limit";
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(secs, 1) << " s]"
              << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
