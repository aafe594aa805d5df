#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cope/decode.hpp"
#include "cope/random.hpp"
#include "cope/tinylm.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cope;
using cope::test::abc_vocab;
using cope::test::random_lp;

namespace {

LogProbVector abc_probs(double pa, double pb, double pc) {
  return LogProbVector::from_probs(std::vector<double>{0, 0, 0, 0, pa, pb, pc});
}

std::vector<double> shifted(const LogProbVector& lp, double c) {
  std::vector<double> v(lp.values().begin(), lp.values().end());
  for (double& x : v) x += c;
  return v;
}

}  // namespace

TEST_SUITE("decode") {
  TEST_CASE("repetition penalty examples") {
    Rng rng(1);
    const auto lp = random_lp(rng, 7);
    CHECK(apply_repetition_penalty(lp, TokenSequence{4, 5}, 1.0) == lp);
    CHECK(apply_repetition_penalty(lp, TokenSequence{}, 3.0) == lp);
    CHECK_THROWS_AS(apply_repetition_penalty(lp, TokenSequence{4}, 0.5), std::invalid_argument);

    const auto half = LogProbVector::from_probs(std::vector<double>{0.5, 0.5});
    const auto pen = apply_repetition_penalty(half, TokenSequence{0, 0}, std::exp(1.0));
    const double expected = (0.5 / std::exp(1.0)) / (0.5 / std::exp(1.0) + 0.5);
    CHECK(std::exp(pen[0]) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::exp(pen[0]) == doctest::Approx(0.2689).epsilon(1e-4));
  }

  TEST_CASE("cope_step examples") {
    const auto user = abc_probs(0.6, 0.3, 0.1);
    const auto base = abc_probs(0.6, 0.1, 0.3);
    DecodeConfig cfg{.tau = 0.1, .alpha = 1.0};
    const auto [tok, step] = cope_step(user, base, cfg, {});
    CHECK(tok == 5);
    CHECK(step.head_size == 3);
    CHECK(step.reward == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(step.user_lp == doctest::Approx(std::log(0.3)).epsilon(1e-12));
    CHECK(step.base_lp == doctest::Approx(std::log(0.1)).epsilon(1e-12));

    cfg.alpha = 0.0;
    CHECK(cope_step(user, base, cfg, {}).first == 4);

    cfg.alpha = 1.0;
    const auto same = cope_step(user, user, cfg, {});
    CHECK(same.first == 4);
    CHECK(same.second.reward == 0.0);
  }

  TEST_CASE("cope_step agrees with the enumeration oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.below(40);
      const auto u = random_lp(rng, n, 0.5 + 3.0 * rng.uniform());
      const auto b = random_lp(rng, n, 0.5 + 3.0 * rng.uniform());
      DecodeConfig cfg{.tau = rng.uniform(), .alpha = 2.0 * rng.uniform(),
                       .repetition_penalty = 1.0 + 3.0 * rng.uniform()};
      TokenSequence hist;
      for (std::size_t i = 0, h = rng.below(5); i < h; ++i) hist.push_back(static_cast<TokenId>(rng.below(n)));
      const auto [tok, step] = cope_step(u, b, cfg, hist);
      CHECK(tok == cope::test::enumerate_cope_step(u.values(), b.values(), cfg.tau, cfg.alpha,
                                                   cfg.repetition_penalty, hist));
      const auto penalized = apply_repetition_penalty(u, hist, cfg.repetition_penalty);
      CHECK(plausibility_head(penalized, cfg.tau).contains(tok));
      // Uniform shift of the base log-probs moves every reward equally.
      const double c = rng.normal(0.0, 3.0);
      const auto tok_shift = cope_step(u, LogProbVector::from_logits(shifted(b, c)), cfg, hist).first;
      CHECK(tok_shift == tok);
    }
  }

  TEST_CASE("larger alpha penalizes tokens the base likes") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
      const auto u = random_lp(rng, 10);
      const auto b = random_lp(rng, 10);
      const TokenId i = static_cast<TokenId>(rng.below(10)), j = static_cast<TokenId>(rng.below(10));
      if (!(b[i] > b[j])) continue;
      const double a1 = rng.uniform(), a2 = a1 + rng.uniform();
      const double gap1 = token_reward(u[i], b[i], a1) - token_reward(u[j], b[j], a1);
      const double gap2 = token_reward(u[i], b[i], a2) - token_reward(u[j], b[j], a2);
      CHECK(gap2 < gap1);
    }
  }

  TEST_CASE("golden toy sequences") {
    const Vocabulary v = abc_vocab();
    const auto user = cope::test::toy_model(v, cope::test::toy_user_table());
    const auto base = cope::test::toy_model(v, cope::test::toy_base_table());
    const TokenSequence prompt{0};
    DecodeConfig cfg{.tau = 0.1, .alpha = 0.3, .max_new_tokens = 10};
    CHECK(cope_generate(user, base, prompt, cfg).tokens == TokenSequence{4, 5, 4, 5, 4, 5, 4, 5, 4, 5});
    cfg.alpha = 1.0;
    const Generation g = cope_generate(user, base, prompt, cfg);
    CHECK(g.tokens == TokenSequence{5, 1});
    CHECK(g.trace.steps.size() == 2);
    cfg.alpha = 0.3;
    cfg.repetition_penalty = 2.0;
    CHECK(cope_generate(user, base, prompt, cfg).tokens == TokenSequence{4, 5, 1});

    cfg.max_new_tokens = 1;
    CHECK(cope_generate(user, base, prompt, cfg).trace.steps.size() == 1);
  }

  TEST_CASE("reductions to greedy decoding") {
    const Vocabulary v = Vocabulary::ascii_chars();
    const ModelDims d{.vocab = v.size(), .window = 4, .embed = 6, .hidden = 12};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ModelParams base_p = ModelParams::random(d, seed);
      const AdapterDelta a = AdapterDelta::random(d, 3, 1.0, seed + 7, 0.5);
      const TinyLm user(v, base_p, &a), base(v, base_p);
      const TokenSequence prompt = v.encode("xy");
      DecodeConfig cfg{.alpha = 0.0, .repetition_penalty = 1.0, .max_new_tokens = 30};
      CHECK(cope_generate(user, base, prompt, cfg).tokens == greedy_generate(user, prompt, cfg));
      cfg.alpha = 1.0;
      CHECK(cope_generate(user, user, prompt, cfg).tokens == greedy_generate(user, prompt, cfg));
    }
  }

  TEST_CASE("greedy examples") {
    const Vocabulary v = abc_vocab();
    const UniformModel uniform(v);
    DecodeConfig cfg{.max_new_tokens = 5};
    CHECK(greedy_generate(uniform, TokenSequence{0}, cfg) == TokenSequence(5, 0));

    const FunctionModel chain(v, [&](std::span<const TokenId> ctx) {
      std::vector<double> p(v.size(), 0.0);
      p[ctx.size() < 4 ? 4 + ctx.size() % 3 : 1] = 1.0;
      return LogProbVector::from_probs(p);
    });
    cfg.max_new_tokens = 10;
    const auto out = greedy_generate(chain, TokenSequence{0}, cfg);
    CHECK(out == TokenSequence{5, 6, 4, 1});
    CHECK(greedy_generate(chain, TokenSequence{0}, cfg) == out);
    cfg.stop_on_eos = false;
    CHECK(greedy_generate(chain, TokenSequence{0}, cfg).size() == 10);
  }

  TEST_CASE("sampling") {
    const Vocabulary v = abc_vocab();
    SUBCASE("empirical frequencies") {
      const auto lp = abc_probs(0.7, 0.2, 0.1);
      Rng rng(99);
      std::vector<double> counts(7, 0.0);
      const int n = 100000;
      for (int i = 0; i < n; ++i) counts[sample_token(lp, 1.0, rng)] += 1.0;
      CHECK(std::fabs(counts[4] / n - 0.7) < 0.01);
      CHECK(std::fabs(counts[5] / n - 0.2) < 0.01);
      CHECK(std::fabs(counts[6] / n - 0.1) < 0.01);
      CHECK(counts[0] + counts[1] + counts[2] + counts[3] == 0.0);
    }
    SUBCASE("low temperature approaches greedy") {
      const auto user = cope::test::toy_model(v, cope::test::toy_user_table());
      DecodeConfig cfg{.max_new_tokens = 12};
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        CHECK(sample_generate(user, TokenSequence{0}, 1e-3, seed, cfg) ==
              greedy_generate(user, TokenSequence{0}, cfg));
      }
    }
    SUBCASE("seeded") {
      const auto user = cope::test::toy_model(v, cope::test::toy_user_table());
      DecodeConfig cfg{.max_new_tokens = 12};
      CHECK(sample_generate(user, TokenSequence{0}, 1.0, 5, cfg) ==
            sample_generate(user, TokenSequence{0}, 1.0, 5, cfg));
      CHECK_THROWS_AS(sample_generate(user, TokenSequence{0}, 0.0, 5, cfg), std::invalid_argument);
    }
  }

  TEST_CASE("trace serializes one line per step") {
    DecodeTrace t;
    t.steps.push_back({.head_size = 2, .token = 5, .reward = 0.5, .user_lp = -0.1, .base_lp = -0.6});
    t.steps.push_back({.head_size = 1, .token = 1, .reward = 0.0, .user_lp = -0.2, .base_lp = -0.2});
    std::ostringstream out;
    t.write_jsonl(out, 3);
    const std::string s = out.str();
    CHECK(std::count(s.begin(), s.end(), '\n') == 2);
    CHECK(s.rfind("{\"instance\":3,\"step\":0,\"head_size\":2,\"token\":5,", 0) == 0);
  }

  TEST_CASE("config validation") {
    CHECK_THROWS_AS((DecodeConfig{.tau = 2.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((DecodeConfig{.alpha = -1.0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((DecodeConfig{.repetition_penalty = 0.9}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((DecodeConfig{.max_new_tokens = 0}.validate()), std::invalid_argument);
  }
}
