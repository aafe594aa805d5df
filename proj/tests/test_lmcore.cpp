#include <doctest.h>

#include <cmath>
#include <numbers>

#include "cope/lmcore.hpp"
#include "support.hpp"

using namespace cope;
using cope::test::abc_vocab;
using cope::test::random_lp;

TEST_SUITE("lmcore") {
  TEST_CASE("encode examples") {
    const Vocabulary v = Vocabulary::ascii_chars();
    CHECK(v.encode("ab") == TokenSequence{v.lookup("a"), v.lookup("b")});
    CHECK(v.encode("").empty());
    CHECK(v.encode("\t") == TokenSequence{v.unk()});
    CHECK(v.encode("\xc3\xa9") == TokenSequence{v.unk()});  // one code point, one unk
    CHECK(encode("ab", v) == v.encode("ab"));
  }

  TEST_CASE("decode examples") {
    const Vocabulary v = Vocabulary::ascii_chars();
    const TokenId a = v.lookup("a"), b = v.lookup("b");
    CHECK(v.decode_text(TokenSequence{a, b}) == "ab");
    CHECK(v.decode_text(TokenSequence{v.bos(), a, v.eos()}) == "a");
    CHECK(v.decode_text(TokenSequence{}).empty());
    try {
      v.decode_text(TokenSequence{a, 5000});
      FAIL("expected out_of_range");
    } catch (const std::out_of_range& e) {
      CHECK(std::string(e.what()).find("position 1") != std::string::npos);
    }
  }

  TEST_CASE("round trip over in-vocabulary text") {
    const Vocabulary v = Vocabulary::ascii_chars();
    const std::string text = "The quick brown fox, 42 {jumps}~ over!";
    CHECK(v.decode_text(v.encode(text)) == text);
  }

  TEST_CASE("multi-character symbols use longest match") {
    const Vocabulary v = Vocabulary::with_symbols({"a", "ab", "b", "abc"});
    CHECK(v.encode("abcab") == TokenSequence{v.lookup("abc"), v.lookup("ab")});
  }

  TEST_CASE("vocabulary validation") {
    CHECK_THROWS_AS(Vocabulary({"x", "x", "y", "z"}, {}), std::invalid_argument);
    CHECK_THROWS_AS(Vocabulary({"a", "b", "c"}, {}), std::invalid_argument);
    Vocabulary::Specials clash;
    clash.eos = 0;
    CHECK_THROWS_AS(Vocabulary({"a", "b", "c", "d"}, clash), std::invalid_argument);
  }

  TEST_CASE("vocabulary file round trip") {
    const Vocabulary v = Vocabulary::ascii_chars();
    const auto dir = cope::test::scratch_dir("vocab");
    v.save(dir / "vocab.txt");
    const Vocabulary back = Vocabulary::load(dir / "vocab.txt");
    CHECK(back == v);
    CHECK(back.content_hash() == v.content_hash());
    CHECK(Vocabulary::parse(v.serialize()) == v);
    CHECK(v.serialize().rfind("bos 0\neos 1\npad 2\nunk 3\n", 0) == 0);
  }

  TEST_CASE("log-prob vector invariants") {
    CHECK_THROWS_AS(LogProbVector({std::log(0.5), std::log(0.4)}), std::invalid_argument);
    CHECK_THROWS_AS(LogProbVector({0.1, -10.0}), std::invalid_argument);
    const auto u = LogProbVector::uniform(4);
    for (double x : u.values()) CHECK(x == doctest::Approx(-std::log(4.0)).epsilon(1e-15));
    const auto p = LogProbVector::from_probs(std::vector<double>{2.0, 0.0, 2.0});
    CHECK(std::isinf(p[1]));
    CHECK(p.argmax() == 0);
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
      const auto lp = random_lp(rng, 50, 5.0);
      CHECK(std::fabs(logsumexp(lp.values())) < 1e-6);
    }
  }

  TEST_CASE("sequence_log_prob examples") {
    const Vocabulary v4 = Vocabulary::with_symbols({});
    REQUIRE(v4.size() == 4);
    const UniformModel uniform(v4);
    CHECK(sequence_log_prob(uniform, {}, TokenSequence{1, 2}) ==
          doctest::Approx(2.0 * std::log(0.25)).epsilon(1e-12));
    CHECK(sequence_log_prob(uniform, {}, TokenSequence{1, 2}) == doctest::Approx(-2.7726).epsilon(1e-4));

    const Vocabulary v = abc_vocab();
    const TokenId a = v.lookup("a"), b = v.lookup("b");
    // Next token is always "a" after "b" and "b" otherwise.
    const FunctionModel certain(v, [&](std::span<const TokenId> ctx) {
      std::vector<double> p(v.size(), 0.0);
      p[!ctx.empty() && ctx.back() == b ? a : b] = 1.0;
      return LogProbVector::from_probs(p);
    });
    CHECK(sequence_log_prob(certain, TokenSequence{a}, TokenSequence{b, a, b}) == 0.0);

    CHECK_THROWS_AS(sequence_log_prob(uniform, {}, TokenSequence{}), std::invalid_argument);
  }

  TEST_CASE("floor keeps impossible continuations finite") {
    const Vocabulary v = abc_vocab();
    const FunctionModel m(v, [&](std::span<const TokenId>) {
      std::vector<double> p(v.size(), 0.0);
      p[v.lookup("a")] = 1.0;
      return LogProbVector::from_probs(p);
    });
    CHECK(sequence_log_prob(m, {}, TokenSequence{v.lookup("b"), v.lookup("a")}) == kLogProbFloor);
  }

  TEST_CASE("sequence_log_prob equals the per-step product on a random model") {
    const Vocabulary v = abc_vocab();
    // Distribution depends on the last two context tokens.
    auto dist = [&](std::span<const TokenId> ctx) {
      std::uint64_t key = 17;
      for (std::size_t i = ctx.size() > 2 ? ctx.size() - 2 : 0; i < ctx.size(); ++i) {
        key = key * 31 + ctx[i];
      }
      Rng r(key);
      return random_lp(r, v.size());
    };
    const FunctionModel m(v, dist);
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
      TokenSequence prompt, cont;
      for (int i = 0; i < 3; ++i) prompt.push_back(static_cast<TokenId>(rng.below(v.size())));
      const std::size_t len = 1 + rng.below(6);
      for (std::size_t i = 0; i < len; ++i) cont.push_back(static_cast<TokenId>(rng.below(v.size())));

      double prod = 1.0;
      TokenSequence ctx = prompt;
      for (TokenId t : cont) {
        prod *= std::exp(dist(ctx)[t]);
        ctx.push_back(t);
      }
      CHECK(sequence_log_prob(m, prompt, cont) == doctest::Approx(std::log(prod)).epsilon(1e-9));

      // Additivity over concatenation.
      const std::size_t cut = rng.below(cont.size());
      if (cut > 0) {
        const TokenSequence head(cont.begin(), cont.begin() + cut), tail(cont.begin() + cut, cont.end());
        const double split = sequence_log_prob(m, prompt, head) + sequence_log_prob(m, concat(prompt, head), tail);
        CHECK(std::fabs(split - sequence_log_prob(m, prompt, cont)) < 1e-9);
      }
    }
  }
}
