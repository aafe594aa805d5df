#include <doctest.h>

#include <fstream>

#include "cope/checkpoint.hpp"
#include "support.hpp"

using namespace cope;

namespace {

CheckpointError::Kind kind_of(auto&& f) {
  try {
    f();
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("expected CheckpointError");
  return CheckpointError::Kind::io;
}

void truncate_file(const std::filesystem::path& p, std::size_t keep) {
  std::string s = cope::test::slurp(p);
  s.resize(keep);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << s;
}

}  // namespace

TEST_SUITE("checkpoint") {
  const Vocabulary v = Vocabulary::ascii_chars();
  const ModelDims d{.vocab = v.size(), .window = 4, .embed = 5, .hidden = 7};

  TEST_CASE("model and adapter round trip bit-identically") {
    const auto dir = cope::test::scratch_dir("ckpt_rt");
    const ModelParams p = ModelParams::random(d, 1);
    const AdapterDelta a = AdapterDelta::random(d, 3, 0.5, 2, 0.2);
    const auto h = save_checkpoint(p, v, dir / "m.ckpt");
    CHECK(h == file_hash(dir / "m.ckpt"));
    save_checkpoint(a, d, v, h, dir / "a.adapter");

    const ModelParams p2 = load_model_checkpoint(dir / "m.ckpt", v);
    const AdapterDelta a2 = load_adapter_checkpoint(dir / "a.adapter", v, d, h);
    CHECK(p2 == p);
    CHECK(a2 == a);
    const TokenSequence ctx = v.encode("hello");
    CHECK(forward(p2, &a2, ctx) == forward(p, &a, ctx));

    // Saving again yields the same bytes.
    CHECK(save_checkpoint(p2, v, dir / "m2.ckpt") == h);
  }

  TEST_CASE("corruption is detected") {
    const auto dir = cope::test::scratch_dir("ckpt_bad");
    const ModelParams p = ModelParams::random(d, 1);
    const AdapterDelta a = AdapterDelta::random(d, 3, 0.5, 2, 0.2);
    const auto h = save_checkpoint(p, v, dir / "m.ckpt");
    save_checkpoint(a, d, v, h, dir / "a.adapter");

    SUBCASE("truncated") {
      truncate_file(dir / "m.ckpt", 100);
      CHECK(kind_of([&] { load_model_checkpoint(dir / "m.ckpt", v); }) == CheckpointError::Kind::corrupt_header);
      truncate_file(dir / "a.adapter", 3);
      CHECK(kind_of([&] { load_adapter_checkpoint(dir / "a.adapter", v, d, h); }) ==
            CheckpointError::Kind::corrupt_header);
    }
    SUBCASE("bad magic") {
      std::string s = cope::test::slurp(dir / "m.ckpt");
      s[0] = 'X';
      std::ofstream(dir / "m.ckpt", std::ios::binary | std::ios::trunc) << s;
      CHECK(kind_of([&] { load_model_checkpoint(dir / "m.ckpt", v); }) == CheckpointError::Kind::corrupt_header);
    }
    SUBCASE("flipped parameter byte") {
      std::string s = cope::test::slurp(dir / "m.ckpt");
      s[s.size() / 2] ^= 0x10;
      std::ofstream(dir / "m.ckpt", std::ios::binary | std::ios::trunc) << s;
      CHECK(kind_of([&] { load_model_checkpoint(dir / "m.ckpt", v); }) == CheckpointError::Kind::corrupt_header);
    }
    SUBCASE("adapter against the wrong base") {
      CHECK(kind_of([&] { load_adapter_checkpoint(dir / "a.adapter", v, d, h ^ 1); }) ==
            CheckpointError::Kind::hash_mismatch);
    }
    SUBCASE("adapter with other dims") {
      ModelDims other = d;
      other.hidden = 8;
      CHECK(kind_of([&] { load_adapter_checkpoint(dir / "a.adapter", v, other, h); }) ==
            CheckpointError::Kind::dimension_mismatch);
    }
    SUBCASE("other vocabulary") {
      const Vocabulary w = Vocabulary::with_symbols({"a", "b"});
      CHECK(kind_of([&] { load_model_checkpoint(dir / "m.ckpt", w); }) == CheckpointError::Kind::hash_mismatch);
    }
    SUBCASE("missing file") {
      CHECK(kind_of([&] { load_model_checkpoint(dir / "none.ckpt", v); }) == CheckpointError::Kind::io);
    }
  }
}
