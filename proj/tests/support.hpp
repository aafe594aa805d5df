#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cope/lmcore.hpp"
#include "cope/random.hpp"
#include "cope/tinylm.hpp"

namespace cope::test {

inline Vocabulary abc_vocab() { return Vocabulary::with_symbols({"a", "b", "c"}); }

/// Random distribution over n entries; `spread` scales the logits.
inline LogProbVector random_lp(Rng& rng, std::size_t n, double spread = 2.0) {
  std::vector<double> logits(n);
  for (auto& v : logits) v = rng.normal(0.0, spread);
  return LogProbVector::from_logits(logits);
}

inline ModelDims tiny_dims(const Vocabulary& vocab) {
  ModelDims d;
  d.vocab = vocab.size();
  d.window = 3;
  d.embed = 4;
  d.hidden = 6;
  d.pad = vocab.pad();
  return d;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cope_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace cope::test
