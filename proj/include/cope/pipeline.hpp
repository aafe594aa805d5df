#pragma once

// End-to-end orchestration: task-adapted model -> per-user adapters ->
// negative synthesis -> DPO -> contrastive decoding -> evaluation. Every
// stage writes checkpoints plus a stamp recording the hash of its inputs,
// so stages can be resumed individually and stale outputs are detected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cope/bench.hpp"
#include "cope/corpus.hpp"
#include "cope/decode.hpp"
#include "cope/prefopt.hpp"
#include "cope/reward.hpp"
#include "cope/tinylm.hpp"

namespace cope {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& cause)
      : std::runtime_error("stage " + stage + ": " + cause), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Raised when a stage's recorded inputs no longer match the current config
/// or upstream outputs, or when its outputs were modified.
class StaleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BaseContrast { init, tam, oppu };

struct PipelineConfig {
  std::filesystem::path corpus_dir = "data/corpus";
  std::filesystem::path run_root = "runs";
  std::filesystem::path run_dir;  // empty: run_root / <config hash>
  std::uint64_t seed = 1234;

  bool gen_corpus = true;  // generate the corpus when corpus_dir has none
  std::uint64_t corpus_seed = 7;
  std::size_t corpus_users = 10;
  std::size_t corpus_background = 20;

  ModelDims dims;  // vocab/pad come from the vocabulary
  std::size_t adapter_rank = 4;
  double adapter_scale = 1.0;

  TrainConfig task;
  TrainConfig user;
  NegativeSynthesisConfig neg;
  DpoConfig dpo;
  DecodeConfig decode;
  BaseContrast base_contrast = BaseContrast::tam;
  double diag_fraction = 1.0;  // share of each user's train split scored by diagnose-reward

  PipelineConfig();

  /// Every key accepted by set()/get(), in serialization order.
  static const std::vector<std::string>& keys();
  /// Throws ConfigError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Flat `key = value` lines; '#' starts a comment.
  void load_file(const std::filesystem::path& path);
  void parse(const std::string& text);
  std::string serialize() const;

  /// Hash of every key except the path keys.
  std::uint64_t hash() const;
  std::filesystem::path resolved_run_dir() const;
  void validate() const;
};

enum class Stage { train_task, train_user, synth_neg, train_dpo, decode, eval, diagnose_reward };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);

struct StageRecord {
  std::string name;
  std::string inputs_hash;
  std::map<std::string, std::string> outputs;  // run-dir-relative path -> content hash
  double seconds = 0.0;
  bool reused = false;
};

struct RunManifest {
  std::filesystem::path run_dir;
  std::string config_hash;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;  // corpus file -> content hash
  std::vector<StageRecord> stages;
  std::string simd;

  void write_json(const std::filesystem::path& path) const;
};

struct RunOptions {
  /// Stages to execute; empty means all of them.
  std::set<Stage> stages;
  /// Reuse stages whose stamps match; a mismatching stamp raises StaleError.
  /// Without resume every requested stage is recomputed.
  bool resume = false;
  bool verbose = true;
};

/// Executes the requested stages in pipeline order. Upstream stages that are
/// not requested must already have valid outputs in the run directory.
RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& options = {});

/// Writes the corpus for cfg (default user profiles, cfg.corpus_seed).
CorpusIndex generate_corpus(const PipelineConfig& cfg, const std::filesystem::path& dir);

enum class SweepAxis { alpha, beta, base_contrast };
SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
  std::string axis;
  std::string value;
  MethodAggregate aggregate;      // the "cope" method under this setting
  std::string training_hash;      // digest of every adapter checkpoint used
};

struct SweepTable {
  std::vector<SweepRow> rows;
  void write_csv(std::ostream& out) const;
};

/// Re-evaluates CoPe for each value of one axis, reusing upstream
/// checkpoints: alpha and base_contrast retrain nothing, beta retrains DPO
/// only. Throws ConfigError when a value does not parse for the axis.
SweepTable ablation_sweep(const PipelineConfig& cfg, SweepAxis axis,
                          const std::vector<std::string>& values, bool verbose = true);

/// Loads the evaluation report written by the eval stage.
EvalReport load_eval_report(const PipelineConfig& cfg);

}  // namespace cope
