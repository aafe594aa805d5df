#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cope/checkpoint.hpp"
#include "cope/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kIntegrity = 4 };

void print_manifest(const cope::RunManifest& m) {
  std::cout << "run_dir " << m.run_dir.string() << "\n";
  for (const auto& s : m.stages) {
    std::cout << s.name << (s.reused ? " (reused)" : "") << " " << s.seconds << "s\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cope: per-user adapters, DPO on synthesized negatives and contrastive decoding"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  app.add_option("--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress on stderr");

  std::map<std::string, std::optional<std::string>> overrides;
  for (const auto& key : cope::PipelineConfig::keys()) {
    app.add_option("--" + key, overrides[key], "config override")->group("Config keys");
  }

  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic user corpus");
  std::string gen_out;
  gen->add_option("--out", gen_out, "directory (default: corpus_dir)");

  std::map<cope::Stage, CLI::App*> stage_cmds;
  const std::map<cope::Stage, std::string> descriptions = {
      {cope::Stage::train_task, "train the task-adapted model on pooled data"},
      {cope::Stage::train_user, "train one adapter per user (OPPU)"},
      {cope::Stage::synth_neg, "synthesize best-of-K negatives"},
      {cope::Stage::train_dpo, "DPO on the preference triples"},
      {cope::Stage::decode, "decode test prompts with every method"},
      {cope::Stage::eval, "score generations and write the report"},
      {cope::Stage::diagnose_reward, "reward separation own vs other adapters"},
  };
  for (cope::Stage s : cope::all_stages()) {
    stage_cmds[s] = app.add_subcommand(cope::stage_name(s), descriptions.at(s));
  }

  auto* show = app.add_subcommand("config", "print the resolved config");

  auto* run = app.add_subcommand("run", "every stage in order");
  bool resume = false;
  run->add_flag("--resume", resume, "reuse stages whose stamps match");

  auto* sweep = app.add_subcommand("sweep", "ablation over alpha, beta or base_contrast");
  std::string axis;
  std::vector<std::string> values;
  sweep->add_option("--axis", axis, "alpha|beta|base_contrast")->required();
  sweep->add_option("--values", values, "comma separated values")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    cope::PipelineConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [key, value] : overrides) {
      if (value) cfg.set(key, *value);
    }
    cfg.validate();
    const bool verbose = !quiet;

    if (gen->parsed()) {
      const fs::path dir = gen_out.empty() ? cfg.corpus_dir : fs::path(gen_out);
      const auto index = cope::generate_corpus(cfg, dir);
      std::cout << "wrote " << index.users.size() << " users to " << dir.string() << "\n";
      return kOk;
    }
    if (show->parsed()) {
      std::cout << cfg.serialize();
      return kOk;
    }
    if (run->parsed()) {
      print_manifest(cope::run_pipeline(cfg, {.stages = {}, .resume = resume, .verbose = verbose}));
      return kOk;
    }
    if (sweep->parsed()) {
      const auto table = cope::ablation_sweep(cfg, cope::parse_sweep_axis(axis), values, verbose);
      table.write_csv(std::cout);
      return kOk;
    }
    for (const auto& [stage, cmd] : stage_cmds) {
      if (cmd->parsed()) {
        print_manifest(cope::run_pipeline(cfg, {.stages = {stage}, .resume = false, .verbose = verbose}));
        return kOk;
      }
    }
  } catch (const cope::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const cope::StaleError& e) {
    std::cerr << "stale: " << e.what() << "\n";
    return kIntegrity;
  } catch (const cope::CheckpointError& e) {
    std::cerr << "checkpoint: " << e.what() << "\n";
    return kIntegrity;
  } catch (const cope::StageError& e) {
    std::cerr << e.what() << "\n";
    return kStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStage;
  }
  return kOk;
}
