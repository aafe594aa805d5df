#include "cope/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "cope/checkpoint.hpp"
#include "cope/hash.hpp"
#include "cope/kernels.hpp"
#include "cope/random.hpp"

namespace cope {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key " + key + ": '" + v + "' is not a number");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key " + key + ": '" + v + "' is not a non-negative integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": '" + v + "' is not a boolean");
}

std::string base_contrast_name(BaseContrast b) {
  switch (b) {
    case BaseContrast::init:
      return "init";
    case BaseContrast::tam:
      return "tam";
    case BaseContrast::oppu:
      return "oppu";
  }
  return "?";
}

BaseContrast parse_base_contrast(const std::string& key, const std::string& v) {
  if (v == "init") return BaseContrast::init;
  if (v == "tam") return BaseContrast::tam;
  if (v == "oppu") return BaseContrast::oppu;
  throw ConfigError("config key " + key + ": expected init|tam|oppu, got '" + v + "'");
}

struct KeyDef {
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
  bool path = false;
};

#define COPE_DOUBLE(name, field)                                                        \
  KeyDef {                                                                              \
    name, [](const PipelineConfig& c) { return fmt_double(c.field); },                  \
        [](PipelineConfig& c, const std::string& v) { c.field = parse_double(name, v); } \
  }
#define COPE_SIZE(name, field)                                                   \
  KeyDef {                                                                       \
    name, [](const PipelineConfig& c) { return std::to_string(c.field); },       \
        [](PipelineConfig& c, const std::string& v) {                            \
          c.field = static_cast<decltype(c.field)>(parse_u64(name, v));          \
        }                                                                        \
  }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      {"corpus_dir", [](const PipelineConfig& c) { return c.corpus_dir.string(); },
       [](PipelineConfig& c, const std::string& v) { c.corpus_dir = v; }, true},
      {"run_root", [](const PipelineConfig& c) { return c.run_root.string(); },
       [](PipelineConfig& c, const std::string& v) { c.run_root = v; }, true},
      {"run_dir", [](const PipelineConfig& c) { return c.run_dir.string(); },
       [](PipelineConfig& c, const std::string& v) { c.run_dir = v; }, true},
      COPE_SIZE("seed", seed),
      {"gen_corpus", [](const PipelineConfig& c) { return std::string(c.gen_corpus ? "true" : "false"); },
       [](PipelineConfig& c, const std::string& v) { c.gen_corpus = parse_bool("gen_corpus", v); }},
      COPE_SIZE("corpus.seed", corpus_seed),
      COPE_SIZE("corpus.users", corpus_users),
      COPE_SIZE("corpus.background", corpus_background),
      COPE_SIZE("model.window", dims.window),
      COPE_SIZE("model.embed", dims.embed),
      COPE_SIZE("model.hidden", dims.hidden),
      COPE_SIZE("adapter.rank", adapter_rank),
      COPE_DOUBLE("adapter.scale", adapter_scale),
      COPE_DOUBLE("task.learning_rate", task.learning_rate),
      COPE_SIZE("task.epochs", task.epochs),
      COPE_SIZE("task.batch_size", task.batch_size),
      COPE_DOUBLE("task.weight_decay", task.weight_decay),
      COPE_DOUBLE("task.warmup_ratio", task.warmup_ratio),
      COPE_DOUBLE("user.learning_rate", user.learning_rate),
      COPE_SIZE("user.epochs", user.epochs),
      COPE_SIZE("user.batch_size", user.batch_size),
      COPE_DOUBLE("user.weight_decay", user.weight_decay),
      COPE_DOUBLE("user.warmup_ratio", user.warmup_ratio),
      COPE_SIZE("neg.k", neg.k),
      COPE_DOUBLE("neg.temperature", neg.temperature),
      COPE_SIZE("neg.max_new_tokens", neg.max_new_tokens),
      {"neg.sampler",
       [](const PipelineConfig& c) { return std::string(c.neg.sampler == SamplerKind::tam ? "tam" : "oppu"); },
       [](PipelineConfig& c, const std::string& v) {
         if (v == "tam") {
           c.neg.sampler = SamplerKind::tam;
         } else if (v == "oppu") {
           c.neg.sampler = SamplerKind::oppu;
         } else {
           throw ConfigError("config key neg.sampler: expected tam|oppu, got '" + v + "'");
         }
       }},
      COPE_DOUBLE("dpo.beta", dpo.beta),
      COPE_DOUBLE("dpo.learning_rate", dpo.learning_rate),
      COPE_SIZE("dpo.epochs", dpo.epochs),
      COPE_SIZE("dpo.batch_size", dpo.batch_size),
      COPE_DOUBLE("dpo.weight_decay", dpo.weight_decay),
      COPE_DOUBLE("dpo.warmup_ratio", dpo.warmup_ratio),
      {"dpo.reference",
       [](const PipelineConfig& c) {
         return std::string(c.dpo.reference == ReferenceKind::oppu_snapshot ? "oppu_snapshot" : "tam");
       },
       [](PipelineConfig& c, const std::string& v) {
         if (v == "oppu_snapshot") {
           c.dpo.reference = ReferenceKind::oppu_snapshot;
         } else if (v == "tam") {
           c.dpo.reference = ReferenceKind::tam;
         } else {
           throw ConfigError("config key dpo.reference: expected oppu_snapshot|tam, got '" + v + "'");
         }
       }},
      COPE_DOUBLE("decode.tau", decode.tau),
      COPE_DOUBLE("decode.alpha", decode.alpha),
      COPE_DOUBLE("decode.repetition_penalty", decode.repetition_penalty),
      COPE_SIZE("decode.max_new_tokens", decode.max_new_tokens),
      {"decode.base_contrast", [](const PipelineConfig& c) { return base_contrast_name(c.base_contrast); },
       [](PipelineConfig& c, const std::string& v) {
         c.base_contrast = parse_base_contrast("decode.base_contrast", v);
       }},
      COPE_DOUBLE("diag.fraction", diag_fraction),
  };
  return defs;
}

#undef COPE_DOUBLE
#undef COPE_SIZE

const KeyDef& find_key(const std::string& key) {
  for (const auto& d : key_defs()) {
    if (d.key == key) return d;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

PipelineConfig::PipelineConfig() {
  task.learning_rate = 1.2;
  task.epochs = 60;
  task.batch_size = 8;
  task.trainable = Trainable::full;

  user.learning_rate = 0.1;
  user.epochs = 20;
  user.batch_size = 4;
  user.trainable = Trainable::adapter_only;

  neg.max_new_tokens = 80;

  dpo.beta = 3.0;
  dpo.learning_rate = 0.002;
  dpo.epochs = 5;
  dpo.batch_size = 4;

  decode.tau = 0.1;
  decode.alpha = 0.3;
  decode.repetition_penalty = 1.0;
  decode.max_new_tokens = 80;
}

const std::vector<std::string>& PipelineConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& d : key_defs()) out.push_back(d.key);
    return out;
  }();
  return names;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, value);
}

std::string PipelineConfig::get(const std::string& key) const { return find_key(key).get(*this); }

void PipelineConfig::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void PipelineConfig::load_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  parse(buf.str());
}

std::string PipelineConfig::serialize() const {
  std::string out;
  for (const auto& d : key_defs()) out += d.key + " = " + d.get(*this) + "\n";
  return out;
}

std::uint64_t PipelineConfig::hash() const {
  Fnv1a h;
  for (const auto& d : key_defs()) {
    if (d.path) continue;
    h.update(d.key + "=" + d.get(*this) + "\n");
  }
  return h.digest();
}

fs::path PipelineConfig::resolved_run_dir() const {
  if (!run_dir.empty()) return run_dir;
  fs::path root = run_root;
  if (const char* env = std::getenv("COPE_RUN_ROOT"); env != nullptr && *env != '\0') root = env;
  return root / hex64(hash());
}

void PipelineConfig::validate() const {
  try {
    task.validate();
    user.validate();
    neg.validate();
    dpo.validate();
    decode.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (task.trainable != Trainable::full || user.trainable != Trainable::adapter_only) {
    throw ConfigError("task stage trains the full model, user stage trains adapters only");
  }
  if (dims.window == 0 || dims.embed == 0 || dims.hidden == 0) {
    throw ConfigError("model dims must be positive");
  }
  if (adapter_rank < 1 || adapter_rank >= dims.hidden) {
    throw ConfigError("adapter.rank must be in [1, model.hidden)");
  }
  if (!(diag_fraction > 0.0 && diag_fraction <= 1.0)) {
    throw ConfigError("diag.fraction must be in (0, 1]");
  }
  if (corpus_users < 2) throw ConfigError("corpus.users must be >= 2");
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s = {Stage::train_task, Stage::train_user, Stage::synth_neg,
                                       Stage::train_dpo,  Stage::decode,     Stage::eval,
                                       Stage::diagnose_reward};
  return s;
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::train_task:
      return "train-task";
    case Stage::train_user:
      return "train-user";
    case Stage::synth_neg:
      return "synth-neg";
    case Stage::train_dpo:
      return "train-dpo";
    case Stage::decode:
      return "decode";
    case Stage::eval:
      return "eval";
    case Stage::diagnose_reward:
      return "diagnose-reward";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

void RunManifest::write_json(const fs::path& path) const {
  json stages_json = json::array();
  for (const auto& s : stages) {
    stages_json.push_back({{"stage", s.name},
                           {"inputs", s.inputs_hash},
                           {"outputs", s.outputs},
                           {"seconds", s.seconds},
                           {"reused", s.reused}});
  }
  json j = {{"run_dir", run_dir.string()}, {"config_hash", config_hash}, {"simd", simd},
            {"config", config},            {"inputs", inputs},           {"stages", stages_json}};
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

CorpusIndex generate_corpus(const PipelineConfig& cfg, const fs::path& dir) {
  return gen_corpus(default_user_profiles(cfg.corpus_seed, cfg.corpus_users, cfg.corpus_background),
                    cfg.corpus_seed, dir);
}

namespace {

const std::vector<std::string> kMethods = {"tam_greedy", "oppu_greedy", "dpo_greedy", "oppu_cope",
                                           "cope"};

std::vector<Stage> deps(Stage s) {
  switch (s) {
    case Stage::train_task:
      return {};
    case Stage::train_user:
      return {Stage::train_task};
    case Stage::synth_neg:
      return {Stage::train_task, Stage::train_user};
    case Stage::train_dpo:
      return {Stage::train_task, Stage::train_user, Stage::synth_neg};
    case Stage::decode:
      return {Stage::train_task, Stage::train_user, Stage::train_dpo};
    case Stage::eval:
      return {Stage::train_task, Stage::train_dpo, Stage::decode};
    case Stage::diagnose_reward:
      return {Stage::train_task, Stage::train_user};
  }
  return {};
}

// Config keys each stage depends on, by prefix.
std::vector<std::string> config_prefixes(Stage s) {
  switch (s) {
    case Stage::train_task:
      return {"seed", "model.", "task."};
    case Stage::train_user:
      return {"seed", "adapter.", "user."};
    case Stage::synth_neg:
      return {"seed", "neg."};
    case Stage::train_dpo:
      return {"seed", "dpo."};
    case Stage::decode:
      return {"decode."};
    case Stage::eval:
      return {};
    case Stage::diagnose_reward:
      return {"diag."};
  }
  return {};
}

std::string stage_config(const PipelineConfig& cfg, Stage s) {
  std::string out;
  for (const auto& key : PipelineConfig::keys()) {
    for (const auto& prefix : config_prefixes(s)) {
      if (key.rfind(prefix, 0) == 0) {
        out += key + "=" + cfg.get(key) + "\n";
        break;
      }
    }
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ fnv1a(label));
}

TokenSequence prompt_tokens(const Vocabulary& vocab, const std::string& input) {
  TokenSequence t = vocab.encode(input);
  t.push_back(vocab.bos());
  return t;
}

TokenSequence response_tokens(const Vocabulary& vocab, const std::string& output) {
  TokenSequence t = vocab.encode(output);
  t.push_back(vocab.eos());
  return t;
}

std::vector<Example> to_examples(const Vocabulary& vocab, const std::vector<CorpusRecord>& recs) {
  std::vector<Example> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back({prompt_tokens(vocab, r.input), response_tokens(vocab, r.output)});
  return out;
}

struct Stamp {
  std::string inputs;
  std::map<std::string, std::string> outputs;
  json metrics;
};

struct UserData {
  std::string id;
  std::vector<CorpusRecord> train;
  std::vector<CorpusRecord> test;
};

class Runner {
 public:
  Runner(const PipelineConfig& cfg, bool verbose)
      : cfg_(cfg), verbose_(verbose), dir_(cfg.resolved_run_dir()), vocab_(Vocabulary::ascii_chars()) {
    cfg_.validate();
    dims_ = cfg_.dims;
    dims_.vocab = vocab_.size();
    dims_.pad = vocab_.pad();
  }

  const fs::path& dir() const { return dir_; }
  const Vocabulary& vocab() const { return vocab_; }
  const PipelineConfig& cfg() const { return cfg_; }
  const std::vector<UserData>& users() const { return users_; }

  void log(const std::string& msg) const {
    if (verbose_) std::cerr << "[cope] " << msg << '\n';
  }

  // --- corpus -------------------------------------------------------------

  void load_corpus() {
    if (corpus_loaded_) return;
    if (!fs::exists(cfg_.corpus_dir / "index.json")) {
      if (!cfg_.gen_corpus) {
        throw ConfigError("no corpus at " + cfg_.corpus_dir.string() + " and gen_corpus = false");
      }
      log("generating corpus in " + cfg_.corpus_dir.string());
      generate_corpus(cfg_, cfg_.corpus_dir);
    }
    index_ = read_corpus_index(cfg_.corpus_dir);
    if (index_.users.size() < 2) throw ConfigError("corpus needs at least 2 evaluated users");
    Fnv1a digest;
    auto add_file = [&](const fs::path& p) {
      const std::string h = hex64(file_hash(p));
      corpus_hashes_[fs::relative(p, cfg_.corpus_dir).generic_string()] = h;
      digest.update(p.filename().string() + "=" + h + "\n");
    };
    add_file(cfg_.corpus_dir / "index.json");
    add_file(cfg_.corpus_dir / index_.pooled);
    pooled_ = read_jsonl(cfg_.corpus_dir / index_.pooled);
    if (pooled_.empty()) throw ConfigError("pooled task-stage corpus is empty");
    for (const auto& u : index_.users) {
      UserData d;
      d.id = u;
      add_file(user_split_path(cfg_.corpus_dir, u, "train"));
      add_file(user_split_path(cfg_.corpus_dir, u, "test"));
      d.train = read_jsonl(user_split_path(cfg_.corpus_dir, u, "train"));
      d.test = read_jsonl(user_split_path(cfg_.corpus_dir, u, "test"));
      if (d.train.empty() || d.test.empty()) throw ConfigError("user " + u + " has an empty split");
      users_.push_back(std::move(d));
    }
    corpus_digest_ = hex64(digest.digest());
    corpus_loaded_ = true;
  }

  const std::map<std::string, std::string>& corpus_hashes() const { return corpus_hashes_; }

  // --- stamps -------------------------------------------------------------

  fs::path stamp_path(Stage s) const { return dir_ / "stamps" / (stage_name(s) + ".json"); }

  std::optional<Stamp> read_stamp(Stage s) const {
    std::ifstream in(stamp_path(s));
    if (!in) return std::nullopt;
    const auto j = json::parse(in);
    Stamp st;
    st.inputs = j.at("inputs").get<std::string>();
    st.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    if (j.contains("metrics")) st.metrics = j.at("metrics");
    return st;
  }

  void write_stamp(Stage s, const Stamp& st) const {
    fs::create_directories(stamp_path(s).parent_path());
    json j = {{"stage", stage_name(s)}, {"inputs", st.inputs}, {"outputs", st.outputs},
              {"metrics", st.metrics}};
    std::ofstream out(stamp_path(s), std::ios::binary);
    out << j.dump(2) << '\n';
  }

  /// Verified stamp of an upstream stage; throws when missing or stale.
  const Stamp& valid_stamp(Stage s) {
    if (auto it = verified_.find(s); it != verified_.end()) return it->second;
    auto st = read_stamp(s);
    if (!st) {
      throw StageError(stage_name(s), "no outputs in " + dir_.string() + "; run it first");
    }
    const std::string expected = inputs_hash(s);
    if (st->inputs != expected) {
      throw StaleError("stage " + stage_name(s) + " in " + dir_.string() +
                       " was produced from different inputs (stamp " + st->inputs + ", now " +
                       expected + ")");
    }
    check_outputs(s, *st);
    return verified_.emplace(s, std::move(*st)).first->second;
  }

  void check_outputs(Stage s, const Stamp& st) const {
    for (const auto& [rel, h] : st.outputs) {
      const fs::path p = dir_ / rel;
      if (!fs::exists(p)) throw StaleError("stage " + stage_name(s) + ": output " + rel + " is missing");
      if (hex64(file_hash(p)) != h) {
        throw StaleError("stage " + stage_name(s) + ": output " + rel + " was modified");
      }
    }
  }

  std::string inputs_hash(Stage s) {
    load_corpus();
    Fnv1a h;
    h.update(stage_name(s) + "\n");
    h.update(stage_config(cfg_, s));
    h.update("corpus=" + corpus_digest_ + "\n");
    h.update("vocab=" + hex64(vocab_.content_hash()) + "\n");
    for (Stage d : deps(s)) {
      const Stamp& up = valid_stamp(d);
      for (const auto& [rel, hash] : up.outputs) h.update(rel + "=" + hash + "\n");
    }
    return hex64(h.digest());
  }

  void mark_verified(Stage s, Stamp st) { verified_[s] = std::move(st); }
  void forget(Stage s) { verified_.erase(s); }

  std::string rel(const fs::path& p) const { return fs::relative(p, dir_).generic_string(); }

  void record(Stamp& st, const fs::path& p) const { st.outputs[rel(p)] = hex64(file_hash(p)); }

  // --- model access ---------------------------------------------------------

  fs::path user_dir(const std::string& u) const { return dir_ / "users" / u; }

  const ModelParams& tam() {
    if (!tam_) {
      valid_stamp(Stage::train_task);
      tam_ = load_model_checkpoint(dir_ / "tam.ckpt", vocab_);
      tam_hash_ = file_hash(dir_ / "tam.ckpt");
    }
    return *tam_;
  }
  std::uint64_t tam_hash() {
    tam();
    return tam_hash_;
  }
  const ModelParams& init() {
    if (!init_) {
      valid_stamp(Stage::train_task);
      init_ = load_model_checkpoint(dir_ / "init.ckpt", vocab_);
    }
    return *init_;
  }

  AdapterDelta load_adapter(const fs::path& p) {
    return load_adapter_checkpoint(p, vocab_, tam().dims, tam_hash());
  }

  const AdapterDelta& oppu(const std::string& u) {
    auto it = oppu_.find(u);
    if (it == oppu_.end()) {
      valid_stamp(Stage::train_user);
      it = oppu_.emplace(u, load_adapter(user_dir(u) / "oppu.adapter")).first;
    }
    return it->second;
  }

  const AdapterDelta& dpo(const std::string& u) {
    auto it = dpo_.find(u);
    if (it == dpo_.end()) {
      valid_stamp(Stage::train_dpo);
      it = dpo_.emplace(u, load_adapter(user_dir(u) / "dpo.adapter")).first;
    }
    return it->second;
  }

  void reset_models() {
    tam_.reset();
    init_.reset();
    oppu_.clear();
    dpo_.clear();
  }

  // --- stage bodies ---------------------------------------------------------

  Stamp run_train_task() {
    Stamp st;
    fs::create_directories(dir_);
    vocab_.save(dir_ / "vocab.txt");
    record(st, dir_ / "vocab.txt");

    ModelParams params = ModelParams::random(dims_, derive_seed(cfg_.seed, "init"));
    save_checkpoint(params, vocab_, dir_ / "init.ckpt");
    record(st, dir_ / "init.ckpt");

    const auto examples = to_examples(vocab_, pooled_);
    TrainConfig tc = cfg_.task;
    tc.seed = derive_seed(cfg_.seed, "task");
    log("train-task: " + std::to_string(examples.size()) + " pooled pairs, " +
        std::to_string(tc.epochs) + " epochs");
    const TrainReport rep = train_sft(params, nullptr, examples, tc);
    log("train-task: loss " + fmt_double(rep.initial_loss) + " -> " + fmt_double(rep.epoch_losses.back()));
    save_checkpoint(params, vocab_, dir_ / "tam.ckpt");
    record(st, dir_ / "tam.ckpt");
    st.metrics = {{"initial_loss", rep.initial_loss}, {"epoch_losses", rep.epoch_losses}};
    return st;
  }

  Stamp run_train_user() {
    Stamp st;
    const ModelParams& base = tam();
    json per_user = json::object();
    for (const auto& u : users_) {
      AdapterDelta adapter = AdapterDelta::init(base.dims, cfg_.adapter_rank, cfg_.adapter_scale,
                                                derive_seed(cfg_.seed, "adapter/" + u.id));
      TrainConfig tc = cfg_.user;
      tc.seed = derive_seed(cfg_.seed, "user/" + u.id);
      ModelParams frozen = base;
      const TrainReport rep = train_sft(frozen, &adapter, to_examples(vocab_, u.train), tc);
      if (!(frozen == base)) throw StageError("train-user", "base weights changed");
      const fs::path p = user_dir(u.id) / "oppu.adapter";
      save_checkpoint(adapter, base.dims, vocab_, tam_hash(), p);
      record(st, p);
      per_user[u.id] = {{"initial_loss", rep.initial_loss}, {"final_loss", rep.epoch_losses.back()}};
      log("train-user " + u.id + ": loss " + fmt_double(rep.initial_loss) + " -> " +
          fmt_double(rep.epoch_losses.back()));
    }
    st.metrics = per_user;
    return st;
  }

  Stamp run_synth_neg() {
    Stamp st;
    const ModelParams& base = tam();
    const TinyLm tam_lm(vocab_, base);
    for (const auto& u : users_) {
      const TinyLm oppu_lm(vocab_, base, &oppu(u.id));
      const LanguageModel& sampler = cfg_.neg.sampler == SamplerKind::tam
                                         ? static_cast<const LanguageModel&>(tam_lm)
                                         : static_cast<const LanguageModel&>(oppu_lm);
      const std::uint64_t user_seed = derive_seed(cfg_.seed, "neg/" + u.id);

      std::vector<HistoryPair> history;
      std::map<std::size_t, TokenSequence> negatives;
      std::vector<NegativeResult> results;
      for (std::size_t i = 0; i < u.train.size(); ++i) {
        history.push_back({prompt_tokens(vocab_, u.train[i].input),
                           response_tokens(vocab_, u.train[i].output)});
        NegativeSynthesisConfig nc = cfg_.neg;
        nc.seed = user_seed ^ static_cast<std::uint64_t>(i);
        results.push_back(synthesize_negative(sampler, oppu_lm, tam_lm, history.back().prompt, nc));
        negatives[i] = results.back().negative();
      }
      const PreferenceDataset ds = build_preference_dataset(history, negatives);
      for (const auto& w : ds.warnings) log("synth-neg " + u.id + ": " + w);

      const fs::path p = user_dir(u.id) / "preferences.jsonl";
      fs::create_directories(p.parent_path());
      std::ofstream out(p, std::ios::binary);
      for (std::size_t i = 0; i < history.size(); ++i) {
        if (negatives[i] == history[i].response) continue;
        const NegativeResult& r = results[i];
        json cands = json::array();
        for (const auto& c : r.candidates) {
          cands.push_back({{"text", vocab_.decode_text(c.tokens)},
                           {"tokens", c.tokens},
                           {"score", c.score},
                           {"empty", c.empty}});
        }
        json row = {{"user_id", u.id},
                    {"index", i},
                    {"input", u.train[i].input},
                    {"chosen", u.train[i].output},
                    {"rejected", vocab_.decode_text(r.negative())},
                    {"rejected_tokens", r.negative()},
                    {"chosen_index", r.chosen},
                    {"candidates", cands}};
        out << row.dump() << '\n';
      }
      out.close();
      record(st, p);
      log("synth-neg " + u.id + ": " + std::to_string(ds.triples.size()) + " preference triples");
    }
    return st;
  }

  std::vector<PreferenceTriple> read_preferences(const std::string& u) {
    std::ifstream in(user_dir(u) / "preferences.jsonl");
    if (!in) throw StageError("train-dpo", "missing preferences for user " + u);
    std::vector<PreferenceTriple> out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      PreferenceTriple t;
      t.prompt = prompt_tokens(vocab_, j.at("input").get<std::string>());
      t.chosen = response_tokens(vocab_, j.at("chosen").get<std::string>());
      t.rejected = j.at("rejected_tokens").get<TokenSequence>();
      vocab_.validate(t.rejected);
      out.push_back(std::move(t));
    }
    return out;
  }

  struct DpoResult {
    AdapterDelta adapter;
    DpoReport report;
  };

  DpoResult train_user_dpo(const std::string& u, const DpoConfig& dc) {
    const ModelParams& base = tam();
    const AdapterDelta snapshot = oppu(u);
    AdapterDelta policy = snapshot;
    const auto triples = read_preferences(u);
    DpoResult res{policy, {}};
    if (triples.empty()) {
      log("train-dpo " + u + ": no preference triples, keeping the OPPU adapter");
      return res;
    }
    const TinyLm ref_oppu(vocab_, base, &snapshot);
    const TinyLm ref_tam(vocab_, base);
    const LanguageModel& reference = dc.reference == ReferenceKind::oppu_snapshot
                                         ? static_cast<const LanguageModel&>(ref_oppu)
                                         : static_cast<const LanguageModel&>(ref_tam);
    DpoConfig c = dc;
    c.seed = derive_seed(cfg_.seed, "dpo/" + u);
    if (c.epochs == 0) return res;
    res.report = train_dpo(base, policy, reference, triples, c);
    res.adapter = std::move(policy);
    return res;
  }

  Stamp run_train_dpo() {
    Stamp st;
    json per_user = json::object();
    for (const auto& u : users_) {
      DpoResult res = train_user_dpo(u.id, cfg_.dpo);
      const fs::path p = user_dir(u.id) / "dpo.adapter";
      save_checkpoint(res.adapter, tam().dims, vocab_, tam_hash(), p);
      record(st, p);
      per_user[u.id] = {{"margin_before", res.report.mean_margin_before},
                        {"margin_after", res.report.mean_margin_after},
                        {"initial_loss", res.report.initial_loss},
                        {"epoch_losses", res.report.epoch_losses}};
      log("train-dpo " + u.id + ": beta*margin " + fmt_double(res.report.mean_margin_before) +
          " -> " + fmt_double(res.report.mean_margin_after));
    }
    st.metrics = per_user;
    return st;
  }

  /// Contrast model for CoPe decoding.
  std::unique_ptr<TinyLm> contrast_model(BaseContrast which, const std::string& u) {
    switch (which) {
      case BaseContrast::init:
        return std::make_unique<TinyLm>(vocab_, init());
      case BaseContrast::tam:
        return std::make_unique<TinyLm>(vocab_, tam());
      case BaseContrast::oppu:
        return std::make_unique<TinyLm>(vocab_, tam(), &oppu(u));
    }
    return nullptr;
  }

  struct GenerationRecord {
    std::string method;
    std::size_t instance = 0;
    TokenSequence tokens;
  };

  Stamp run_decode() {
    Stamp st;
    const ModelParams& base = tam();
    const TinyLm tam_lm(vocab_, base);
    for (const auto& u : users_) {
      const TinyLm oppu_lm(vocab_, base, &oppu(u.id));
      const TinyLm dpo_lm(vocab_, base, &dpo(u.id));
      const auto contrast = contrast_model(cfg_.base_contrast, u.id);
      const fs::path gen_path = user_dir(u.id) / "generations.jsonl";
      const fs::path trace_path = user_dir(u.id) / "cope_trace.jsonl";
      std::ofstream gen_out(gen_path, std::ios::binary);
      std::ofstream trace_out(trace_path, std::ios::binary);
      for (std::size_t i = 0; i < u.test.size(); ++i) {
        const TokenSequence prompt = prompt_tokens(vocab_, u.test[i].input);
        std::vector<std::pair<std::string, TokenSequence>> outs;
        outs.emplace_back("tam_greedy", greedy_generate(tam_lm, prompt, cfg_.decode));
        outs.emplace_back("oppu_greedy", greedy_generate(oppu_lm, prompt, cfg_.decode));
        outs.emplace_back("dpo_greedy", greedy_generate(dpo_lm, prompt, cfg_.decode));
        outs.emplace_back("oppu_cope", cope_generate(oppu_lm, *contrast, prompt, cfg_.decode).tokens);
        Generation cope = cope_generate(dpo_lm, *contrast, prompt, cfg_.decode);
        cope.trace.write_jsonl(trace_out, static_cast<long long>(i));
        outs.emplace_back("cope", std::move(cope.tokens));
        for (const auto& [method, tokens] : outs) {
          json row = {{"user_id", u.id},
                      {"instance", i},
                      {"method", method},
                      {"text", vocab_.decode_text(tokens)},
                      {"tokens", tokens}};
          gen_out << row.dump() << '\n';
        }
      }
      gen_out.close();
      trace_out.close();
      record(st, gen_path);
      record(st, trace_path);
    }
    log("decode: " + std::to_string(users_.size()) + " users decoded with base contrast " +
        base_contrast_name(cfg_.base_contrast));
    return st;
  }

  EvalRow score(const UserData& u, std::size_t instance, const std::string& method,
                const TokenSequence& tokens, const LanguageModel& tam_lm,
                const LanguageModel& reward_user) const {
    const CorpusRecord& gold = u.test.at(instance);
    const TokenSequence prompt = prompt_tokens(vocab_, gold.input);
    const std::string text = vocab_.decode_text(tokens);
    EvalRow row;
    row.user_id = u.id;
    row.instance = instance;
    row.method = method;
    row.rouge1 = rouge1(gold.output, text).f1;
    row.rougeL = rougeL(gold.output, text).f1;
    row.perplexity = perplexity(tam_lm, prompt, tokens);
    row.reward = sequence_reward(reward_user, tam_lm, prompt, tokens,
                                 RewardConfig{.alpha = 1.0, .tau = 0.0, .length_normalize = true});
    row.output = text;
    return row;
  }

  Stamp run_eval() {
    Stamp st;
    const ModelParams& base = tam();
    const TinyLm tam_lm(vocab_, base);
    EvalReport report;
    for (const auto& u : users_) {
      const TinyLm dpo_lm(vocab_, base, &dpo(u.id));
      std::ifstream in(user_dir(u.id) / "generations.jsonl");
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        const auto tokens = j.at("tokens").get<TokenSequence>();
        report.rows.push_back(score(u, j.at("instance").get<std::size_t>(),
                                    j.at("method").get<std::string>(), tokens, tam_lm, dpo_lm));
      }
    }
    fs::create_directories(dir_ / "report");
    {
      std::ofstream out(dir_ / "report" / "instances.csv", std::ios::binary);
      report.write_csv(out);
    }
    {
      std::ofstream out(dir_ / "report" / "aggregate.json", std::ios::binary);
      report.write_aggregate_json(out);
    }
    record(st, dir_ / "report" / "instances.csv");
    record(st, dir_ / "report" / "aggregate.json");
    for (const auto& a : report.aggregate()) {
      log("eval " + a.method + ": rougeL " + fmt_double(a.rougeL.mean) + " (se " +
          fmt_double(a.rougeL.se) + "), win-rate vs " + report.baseline + " " +
          fmt_double(a.win_rate_rougeL));
    }
    return st;
  }

  Stamp run_diagnose_reward() {
    Stamp st;
    const ModelParams& base = tam();
    const TinyLm tam_lm(vocab_, base);
    std::vector<std::unique_ptr<TinyLm>> models;
    std::vector<UserModelSamples> inputs;
    for (const auto& u : users_) {
      models.push_back(std::make_unique<TinyLm>(vocab_, base, &oppu(u.id)));
      UserModelSamples s;
      s.user_id = u.id;
      s.model = models.back().get();
      const auto take = static_cast<std::size_t>(
          std::ceil(cfg_.diag_fraction * static_cast<double>(u.train.size())));
      for (std::size_t i = 0; i < std::max<std::size_t>(1, take); ++i) {
        s.samples.push_back({prompt_tokens(vocab_, u.train[i].input),
                             response_tokens(vocab_, u.train[i].output)});
      }
      inputs.push_back(std::move(s));
    }
    const SeparationReport rep = reward_separation_report(inputs, tam_lm);
    fs::create_directories(dir_ / "report");
    const fs::path p = dir_ / "report" / "reward_separation.csv";
    {
      std::ofstream out(p, std::ios::binary);
      rep.write_csv(out);
    }
    record(st, p);
    st.metrics = {{"global_own", rep.global_own},
                  {"global_others", rep.global_others},
                  {"users_own_higher", rep.users_own_higher()}};
    log("diagnose-reward: own " + fmt_double(rep.global_own) + " vs others " +
        fmt_double(rep.global_others) + ", " + std::to_string(rep.users_own_higher()) + "/" +
        std::to_string(rep.rows.size()) + " users own > others");
    return st;
  }

  Stamp run(Stage s) {
    switch (s) {
      case Stage::train_task:
        return run_train_task();
      case Stage::train_user:
        return run_train_user();
      case Stage::synth_neg:
        return run_synth_neg();
      case Stage::train_dpo:
        return run_train_dpo();
      case Stage::decode:
        return run_decode();
      case Stage::eval:
        return run_eval();
      case Stage::diagnose_reward:
        return run_diagnose_reward();
    }
    return {};
  }

 private:
  PipelineConfig cfg_;
  bool verbose_;
  fs::path dir_;
  Vocabulary vocab_;
  ModelDims dims_;

  bool corpus_loaded_ = false;
  CorpusIndex index_;
  std::vector<CorpusRecord> pooled_;
  std::vector<UserData> users_;
  std::map<std::string, std::string> corpus_hashes_;
  std::string corpus_digest_;

  std::map<Stage, Stamp> verified_;
  std::optional<ModelParams> tam_;
  std::optional<ModelParams> init_;
  std::uint64_t tam_hash_ = 0;
  std::map<std::string, AdapterDelta> oppu_;
  std::map<std::string, AdapterDelta> dpo_;
};

// Stages whose outputs feed model caches that must be dropped after a rerun.
void invalidate_after(Runner& r, Stage s) {
  (void)s;
  r.reset_models();
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& cfg, const RunOptions& options) {
  Runner runner(cfg, options.verbose);
  runner.load_corpus();
  fs::create_directories(runner.dir());
  {
    std::ofstream out(runner.dir() / "config.snapshot", std::ios::binary);
    out << cfg.serialize();
  }

  RunManifest manifest;
  manifest.run_dir = runner.dir();
  manifest.config_hash = hex64(cfg.hash());
  manifest.simd = std::string(kernels::isa_name(kernels::active_isa()));
  for (const auto& k : PipelineConfig::keys()) manifest.config[k] = cfg.get(k);
  manifest.inputs = runner.corpus_hashes();

  const std::set<Stage> requested =
      options.stages.empty() ? std::set<Stage>(all_stages().begin(), all_stages().end())
                             : options.stages;
  runner.log("run directory " + runner.dir().string());

  for (Stage s : all_stages()) {
    if (!requested.count(s)) continue;
    const std::string name = stage_name(s);
    StageRecord rec;
    rec.name = name;
    const auto start = std::chrono::steady_clock::now();
    try {
      rec.inputs_hash = runner.inputs_hash(s);
      std::optional<Stamp> existing = options.resume ? runner.read_stamp(s) : std::nullopt;
      if (existing) {
        if (existing->inputs != rec.inputs_hash) {
          throw StaleError("stage " + name + ": recorded inputs " + existing->inputs +
                           " differ from current " + rec.inputs_hash);
        }
        runner.check_outputs(s, *existing);
        rec.outputs = existing->outputs;
        rec.reused = true;
        runner.log(name + ": up to date, reused");
        runner.mark_verified(s, std::move(*existing));
      } else {
        runner.forget(s);
        Stamp st = runner.run(s);
        st.inputs = rec.inputs_hash;
        runner.write_stamp(s, st);
        rec.outputs = st.outputs;
        runner.mark_verified(s, std::move(st));
        invalidate_after(runner, s);
      }
    } catch (const StaleError&) {
      throw;
    } catch (const CheckpointError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest.stages.push_back(std::move(rec));
  }
  manifest.write_json(runner.dir() / "manifest.json");
  return manifest;
}

EvalReport load_eval_report(const PipelineConfig& cfg) {
  const fs::path p = cfg.resolved_run_dir() / "report" / "instances.csv";
  std::ifstream in(p);
  if (!in) throw StageError("eval", "no report at " + p.string());
  return EvalReport::read_csv(in);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "alpha") return SweepAxis::alpha;
  if (name == "beta") return SweepAxis::beta;
  if (name == "base_contrast") return SweepAxis::base_contrast;
  throw ConfigError("unknown sweep axis '" + name + "' (alpha|beta|base_contrast)");
}

void SweepTable::write_csv(std::ostream& out) const {
  out << "axis,value,n,rouge1_mean,rougeL_mean,rougeL_se,win_rate_rougeL_vs_tam,"
         "rougeL_diff_mean,rougeL_diff_se,training_hash\n";
  for (const auto& r : rows) {
    const auto& a = r.aggregate;
    out << r.axis << ',' << r.value << ',' << a.n << ',' << fmt_double(a.rouge1.mean) << ','
        << fmt_double(a.rougeL.mean) << ',' << fmt_double(a.rougeL.se) << ','
        << fmt_double(a.win_rate_rougeL) << ',' << fmt_double(a.rougeL_diff.mean) << ','
        << fmt_double(a.rougeL_diff.se) << ',' << r.training_hash << '\n';
  }
}

SweepTable ablation_sweep(const PipelineConfig& cfg, SweepAxis axis,
                          const std::vector<std::string>& values, bool verbose) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const std::string axis_name = axis == SweepAxis::alpha  ? "alpha"
                                : axis == SweepAxis::beta ? "beta"
                                                          : "base_contrast";
  // Parse every value before any work.
  std::vector<double> numbers;
  std::vector<BaseContrast> contrasts;
  for (const auto& v : values) {
    if (axis == SweepAxis::base_contrast) {
      contrasts.push_back(parse_base_contrast("sweep " + axis_name, v));
    } else {
      numbers.push_back(parse_double("sweep " + axis_name, v));
    }
  }

  run_pipeline(cfg, {.stages = {Stage::train_task, Stage::train_user, Stage::synth_neg, Stage::train_dpo},
                     .resume = true,
                     .verbose = verbose});

  Runner runner(cfg, verbose);
  runner.load_corpus();
  const ModelParams& base = runner.tam();
  const TinyLm tam_lm(runner.vocab(), base);

  // tam_greedy baseline rows are shared by every sweep value.
  std::vector<EvalRow> baseline_rows;
  for (const auto& u : runner.users()) {
    for (std::size_t i = 0; i < u.test.size(); ++i) {
      const auto prompt = prompt_tokens(runner.vocab(), u.test[i].input);
      const TinyLm dpo_lm(runner.vocab(), base, &runner.dpo(u.id));
      baseline_rows.push_back(runner.score(u, i, "tam_greedy",
                                           greedy_generate(tam_lm, prompt, cfg.decode), tam_lm, dpo_lm));
    }
  }

  SweepTable table;
  for (std::size_t v = 0; v < values.size(); ++v) {
    DecodeConfig dc = cfg.decode;
    BaseContrast contrast = cfg.base_contrast;
    if (axis == SweepAxis::alpha) dc.alpha = numbers[v];
    if (axis == SweepAxis::base_contrast) contrast = contrasts[v];
    try {
      dc.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sweep value ") + values[v] + ": " + e.what());
    }

    std::map<std::string, AdapterDelta> adapters;
    Fnv1a training;
    for (const auto& u : runner.users()) {
      training.update(u.id + "/oppu=" + hex64(file_hash(runner.user_dir(u.id) / "oppu.adapter")) + "\n");
      if (axis == SweepAxis::beta) {
        DpoConfig c = cfg.dpo;
        c.beta = numbers[v];
        try {
          c.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("sweep value ") + values[v] + ": " + e.what());
        }
        auto res = runner.train_user_dpo(u.id, c);
        const fs::path p = runner.dir() / "sweep" / ("beta_" + values[v]) / u.id / "dpo.adapter";
        const std::uint64_t h = save_checkpoint(res.adapter, base.dims, runner.vocab(), runner.tam_hash(), p);
        training.update(u.id + "/dpo=" + hex64(h) + "\n");
        adapters.emplace(u.id, std::move(res.adapter));
      } else {
        training.update(u.id + "/dpo=" + hex64(file_hash(runner.user_dir(u.id) / "dpo.adapter")) + "\n");
        adapters.emplace(u.id, runner.dpo(u.id));
      }
    }

    EvalReport report;
    report.rows = baseline_rows;
    for (const auto& u : runner.users()) {
      const TinyLm user_lm(runner.vocab(), base, &adapters.at(u.id));
      const TinyLm reward_lm(runner.vocab(), base, &runner.dpo(u.id));
      const auto contrast_lm = runner.contrast_model(contrast, u.id);
      for (std::size_t i = 0; i < u.test.size(); ++i) {
        const auto prompt = prompt_tokens(runner.vocab(), u.test[i].input);
        const Generation g = cope_generate(user_lm, *contrast_lm, prompt, dc);
        report.rows.push_back(runner.score(u, i, "cope", g.tokens, tam_lm, reward_lm));
      }
    }
    SweepRow row;
    row.axis = axis_name;
    row.value = values[v];
    row.aggregate = report.aggregate_for("cope");
    row.training_hash = hex64(training.digest());
    runner.log("sweep " + axis_name + "=" + values[v] + ": rougeL " +
               fmt_double(row.aggregate.rougeL.mean));
    table.rows.push_back(std::move(row));
  }

  fs::create_directories(runner.dir() / "report");
  std::ofstream out(runner.dir() / "report" / ("sweep_" + axis_name + ".csv"), std::ios::binary);
  table.write_csv(out);
  return table;
}

}  // namespace cope
