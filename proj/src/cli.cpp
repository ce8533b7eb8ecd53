// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "omni/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "omni/analytics.hpp"
#include "omni/ctc.hpp"
#include "omni/encoder.hpp"
#include "omni/error.hpp"

namespace omni::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

/// Failure carrying the process exit code.
class Failure : public std::runtime_error {
 public:
  Failure(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key, "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "key '" + key + "': expected a real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<Variant> parse_variants(const std::string& v) {
  if (v == "all") return {Variant::Dense, Variant::Switch, Variant::Omni};
  std::vector<Variant> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) {
    const Variant x = parse_variant(trim(item));
    if (std::find(out.begin(), out.end(), x) != out.end())
      throw ConfigError("variant", "variant '" + trim(item) + "' listed twice");
    out.push_back(x);
  }
  if (out.empty()) throw ConfigError("variant", "key 'variant' is empty");
  return out;
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  SchemaEntry entry;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define OMNI_SIZE(name, member, help)                                                   \
  Field{{name, "integer", help},                                                        \
        [](RunConfig& c, const std::string& v) { c.member = parse_size(name, v); },     \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define OMNI_REAL(name, member, help)                                                   \
  Field{{name, "real", help},                                                           \
        [](RunConfig& c, const std::string& v) { c.member = parse_real(name, v); },     \
        [](const RunConfig& c) { return fmt_real(c.member); }}
#define OMNI_BOOL(name, member, help)                                                   \
  Field{{name, "bool", help},                                                           \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); },     \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}
#define OMNI_STR(name, member, help)                                                    \
  Field{{name, "string", help}, [](RunConfig& c, const std::string& v) { c.member = v; }, \
        [](const RunConfig& c) { return c.member; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{{"variant", "variants", "dense, switch, omni, a comma list of them, or all"},
            [](RunConfig& c, const std::string& v) { c.variants = parse_variants(v); },
            [](const RunConfig& c) {
              std::string s;
              for (Variant v : c.variants) s += (s.empty() ? "" : ",") + to_string(v);
              return s;
            }},
      OMNI_SIZE("layers", model.layers, "encoder blocks"),
      OMNI_SIZE("embed_dim", model.embed_dim, "model width"),
      OMNI_SIZE("ffn_dim", model.ffn_dim, "feed-forward hidden width (per expert)"),
      OMNI_SIZE("heads", model.heads, "attention heads; must divide embed_dim"),
      OMNI_SIZE("experts", model.experts, "experts per MoE layer; dense runs use 1"),
      OMNI_SIZE("frame_stack", model.frame_stack, "input frames stacked per encoder step"),
      OMNI_REAL("peak_lr", train.peak_lr, "learning rate at the end of warmup"),
      OMNI_SIZE("warmup_steps", train.warmup_steps, "linear warmup length"),
      OMNI_SIZE("cosine_steps", train.cosine_steps, "cosine phase and step-decay interval"),
      OMNI_REAL("step_decay_factor", train.step_decay_factor, "cosine floor ratio and step decay"),
      OMNI_REAL("clip_norm", train.clip_norm, "global gradient norm bound"),
      OMNI_REAL("aux_weight", train.aux_weight, "load-balance loss weight"),
      OMNI_REAL("weight_decay", train.weight_decay, "decoupled weight decay"),
      OMNI_REAL("adam_beta1", train.adam_beta1, "first-moment decay"),
      OMNI_REAL("adam_beta2", train.adam_beta2, "second-moment decay"),
      OMNI_REAL("adam_eps", train.adam_eps, "denominator epsilon"),
      OMNI_SIZE("max_steps", train.max_steps, "optimizer steps per variant"),
      OMNI_SIZE("batch_max_frames", train.batch_max_frames, "frame budget per batch"),
      OMNI_SIZE("seed", train.seed, "global seed"),
      OMNI_BOOL("augment", train.augment_enabled, "feature masking during training"),
      OMNI_SIZE("freq_masks", train.augment.freq_masks, "frequency masks per utterance"),
      OMNI_SIZE("freq_width", train.augment.freq_width, "maximum frequency mask width"),
      OMNI_SIZE("time_masks", train.augment.time_masks, "time masks per utterance"),
      OMNI_SIZE("time_width", train.augment.time_width, "maximum time mask width"),
      OMNI_REAL("time_ratio", train.augment.time_ratio, "time mask width bound as a fraction of length"),
      OMNI_BOOL("synth", synth, "generate a synthetic corpus instead of reading data_dir"),
      OMNI_SIZE("synth_utterances", synth_utterances, "synthetic corpus size"),
      OMNI_SIZE("data_seed", synth_spec.seed, "synthetic corpus seed (defaults to seed)"),
      OMNI_SIZE("alphabet_size", synth_spec.alphabet_size, "synthetic symbols including the space"),
      OMNI_SIZE("min_tokens", synth_spec.min_tokens, "shortest synthetic transcript"),
      OMNI_SIZE("max_tokens", synth_spec.max_tokens, "longest synthetic transcript"),
      OMNI_SIZE("min_frames_per_token", synth_spec.min_frames_per_token, "shortest symbol block"),
      OMNI_SIZE("max_frames_per_token", synth_spec.max_frames_per_token, "longest symbol block"),
      OMNI_SIZE("feat_dim", synth_spec.feat_dim, "synthetic feature dimension"),
      OMNI_REAL("template_noise_sigma", synth_spec.template_noise_sigma, "per-block template noise"),
      OMNI_REAL("channel_noise_sigma", synth_spec.channel_noise_sigma, "per-frame channel noise"),
      OMNI_REAL("space_prob", synth_spec.space_prob, "probability of a word break between symbols"),
      OMNI_REAL("heldout_fraction", heldout_fraction, "trailing share held out when no heldout_dir"),
      OMNI_STR("data_dir", data_dir, "training corpus directory"),
      OMNI_STR("heldout_dir", heldout_dir, "held-out corpus directory"),
      OMNI_STR("alphabet", alphabet, "tokenizer characters; empty selects the synthetic alphabet"),
      OMNI_STR("out_dir", out_dir, "output directory"),
      OMNI_SIZE("checkpoint_every", checkpoint_every, "intermediate checkpoint cadence; 0 disables"),
      OMNI_SIZE("log_every", log_every, "progress line cadence on standard error; 0 disables"),
      OMNI_SIZE("smoothing_window", smoothing_window, "window of the smoothed CTC loss"),
  };
  return table;
}

#undef OMNI_SIZE
#undef OMNI_REAL
#undef OMNI_BOOL
#undef OMNI_STR

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.entry.key == key) return f;
  throw ConfigError(key, "unknown config key '" + key + "'");
}

bool is_explicit(const RunConfig& c, const std::string& key) {
  return std::find(c.explicit_keys.begin(), c.explicit_keys.end(), key) != c.explicit_keys.end();
}

std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? std::string(env) : std::string("omni_out");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << text;
  if (!os) throw Failure(kFailure, "cannot write " + path.string());
}

Tokenizer make_tokenizer(const std::string& alphabet, std::size_t alphabet_size) {
  return alphabet.empty() ? Tokenizer::for_alphabet_size(alphabet_size) : Tokenizer(alphabet);
}

/// Every transcript must encode and fit its stacked length.
void check_corpus(const Corpus& corpus, const Tokenizer& tok, std::size_t feat_dim,
                  std::size_t frame_stack, const std::string& what) {
  for (const auto& u : corpus) {
    if (u.feat_dim != feat_dim) {
      throw Failure(kDataError, what + ": utterance " + u.id + " has feat_dim " +
                                    std::to_string(u.feat_dim) + ", expected " +
                                    std::to_string(feat_dim));
    }
    try {
      const TokenSeq t = tok.encode(u.transcript);
      if (stacked_length(u.frames, frame_stack) < ctc_min_frames(t)) {
        throw Failure(kDataError, what + ": utterance " + u.id +
                                      " is too short for its transcript after frame stacking");
      }
    } catch (const VocabularyError& e) {
      throw Failure(kDataError, what + ": utterance " + u.id + ": " + e.what());
    }
  }
}

Corpus load_corpus_or_fail(const std::string& dir, const std::string& what) {
  try {
    return load_corpus(dir);
  } catch (const Error& e) {
    throw Failure(kDataError, what + ": " + e.what());
  }
}

Model<float> load_checkpoint_or_fail(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const Error& e) {
    throw Failure(kCheckpointError, std::string("checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------- train

int cmd_train(const std::vector<std::string>& args) {
  RunConfig config;
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "-h" || a == "--help") {
      std::cout << "usage: omni train [CONFIG] [--synth] [--config PATH] [--KEY VALUE]...\n\nkeys:\n";
      for (const auto& f : fields())
        std::cout << "  " << std::left << std::setw(22) << f.entry.key << std::setw(10)
                  << f.entry.type << f.entry.help << '\n';
      return kOk;
    }
    if (a == "--synth") {
      overrides.emplace_back("synth", "true");
    } else if (a == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("config", "--config needs a path");
      config_path = args[++i];
    } else if (a.rfind("--", 0) == 0) {
      std::string key = a.substr(2), value;
      const auto eq = key.find('=');
      if (eq != std::string::npos) {
        value = key.substr(eq + 1);
        key = key.substr(0, eq);
      } else {
        if (i + 1 >= args.size()) throw ConfigError(key, "option --" + key + " needs a value");
        value = args[++i];
      }
      std::replace(key.begin(), key.end(), '-', '_');
      overrides.emplace_back(key, value);
    } else if (config_path.empty()) {
      config_path = a;
    } else {
      throw ConfigError(a, "unexpected argument '" + a + "'");
    }
  }
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw ConfigError("config", "cannot read config file " + config_path);
    apply_config_text(config, is);
  }
  for (const auto& [k, v] : overrides) apply_setting(config, k, v);
  if (!is_explicit(config, "data_seed")) config.synth_spec.seed = config.train.seed;
  if (config.out_dir.empty()) config.out_dir = default_out_dir();
  validate(config);

  // Data.
  ExperimentData data{{}, {}, make_tokenizer(config.alphabet, config.synth_spec.alphabet_size)};
  std::size_t feat_dim = config.synth_spec.feat_dim;
  if (config.synth) {
    SynthSpec spec = config.synth_spec;
    spec.frame_stack = config.model.frame_stack;
    spec.validate();
    std::cerr << "generating " << config.synth_utterances << " synthetic utterances\n";
    auto [train, held] = split_corpus(generate(spec, config.synth_utterances), config.heldout_fraction);
    data.train = std::move(train);
    data.heldout = std::move(held);
  } else {
    data.train = load_corpus_or_fail(config.data_dir, "training corpus");
    if (!config.heldout_dir.empty()) {
      data.heldout = load_corpus_or_fail(config.heldout_dir, "held-out corpus");
    } else {
      auto [train, held] = split_corpus(data.train, config.heldout_fraction);
      data.train = std::move(train);
      data.heldout = std::move(held);
    }
    if (!data.train.empty()) feat_dim = data.train.front().feat_dim;
  }
  if (data.train.empty()) throw Failure(kDataError, "training corpus is empty");
  check_corpus(data.train, data.tokenizer, feat_dim, config.model.frame_stack, "training corpus");
  check_corpus(data.heldout, data.tokenizer, feat_dim, config.model.frame_stack, "held-out corpus");

  const fs::path out = config.out_dir;
  fs::create_directories(out);
  write_text(out / "run_config.txt", to_config_text(config));
  save_corpus(out / "heldout", data.heldout);

  std::vector<std::pair<ModelConfig, TrainConfig>> runs;
  for (Variant v : config.variants) {
    ModelConfig mc = config.model;
    mc.variant = v;
    mc.experts = v == Variant::Dense ? 1 : config.model.experts;
    mc.vocab_size = data.tokenizer.vocab_size();
    mc.feat_dim = feat_dim;
    mc.validate();
    runs.emplace_back(mc, config.train);
  }

  std::map<std::string, TrainLog> partial;
  ExperimentHooks hooks;
  hooks.on_step = [&](const VariantReport& vr, const TrainRecord& rec) {
    const std::string name = to_string(vr.model_config.variant);
    partial[name].append(rec);
    if (config.log_every && rec.step % config.log_every == 0) {
      std::cerr << name << " step " << rec.step << " lr " << rec.lr << " ctc " << rec.ctc_loss
                << " lb " << rec.load_balance_loss << " gnorm " << rec.grad_norm << '\n';
    }
  };
  hooks.checkpoint_every = config.checkpoint_every;
  hooks.on_checkpoint = [&](const VariantReport& vr, const Model<float>& model, std::size_t step) {
    save_checkpoint(out / to_string(vr.model_config.variant) / ("step_" + std::to_string(step) + ".ckpt"),
                    model);
  };
  for (const auto& [mc, tc] : runs) fs::create_directories(out / to_string(mc.variant));

  ExperimentReport report;
  report.smoothing_window = config.smoothing_window;
  try {
    report = run_experiment(runs, data, hooks);
  } catch (const DivergenceError& e) {
    for (const auto& [name, log] : partial) log.write_csv((out / name / "train_log.csv").string());
    std::cerr << "error: " << e.what() << " (ctc " << e.record().ctc_loss << ", load balance "
              << e.record().load_balance_loss << ", grad norm " << e.record().grad_norm << ")\n";
    return kFailure;
  }
  report.smoothing_window = config.smoothing_window;
  for (auto& vr : report.variants) {
    vr.final_smoothed_ctc = vr.log.final_smoothed_ctc(config.smoothing_window);
    const fs::path dir = out / to_string(vr.model_config.variant);
    vr.log.write_csv((dir / "train_log.csv").string());
    save_checkpoint(dir / "model.ckpt", *vr.model);
  }
  Json summary = Json::parse(report.to_json());
  summary["heldout_dir"] = (out / "heldout").string();
  summary["train_utterances"] = data.train.size();
  summary["heldout_utterances"] = data.heldout.size();
  write_text(out / "summary.json", summary.dump(2) + "\n");
  for (const auto& vr : report.variants) {
    std::cerr << to_string(vr.model_config.variant) << ": smoothed ctc " << vr.final_smoothed_ctc
              << ", held-out WER " << vr.heldout.wer() << '\n';
  }
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

// ------------------------------------------------------- shared options

struct ModelInputs {
  std::string checkpoint;
  std::string data;
  std::string alphabet;
  std::string out;
  std::size_t batch_max_frames = TrainConfig{}.batch_max_frames;
};

void add_model_inputs(CLI::App& app, ModelInputs& in, bool need_data) {
  app.add_option("--checkpoint", in.checkpoint, "model checkpoint")->required();
  auto* d = app.add_option("--data", in.data, "corpus directory");
  if (need_data) d->required();
  app.add_option("--alphabet", in.alphabet, "tokenizer characters (default: synthetic alphabet)");
  app.add_option("--out", in.out, std::string("output directory (default: $") + kOutDirEnv + ")");
  app.add_option("--batch-max-frames", in.batch_max_frames, "frame budget per batch");
}

struct Loaded {
  Model<float> model;
  Corpus corpus;
  Tokenizer tokenizer;
};

Loaded load_inputs(const ModelInputs& in, bool require_moe) {
  Model<float> model = load_checkpoint_or_fail(in.checkpoint);
  const ModelConfig& mc = model.config();
  if (require_moe && !mc.is_moe())
    throw Failure(kDenseModel, "routing analysis needs an MoE checkpoint; " + in.checkpoint + " is dense");
  Tokenizer tok = make_tokenizer(in.alphabet, mc.vocab_size - 1);
  if (tok.vocab_size() != mc.vocab_size) {
    throw Failure(kCheckpointError, "checkpoint vocabulary size " + std::to_string(mc.vocab_size) +
                                        " does not match the alphabet (" +
                                        std::to_string(tok.vocab_size()) + " with blank)");
  }
  Corpus corpus = load_corpus_or_fail(in.data, "corpus");
  if (corpus.empty()) throw Failure(kDataError, "corpus " + in.data + " is empty");
  if (corpus.front().feat_dim != mc.feat_dim) {
    throw Failure(kCheckpointError, "checkpoint expects feat_dim " + std::to_string(mc.feat_dim) +
                                        ", corpus has " + std::to_string(corpus.front().feat_dim));
  }
  check_corpus(corpus, tok, mc.feat_dim, mc.frame_stack, "corpus");
  return {std::move(model), std::move(corpus), std::move(tok)};
}

int parse_app(CLI::App& app, const std::vector<std::string>& args) {
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return -1;
}

// ------------------------------------------------------------- evaluate

int cmd_evaluate(const std::vector<std::string>& args) {
  CLI::App app("Greedy-decode WER of a corpus", "omni evaluate");
  ModelInputs in;
  add_model_inputs(app, in, true);
  if (int rc = parse_app(app, args); rc >= 0) return rc;
  Loaded l = load_inputs(in, false);
  const EvalResult r = evaluate(l.model, l.corpus, l.tokenizer, in.batch_max_frames);
  Json j;
  j["checkpoint"] = in.checkpoint;
  j["wer"] = r.wer();
  j["word_errors"] = r.tally.errors;
  j["words"] = r.tally.words;
  auto& utts = j["utterances"] = Json::array();
  for (const auto& u : r.utterances) {
    utts.push_back({{"id", u.id},
                    {"reference", u.reference},
                    {"hypothesis", u.hypothesis},
                    {"errors", u.errors},
                    {"words", u.words},
                    {"wer", u.words ? static_cast<double>(u.errors) / static_cast<double>(u.words) : 0.0}});
  }
  std::cout << j.dump(2) << '\n';
  return kOk;
}

// -------------------------------------------------------------- analyze

std::vector<ContingencyTable> adjacent_tables(const RouteDump& dump) {
  std::vector<ContingencyTable> tables;
  for (std::size_t l = 0; l + 1 < dump.layers; ++l)
    tables.push_back(contingency(dump.records, l, dump.experts));
  return tables;
}

Json cramers_json(const RouteDump& dump) {
  Json rows = Json::array();
  for (const auto& t : adjacent_tables(dump)) {
    rows.push_back({{"layer", t.layer},
                    {"next_layer", t.layer + 1},
                    {"total", t.total},
                    {"chi_square", chi_square(t)},
                    {"cramers_v", cramers_v(t)},
                    {"counts", t.counts}});
  }
  return rows;
}

Json entropy_json(const RouteDump& dump, const EntropyTable& table, const Tokenizer* tok) {
  Json j;
  j["layers"] = dump.layers;
  j["experts"] = dump.experts;
  j["skipped"] = table.skipped;
  auto& groups = j["groups"] = Json::array();
  for (const auto& g : table.groups) {
    Json e;
    e["symbol"] = g.symbol;
    if (tok) e["label"] = g.symbol == kBlank ? std::string("<blank>") : tok->decode(std::vector<int>{g.symbol});
    e["frames"] = g.frames;
    e["entropy_bits"] = g.per_layer;
    groups.push_back(std::move(e));
  }
  return j;
}

int cmd_analyze(const std::vector<std::string>& args) {
  if (args.empty() || args[0] == "-h" || args[0] == "--help") {
    std::cout << "usage: omni analyze {routes|cramers|entropy|permute} [options]\n";
    return args.empty() ? kConfigError : kOk;
  }
  const std::string sub = args[0];
  const std::vector<std::string> rest(args.begin() + 1, args.end());
  CLI::App app("Routing analysis: " + sub, "omni analyze " + sub);
  ModelInputs in;
  std::string from_dump;
  bool with_probs = false, use_probs = false, exclude_original = false;
  std::size_t top_k = 0, trials = 5;
  std::uint64_t seed = 1;
  std::vector<double> p_values{0.0, 0.1, 0.3, 0.5};

  if (sub == "routes") {
    add_model_inputs(app, in, true);
    app.add_flag("--probs", with_probs, "also write the probs.csv sidecar");
  } else if (sub == "cramers" || sub == "entropy") {
    app.add_option("--from-dump", from_dump, "route dump directory written by analyze routes");
    app.add_option("--checkpoint", in.checkpoint, "model checkpoint");
    app.add_option("--data", in.data, "corpus directory");
    app.add_option("--alphabet", in.alphabet, "tokenizer characters (default: synthetic alphabet)");
    app.add_option("--out", in.out, std::string("output directory (default: $") + kOutDirEnv + ")");
    app.add_option("--batch-max-frames", in.batch_max_frames, "frame budget per batch");
    if (sub == "entropy") {
      app.add_option("--top-k", top_k, "most frequent symbol groups (default: min(100, vocabulary))");
      app.add_flag("--use-probs", use_probs, "average router probabilities instead of counting assignments");
    }
  } else if (sub == "permute") {
    add_model_inputs(app, in, true);
    app.add_option("--p", p_values, "reassignment probabilities")->delimiter(',');
    app.add_option("--trials", trials, "trials per probability");
    app.add_option("--seed", seed, "seed of the reassignment streams");
    app.add_flag("--exclude-original", exclude_original, "never redraw the original expert");
  } else {
    std::cerr << "error: unknown analysis '" << sub << "' (expected routes, cramers, entropy, permute)\n";
    return kConfigError;
  }
  if (int rc = parse_app(app, rest); rc >= 0) return rc;
  const fs::path out = in.out.empty() ? default_out_dir() : in.out;

  if (sub == "cramers" || sub == "entropy") {
    RouteDump dump;
    std::optional<Tokenizer> tok;
    if (!from_dump.empty()) {
      if (!in.checkpoint.empty()) throw ConfigError("from-dump", "--from-dump and --checkpoint are exclusive");
      try {
        dump = read_route_dump(from_dump);
      } catch (const Error& e) {
        throw Failure(kDataError, std::string("route dump: ") + e.what());
      }
      if (!in.alphabet.empty()) tok.emplace(in.alphabet);
    } else {
      if (in.checkpoint.empty() || in.data.empty())
        throw ConfigError("checkpoint", "give --from-dump or both --checkpoint and --data");
      Loaded l = load_inputs(in, true);
      dump = dump_routes(l.model, l.corpus, l.tokenizer, in.batch_max_frames);
      tok.emplace(l.tokenizer);
    }
    if (dump.layers == 0 || dump.records.empty()) throw Failure(kDataError, "route dump is empty");
    if (sub == "cramers") {
      const Json rows = cramers_json(dump);
      std::ostringstream csv;
      csv << std::setprecision(17) << "layer,next_layer,total,chi_square,cramers_v\n";
      for (const auto& r : rows)
        csv << r["layer"].get<std::size_t>() << ',' << r["next_layer"].get<std::size_t>() << ','
            << r["total"].get<std::size_t>() << ',' << r["chi_square"].get<double>() << ','
            << r["cramers_v"].get<double>() << '\n';
      write_text(out / "cramers.csv", csv.str());
      std::cout << rows.dump(2) << '\n';
    } else {
      const std::size_t k = top_k ? top_k : std::min<std::size_t>(100, tok ? tok->vocab_size() : 100);
      const EntropyTable table = routing_entropy(dump, k, use_probs);
      if (table.skipped) std::cerr << "warning: " << table.skipped << " requested groups had no frames\n";
      std::ostringstream csv;
      csv << std::setprecision(17) << "symbol,frames";
      for (std::size_t l = 0; l < dump.layers; ++l) csv << ",h_l" << l;
      csv << '\n';
      for (const auto& g : table.groups) {
        csv << g.symbol << ',' << g.frames;
        for (double h : g.per_layer) csv << ',' << h;
        csv << '\n';
      }
      write_text(out / "entropy.csv", csv.str());
      std::cout << entropy_json(dump, table, tok ? &*tok : nullptr).dump(2) << '\n';
    }
    return kOk;
  }

  Loaded l = load_inputs(in, true);
  if (sub == "routes") {
    const RouteDump dump = dump_routes(l.model, l.corpus, l.tokenizer, in.batch_max_frames);
    write_route_dump(out / "routes", dump, with_probs);
    const auto tables = adjacent_tables(dump);
    write_text(out / "routes" / "usage_map.json", usage_map_json(dump, align_labels(tables)) + "\n");
    Json j;
    j["dump_dir"] = (out / "routes").string();
    j["layers"] = dump.layers;
    j["experts"] = dump.experts;
    j["records"] = dump.records.size();
    j["frames"] = dump.frames.size();
    std::cout << j.dump(2) << '\n';
    return kOk;
  }

  // permute
  for (double p : p_values)
    if (!(p >= 0 && p <= 1)) throw ConfigError("p", "--p values must lie in [0, 1]");
  if (trials == 0) throw ConfigError("trials", "--trials must be positive");
  const PermutationReport rep = permutation_experiment(l.model, l.corpus, l.tokenizer, p_values, trials,
                                                       seed, in.batch_max_frames, exclude_original);
  if (rep.absolute) std::cerr << "warning: baseline WER is 0; reporting absolute WER % instead of relative change\n";
  Json j;
  j["baseline_wer"] = rep.baseline_wer;
  j["absolute"] = rep.absolute;
  j["trials"] = trials;
  j["seed"] = seed;
  j["exclude_original"] = exclude_original;
  auto& rows = j["rows"] = Json::array();
  std::ostringstream csv;
  csv << std::setprecision(17) << "p,mean_wer,mean_change\n";
  for (const auto& r : rep.rows) {
    rows.push_back({{"p", r.p}, {"mean_wer", r.mean_wer}, {"mean_change", r.mean_change}, {"trial_wers", r.trial_wers}});
    csv << r.p << ',' << r.mean_wer << ',' << r.mean_change << '\n';
  }
  write_text(out / "permute.csv", csv.str());
  write_text(out / "permute.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << '\n';
  return kOk;
}

// -------------------------------------------------------------- inspect

std::string component_of(const std::string& name) {
  if (name.rfind("frontend.", 0) == 0) return "frontend";
  if (name.find("router") != std::string::npos) return "router";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".moe.experts.") != std::string::npos) return "experts";
  if (name.find(".ffn.") != std::string::npos) return "ffn";
  if (name.find("ln_") != std::string::npos || name.rfind("final_norm.", 0) == 0) return "norm";
  if (name.rfind("head.", 0) == 0) return "head";
  return "other";
}

int cmd_inspect(const std::vector<std::string>& args) {
  CLI::App app("Parameter accounting of a checkpoint", "omni inspect");
  std::string path;
  app.add_option("--checkpoint", path, "model checkpoint")->required();
  if (int rc = parse_app(app, args); rc >= 0) return rc;
  const Model<float> model = load_checkpoint_or_fail(path);
  const ModelConfig& mc = model.config();
  Json j;
  j["checkpoint"] = path;
  j["config"] = {{"variant", to_string(mc.variant)}, {"layers", mc.layers},       {"embed_dim", mc.embed_dim},
                 {"ffn_dim", mc.ffn_dim},            {"heads", mc.heads},         {"experts", mc.experts},
                 {"vocab_size", mc.vocab_size},      {"frame_stack", mc.frame_stack}, {"feat_dim", mc.feat_dim}};
  std::map<std::string, std::size_t> by_component;
  for (const auto& p : model.parameters()) by_component[component_of(p.name)] += p.tensor.numel();
  Json comp;
  for (const char* c : {"frontend", "attention", "ffn", "experts", "router", "norm", "head", "other"})
    if (by_component.count(c)) comp[c] = by_component[c];
  j["components"] = comp;
  j["total_parameters"] = model.parameter_count();
  j["experts"] = mc.experts;
  j["routers"] = model.router_tensor_count();
  j["router_parameters"] = mc.is_moe() ? router_param_count(mc) : 0;
  j["router_sharing"] = mc.variant == Variant::Omni ? "shared" : mc.variant == Variant::Switch ? "per-layer" : "none";
  std::cout << j.dump(2) << '\n';
  return kOk;
}

void print_usage(std::ostream& os) {
  os << "usage: omni <command> [options]\n\n"
        "commands:\n"
        "  train     train dense/switch/omni encoders (see omni train --help)\n"
        "  evaluate  greedy-decode WER of a corpus under a checkpoint\n"
        "  analyze   routing analyses: routes, cramers, entropy, permute\n"
        "  inspect   parameter counts and router sharing of a checkpoint\n\n"
        "exit codes: 0 ok, 1 failure, 2 config, 3 data, 4 checkpoint, 5 dense model\n";
}

}  // namespace

RunConfig::RunConfig() { model.experts = 2; }

const std::vector<SchemaEntry>& config_schema() {
  static const std::vector<SchemaEntry> schema = [] {
    std::vector<SchemaEntry> s;
    for (const auto& f : fields()) s.push_back(f.entry);
    return s;
  }();
  return schema;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, trim(value));
  if (!is_explicit(config, key)) config.explicit_keys.push_back(key);
}

void apply_config_text(RunConfig& config, std::istream& text) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(text, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(config, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void validate(const RunConfig& c) {
  const bool only_dense = c.variants.size() == 1 && c.variants[0] == Variant::Dense;
  const bool any_moe = std::any_of(c.variants.begin(), c.variants.end(),
                                   [](Variant v) { return v != Variant::Dense; });
  if (only_dense && is_explicit(c, "experts") && c.model.experts != 1) {
    throw ConfigError("experts", "key 'experts': the dense variant has exactly 1 expert, got " +
                                     std::to_string(c.model.experts));
  }
  if (any_moe && c.model.experts < 2)
    throw ConfigError("experts", "key 'experts': MoE variants need at least 2 experts");
  ModelConfig probe = c.model;
  probe.variant = any_moe ? Variant::Switch : Variant::Dense;
  if (!any_moe) probe.experts = 1;
  probe.validate();
  c.train.validate();
  if (!c.synth && c.data_dir.empty())
    throw ConfigError("data_dir", "key 'data_dir': no training data; set data_dir or pass --synth");
  if (c.synth && !c.data_dir.empty())
    throw ConfigError("data_dir", "key 'data_dir': conflicts with synth");
  if (!(c.heldout_fraction >= 0 && c.heldout_fraction < 1))
    throw ConfigError("heldout_fraction", "key 'heldout_fraction': must be in [0, 1)");
  if (c.smoothing_window == 0) throw ConfigError("smoothing_window", "key 'smoothing_window': must be positive");
}

std::string to_config_text(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.entry.key << " = " << f.get(config) << '\n';
  return os.str();
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    print_usage(std::cerr);
    return kConfigError;
  }
  const std::string cmd = args[0];
  args.erase(args.begin());
  try {
    if (cmd == "train") return cmd_train(args);
    if (cmd == "evaluate") return cmd_evaluate(args);
    if (cmd == "analyze") return cmd_analyze(args);
    if (cmd == "inspect") return cmd_inspect(args);
    if (cmd == "-h" || cmd == "--help" || cmd == "help") {
      print_usage(std::cout);
      return kOk;
    }
    std::cerr << "error: unknown command '" << cmd << "'\n";
    print_usage(std::cerr);
    return kConfigError;
  } catch (const Failure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code();
  } catch (const ConfigError& e) {
    std::cerr << "error: config key '" << e.field() << "': " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace omni::cli
