#include "mse2d/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "mse2d/corpus.hpp"
#include "mse2d/elastic.hpp"
#include "mse2d/errors.hpp"
#include "mse2d/eval.hpp"
#include "mse2d/io.hpp"
#include "mse2d/trainer.hpp"

namespace mse2d::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json encoder_json(const EncoderConfig& c) {
  return json{{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"num_heads", c.num_heads},
              {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"seed", c.seed}};
}

// Written once before any work and again when the command finishes.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, const std::vector<std::string>& argv)
      : path_(std::move(dir) / "manifest.json") {
    doc_["format_version"] = kManifestFormatVersion;
    doc_["tool_version"] = kToolVersion;
    doc_["command"] = std::move(command);
    doc_["argv"] = argv;
  }

  json& config() { return doc_["config"]; }
  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void add_artifact(const std::string& name, const fs::path& p) { doc_["artifacts"][name] = p.string(); }

  void begin() {
    doc_["started_at"] = utc_now();
    doc_["status"] = "running";
    write();
  }
  void finish(const std::string& status) {
    doc_["finished_at"] = utc_now();
    doc_["status"] = status;
    write();
  }

 private:
  void write() const { atomic_write_file(path_, doc_.dump(2) + "\n"); }

  fs::path path_;
  json doc_;
};

void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Config files: each key of a JSON object becomes "--key value" unless the
// same flag was given on the command line.

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
  for (const std::string& a : args) {
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  }
  return false;
}

std::optional<std::string> flag_value(const std::vector<std::string>& args, const std::string& flag) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == flag && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind(flag + "=", 0) == 0) return args[i].substr(flag.size() + 1);
  }
  return std::nullopt;
}

std::vector<std::string> merge_config_file(const std::vector<std::string>& args) {
  const auto path = flag_value(args, "--config");
  if (!path) return args;
  json cfg;
  try {
    cfg = json::parse(read_file(*path));
  } catch (const json::exception& e) {
    throw ConfigError("config file " + *path + ": " + e.what());
  }
  if (!cfg.is_object()) throw ConfigError("config file " + *path + ": expected a JSON object");
  std::vector<std::string> merged(args.begin(), args.begin() + 1);  // subcommand first
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    if (key == "config" || has_flag(args, flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) merged.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      merged.push_back(flag);
      merged.push_back(joined);
    } else {
      merged.push_back(flag);
      merged.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  merged.insert(merged.end(), args.begin() + 1, args.end());
  return merged;
}

// ---------------------------------------------------------------------------

struct GeometryFlags {
  EncoderConfig config;
  void attach(CLI::App* app) {
    app->add_option("--num-layers", config.num_layers, "Transformer layers N")->capture_default_str();
    app->add_option("--hidden-dim", config.hidden_dim, "Hidden size D")->capture_default_str();
    app->add_option("--num-heads", config.num_heads, "Attention heads")->capture_default_str();
    app->add_option("--ffn-dim", config.ffn_dim, "Feed-forward width")->capture_default_str();
    app->add_option("--vocab-size", config.vocab_size, "Hashed vocabulary size")->capture_default_str();
    app->add_option("--max-seq-len", config.max_seq_len, "Tokens per sequence, CLS included")->capture_default_str();
  }
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  fs::path out_dir;
  SyntheticCorpusSpec spec;
};

int cmd_gen_data(const GenDataArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  a.spec.validate();
  prepare_out_dir(a.out_dir);
  RunManifest manifest(a.out_dir, "gen-data", argv);
  const fs::path train_path = a.out_dir / "train.jsonl", eval_path = a.out_dir / "eval.jsonl";
  manifest.set_seed(a.spec.seed);
  manifest.config() = json{{"num_clusters", a.spec.num_clusters},
                           {"vocab_per_cluster", a.spec.vocab_per_cluster},
                           {"pairs_per_cluster", a.spec.pairs_per_cluster},
                           {"eval_pairs_per_cluster", a.spec.eval_pairs_per_cluster},
                           {"sentence_length", a.spec.sentence_length},
                           {"noise_rate", a.spec.noise_rate},
                           {"seed", a.spec.seed}};
  manifest.add_artifact("train", train_path);
  manifest.add_artifact("eval", eval_path);
  manifest.begin();

  const SyntheticCorpus corpus = generate_synthetic_corpus(a.spec);
  save_positives(train_path, corpus.train);
  save_pairs(eval_path, corpus.eval);
  manifest.finish("ok");
  out << "wrote " << corpus.train.size() << " training pairs to " << train_path.string() << "\n"
      << "wrote " << corpus.eval.size() << " eval pairs to " << eval_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path data;
  std::string format = "positives";
  double score_scale = 1.0;
  fs::path out_dir;
  std::string mode = "2dmse";
  bool no_align = false;
  bool no_last_layer = false;
  std::vector<std::size_t> dims;
  std::string dim_mode = "sample-one";
  LossWeights lambda;
  std::optional<double> lr;
  double weight_decay = 0.01;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double tau = kDefaultTau;
  std::uint64_t seed = kDefaultSeed;
  std::string init = "random";
  fs::path checkpoint;
  std::size_t checkpoint_every = 0;
  GeometryFlags geometry;
};

const char* dim_mode_name(DimMode m) { return m == DimMode::sample_one ? "sample-one" : "full-sweep"; }

json step_record(const TrainStepReport& r, const LossWeights& w, DimMode mode) {
  json active = json::array();
  if (w.last_full > 0) active.push_back("L_N_D");
  if (w.shallow_full > 0) active.push_back("L_n_D");
  if (w.last_prefix > 0) active.push_back("L_N_d");
  if (w.shallow_prefix > 0) active.push_back("L_n_d");
  if (w.align > 0) active.push_back("L_align");
  json rec;
  rec["step"] = r.step;
  rec["epoch"] = r.epoch;
  rec["n"] = r.layer == 0 ? json(nullptr) : json(r.layer);
  rec["d"] = r.dim ? json(*r.dim) : json(nullptr);
  rec["dim_mode"] = dim_mode_name(mode);
  rec["active"] = active;
  rec["L_N_D"] = r.components.last_full;
  rec["L_n_D"] = r.components.shallow_full;
  rec["L_N_d"] = r.components.last_prefix;
  rec["L_n_d"] = r.components.shallow_prefix;
  rec["L_align"] = r.components.align;
  rec["joint"] = r.joint;
  return rec;
}

std::string dump_line(const json& j) {
  // Non-finite values have no JSON form; keep them readable.
  return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  cfg.dims = a.dims;
  cfg.lambda = a.lambda;
  cfg.dim_mode = a.dim_mode == "full-sweep" ? DimMode::full_sweep : DimMode::sample_one;
  cfg.disable_align = a.no_align;
  cfg.disable_last_layer = a.no_last_layer;
  cfg.mrl_only = a.mode == "mrl";
  cfg.plain = a.mode == "plain";
  cfg.learning_rate = a.lr.value_or(a.init == "checkpoint" ? kFineTuneLearningRate : kScratchLearningRate);
  cfg.weight_decay = a.weight_decay;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.tau = a.tau;
  cfg.seed = a.seed;
  cfg.checkpoint_every = a.checkpoint_every;

  EncoderModel model;
  if (a.init == "checkpoint") {
    if (a.checkpoint.empty()) throw ConfigError("--init checkpoint requires --checkpoint");
    model = load_checkpoint(a.checkpoint);
    if (model.advertised_dim()) throw ConfigError("cannot continue training an exported (truncated) checkpoint");
  } else {
    EncoderConfig enc = a.geometry.config;
    enc.seed = a.seed;
    enc.validate();
    model = init_model(enc);
  }
  DimSet default_dims = default_dim_set(model.hidden_dim());
  cfg = cfg.resolved(model.config());
  cfg.validate(model.config());
  if (a.dims.empty() && default_dims.warning) err << "warning: " << *default_dims.warning << "\n";

  prepare_out_dir(a.out_dir);
  const fs::path ckpt_path = a.out_dir / "model.ckpt", log_path = a.out_dir / "steps.jsonl";
  RunManifest manifest(a.out_dir, "train", argv);
  manifest.set_seed(cfg.seed);
  json& c = manifest.config();
  c["data"] = a.data.string();
  c["format"] = a.format;
  c["score_scale"] = a.score_scale;
  c["mode"] = a.mode;
  c["init"] = a.init;
  if (a.init == "checkpoint") c["checkpoint"] = a.checkpoint.string();
  c["encoder"] = encoder_json(model.config());
  c["dims"] = cfg.dims;
  c["dim_mode"] = dim_mode_name(cfg.dim_mode);
  c["lambda"] = json{{"L_N_D", cfg.lambda.last_full},
                     {"L_n_D", cfg.lambda.shallow_full},
                     {"L_N_d", cfg.lambda.last_prefix},
                     {"L_n_d", cfg.lambda.shallow_prefix},
                     {"L_align", cfg.lambda.align}};
  const LossWeights w = cfg.effective_weights();
  c["effective_lambda"] =
      json{{"L_N_D", w.last_full}, {"L_n_D", w.shallow_full}, {"L_N_d", w.last_prefix}, {"L_n_d", w.shallow_prefix},
           {"L_align", w.align}};
  c["no_align"] = cfg.disable_align;
  c["no_last_layer"] = cfg.disable_last_layer;
  c["learning_rate"] = cfg.learning_rate;
  c["weight_decay"] = cfg.weight_decay;
  c["epochs"] = cfg.epochs;
  c["batch_size"] = cfg.batch_size;
  c["tau"] = cfg.tau;
  c["checkpoint_every"] = cfg.checkpoint_every;
  manifest.add_artifact("checkpoint", ckpt_path);
  manifest.add_artifact("step_log", log_path);
  if (cfg.checkpoint_every > 0) manifest.add_artifact("periodic_checkpoints", a.out_dir / "checkpoints");
  manifest.begin();

  std::string log;
  TrainCallbacks callbacks;
  callbacks.on_step = [&](const TrainStepReport& r) { log += dump_line(step_record(r, w, cfg.dim_mode)); };
  std::size_t final_step = 0;
  callbacks.on_checkpoint = [&](const EncoderModel& m, std::size_t step) {
    final_step = step;
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      fs::create_directories(a.out_dir / "checkpoints");
      save_checkpoint(m, a.out_dir / "checkpoints" / ("step-" + std::to_string(step) + ".ckpt"));
    }
  };

  std::vector<TrainStepReport> reports;
  try {
    if (a.format == "positives") {
      const auto data = load_positives(a.data);
      reports = train(model, std::span<const TextPair>(data), cfg, callbacks);
    } else if (a.format == "triplets") {
      const auto data = load_triplets(a.data);
      reports = train(model, std::span<const TextTriplet>(data), cfg, callbacks);
    } else {
      const auto data = load_pairs(a.data);
      reports = train(model, std::span<const ScoredPair>(data), cfg, callbacks, a.score_scale);
    }
  } catch (const TrainingDiverged& e) {
    json rec = step_record(e.report(), w, cfg.dim_mode);
    rec["diverged"] = true;
    log += dump_line(rec);
    atomic_write_file(log_path, log);
    manifest.finish("diverged");
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  atomic_write_file(log_path, log);
  save_checkpoint(model, ckpt_path);
  manifest.finish("ok");
  out << "trained " << reports.size() << " steps (" << final_step << " optimizer updates), final joint loss "
      << reports.back().joint << "\n"
      << "checkpoint: " << ckpt_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  fs::path model;
  fs::path data;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> dims;
  std::string grid;
  fs::path out_dir;
  std::size_t threads = 1;
  std::size_t chunk_size = 64;
};

std::vector<std::size_t> full_dim_grid(std::size_t output_dim) {
  std::vector<std::size_t> dims;
  for (std::size_t d = 8; d < output_dim; d *= 2) dims.push_back(d);
  dims.push_back(output_dim);
  return dims;
}

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const EncoderModel model = load_checkpoint(a.model);
  std::vector<std::size_t> layers = a.layers, dims = a.dims;
  if (a.grid == "full") {
    layers.clear();
    for (std::size_t n = 1; n <= model.num_layers(); ++n) layers.push_back(n);
    dims = full_dim_grid(model.output_dim());
  }
  if (layers.empty()) layers = {model.num_layers()};
  if (dims.empty()) dims = {model.output_dim()};
  for (std::size_t n : layers) {
    if (n < 1 || n > model.num_layers()) {
      throw ConfigError("--layers: " + std::to_string(n) + " outside [1, " + std::to_string(model.num_layers()) + "]");
    }
  }
  for (std::size_t d : dims) {
    if (d < 1 || d > model.output_dim()) {
      throw ConfigError("--dims: " + std::to_string(d) + " outside [1, " + std::to_string(model.output_dim()) + "]");
    }
  }

  prepare_out_dir(a.out_dir);
  const fs::path report_path = a.out_dir / "report.csv";
  RunManifest manifest(a.out_dir, "eval", argv);
  manifest.config() = json{{"model", a.model.string()}, {"data", a.data.string()}, {"layers", layers},
                           {"dims", dims},             {"grid", a.grid.empty() ? "none" : a.grid},
                           {"threads", a.threads},     {"chunk_size", a.chunk_size}};
  manifest.add_artifact("report", report_path);
  manifest.begin();

  const auto pairs = load_pairs(a.data);
  EvalOptions opt;
  opt.num_threads = a.threads;
  opt.chunk_size = a.chunk_size;
  opt.model_id = a.model.string();
  opt.dataset_id = a.data.string();
  const EvalReport report = evaluate(model, pairs, layers, dims, opt);
  std::ostringstream csv;
  write_report_csv(report, csv);
  atomic_write_file(report_path, csv.str());
  manifest.finish("ok");
  out << csv.str();
  if (report.skipped_pairs > 0) out << "# skipped " << report.skipped_pairs << " untokenizable pairs\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// export

struct ExportArgs {
  fs::path model;
  std::size_t layers = 0;
  std::size_t dims = 0;
  fs::path out_dir;
};

int cmd_export(const ExportArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const EncoderModel model = load_checkpoint(a.model);
  if (a.layers < 1 || a.layers > model.num_layers()) {
    throw ConfigError("--layers: " + std::to_string(a.layers) + " outside [1, " + std::to_string(model.num_layers()) +
                      "]");
  }
  if (a.dims < 1 || a.dims > model.output_dim()) {
    throw ConfigError("--dims: " + std::to_string(a.dims) + " outside [1, " + std::to_string(model.output_dim()) + "]");
  }
  prepare_out_dir(a.out_dir);
  const fs::path path = a.out_dir / "model.ckpt";
  RunManifest manifest(a.out_dir, "export", argv);
  manifest.config() = json{{"model", a.model.string()}, {"layers", a.layers}, {"dims", a.dims}};
  manifest.add_artifact("checkpoint", path);
  manifest.begin();
  const EncoderModel cut = truncate_model(model, {a.layers, a.dims});
  save_checkpoint(cut, path);
  manifest.finish("ok");
  out << "exported n=" << a.layers << " d=" << a.dims << " (" << cut.parameter_count() << " parameters) to "
      << path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  fs::path model;
  GeometryFlags geometry;
  std::vector<std::size_t> layers;
  BenchmarkOptions options;
  fs::path out_dir;
};

int cmd_bench(BenchArgs a, const std::vector<std::string>& argv, std::ostream& out) {
  EncoderModel model;
  if (!a.model.empty()) {
    model = load_checkpoint(a.model);
  } else {
    EncoderConfig enc = a.geometry.config;
    enc.seed = a.options.seed;
    enc.validate();
    model = init_model(enc);
  }
  if (a.layers.empty()) {
    for (std::size_t n = 1; n <= model.num_layers(); ++n) a.layers.push_back(n);
  }
  prepare_out_dir(a.out_dir);
  const fs::path path = a.out_dir / "latency.csv";
  RunManifest manifest(a.out_dir, "bench", argv);
  manifest.set_seed(a.options.seed);
  manifest.config() = json{{"model", a.model.empty() ? json("random") : json(a.model.string())},
                           {"encoder", encoder_json(model.config())},
                           {"layers", a.layers},
                           {"batch_size", a.options.batch_size},
                           {"batches", a.options.num_batches},
                           {"warmup", a.options.warmup_batches},
                           {"tokens", a.options.tokens_per_sentence}};
  manifest.add_artifact("latency", path);
  manifest.begin();
  const LatencyReport report = benchmark_layers(model, a.layers, a.options);
  std::ostringstream csv;
  write_latency_csv(report, csv);
  atomic_write_file(path, csv.str());
  manifest.finish("ok");
  out << csv.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-dimensional Matryoshka sentence embeddings: train, evaluate, export, benchmark", "mse2d"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  auto add_config_flag = [](CLI::App* sub) {
    sub->add_option("--config", "JSON file of flag values; flags on the command line win");
  };

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic cluster corpus");
  gen_cmd->add_option("--out-dir", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--clusters", gen.spec.num_clusters, "Number of clusters")->capture_default_str();
  gen_cmd->add_option("--vocab-per-cluster", gen.spec.vocab_per_cluster, "Words owned by each cluster")
      ->capture_default_str();
  gen_cmd->add_option("--pairs-per-cluster", gen.spec.pairs_per_cluster, "Training pairs per cluster")
      ->capture_default_str();
  gen_cmd->add_option("--eval-pairs-per-cluster", gen.spec.eval_pairs_per_cluster,
                      "Same-cluster eval pairs per cluster (as many cross-cluster)")
      ->capture_default_str();
  gen_cmd->add_option("--sentence-length", gen.spec.sentence_length, "Maximum words per sentence")
      ->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise_rate, "Fraction of words swapped for other clusters' words")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "Random seed")->capture_default_str();
  add_config_flag(gen_cmd);

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Train an encoder (2DMSE, MRL or plain)");
  train_cmd->add_option("--data", tr.data, "Training JSON-lines file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--format", tr.format, "Training file layout")
      ->check(CLI::IsMember({"positives", "triplets", "pairs"}))
      ->capture_default_str();
  train_cmd->add_option("--score-scale", tr.score_scale, "Divide gold scores by this (pairs format)")
      ->capture_default_str();
  train_cmd->add_option("--out-dir", tr.out_dir, "Output directory")->required();
  train_cmd->add_option("--mode", tr.mode, "Objective")
      ->check(CLI::IsMember({"2dmse", "mrl", "plain"}))
      ->capture_default_str();
  train_cmd->add_flag("--no-align", tr.no_align, "Drop the alignment term");
  train_cmd->add_flag("--no-last-layer", tr.no_last_layer, "Drop both last-layer terms");
  train_cmd->add_option("--dims", tr.dims, "Prefix dimensions, comma separated (default 8,16,... below D)")
      ->delimiter(',');
  train_cmd->add_option("--dim-mode", tr.dim_mode, "One sampled d per step, or every d")
      ->check(CLI::IsMember({"sample-one", "full-sweep"}))
      ->capture_default_str();
  train_cmd->add_option("--lambda-last-full", tr.lambda.last_full, "Weight of L_N^D")->capture_default_str();
  train_cmd->add_option("--lambda-shallow-full", tr.lambda.shallow_full, "Weight of L_n^D")->capture_default_str();
  train_cmd->add_option("--lambda-last-prefix", tr.lambda.last_prefix, "Weight of L_N^d")->capture_default_str();
  train_cmd->add_option("--lambda-shallow-prefix", tr.lambda.shallow_prefix, "Weight of L_n^d")
      ->capture_default_str();
  train_cmd->add_option("--lambda-align", tr.lambda.align, "Weight of L_align")->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Learning rate (default 1e-3 from random init, 5e-5 from a checkpoint)");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs, "Passes over the data")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size, "Examples per step")->capture_default_str();
  train_cmd->add_option("--tau", tr.tau, "Softmax temperature")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Seed for init, shuffling and sampling")->capture_default_str();
  train_cmd->add_option("--init", tr.init, "Start from random weights or --checkpoint")
      ->check(CLI::IsMember({"random", "checkpoint"}))
      ->capture_default_str();
  train_cmd->add_option("--checkpoint", tr.checkpoint, "Checkpoint to start from")->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Also save every K steps (0: only at the end)")
      ->capture_default_str();
  tr.geometry.attach(train_cmd);
  add_config_flag(train_cmd);

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Spearman correlation over a layer x dim grid");
  eval_cmd->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Scored pairs JSON-lines file")->required()->check(CLI::ExistingFile);
  CLI::Option* layers_opt = eval_cmd->add_option("--layers", ev.layers, "Layers n (default N)")->delimiter(',');
  CLI::Option* dims_opt = eval_cmd->add_option("--dims", ev.dims, "Dimensions d (default D)")->delimiter(',');
  eval_cmd->add_option("--grid", ev.grid, "'full': every layer x {8, 16, ..., D}")
      ->check(CLI::IsMember({"full"}))
      ->excludes(layers_opt)
      ->excludes(dims_opt);
  eval_cmd->add_option("--out-dir", ev.out_dir, "Output directory")->required();
  eval_cmd->add_option("--threads", ev.threads, "Embedding worker threads")->capture_default_str();
  eval_cmd->add_option("--chunk-size", ev.chunk_size, "Sentences per forward pass")->capture_default_str();
  add_config_flag(eval_cmd);

  ExportArgs ex;
  CLI::App* export_cmd = app.add_subcommand("export", "Write a truncated (n, d) checkpoint");
  export_cmd->add_option("--model", ex.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--layers", ex.layers, "Layers to keep")->required();
  export_cmd->add_option("--dims", ex.dims, "Advertised embedding size")->required();
  export_cmd->add_option("--out-dir", ex.out_dir, "Output directory")->required();
  add_config_flag(export_cmd);

  BenchArgs be;
  CLI::App* bench_cmd = app.add_subcommand("bench", "Per-layer early-exit latency");
  bench_cmd->add_option("--model", be.model, "Checkpoint (default: random weights)")->check(CLI::ExistingFile);
  be.geometry.attach(bench_cmd);
  bench_cmd->add_option("--layers", be.layers, "Layers to time (default all)")->delimiter(',');
  bench_cmd->add_option("--batch-size", be.options.batch_size, "Sentences per batch")->capture_default_str();
  bench_cmd->add_option("--batches", be.options.num_batches, "Timed batches per layer")->capture_default_str();
  bench_cmd->add_option("--warmup", be.options.warmup_batches, "Untimed warmup batches")->capture_default_str();
  bench_cmd->add_option("--tokens", be.options.tokens_per_sentence, "Tokens per sentence, CLS included")
      ->capture_default_str();
  bench_cmd->add_option("--seed", be.options.seed, "Seed for weights and token ids")->capture_default_str();
  bench_cmd->add_option("--out-dir", be.out_dir, "Output directory")->required();
  add_config_flag(bench_cmd);

  try {
    std::vector<std::string> args = raw_args;
    if (!args.empty()) args = merge_config_file(args);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    if (*gen_cmd) return cmd_gen_data(gen, raw_args, out);
    if (*train_cmd) return cmd_train(tr, raw_args, out, err);
    if (*eval_cmd) return cmd_eval(ev, raw_args, out);
    if (*export_cmd) return cmd_export(ex, raw_args, out);
    if (*bench_cmd) return cmd_bench(be, raw_args, out);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
      // --help / --version
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n";
    CLI::App* failed = &app;
    for (CLI::App* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace mse2d::cli
