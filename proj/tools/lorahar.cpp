// lorahar command-line tool: generate, pretrain, finetune, lodo, sweep-rank,
// sweep-split, report. Exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lorahar/lorahar.hpp"

namespace fs = std::filesystem;
using namespace lorahar;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kOutDirEnv = "LORAHAR_OUT_DIR";

/// Raised for bad flag combinations; maps to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

/// Everything a command may read. Resolved from defaults, then the config file,
/// then flags; the result is written into the run manifest.
struct Settings {
  std::uint64_t seed = 0;
  ModelConfig model;
  PretrainConfig pretrain;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double train_fraction = 0.70;
  LoraConfig lora;
  WrapOptions quant;
  std::size_t n_domains = 5;
  std::size_t n_classes = 6;
  std::size_t recordings_per_class = 4;
  std::size_t samples_per_recording = 512;
  std::string spec_file;
  std::string data_dir;
  std::string out_dir = "lorahar_out";
  std::string checkpoint;
  std::string target;
  std::string held_out;
  std::string strategy = "lora";
  std::vector<std::string> strategies{"full", "lora", "qlora"};
  std::vector<std::size_t> ranks = default_sweep_ranks();
  std::vector<double> fractions = default_sweep_fractions();
  std::vector<std::string> in_dirs;
  std::size_t jobs = 1;

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.model = model;
    e.pretrain = pretrain;
    e.epochs = epochs;
    e.batch_size = batch_size;
    e.learning_rate = learning_rate;
    e.train_fraction = train_fraction;
    e.lora = lora;
    e.wrap = quant;
    e.seed = seed;
    return e;
  }
};

json to_json(const Settings& s) {
  return json{{"seed", s.seed},
              {"model", lorahar::to_json(s.model)},
              {"pretrain", {{"epochs", s.pretrain.epochs}, {"batch_size", s.pretrain.batch_size}, {"learning_rate", s.pretrain.learning_rate}}},
              {"finetune", {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"train_fraction", s.train_fraction}}},
              {"lora", lorahar::to_json(s.lora)},
              {"quantization", {{"block_size", s.quant.block_size}, {"double_quant", s.quant.double_quant}, {"group_size", s.quant.group_size}}},
              {"synthetic",
               {{"n_domains", s.n_domains},
                {"n_classes", s.n_classes},
                {"recordings_per_class", s.recordings_per_class},
                {"samples_per_recording", s.samples_per_recording},
                {"spec_file", s.spec_file}}},
              {"data_dir", s.data_dir},
              {"out_dir", s.out_dir},
              {"checkpoint", s.checkpoint},
              {"target", s.target},
              {"held_out", s.held_out},
              {"strategy", s.strategy},
              {"strategies", s.strategies},
              {"ranks", s.ranks},
              {"fractions", s.fractions},
              {"in_dirs", s.in_dirs},
              {"jobs", s.jobs}};
}

template <typename T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void apply_config(Settings& s, json j) {
  // A run manifest carries the resolved configuration under "config".
  if (j.contains("config") && j.contains("command")) j = j.at("config");
  take(j, "seed", s.seed);
  if (j.contains("model")) update_from_json(s.model, j.at("model"));
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    take(p, "epochs", s.pretrain.epochs);
    take(p, "batch_size", s.pretrain.batch_size);
    take(p, "learning_rate", s.pretrain.learning_rate);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    take(f, "epochs", s.epochs);
    take(f, "batch_size", s.batch_size);
    take(f, "learning_rate", s.learning_rate);
    take(f, "train_fraction", s.train_fraction);
  }
  if (j.contains("lora")) s.lora = lora_config_from_json(j.at("lora"));
  if (j.contains("quantization")) {
    const auto& q = j.at("quantization");
    take(q, "block_size", s.quant.block_size);
    take(q, "double_quant", s.quant.double_quant);
    take(q, "group_size", s.quant.group_size);
  }
  if (j.contains("synthetic")) {
    const auto& g = j.at("synthetic");
    take(g, "n_domains", s.n_domains);
    take(g, "n_classes", s.n_classes);
    take(g, "recordings_per_class", s.recordings_per_class);
    take(g, "samples_per_recording", s.samples_per_recording);
    take(g, "spec_file", s.spec_file);
  }
  take(j, "data_dir", s.data_dir);
  take(j, "out_dir", s.out_dir);
  take(j, "checkpoint", s.checkpoint);
  take(j, "target", s.target);
  take(j, "held_out", s.held_out);
  take(j, "strategy", s.strategy);
  take(j, "strategies", s.strategies);
  take(j, "ranks", s.ranks);
  take(j, "fractions", s.fractions);
  take(j, "in_dirs", s.in_dirs);
  take(j, "jobs", s.jobs);
}

json parse_json_file(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file(p.string(), text);
}

/// Written before any computation so an interrupted run still documents itself.
void write_run_manifest(const std::string& command, const Settings& s, const json& inputs, const json& outputs) {
  fs::create_directories(s.out_dir);
  json m{{"command", command},
         {"config", to_json(s)},
         {"seed", s.seed},
         {"inputs", inputs},
         {"outputs", outputs},
         {"tool_version", kToolVersion},
         {"timestamp", utc_timestamp()}};
  write_text(fs::path(s.out_dir) / "run_manifest.json", m.dump(2) + "\n");
}

std::uint64_t fnv1a(const std::string& data, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Preprocessed windows for a data directory, from its cache when the manifest
/// and source files are unchanged.
DatasetBundle load_dataset(const std::string& data_dir) {
  if (data_dir.empty()) throw UsageError("--data is required");
  const fs::path manifest_path = fs::path(data_dir) / "manifest.json";
  if (!fs::exists(manifest_path)) throw UsageError("no manifest.json in data directory '" + data_dir + "'");
  const std::string manifest_text = read_file(manifest_path.string());
  const auto sources = parse_domain_manifest(manifest_text, fs::path(data_dir));
  std::uint64_t h = fnv1a(manifest_text);
  for (const auto& src : sources) h = fnv1a(read_file(src.path), h);
  const std::string key = std::to_string(h);
  const fs::path cache = fs::path(data_dir) / "windows.lhar";
  if (fs::exists(cache)) {
    try {
      std::string cached_key;
      DatasetBundle b = load_windows(read_file(cache.string()), &cached_key);
      if (cached_key == key) return b;
    } catch (const Error& e) {
      std::cerr << "warning: ignoring unreadable window cache: " << e.what() << "\n";
    }
  }
  DatasetBundle b = build_label_union(load_domains(sources));
  try {
    write_file(cache.string(), serialize_windows(b, key));
  } catch (const Error& e) {
    std::cerr << "warning: could not write window cache: " << e.what() << "\n";
  }
  return b;
}

void require_domain(const DatasetBundle& b, const std::string& name, const char* flag) {
  const auto ds = b.domains();
  if (name.empty()) throw UsageError(std::string(flag) + " is required");
  if (std::find(ds.begin(), ds.end(), name) == ds.end()) {
    std::string list;
    for (const auto& d : ds) list += (list.empty() ? "" : ", ") + d;
    throw UsageError("domain '" + name + "' not found; available domains: " + list);
  }
}

std::vector<Strategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<Strategy> out;
  for (const auto& n : names) out.push_back(strategy_from_string(n));
  if (out.empty()) throw UsageError("no strategies given");
  return out;
}

ModelConfig model_for(const Settings& s, const DatasetBundle& b) {
  ModelConfig m = s.model;
  m.n_classes = b.n_classes();
  if (!b.windows.empty()) m.channels = b.windows.front().values.cols();
  m.validate();
  return m;
}

void write_record(const fs::path& dir, const std::string& stem, const RunRecord& r) {
  write_text(dir / "runs" / (stem + ".json"), lorahar::to_json(r).dump(2) + "\n");
  write_text(dir / "logs" / (stem + ".jsonl"), train_log_jsonl(r.log));
}

std::string file_stem(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  return s;
}

// Several commands may share one out dir, so keep stems announced earlier.
void write_expected(const fs::path& dir, const std::vector<std::string>& stems) {
  const fs::path path = dir / "runs" / "expected.json";
  std::vector<std::string> all;
  if (fs::exists(path)) all = parse_json_file(path.string()).get<std::vector<std::string>>();
  for (const auto& s : stems)
    if (std::find(all.begin(), all.end(), s) == all.end()) all.push_back(s);
  write_text(path, json(all).dump(2) + "\n");
}

Backbone backbone_for_target(const Settings& s, const DatasetBundle& all, const std::string& target) {
  if (!s.checkpoint.empty()) return load_backbone(read_file(s.checkpoint));
  DatasetBundle pre;
  pre.vocabulary = all.vocabulary;
  for (const auto& w : all.windows)
    if (w.domain != target) pre.windows.push_back(w);
  if (pre.windows.empty()) throw UsageError("no pretraining data besides the target domain; pass --checkpoint");
  ExperimentConfig e = s.experiment();
  e.model = model_for(s, all);
  std::cerr << "pretraining on " << pre.windows.size() << " windows\n";
  return pretrain_backbone(pre, e);
}

// ---------------------------------------------------------------------------
// Commands

SyntheticSpec synthetic_spec_for(const Settings& s) {
  SyntheticSpec spec = default_synthetic_spec(s.n_domains, s.n_classes, s.seed);
  spec.recordings_per_class = s.recordings_per_class;
  spec.samples_per_recording = s.samples_per_recording;
  if (s.spec_file.empty()) return spec;
  const json j = parse_json_file(s.spec_file);
  try {
    if (j.contains("n_domains") || j.contains("n_classes")) {
      spec = default_synthetic_spec(j.value("n_domains", s.n_domains), j.value("n_classes", s.n_classes), j.value("seed", s.seed));
      spec.recordings_per_class = s.recordings_per_class;
      spec.samples_per_recording = s.samples_per_recording;
    }
    take(j, "seed", spec.seed);
    take(j, "channels", spec.channels);
    take(j, "recordings_per_class", spec.recordings_per_class);
    take(j, "samples_per_recording", spec.samples_per_recording);
    if (j.contains("classes")) {
      spec.classes.clear();
      for (const auto& c : j.at("classes")) {
        ClassFamily f;
        f.name = c.at("name").get<std::string>();
        take(c, "base_hz", f.base_hz);
        take(c, "amplitude", f.amplitude);
        take(c, "harmonics", f.harmonics);
        f.offset = c.value("offset", std::vector<double>(spec.channels, 0.0));
        spec.classes.push_back(std::move(f));
      }
    }
    if (j.contains("domains")) {
      spec.domains.clear();
      for (const auto& d : j.at("domains")) {
        DomainShift sh;
        sh.name = d.at("name").get<std::string>();
        take(d, "sample_rate", sh.sample_rate);
        take(d, "amplitude_scale", sh.amplitude_scale);
        take(d, "freq_offset_hz", sh.freq_offset_hz);
        take(d, "noise_sigma", sh.noise_sigma);
        sh.gains = d.value("gains", std::vector<double>(spec.channels, 1.0));
        spec.domains.push_back(std::move(sh));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError("bad synthetic spec '" + s.spec_file + "': " + e.what());
  }
  spec.validate();
  return spec;
}

int cmd_generate(const Settings& s) {
  const SyntheticSpec spec = synthetic_spec_for(s);
  json outputs = json::array({"manifest.json"});
  for (const auto& d : spec.domains) outputs.push_back(d.name + ".csv");
  write_run_manifest("generate", s, json{{"spec_file", s.spec_file}}, outputs);
  const auto domains = generate_synthetic(spec);
  json manifest{{"domains", json::array()}};
  for (std::size_t i = 0; i < domains.size(); ++i) {
    std::ostringstream csv;
    write_sensor_csv(csv, domains[i].recordings);
    write_text(fs::path(s.out_dir) / (domains[i].name + ".csv"), csv.str());
    manifest["domains"].push_back(json{{"name", domains[i].name}, {"path", domains[i].name + ".csv"}, {"sample_rate", spec.domains[i].sample_rate}});
  }
  write_text(fs::path(s.out_dir) / "manifest.json", manifest.dump(2) + "\n");
  std::cerr << "wrote " << domains.size() << " domains to " << s.out_dir << "\n";
  return 0;
}

int cmd_pretrain(const Settings& s) {
  const DatasetBundle all = load_dataset(s.data_dir);
  require_domain(all, s.held_out, "--held-out");
  if (all.domains().size() < 2) throw UsageError("pretraining needs at least 2 domains");
  write_run_manifest("pretrain", s, json{{"data_dir", s.data_dir}, {"held_out", s.held_out}},
                     json::array({"backbone.lhar", "pretrain_log.jsonl"}));
  DatasetBundle pre;
  pre.vocabulary = all.vocabulary;
  for (const auto& w : all.windows)
    if (w.domain != s.held_out) pre.windows.push_back(w);
  ExperimentConfig e = s.experiment();
  e.model = model_for(s, all);
  PretrainLog log;
  Backbone bb = pretrain_backbone(pre, e, &log);
  write_file((fs::path(s.out_dir) / "backbone.lhar").string(), serialize_backbone(bb));
  std::string lines;
  for (std::size_t i = 0; i < log.losses.size(); ++i) lines += json{{"epoch", i + 1}, {"loss", log.losses[i]}, {"seconds", log.seconds[i]}}.dump() + "\n";
  write_text(fs::path(s.out_dir) / "pretrain_log.jsonl", lines);
  std::cerr << "MAE loss " << log.losses.front() << " -> " << log.losses.back() << "\n";
  return 0;
}

int cmd_finetune(const Settings& s) {
  if (s.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const Strategy strategy = strategy_from_string(s.strategy);
  const DatasetBundle all = load_dataset(s.data_dir);
  require_domain(all, s.target, "--target");
  json outputs = json::array({"result.json", "train_log.jsonl", "head.lhar"});
  if (strategy == Strategy::Full) outputs.push_back("backbone.lhar");
  if (uses_adapters(strategy)) outputs.push_back("adapters.lhar");
  if (strategy == Strategy::Qlora) outputs.push_back("backbone_nf4.lhar");
  write_run_manifest("finetune", s, json{{"data_dir", s.data_dir}, {"checkpoint", s.checkpoint}, {"target", s.target}}, outputs);
  const Backbone bb = load_backbone(read_file(s.checkpoint));
  Classifier model;
  RunRecord r = finetune_and_evaluate(bb, select_domain(all, s.target), strategy, s.experiment(), &model);
  r.kind = "finetune";
  const fs::path out(s.out_dir);
  write_text(out / "result.json", lorahar::to_json(r).dump(2) + "\n");
  write_text(out / "train_log.jsonl", train_log_jsonl(r.log));
  write_file((out / "head.lhar").string(), serialize_head(model.head));
  if (strategy == Strategy::Full) write_file((out / "backbone.lhar").string(), serialize_backbone(model.backbone));
  if (uses_adapters(strategy)) write_file((out / "adapters.lhar").string(), serialize_adapters(model.backbone));
  if (strategy == Strategy::Qlora) write_file((out / "backbone_nf4.lhar").string(), serialize_backbone(model.backbone));
  std::cout << to_text(Table{"Fine-tuning result", {"Target", "Strategy", "Accuracy", "Macro-F1", "Trainable", "Total"},
                             {{r.target_domain, to_string(strategy), fmt(r.metrics.accuracy), fmt(r.metrics.macro_f1),
                               std::to_string(r.log.resources.trainable_params), std::to_string(r.log.resources.total_params)}},
                             {}});
  return 0;
}

int cmd_lodo(const Settings& s) {
  const auto strategies = parse_strategies(s.strategies);
  const DatasetBundle all = load_dataset(s.data_dir);
  const auto domains = all.domains();
  if (domains.size() < 2) throw ProtocolError("LODO needs at least 2 domains, data has " + std::to_string(domains.size()));
  std::vector<std::string> stems;
  for (const auto& d : domains)
    for (Strategy st : strategies) stems.push_back(file_stem("lodo_" + d + "_" + to_string(st)));
  write_run_manifest("lodo", s, json{{"data_dir", s.data_dir}}, stems);
  write_expected(s.out_dir, stems);
  ExperimentConfig e = s.experiment();
  e.model = model_for(s, all);
  const auto recs = run_lodo(split_by_domain(all), strategies, e, s.jobs);
  for (std::size_t i = 0; i < recs.size(); ++i) write_record(s.out_dir, stems[i], recs[i]);
  std::cout << to_text(performance_table(recs));
  return 0;
}

int cmd_sweep_rank(const Settings& s) {
  const DatasetBundle all = load_dataset(s.data_dir);
  require_domain(all, s.target, "--target");
  std::vector<std::string> stems;
  for (std::size_t r : s.ranks) stems.push_back("rank_" + std::to_string(r));
  write_run_manifest("sweep-rank", s, json{{"data_dir", s.data_dir}, {"checkpoint", s.checkpoint}, {"target", s.target}}, stems);
  write_expected(s.out_dir, stems);
  const Backbone bb = backbone_for_target(s, all, s.target);
  const auto recs = rank_sweep(bb, select_domain(all, s.target), s.ranks, s.experiment(), s.jobs);
  for (std::size_t i = 0; i < recs.size(); ++i) write_record(s.out_dir, stems[i], recs[i]);
  std::cout << to_text(rank_table(recs));
  return 0;
}

int cmd_sweep_split(const Settings& s) {
  const auto strategies = parse_strategies(s.strategies);
  const DatasetBundle all = load_dataset(s.data_dir);
  require_domain(all, s.target, "--target");
  std::vector<std::string> stems;
  for (double f : s.fractions)
    for (Strategy st : strategies) stems.push_back(file_stem("split_" + fmt(f, 2) + "_" + to_string(st)));
  write_run_manifest("sweep-split", s, json{{"data_dir", s.data_dir}, {"checkpoint", s.checkpoint}, {"target", s.target}}, stems);
  write_expected(s.out_dir, stems);
  const Backbone bb = backbone_for_target(s, all, s.target);
  const auto recs = split_sweep(bb, select_domain(all, s.target), s.fractions, strategies, s.experiment(), s.jobs);
  for (std::size_t i = 0; i < recs.size(); ++i) write_record(s.out_dir, stems[i], recs[i]);
  std::cout << to_text(split_table(recs));
  return 0;
}

int cmd_report(const Settings& s) {
  const std::vector<std::string> dirs = s.in_dirs.empty() ? std::vector<std::string>{s.out_dir} : s.in_dirs;
  std::vector<RunRecord> recs;
  std::vector<std::string> missing;
  for (const auto& d : dirs) {
    const fs::path runs = fs::path(d) / "runs";
    if (!fs::is_directory(runs)) {
      missing.push_back(runs.string());
      continue;
    }
    std::vector<std::string> expected;
    if (fs::exists(runs / "expected.json")) expected = parse_json_file((runs / "expected.json").string()).get<std::vector<std::string>>();
    for (const auto& stem : expected)
      if (!fs::exists(runs / (stem + ".json"))) missing.push_back((runs / (stem + ".json")).string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(runs))
      if (entry.path().extension() == ".json" && entry.path().filename() != "expected.json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) recs.push_back(run_record_from_json(parse_json_file(f.string())));
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw Error("missing runs:" + list);
  }
  write_run_manifest("report", s, json{{"in_dirs", dirs}}, json::array({"report.txt", "*.csv", "rank_plot.svg"}));
  std::string text;
  for (const auto& [name, table] : all_tables(recs)) {
    text += to_text(table) + "\n";
    write_text(fs::path(s.out_dir) / (name + ".csv"), to_csv(table));
  }
  if (!rank_table(recs).rows.empty()) write_text(fs::path(s.out_dir) / "rank_plot.svg", rank_plot_svg(recs));
  write_text(fs::path(s.out_dir) / "report.txt", text);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-autoencoder transformer with LoRA / QLoRA adaptation for sensor-based activity recognition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Settings flags;
  std::string config_file;
  std::optional<std::size_t> rank_flag;
  std::optional<double> alpha_flag;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", config_file, "JSON config file or a run_manifest.json to replay");
    c->add_option("--seed", flags.seed, "Root seed; all randomness derives from it");
    c->add_option("--out-dir", flags.out_dir, "Output directory (" + std::string(kOutDirEnv) + " overrides)");
  };
  auto data_opt = [&](CLI::App* c) { c->add_option("--data", flags.data_dir, "Data directory containing manifest.json"); };
  auto model_opts = [&](CLI::App* c) {
    c->add_option("--embed-dim", flags.model.embed_dim);
    c->add_option("--ffn-hidden", flags.model.ffn_hidden);
    c->add_option("--heads", flags.model.n_heads);
    c->add_option("--enc-layers", flags.model.n_enc_layers);
    c->add_option("--dec-layers", flags.model.n_dec_layers);
    c->add_option("--patch-len", flags.model.patch_len);
    c->add_option("--mask-ratio", flags.model.mask_ratio);
    c->add_option("--pretrain-epochs", flags.pretrain.epochs);
    c->add_option("--pretrain-lr", flags.pretrain.learning_rate);
  };
  auto train_opts = [&](CLI::App* c) {
    c->add_option("--epochs", flags.epochs, "Fine-tuning epochs");
    c->add_option("--batch-size", flags.batch_size);
    c->add_option("--lr", flags.learning_rate);
    c->add_option("--split", flags.train_fraction, "Train fraction of the target domain");
    c->add_option("--block-size", flags.quant.block_size, "NF4 block size");
    c->add_flag("--double-quant", flags.quant.double_quant, "Double-quantize NF4 scales");
    c->add_option("--jobs", flags.jobs, "Parallel workers for independent runs");
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic multi-domain dataset");
  common(gen);
  gen->add_option("--spec", flags.spec_file, "JSON synthetic spec");
  gen->add_option("--domains", flags.n_domains);
  gen->add_option("--classes", flags.n_classes);
  gen->add_option("--recordings-per-class", flags.recordings_per_class);
  gen->add_option("--samples-per-recording", flags.samples_per_recording);

  auto* pre = app.add_subcommand("pretrain", "MAE-pretrain a backbone on all domains except one");
  common(pre);
  data_opt(pre);
  model_opts(pre);
  pre->add_option("--held-out", flags.held_out, "Domain excluded from pretraining");

  auto* ft = app.add_subcommand("finetune", "Adapt a pretrained backbone to one domain");
  common(ft);
  data_opt(ft);
  train_opts(ft);
  ft->add_option("--checkpoint", flags.checkpoint, "Backbone checkpoint");
  ft->add_option("--target", flags.target, "Target domain");
  ft->add_option("--strategy", flags.strategy, "full, lora, qlora or frozen_head");
  ft->add_option("--rank", rank_flag, "LoRA rank");
  ft->add_option("--alpha", alpha_flag, "LoRA alpha");

  auto* lodo = app.add_subcommand("lodo", "Leave-one-domain-out evaluation of several strategies");
  common(lodo);
  data_opt(lodo);
  model_opts(lodo);
  train_opts(lodo);
  lodo->add_option("--strategies", flags.strategies)->delimiter(',');
  lodo->add_option("--rank", rank_flag, "LoRA rank");
  lodo->add_option("--alpha", alpha_flag, "LoRA alpha");

  auto* sr = app.add_subcommand("sweep-rank", "LoRA rank sweep on one target domain");
  common(sr);
  data_opt(sr);
  model_opts(sr);
  train_opts(sr);
  sr->add_option("--target", flags.target);
  sr->add_option("--checkpoint", flags.checkpoint, "Backbone checkpoint (pretrained on the other domains when omitted)");
  sr->add_option("--ranks", flags.ranks)->delimiter(',');
  sr->add_option("--alpha", alpha_flag, "LoRA alpha");

  auto* ss = app.add_subcommand("sweep-split", "Train/test split sweep on one target domain");
  common(ss);
  data_opt(ss);
  model_opts(ss);
  train_opts(ss);
  ss->add_option("--target", flags.target);
  ss->add_option("--checkpoint", flags.checkpoint);
  ss->add_option("--fractions", flags.fractions)->delimiter(',');
  ss->add_option("--strategies", flags.strategies)->delimiter(',');
  ss->add_option("--rank", rank_flag);
  ss->add_option("--alpha", alpha_flag);

  auto* rep = app.add_subcommand("report", "Render tables and plots from finished runs");
  common(rep);
  rep->add_option("--in-dir", flags.in_dirs, "Directories holding runs/ (default: --out-dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    // defaults < config file < flags
    Settings s;
    if (name == "sweep-split") s.strategies = {"full", "lora"};
    if (!config_file.empty()) apply_config(s, parse_json_file(config_file));
    for (const CLI::Option* opt : cmd->get_options()) {
      if (opt->count() == 0) continue;
      const std::string n = opt->get_name();
      if (n == "--seed") s.seed = flags.seed;
      else if (n == "--out-dir") s.out_dir = flags.out_dir;
      else if (n == "--data") s.data_dir = flags.data_dir;
      else if (n == "--embed-dim") s.model.embed_dim = flags.model.embed_dim;
      else if (n == "--ffn-hidden") s.model.ffn_hidden = flags.model.ffn_hidden;
      else if (n == "--heads") s.model.n_heads = flags.model.n_heads;
      else if (n == "--enc-layers") s.model.n_enc_layers = flags.model.n_enc_layers;
      else if (n == "--dec-layers") s.model.n_dec_layers = flags.model.n_dec_layers;
      else if (n == "--patch-len") s.model.patch_len = flags.model.patch_len;
      else if (n == "--mask-ratio") s.model.mask_ratio = flags.model.mask_ratio;
      else if (n == "--pretrain-epochs") s.pretrain.epochs = flags.pretrain.epochs;
      else if (n == "--pretrain-lr") s.pretrain.learning_rate = flags.pretrain.learning_rate;
      else if (n == "--epochs") s.epochs = flags.epochs;
      else if (n == "--batch-size") s.batch_size = flags.batch_size;
      else if (n == "--lr") s.learning_rate = flags.learning_rate;
      else if (n == "--split") s.train_fraction = flags.train_fraction;
      else if (n == "--block-size") s.quant.block_size = flags.quant.block_size;
      else if (n == "--double-quant") s.quant.double_quant = flags.quant.double_quant;
      else if (n == "--jobs") s.jobs = flags.jobs;
      else if (n == "--spec") s.spec_file = flags.spec_file;
      else if (n == "--domains") s.n_domains = flags.n_domains;
      else if (n == "--classes") s.n_classes = flags.n_classes;
      else if (n == "--recordings-per-class") s.recordings_per_class = flags.recordings_per_class;
      else if (n == "--samples-per-recording") s.samples_per_recording = flags.samples_per_recording;
      else if (n == "--held-out") s.held_out = flags.held_out;
      else if (n == "--checkpoint") s.checkpoint = flags.checkpoint;
      else if (n == "--target") s.target = flags.target;
      else if (n == "--strategy") s.strategy = flags.strategy;
      else if (n == "--strategies") s.strategies = flags.strategies;
      else if (n == "--ranks") s.ranks = flags.ranks;
      else if (n == "--fractions") s.fractions = flags.fractions;
      else if (n == "--in-dir") s.in_dirs = flags.in_dirs;
    }
    if (rank_flag) s.lora.rank = *rank_flag;
    if (alpha_flag) s.lora.alpha = *alpha_flag;
    if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') s.out_dir = env;

    if (name == "finetune") {
      const Strategy st = strategy_from_string(s.strategy);
      if (!uses_adapters(st) && (rank_flag || alpha_flag)) {
        throw UsageError("--rank/--alpha only apply to the lora and qlora strategies, not '" + s.strategy + "'");
      }
    }
    if (s.jobs == 0) throw UsageError("--jobs must be >= 1");
    s.lora.validate();

    if (name == "generate") return cmd_generate(s);
    if (name == "pretrain") return cmd_pretrain(s);
    if (name == "finetune") return cmd_finetune(s);
    if (name == "lodo") return cmd_lodo(s);
    if (name == "sweep-rank") return cmd_sweep_rank(s);
    if (name == "sweep-split") return cmd_sweep_split(s);
    if (name == "report") return cmd_report(s);
    throw UsageError("unknown command '" + name + "'");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
