#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>
#include <nlohmann/json.hpp>

#include "rdarts/rdarts.hpp"

namespace rdarts::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Real = float;

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes.data(), bytes.size());
}

// Where the windows come from and how they are cut.
struct DataOptions {
  std::string path;
  bool synthetic = false;
  std::size_t subjects = 20;
  std::size_t record_length = 2048;
  std::size_t channels = 2;
  std::uint64_t data_seed = 0;
  double noise = 0.3;
  double jitter = 1.5;
  std::size_t window = 128;
  std::size_t stride = 64;
  double sampling_rate_hz = 1000.0;
  std::vector<std::string> channel_columns;

  void validate() const {
    if (path.empty() && !synthetic) throw UsageError("one of --data or --synthetic is required");
    if (!path.empty() && synthetic) throw UsageError("--data and --synthetic are mutually exclusive");
  }

  json to_json() const {
    json j{{"window", window}, {"stride", stride}};
    if (synthetic) {
      j["source"] = "synthetic";
      j["subjects"] = subjects;
      j["record_length"] = record_length;
      j["channels"] = channels;
      j["data_seed"] = data_seed;
      j["noise"] = noise;
      j["jitter"] = jitter;
    } else {
      j["source"] = path;
      j["sampling_rate_hz"] = sampling_rate_hz;
      j["channel_columns"] = channel_columns;
    }
    return j;
  }
};

struct LoadedData {
  std::vector<SequenceRecord> records;
  WindowedDataset ds;
  json hashes;
};

inline std::string windows_hash(const WindowedDataset& ds) {
  std::string h = sha256_hex(ds.data.data(), ds.data.size() * sizeof(double));
  h += sha256_hex(ds.labels.data(), ds.labels.size() * sizeof(int));
  return sha256_hex(h.data(), h.size());
}

inline LoadedData load_data(const DataOptions& o, const std::optional<NormStats>& norm = std::nullopt) {
  o.validate();
  LoadedData d;
  if (o.synthetic) {
    d.records = synth_generate(o.subjects, 2, o.record_length, o.channels, o.data_seed, o.noise, o.jitter);
  } else {
    CsvSchema schema;
    schema.sampling_rate_hz = o.sampling_rate_hz;
    schema.channels = o.channel_columns;
    d.records = ingest_csv(o.path, schema);
    d.hashes["data_file"] = sha256_file(o.path);
  }
  d.ds = make_windows(d.records, o.window, o.stride, true, norm);
  d.hashes["windows"] = windows_hash(d.ds);
  return d;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Written once, before any compute, and never touched again.
inline void write_manifest(const fs::path& out, const std::string& command, const std::vector<std::string>& argv,
                           const json& config, std::uint64_t seed, const json& inputs, const json& outputs) {
  fs::create_directories(out);
  json m{{"command", command}, {"argv", argv},       {"engine_version", engine_version()},
         {"seed", seed},       {"config", config},   {"input_hashes", inputs},
         {"outputs", outputs}, {"started_at", utc_now()}};
  std::ofstream(out / "run_manifest.json") << m.dump(2) << '\n';
}

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + " is not valid JSON: " + e.what());
  }
}

inline std::string split_hash(const SearchSplit& s, const json& data_hashes) {
  std::ostringstream os;
  os << data_hashes.dump() << '|';
  for (auto i : s.train) os << i << ',';
  os << '|';
  for (auto i : s.val) os << i << ',';
  const auto str = os.str();
  return sha256_hex(str.data(), str.size());
}

// ---------------------------------------------------------------------------

struct SearchOptions {
  SearchRunConfig run;
  DataOptions data;
  std::string resume;
  bool quiet = false;
};

struct SearchOutcome {
  SearchResult result;
  std::string split_sha256;
};

inline SearchOutcome cmd_search(const SearchOptions& o, const std::vector<std::string>& argv = {}) {
  o.run.validate();
  o.data.validate();
  const fs::path out = o.run.out_dir.empty() ? fs::path("runs/search") : fs::path(o.run.out_dir);
  SearchRunConfig run = o.run;
  run.out_dir = out.string();
  json config{{"search", to_json(run)}, {"data", o.data.to_json()}};
  auto data = load_data(o.data);
  const auto split = split_for_search(data.ds, data.ds.indices_where_session(1), run.split_ratio, run.seed);
  const auto sh = split_hash(split, data.hashes);
  json inputs = data.hashes;
  inputs["search_split"] = sh;
  if (!o.resume.empty()) inputs["resume_checkpoint"] = sha256_file(o.resume);
  write_manifest(out, "search", argv, config, run.seed, inputs,
                 {"config.json", "log.csv", "genotype.json", "genotype.dot", "dataset.json", "checkpoints/"});
  write_json(out / "config.json", config);
  write_json(out / "dataset.json", dataset_manifest(data.records));

  auto hook = [&](const EpochSummary& e) {
    if (!o.quiet)
      std::cerr << "search epoch " << e.epoch + 1 << "/" << run.epochs << "  train " << e.train_loss << "  val "
                << e.val_loss << "  lr " << e.lr << '\n';
    return true;
  };
  std::optional<fs::path> resume;
  if (!o.resume.empty()) resume = o.resume;
  return {run_search<Real>(run, data.ds, split, resume, hook), sh};
}

struct TrainOptions {
  std::string genotype_path;
  DataOptions data;
  TrainConfig train;
  std::optional<std::size_t> init_channels;
  std::string out = "runs/train";
  bool quiet = false;
};

inline SupernetConfig net_config_for(const Genotype& g, std::optional<std::size_t> init_channels) {
  SupernetConfig cfg;
  cfg.num_cells = g.cells.size();
  cfg.layout.clear();
  for (const auto& c : g.cells) cfg.layout.push_back(c.kind);
  cfg.independent_alpha = g.meta.value("independent_alpha", cfg.independent_alpha);
  cfg.use_gates = g.meta.value("use_gates", cfg.use_gates);
  cfg.gate_scale = g.meta.value("gate_scale", cfg.gate_scale);
  cfg.gate_threshold = g.meta.value("gate_threshold", cfg.gate_threshold);
  cfg.init_channels = init_channels.value_or(g.meta.value("init_channels", cfg.init_channels));
  return cfg;
}

struct TrainOutcome {
  TrainResult<Real> result;
  fs::path weights;
};

inline TrainOutcome cmd_train(const TrainOptions& o, const std::vector<std::string>& argv = {}) {
  o.train.validate();
  o.data.validate();
  if (o.genotype_path.empty()) throw UsageError("--genotype is required");
  const fs::path out(o.out);
  const auto geno = genotype_from_json(read_json(o.genotype_path));
  auto data = load_data(o.data);
  SupernetConfig cfg = net_config_for(geno, o.init_channels);
  cfg.input_channels = data.ds.channels;
  cfg.num_classes = data.ds.num_classes;
  json config{{"train", to_json(o.train)}, {"net", to_json(cfg)}, {"data", o.data.to_json()}};
  json inputs = data.hashes;
  inputs["genotype"] = sha256_file(o.genotype_path);
  write_manifest(out, "train", argv, config, o.train.seed, inputs, {"config.json", "log.csv", "weights.ckpt", "last.ckpt"});
  write_json(out / "config.json", config);

  auto net = instantiate_discrete<Real>(geno, cfg, o.train.seed);
  auto res = train_final(net, data.ds, data.ds.indices_where_session(1), o.train);
  {
    std::ofstream log(out / "log.csv");
    log << "epoch,loss,accuracy,eval_accuracy,lr,drop_path\n";
    char buf[128];
    for (const auto& e : res.log) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.loss, e.accuracy, e.eval_accuracy, e.lr,
                    e.drop_path);
      log << buf;
      if (!o.quiet)
        std::cerr << "train epoch " << e.epoch + 1 << "/" << o.train.epochs << "  loss " << e.loss << "  acc " << e.accuracy << "  eval acc " << e.eval_accuracy
                  << '\n';
    }
  }
  const json extra{{"data", o.data.to_json()}, {"best_epoch", res.best_epoch}, {"best_accuracy", res.best_accuracy}};
  save_weights(out / "last.ckpt", net, capture(net), data.ds.norm, extra);
  save_weights(out / "weights.ckpt", net, res.best, data.ds.norm, extra);
  return {std::move(res), out / "weights.ckpt"};
}

struct EvalOptions {
  std::string weights;
  DataOptions data;
  EvalConfig eval;
  std::string out = "runs/eval";
  bool quiet = false;
};

inline json cmd_eval(const EvalOptions& o, const std::vector<std::string>& argv = {}) {
  o.data.validate();
  if (o.weights.empty()) throw UsageError("--weights is required");
  if (o.eval.batch < 1) throw UsageError("evaluation batch size must be positive");
  const fs::path out(o.out);
  auto loaded = load_weights<Real>(o.weights);
  auto data = load_data(o.data, loaded.norm);
  json inputs = data.hashes;
  inputs["weights"] = sha256_file(o.weights);
  write_manifest(out, "eval", argv, {{"eval", {{"batch", o.eval.batch}}}, {"data", o.data.to_json()}}, loaded.net.seed(),
                 inputs, {"metrics.json", "det.csv"});
  if (loaded.net.config().input_channels != data.ds.channels)
    throw DataError("weights expect " + std::to_string(loaded.net.config().input_channels) + " channels, data has " +
                    std::to_string(data.ds.channels));
  auto warn = [&](const std::string& m) {
    if (!o.quiet) std::cerr << "warning: " << m << '\n';
  };
  const auto scores = verification_scores(loaded.net, data.ds, o.eval.batch, warn);
  const auto metrics = metrics_json(scores);
  write_json(out / "metrics.json", metrics);
  std::ofstream det(out / "det.csv");
  write_det_csv(det, det_curve(scores));
  return metrics;
}

// ---------------------------------------------------------------------------

struct AblateOptions {
  DataOptions data;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t search_epochs = 10;
  std::size_t train_epochs = 30;
  std::size_t init_channels = 8;
  double xi = 0.0;
  double gate_scale = 2.0;
  double threshold = 0.2;
  double drop_path = 0.3;
  bool drop_path_ramp = true;
  std::string out = "runs/ablate";
  bool quiet = false;
};

inline const char* tier_row_label(Tier t) {
  switch (t) {
    case Tier::baseline_darts: return "DARTS";
    case Tier::independent_alpha: return "+alpha";
    case Tier::independent_alpha_plus_gates: return "+beta (Relax DARTS)";
  }
  return "?";
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Three-row table in the layout of the published ablation: EER and FRR at
// FAR 1e-1, 1e-2, 1e-3, medians over seeds.
inline std::string ablation_markdown(const json& report) {
  std::ostringstream os;
  os << "| Model | EER | FRR@FAR 1e-1 | FRR@FAR 1e-2 | FRR@FAR 1e-3 |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& r : report["rows"]) {
    os << "| " << r["model"].get<std::string>() << " | " << fixed4(r["eer"]) << " | " << fixed4(r["frr_at_far"]["1e-1"])
       << " | " << fixed4(r["frr_at_far"]["1e-2"]) << " | " << fixed4(r["frr_at_far"]["1e-3"]) << " |\n";
  }
  os << "\nMedians over seeds";
  for (const auto& s : report["seeds"]) os << ' ' << s.get<std::uint64_t>();
  const auto& ord = report["ordering"];
  os << ". Ordering relax <= alpha <= darts: ";
  if (ord["strict"].get<bool>())
    os << "holds";
  else if (ord["within_band"].get<bool>())
    os << "inverted within the " << fixed4(ord["tolerance"]) << " band (flagged)";
  else
    os << "inverted beyond the " << fixed4(ord["tolerance"]) << " band (flagged)";
  os << ".\n";
  return os.str();
}

inline json cmd_ablate(const AblateOptions& o, const std::vector<std::string>& argv = {}) {
  o.data.validate();
  if (o.seeds.empty()) throw UsageError("--seeds needs at least one seed");
  const fs::path out(o.out);
  const Tier tiers[] = {Tier::baseline_darts, Tier::independent_alpha, Tier::independent_alpha_plus_gates};
  json config{{"data", o.data.to_json()},      {"seeds", o.seeds},       {"search_epochs", o.search_epochs},
              {"train_epochs", o.train_epochs}, {"init_channels", o.init_channels}, {"xi", o.xi},
              {"gate_scale", o.gate_scale},    {"threshold", o.threshold}, {"drop_path", o.drop_path},
              {"drop_path_ramp", o.drop_path_ramp}};
  const auto probe = load_data(o.data);
  write_manifest(out, "ablate", argv, config, o.seeds.front(), probe.hashes,
                 {"ablation.md", "ablation.json", "ablation.csv", "seed_*/<tier>/"});
  write_json(out / "config.json", config);

  json runs = json::array();
  std::map<Tier, std::vector<json>> per_tier;
  for (auto seed : o.seeds) {
    std::string shared_split;
    for (auto tier : tiers) {
      const fs::path dir = out / ("seed_" + std::to_string(seed)) / tier_short(tier);
      SearchOptions so;
      so.data = o.data;
      so.quiet = o.quiet;
      so.run.epochs = o.search_epochs;
      so.run.seed = seed;
      so.run.tier = tier;
      so.run.net.init_channels = o.init_channels;
      so.run.net.gate_scale = o.gate_scale;
      so.run.net.gate_threshold = o.threshold;
      so.run.optim.xi = o.xi;
      so.run.out_dir = (dir / "search").string();
      if (!o.quiet) std::cerr << "== seed " << seed << " tier " << tier_short(tier) << '\n';
      const auto so_res = cmd_search(so, argv);
      if (shared_split.empty()) shared_split = so_res.split_sha256;
      if (so_res.split_sha256 != shared_split)
        throw DataError("ablation tiers saw different data splits for seed " + std::to_string(seed));

      TrainOptions to;
      to.genotype_path = (dir / "search" / "genotype.json").string();
      to.data = o.data;
      to.quiet = o.quiet;
      to.train.epochs = o.train_epochs;
      to.train.seed = seed;
      to.train.drop_path_p = o.drop_path;
      to.train.drop_path_ramp = o.drop_path_ramp;
      to.out = (dir / "train").string();
      const auto tr = cmd_train(to, argv);

      EvalOptions eo;
      eo.weights = tr.weights.string();
      eo.data = o.data;
      eo.quiet = o.quiet;
      eo.out = (dir / "eval").string();
      const auto m = cmd_eval(eo, argv);
      per_tier[tier].push_back(m);
      runs.push_back({{"seed", seed}, {"tier", tier_short(tier)}, {"split_sha256", so_res.split_sha256}, {"metrics", m}});
    }
  }

  json rows = json::array();
  std::map<Tier, double> med;
  for (auto tier : tiers) {
    std::vector<double> eer, f1, f2, f3, per_seed;
    for (const auto& m : per_tier[tier]) {
      eer.push_back(m["eer"]);
      f1.push_back(m["frr_at_far"]["1e-1"]);
      f2.push_back(m["frr_at_far"]["1e-2"]);
      f3.push_back(m["frr_at_far"]["1e-3"]);
    }
    med[tier] = median(eer);
    rows.push_back({{"model", tier_row_label(tier)},
                    {"tier", tier_short(tier)},
                    {"eer", med[tier]},
                    {"frr_at_far", {{"1e-1", median(f1)}, {"1e-2", median(f2)}, {"1e-3", median(f3)}}},
                    {"eer_per_seed", eer}});
  }
  const double tol = 0.05;
  const double r = med[Tier::independent_alpha_plus_gates], a = med[Tier::independent_alpha],
               d = med[Tier::baseline_darts];
  json report{{"rows", rows},
              {"seeds", o.seeds},
              {"ordering", {{"tolerance", tol}, {"strict", r <= a && a <= d}, {"within_band", r <= a + tol && a <= d + tol}}},
              {"runs", runs}};
  write_json(out / "ablation.json", report);
  std::ofstream(out / "ablation.md") << ablation_markdown(report);
  {
    std::ofstream csv(out / "ablation.csv");
    csv << "model,eer,frr_at_far_1e-1,frr_at_far_1e-2,frr_at_far_1e-3\n";
    for (const auto& r : rows)
      csv << '"' << r["model"].get<std::string>() << "\"," << fixed4(r["eer"]) << ',' << fixed4(r["frr_at_far"]["1e-1"])
          << ',' << fixed4(r["frr_at_far"]["1e-2"]) << ',' << fixed4(r["frr_at_far"]["1e-3"]) << '\n';
  }
  return report;
}

}  // namespace rdarts::cli
