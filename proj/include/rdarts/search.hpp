#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/checkpoint.hpp"
#include "rdarts/data.hpp"
#include "rdarts/optim.hpp"
#include "rdarts/supernet.hpp"

namespace rdarts {

enum class Tier { baseline_darts, independent_alpha, independent_alpha_plus_gates };

inline std::string to_string(Tier t) {
  switch (t) {
    case Tier::baseline_darts: return "baseline_darts";
    case Tier::independent_alpha: return "independent_alpha";
    case Tier::independent_alpha_plus_gates: return "independent_alpha_plus_gates";
  }
  return "?";
}

// Accepts both the long names and the CLI short forms darts/alpha/relax.
inline Tier tier_from(const std::string& s) {
  if (s == "darts" || s == "baseline_darts") return Tier::baseline_darts;
  if (s == "alpha" || s == "independent_alpha") return Tier::independent_alpha;
  if (s == "relax" || s == "independent_alpha_plus_gates") return Tier::independent_alpha_plus_gates;
  throw UsageError("unknown tier '" + s + "' (expected darts, alpha or relax)");
}

inline const char* tier_short(Tier t) {
  switch (t) {
    case Tier::baseline_darts: return "darts";
    case Tier::independent_alpha: return "alpha";
    case Tier::independent_alpha_plus_gates: return "relax";
  }
  return "?";
}

inline void apply_tier(SupernetConfig& net, Tier t) {
  net.independent_alpha = t != Tier::baseline_darts;
  net.use_gates = t == Tier::independent_alpha_plus_gates;
}

struct SearchRunConfig {
  std::size_t epochs = 50;
  std::size_t train_batch = 32;
  std::size_t val_batch = 32;
  std::uint64_t seed = 0;
  Tier tier = Tier::independent_alpha_plus_gates;
  double split_ratio = 0.5;
  std::string out_dir;  // empty: nothing is written
  SupernetConfig net;
  OptimizerConfig optim;

  // The supernet flags implied by the tier.
  SupernetConfig resolved_net() const {
    SupernetConfig n = net;
    apply_tier(n, tier);
    return n;
  }

  void validate() const {
    if (epochs < 1) throw UsageError("search epochs must be at least 1");
    if (train_batch < 1 || val_batch < 1) throw UsageError("batch sizes must be positive");
    if (!(split_ratio > 0 && split_ratio < 1)) throw UsageError("split ratio must lie in (0, 1)");
    resolved_net().validate();
    optim.validate();
  }
};

inline nlohmann::json to_json(const SearchRunConfig& c) {
  return {{"epochs", c.epochs},         {"train_batch", c.train_batch}, {"val_batch", c.val_batch},
          {"seed", c.seed},             {"tier", to_string(c.tier)},    {"split_ratio", c.split_ratio},
          {"net", to_json(c.resolved_net())}, {"optim", to_json(c.optim)}};
}

inline SearchRunConfig search_config_from_json(const nlohmann::json& j) {
  SearchRunConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.train_batch = j.value("train_batch", c.train_batch);
  c.val_batch = j.value("val_batch", c.val_batch);
  c.seed = j.value("seed", c.seed);
  c.tier = tier_from(j.value("tier", to_string(c.tier)));
  c.split_ratio = j.value("split_ratio", c.split_ratio);
  if (j.contains("net")) c.net = supernet_config_from_json(j["net"]);
  if (j.contains("optim")) c.optim = optimizer_config_from_json(j["optim"]);
  return c;
}

struct StepRecord {
  std::size_t step = 0, epoch = 0;
  double train_loss = 0, val_loss = 0, lr = 0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, lr = 0;
};

struct SearchResult {
  Genotype genotype;
  std::vector<StepRecord> steps;  // steps run in this invocation
  std::vector<EpochSummary> epochs;
  bool resumed = false;
};

// Optional observer; returning false stops the run after that epoch's
// checkpoint has been written.
using EpochHook = std::function<bool(const EpochSummary&)>;

// Windows of one epoch in batch order. Each epoch reshuffles from its own
// stream, so resuming needs no generator state beyond the epoch counter.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> idx, std::size_t batch,
                                                           std::uint64_t seed, std::size_t epoch, std::uint64_t lane) {
  Rng rng = Rng::derive(seed, 10'000 + 2 * epoch + lane);
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < idx.size(); b += batch)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch)));
  return out;
}

template <typename S>
class SearchEngine {
 public:
  SearchEngine(SearchRunConfig cfg, const WindowedDataset& data, SearchSplit split)
      : cfg_(std::move(cfg)), data_(data), split_(std::move(split)), net_(prepare(cfg_, data_), cfg_.seed) {
    if (split_.train.empty() || split_.val.empty()) throw DataError("search split is empty");
    for (auto i : split_.train)
      if (data_.sessions.at(i) != 1) throw DataError("search split contains a non-session-1 window");
    for (auto i : split_.val)
      if (data_.sessions.at(i) != 1) throw DataError("search split contains a non-session-1 window");
  }

  Supernet<S>& net() { return net_; }
  TripleState<S>& state() { return state_; }
  const SearchRunConfig& config() const { return cfg_; }
  std::size_t epochs_done() const { return epoch_; }

  std::filesystem::path checkpoint_dir() const { return std::filesystem::path(cfg_.out_dir) / "checkpoints"; }

  SearchResult run(const EpochHook& hook = {}) {
    SearchResult res;
    res.resumed = epoch_ > 0;
    std::ofstream log;
    if (!cfg_.out_dir.empty()) {
      std::filesystem::create_directories(cfg_.out_dir);
      const auto path = std::filesystem::path(cfg_.out_dir) / "log.csv";
      const bool fresh = epoch_ == 0 || !std::filesystem::exists(path);
      log.open(path, fresh ? std::ios::trunc : std::ios::app);
      if (fresh) log << "step,epoch,train_loss,val_loss,lr\n";
    }
    while (epoch_ < cfg_.epochs) {
      const double lr = cosine_lr(static_cast<double>(epoch_), static_cast<double>(cfg_.epochs), cfg_.optim.w_lr0);
      const auto tb = epoch_batches(split_.train, cfg_.train_batch, cfg_.seed, epoch_, 0);
      const auto vb = epoch_batches(split_.val, cfg_.val_batch, cfg_.seed, epoch_, 1);
      const std::size_t steps = std::max(tb.size(), vb.size());
      EpochSummary es{epoch_, 0, 0, lr};
      for (std::size_t k = 0; k < steps; ++k) {
        const auto train = batch(tb[k % tb.size()]);
        const auto val = batch(vb[k % vb.size()]);
        StepLosses sl;
        const auto saved = save_state();
        try {
          sl = triple_step(net_, train, val, state_, cfg_.optim, lr);
        } catch (const NumericalError&) {
          load_state(saved);
          if (!cfg_.out_dir.empty()) write_checkpoint(checkpoint_dir() / "last_good.ckpt");
          throw;
        }
        const StepRecord rec{state_.step, epoch_, sl.train_loss, sl.val_loss, lr};
        res.steps.push_back(rec);
        if (log.is_open()) log << rec.step << ',' << rec.epoch << ',' << fmt(rec.train_loss) << ',' << fmt(rec.val_loss)
                               << ',' << fmt(rec.lr) << '\n';
        es.train_loss += sl.train_loss;
        es.val_loss += sl.val_loss;
      }
      es.train_loss /= static_cast<double>(steps);
      es.val_loss /= static_cast<double>(steps);
      res.epochs.push_back(es);
      ++epoch_;
      state_.epoch = epoch_;
      if (!cfg_.out_dir.empty()) {
        log.flush();
        write_checkpoint(checkpoint_dir() / "last.ckpt");
        if (es.val_loss < best_val_) {
          best_val_ = es.val_loss;
          write_checkpoint(checkpoint_dir() / "best.ckpt");
        }
      } else {
        best_val_ = std::min(best_val_, es.val_loss);
      }
      if (hook && !hook(es)) break;
    }
    res.genotype = net_.derive(cfg_.net.gate_threshold);
    res.genotype.meta["tier"] = to_string(cfg_.tier);
    res.genotype.meta["search_epochs"] = epoch_;
    res.genotype.meta["seed"] = cfg_.seed;
    res.genotype.meta["init_channels"] = cfg_.net.init_channels;
    return res;
  }

  void write_checkpoint(const std::filesystem::path& path) const {
    auto j = checkpoint_header("search");
    j["config"] = to_json(cfg_);
    j["epoch"] = epoch_;
    j["step"] = state_.step;
    j["best_val"] = best_val_;
    j["weights"] = pack_params(net_.weights());
    j["alphas"] = pack_params(ParamList<S>(net_.alphas().begin(), net_.alphas().end()));
    j["betas"] = pack_params(net_.betas());
    j["sgd"] = pack_nested(state_.w.velocity);
    j["adam_alpha"] = pack_adam(state_.alpha);
    j["adam_beta"] = pack_adam(state_.beta);
    write_cbor(path, j);
  }

  // Everything is decoded and checked before any state changes.
  void load_checkpoint(const std::filesystem::path& path) {
    const auto j = read_checkpoint(path, "search");
    try {
      const auto saved_cfg = search_config_from_json(j.at("config"));
      if (to_json(saved_cfg) != to_json(cfg_))
        throw FormatError("checkpoint " + path.string() + " was written for a different search configuration");
      const auto weights = net_.weights();
      const ParamList<S> alphas(net_.alphas().begin(), net_.alphas().end());
      const auto betas = net_.betas();
      const auto w = decode_params(j.at("weights"), weights, "weights");
      const auto a = decode_params(j.at("alphas"), alphas, "alphas");
      const auto b = decode_params(j.at("betas"), betas, "betas");
      const auto sgd = decode_nested(j.at("sgd"), weights, "sgd velocity");
      const auto aa = decode_adam(j.at("adam_alpha"), alphas, "adam_alpha");
      const auto ab = decode_adam(j.at("adam_beta"), betas, "adam_beta");
      const auto epoch = j.at("epoch").get<std::size_t>();
      const auto step = j.at("step").get<std::size_t>();
      const auto best = j.at("best_val").get<double>();
      if (epoch > cfg_.epochs) throw FormatError("checkpoint epoch exceeds the configured epochs");

      auto wl = weights;
      auto al = alphas;
      auto bl = betas;
      restore_values(wl, w);
      restore_values(al, a);
      restore_values(bl, b);
      state_.w.velocity = sgd;
      state_.alpha = aa;
      state_.beta = ab;
      state_.step = step;
      state_.epoch = epoch;
      epoch_ = epoch;
      best_val_ = best;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint " + path.string() + " is malformed: " + e.what());
    }
  }

 private:
  struct Saved {
    std::vector<std::vector<S>> w, a, b;
    TripleState<S> st;
  };

  static SupernetConfig prepare(const SearchRunConfig& cfg, const WindowedDataset& data) {
    cfg.validate();
    SupernetConfig n = cfg.resolved_net();
    n.input_channels = data.channels;
    n.num_classes = data.num_classes;
    check_temporal_length(n, data.length);
    return n;
  }

  Batch<S> batch(const std::vector<std::size_t>& idx) const { return {data_.template tensor<S>(idx), data_.labels_of(idx)}; }

  Saved save_state() const {
    return {snapshot_values(net_.weights()), snapshot_values(ParamList<S>(net_.alphas().begin(), net_.alphas().end())),
            snapshot_values(net_.betas()), state_};
  }

  void load_state(const Saved& s) {
    auto w = net_.weights();
    ParamList<S> a(net_.alphas().begin(), net_.alphas().end());
    auto b = net_.betas();
    restore_values(w, s.w);
    restore_values(a, s.a);
    restore_values(b, s.b);
    state_ = s.st;
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

  SearchRunConfig cfg_;
  const WindowedDataset& data_;
  SearchSplit split_;
  Supernet<S> net_;
  TripleState<S> state_;
  std::size_t epoch_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
};

// Runs (or, with resume_from, continues) a search and writes genotype.json
// plus genotype.dot when an output directory is configured.
template <typename S>
SearchResult run_search(const SearchRunConfig& cfg, const WindowedDataset& data, const SearchSplit& split,
                        const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                        const EpochHook& hook = {}) {
  SearchEngine<S> engine(cfg, data, split);
  if (resume_from) engine.load_checkpoint(*resume_from);
  auto res = engine.run(hook);
  if (!cfg.out_dir.empty()) {
    std::ofstream(std::filesystem::path(cfg.out_dir) / "genotype.json") << to_json(res.genotype).dump(2) << '\n';
    std::ofstream(std::filesystem::path(cfg.out_dir) / "genotype.dot") << genotype_to_dot(res.genotype);
  }
  return res;
}

}  // namespace rdarts
