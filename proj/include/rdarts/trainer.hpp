#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/checkpoint.hpp"
#include "rdarts/data.hpp"
#include "rdarts/optim.hpp"
#include "rdarts/search.hpp"
#include "rdarts/supernet.hpp"

namespace rdarts {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch = 32;
  double drop_path_p = 0.3;
  bool drop_path_ramp = true;  // rate grows linearly from 0 to drop_path_p over the epochs
  OptimizerConfig optim;  // only the weight settings are used
  std::uint64_t seed = 0;

  void validate() const {
    if (batch < 1) throw UsageError("training batch size must be positive");
    if (!(drop_path_p >= 0.0 && drop_path_p < 1.0)) throw UsageError("drop-path probability must lie in [0, 1)");
    optim.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch", c.batch},
          {"drop_path_p", c.drop_path_p},
          {"drop_path_ramp", c.drop_path_ramp},
          {"seed", c.seed},
          {"optim",
           {{"w_lr0", c.optim.w_lr0},
            {"momentum", c.optim.momentum},
            {"weight_decay", c.optim.weight_decay},
            {"grad_clip", c.optim.grad_clip}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.drop_path_p = j.value("drop_path_p", c.drop_path_p);
  c.drop_path_ramp = j.value("drop_path_ramp", c.drop_path_ramp);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optim")) c.optim = optimizer_config_from_json(j["optim"]);
  c.validate();
  return c;
}

struct TrainEpoch {
  std::size_t epoch = 0;
  double loss = 0, accuracy = 0, lr = 0, drop_path = 0;
  double eval_accuracy = 0;  // eval mode over the whole training split, after the epoch
};

template <typename S>
struct NetState {
  std::vector<std::vector<S>> params, buffers;
};

template <typename S>
NetState<S> capture(DiscreteNetwork<S>& net) {
  NetState<S> s{snapshot_values(net.parameters()), {}};
  for (auto* b : net.buffers()) s.buffers.push_back(*b);
  return s;
}

template <typename S>
void apply(DiscreteNetwork<S>& net, const NetState<S>& s) {
  auto ps = net.parameters();
  restore_values(ps, s.params);
  auto bufs = net.buffers();
  for (std::size_t i = 0; i < bufs.size(); ++i) *bufs[i] = s.buffers[i];
}

template <typename S>
struct TrainResult {
  std::vector<TrainEpoch> log;
  NetState<S> best;  // highest eval-mode training accuracy; initial state if no epoch ran
  double best_accuracy = -1;
  std::size_t best_epoch = 0;
};

// Drop-path rate of epoch e when ramping: p * e / epochs.
inline double drop_path_rate(double p, std::size_t epoch, std::size_t epochs) {
  return epochs ? p * static_cast<double>(epoch) / static_cast<double>(epochs) : p;
}

template <typename S>
std::size_t count_correct(const Tensor<S>& logits, const std::vector<int>& y) {
  const std::size_t K = logits.dim(1);
  const auto& lg = logits.values();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < y.size(); ++b) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (lg[b * K + k] > lg[b * K + arg]) arg = k;
    if (static_cast<int>(arg) == y[b]) ++correct;
  }
  return correct;
}

template <typename S>
double eval_accuracy(DiscreteNetwork<S>& net, const WindowedDataset& data, const std::vector<std::size_t>& idx,
                     std::size_t chunk = 256) {
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < idx.size(); lo += chunk) {
    const std::vector<std::size_t> bi(idx.begin() + lo, idx.begin() + std::min(idx.size(), lo + chunk));
    correct += count_correct(net.evaluate(data.template tensor<S>(bi)).logits, data.labels_of(bi));
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Identification training on the given (session-1) windows. `accuracy` is the
// running training-mode accuracy; drop-path keeps it well under what the
// network reaches in eval mode, so best-state selection uses eval_accuracy.
template <typename S>
TrainResult<S> train_final(DiscreteNetwork<S>& net, const WindowedDataset& data, const std::vector<std::size_t>& idx,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (idx.empty()) throw DataError("no training windows");
  if (net.config().num_classes != data.num_classes)
    throw DataError("network head has " + std::to_string(net.config().num_classes) + " classes but the data has " +
                    std::to_string(data.num_classes));
  for (auto i : idx) {
    if (data.sessions.at(i) != 1) throw DataError("training windows must come from session 1");
    if (data.labels.at(i) < 0 || static_cast<std::size_t>(data.labels[i]) >= data.num_classes)
      throw DataError("training label outside the class range");
  }
  TrainResult<S> res;
  res.best = capture(net);
  auto params = net.parameters();
  SgdState<S> sgd;
  Rng drop_rng = Rng::derive(cfg.seed, 5);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cosine_lr(static_cast<double>(e), static_cast<double>(cfg.epochs), cfg.optim.w_lr0);
    const auto batches = epoch_batches(idx, cfg.batch, cfg.seed, e, 100'000);
    const double p = cfg.drop_path_ramp ? drop_path_rate(cfg.drop_path_p, e, cfg.epochs) : cfg.drop_path_p;
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (const auto& bi : batches) {
      const auto x = data.template tensor<S>(bi);
      const auto y = data.labels_of(bi);
      zero_grads(params);
      auto out = net.forward(x, true, p, drop_rng);
      auto loss = ops::cross_entropy(out.logits, y);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(e) + ", batch of " +
                             std::to_string(bi.size()));
      backward(loss);
      if (cfg.optim.grad_clip > 0) clip_grad_norm(params, cfg.optim.grad_clip);
      sgd_step(params, sgd, lr, cfg.optim.momentum, cfg.optim.weight_decay);
      loss_sum += lv * static_cast<double>(bi.size());
      correct += count_correct(out.logits, y);
      seen += bi.size();
    }
    zero_grads(params);
    const TrainEpoch te{e, loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen), lr,
                        p, eval_accuracy(net, data, idx)};
    res.log.push_back(te);
    if (te.eval_accuracy > res.best_accuracy) {
      res.best_accuracy = te.eval_accuracy;
      res.best_epoch = e;
      res.best = capture(net);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Weights files: everything needed to rebuild and evaluate a trained network.

template <typename S>
void save_weights(const std::filesystem::path& path, DiscreteNetwork<S>& net, const NetState<S>& state,
                  const std::optional<NormStats>& norm, const nlohmann::json& extra = nlohmann::json::object()) {
  auto j = checkpoint_header("weights");
  j["genotype"] = to_json(net.genotype());
  j["net"] = to_json(net.config());
  j["seed"] = net.seed();
  const auto ps = net.parameters();
  if (state.params.size() != ps.size()) throw ShapeError("save_weights", "state does not match the network");
  auto arr = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) arr.push_back({{"shape", ps[i].shape()}, {"data", pack_values(state.params[i])}});
  j["params"] = arr;
  j["buffers"] = pack_nested(state.buffers);
  if (norm) j["norm"] = {{"mean", norm->mean}, {"std", norm->stddev}};
  j["extra"] = extra;
  write_cbor(path, j);
}

template <typename S>
struct LoadedWeights {
  DiscreteNetwork<S> net;
  std::optional<NormStats> norm;
  nlohmann::json extra;
};

template <typename S>
LoadedWeights<S> load_weights(const std::filesystem::path& path) {
  const auto j = read_checkpoint(path, "weights");
  try {
    const auto geno = genotype_from_json(j.at("genotype"));
    const auto cfg = supernet_config_from_json(j.at("net"));
    auto net = instantiate_discrete<S>(geno, cfg, j.at("seed").get<std::uint64_t>());
    const auto params = decode_params(j.at("params"), net.parameters(), "params");
    const auto bufs = decode_buffers<S>(j.at("buffers"), net.buffers());
    apply(net, NetState<S>{params, bufs});
    std::optional<NormStats> norm;
    if (j.contains("norm")) norm = NormStats{j["norm"].at("mean").get<std::vector<double>>(), j["norm"].at("std").get<std::vector<double>>()};
    return {std::move(net), norm, j.value("extra", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("weights file " + path.string() + " is malformed: " + e.what());
  }
}

}  // namespace rdarts
