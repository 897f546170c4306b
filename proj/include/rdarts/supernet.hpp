#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/cell_graph.hpp"
#include "rdarts/drop_path.hpp"
#include "rdarts/modules.hpp"
#include "rdarts/op_vocabulary.hpp"

namespace rdarts {

struct SupernetConfig {
  std::size_t num_cells = 6;
  std::vector<CellKind> layout = {CellKind::normal, CellKind::reduction, CellKind::normal,
                                  CellKind::reduction, CellKind::normal, CellKind::reduction};
  std::size_t init_channels = 8;
  std::size_t num_classes = 2;
  std::size_t input_channels = 2;
  bool independent_alpha = true;
  bool use_gates = true;
  double gate_scale = 2.0;
  double gate_threshold = 0.2;

  void validate() const {
    if (layout.size() != num_cells)
      throw UsageError("supernet config: layout has " + std::to_string(layout.size()) + " entries for " +
                       std::to_string(num_cells) + " cells");
    if (num_cells == 0) throw UsageError("supernet config: need at least one cell");
    if (init_channels == 0) throw UsageError("supernet config: init_channels must be positive");
    if (num_classes < 2) throw UsageError("supernet config: need at least two classes");
    if (input_channels == 0) throw UsageError("supernet config: input_channels must be positive");
    if (!(gate_scale > 0.0)) throw UsageError("supernet config: gate_scale must be positive");
    if (!(gate_threshold >= 0.0)) throw UsageError("supernet config: gate_threshold must be non-negative");
  }

  std::size_t num_reductions() const {
    std::size_t n = 0;
    for (auto k : layout) n += k == CellKind::reduction;
    return n;
  }

  // Alternating layout of `cells` starting with a Normal cell.
  static std::vector<CellKind> alternating(std::size_t cells) {
    std::vector<CellKind> l;
    for (std::size_t i = 0; i < cells; ++i) l.push_back(i % 2 == 0 ? CellKind::normal : CellKind::reduction);
    return l;
  }
};

inline nlohmann::json to_json(const SupernetConfig& c) {
  std::vector<std::string> layout;
  for (auto k : c.layout) layout.push_back(to_string(k));
  return {{"num_cells", c.num_cells},           {"layout", layout},
          {"init_channels", c.init_channels},   {"num_classes", c.num_classes},
          {"input_channels", c.input_channels}, {"independent_alpha", c.independent_alpha},
          {"use_gates", c.use_gates},           {"gate_scale", c.gate_scale},
          {"gate_threshold", c.gate_threshold}};
}

inline SupernetConfig supernet_config_from_json(const nlohmann::json& j) {
  SupernetConfig c;
  c.num_cells = j.at("num_cells").get<std::size_t>();
  c.layout.clear();
  for (const auto& k : j.at("layout")) c.layout.push_back(cell_kind_from(k.get<std::string>()));
  c.init_channels = j.at("init_channels").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.input_channels = j.at("input_channels").get<std::size_t>();
  c.independent_alpha = j.at("independent_alpha").get<bool>();
  c.use_gates = j.at("use_gates").get<bool>();
  c.gate_scale = j.at("gate_scale").get<double>();
  c.gate_threshold = j.at("gate_threshold").get<double>();
  c.validate();
  return c;
}

// Widths seen by cell i: the two incoming feature maps and its per-node width.
struct CellPlan {
  CellKind kind;
  std::size_t c_prev_prev, c_prev, c_node;
  bool reduction_prev;
};

inline std::vector<CellPlan> channel_plan(const SupernetConfig& cfg) {
  std::vector<CellPlan> plan;
  std::size_t cpp = cfg.init_channels, cp = cfg.init_channels, c = cfg.init_channels;
  bool red_prev = false;
  for (auto kind : cfg.layout) {
    if (kind == CellKind::reduction) c *= 2;
    plan.push_back({kind, cpp, cp, c, red_prev});
    red_prev = kind == CellKind::reduction;
    cpp = cp;
    cp = kNumIntermediate * c;
  }
  return plan;
}

inline std::size_t embedding_width(const SupernetConfig& cfg) { return kNumIntermediate * channel_plan(cfg).back().c_node; }

// Throws if the time axis cannot survive every reduction.
inline void check_temporal_length(const SupernetConfig& cfg, std::size_t T) {
  std::size_t len = T;
  for (std::size_t i = 0; i < cfg.layout.size(); ++i) {
    if (cfg.layout[i] == CellKind::reduction) {
      if (len < 2)
        throw ShapeError("supernet_forward", "temporal length " + std::to_string(len) + " underflows at reduction cell " +
                                                 std::to_string(i) + " (input length " + std::to_string(T) + ")");
      len = (len + 1) / 2;
    }
  }
}

// Scale * softmax(beta): the two cell-input gate coefficients.
inline std::pair<double, double> gate_coefficients(double beta0, double beta1, double scale = 2.0) {
  const double m = std::max(beta0, beta1);
  const double e0 = std::exp(beta0 - m), e1 = std::exp(beta1 - m);
  return {scale * e0 / (e0 + e1), scale * e1 / (e0 + e1)};
}

template <typename S>
struct InputGate {
  Tensor<S> beta;  // [2]
  double scale = 2.0;

  InputGate() = default;
  explicit InputGate(double scale_) : beta(Shape{2}, S(0), true), scale(scale_) {}

  Tensor<S> coefficients() const { return ops::scale(ops::softmax(beta, 0), static_cast<S>(scale)); }
  std::pair<double, double> values() const {
    return gate_coefficients(static_cast<double>(beta[0]), static_cast<double>(beta[1]), scale);
  }
};

template <typename S>
struct NetOutput {
  Tensor<S> logits;
  Tensor<S> embedding;  // pooled pre-logit features
};

// The two input projections shared by search and final cells.
template <typename S>
struct CellInputs {
  ReluConvBn<S> pre0, pre1;

  CellInputs() = default;
  CellInputs(const CellPlan& p, OpStyle style, Rng& rng)
      : pre0(p.c_prev_prev, p.c_node, p.reduction_prev ? 2 : 1, style.affine, style.track_running, rng),
        pre1(p.c_prev, p.c_node, 1, style.affine, style.track_running, rng) {}

  void collect(ParamList<S>& out) const {
    pre0.collect(out);
    pre1.collect(out);
  }
  void collect_buffers(std::vector<std::vector<S>*>& out) {
    pre0.collect_buffers(out);
    pre1.collect_buffers(out);
  }
};

// Cell of the supernet: every edge is a MixedOp.
template <typename S>
class SearchCell {
 public:
  SearchCell(const CellPlan& plan, Rng& rng) : plan_(plan), inputs_(plan, OpStyle::search(), rng) {
    spec_.kind = plan.kind;
    for (const auto& e : spec_.edges()) edges_.emplace_back(plan.c_node, spec_.stride(e.from), OpStyle::search(), rng);
  }

  const CellSpec& spec() const { return spec_; }
  const CellPlan& plan() const { return plan_; }
  MixedOp<S>& edge(std::size_t e) { return edges_.at(e); }

  // `gates` is the [2] coefficient tensor, or undefined for ungated cells.
  Tensor<S> forward(const Tensor<S>& s0_in, const Tensor<S>& s1_in, const Tensor<S>& alpha, const Tensor<S>& gates) {
    if (alpha.rank() != 2 || alpha.dim(0) != kNumEdges || alpha.dim(1) != kNumOps)
      throw ShapeError("cell_forward", "alpha must be [14, 8], got " + shape_str(alpha));
    auto s0 = inputs_.pre0(s0_in, true);
    auto s1 = inputs_.pre1(s1_in, true);
    if (s0.shape() != s1.shape())
      throw ShapeError("cell_forward", "preprocessed inputs disagree: " + shape_str(s0) + " vs " + shape_str(s1));
    if (gates.defined()) {
      s0 = ops::scale_by(s0, gates, 0);
      s1 = ops::scale_by(s1, gates, 1);
    }
    std::vector<Tensor<S>> states{s0, s1};
    for (std::size_t j = 0; j < kNumIntermediate; ++j) {
      std::vector<Tensor<S>> terms;
      for (std::size_t i = 0; i < 2 + j; ++i) {
        const auto e = edge_index(j, i);
        terms.push_back(edges_[e](states[i], ops::row(alpha, e)));
      }
      states.push_back(ops::add_n(terms));
    }
    return ops::concat(std::vector<Tensor<S>>(states.begin() + 2, states.end()));
  }

  // Evaluates only the genotype's retained candidates, reusing this cell's
  // weights. Gate coefficients come from the genotype entry.
  Tensor<S> forward_discrete(const Tensor<S>& s0_in, const Tensor<S>& s1_in, const CellGenotype& geno) {
    if (geno.kind != spec_.kind) throw ShapeError("cell_forward", "genotype cell kind does not match the cell");
    const Shape in_shape{s1_in.dim(0), plan_.c_node, s1_in.dim(2)};
    auto s0 = geno.pruned[0] ? Tensor<S>::zeros(in_shape) : ops::scale(inputs_.pre0(s0_in, true), static_cast<S>(geno.g0));
    auto s1 = geno.pruned[1] ? Tensor<S>::zeros(in_shape) : ops::scale(inputs_.pre1(s1_in, true), static_cast<S>(geno.g1));
    if (s0.shape() != s1.shape())
      throw ShapeError("cell_forward", "preprocessed inputs disagree: " + shape_str(s0) + " vs " + shape_str(s1));
    std::vector<Tensor<S>> states{s0, s1};
    for (std::size_t j = 0; j < kNumIntermediate; ++j) {
      std::vector<Tensor<S>> terms;
      for (const auto& e : geno.nodes[j]) terms.push_back(edges_[edge_index(j, e.from)].candidate(e.op)(states[e.from], true));
      states.push_back(ops::add_n(terms));
    }
    return ops::concat(std::vector<Tensor<S>>(states.begin() + 2, states.end()));
  }

  void collect(ParamList<S>& out) const {
    inputs_.collect(out);
    for (const auto& e : edges_) e.collect(out);
  }

 private:
  CellPlan plan_;
  CellSpec spec_;
  CellInputs<S> inputs_;
  std::vector<MixedOp<S>> edges_;
};

// Stem -> cells (each with its own or a shared alpha, and optionally its own
// input gate) -> global pooling -> linear head.
template <typename S>
class Supernet {
 public:
  Supernet(SupernetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng wrng = Rng::derive(seed, 1);
    Rng arng = Rng::derive(seed, 2);
    stem_ = Stem<S>(cfg_.input_channels, cfg_.init_channels, false, wrng);
    const auto plan = channel_plan(cfg_);
    for (const auto& p : plan) cells_.emplace_back(p, wrng);
    head_ = LinearHead<S>(kNumIntermediate * plan.back().c_node, cfg_.num_classes, wrng);
    const std::size_t n_alpha = cfg_.independent_alpha ? cfg_.num_cells : 2;
    for (std::size_t i = 0; i < n_alpha; ++i) {
      std::vector<S> v(kNumEdges * kNumOps);
      for (auto& x : v) x = static_cast<S>(1e-3 * arng.normal());
      alphas_.emplace_back(Shape{kNumEdges, kNumOps}, std::move(v), true);
    }
    if (cfg_.use_gates)
      for (std::size_t i = 0; i < cfg_.num_cells; ++i) gates_.emplace_back(cfg_.gate_scale);
  }

  const SupernetConfig& config() const { return cfg_; }
  std::size_t num_cells() const { return cells_.size(); }
  SearchCell<S>& cell(std::size_t i) { return cells_.at(i); }

  std::size_t alpha_index(std::size_t cell) const {
    if (cfg_.independent_alpha) return cell;
    return cfg_.layout[cell] == CellKind::normal ? 0 : 1;
  }
  Tensor<S>& alpha_for(std::size_t cell) { return alphas_.at(alpha_index(cell)); }
  const std::vector<Tensor<S>>& alphas() const { return alphas_; }
  std::vector<Tensor<S>>& alphas() { return alphas_; }

  ParamList<S> betas() const {
    ParamList<S> out;
    for (const auto& g : gates_) out.push_back(g.beta);
    return out;
  }
  std::vector<InputGate<S>>& gates() { return gates_; }

  std::pair<double, double> gate_values(std::size_t cell) const {
    if (!cfg_.use_gates) return {1.0, 1.0};
    return gates_.at(cell).values();
  }

  ParamList<S> weights() const {
    ParamList<S> out;
    stem_.collect(out);
    for (const auto& c : cells_) c.collect(out);
    head_.collect(out);
    return out;
  }

  ParamList<S> arch_parameters() const {
    ParamList<S> out(alphas_.begin(), alphas_.end());
    for (const auto& g : gates_) out.push_back(g.beta);
    return out;
  }

  NetOutput<S> forward(const Tensor<S>& batch) {
    check_input(batch);
    auto s = stem_(batch, true);
    Tensor<S> prev_prev = s, prev = s;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      Tensor<S> g = cfg_.use_gates ? gates_[i].coefficients() : Tensor<S>();
      auto out = cells_[i].forward(prev_prev, prev, alpha_for(i), g);
      prev_prev = prev;
      prev = out;
    }
    auto emb = ops::global_avg_pool(prev);
    return {head_(emb), emb};
  }

  // Same weights, but each cell evaluates only the genotype's ops.
  NetOutput<S> forward_discrete(const Tensor<S>& batch, const Genotype& geno) {
    check_input(batch);
    if (geno.cells.size() != cells_.size()) throw ShapeError("supernet_forward", "genotype cell count mismatch");
    auto s = stem_(batch, true);
    Tensor<S> prev_prev = s, prev = s;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      auto out = cells_[i].forward_discrete(prev_prev, prev, geno.cells[i]);
      prev_prev = prev;
      prev = out;
    }
    auto emb = ops::global_avg_pool(prev);
    return {head_(emb), emb};
  }

  std::vector<AlphaMatrix> alpha_matrices() const {
    std::vector<AlphaMatrix> out;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      const auto& a = alphas_.at(alpha_index(i));
      out.emplace_back(a.values().begin(), a.values().end());
    }
    return out;
  }

  Genotype derive(double threshold) const {
    std::vector<std::pair<double, double>> gates;
    for (std::size_t i = 0; i < cells_.size(); ++i) gates.push_back(gate_values(i));
    auto g = derive_genotype(alpha_matrices(), gates, cfg_.layout, threshold);
    g.meta["independent_alpha"] = cfg_.independent_alpha;
    g.meta["use_gates"] = cfg_.use_gates;
    g.meta["gate_scale"] = cfg_.gate_scale;
    return g;
  }
  Genotype derive() const { return derive(cfg_.gate_threshold); }

 private:
  void check_input(const Tensor<S>& batch) const {
    if (batch.rank() != 3 || batch.dim(1) != cfg_.input_channels)
      throw ShapeError("supernet_forward", "expected [B, " + std::to_string(cfg_.input_channels) + ", T], got " +
                                               shape_str(batch));
    check_temporal_length(cfg_, batch.dim(2));
  }

  SupernetConfig cfg_;
  Stem<S> stem_;
  std::vector<SearchCell<S>> cells_;
  LinearHead<S> head_;
  std::vector<Tensor<S>> alphas_;
  std::vector<InputGate<S>> gates_;
};

// Cell of a final network: only the retained ops, with fixed gate constants.
template <typename S>
class DiscreteCell {
 public:
  DiscreteCell(const CellPlan& plan, const CellGenotype& geno, Rng& rng)
      : plan_(plan), geno_(geno), inputs_(plan, OpStyle::final_net(), rng) {
    if (geno.kind != plan.kind) throw FormatError("genotype cell kind does not match the configured layout");
    CellSpec spec{plan.kind};
    for (std::size_t j = 0; j < kNumIntermediate; ++j)
      for (const auto& e : geno.nodes[j]) {
        if (e.op == OpKind::none) throw FormatError("genotype retains a 'none' edge");
        ops_.emplace_back(e.op, plan.c_node, spec.stride(e.from), OpStyle::final_net(), rng);
      }
  }

  const CellGenotype& genotype() const { return geno_; }
  std::vector<CandidateOp<S>>& ops() { return ops_; }

  Tensor<S> forward(const Tensor<S>& s0_in, const Tensor<S>& s1_in, bool training, double drop_p, Rng& rng) {
    const Shape in_shape{s1_in.dim(0), plan_.c_node, s1_in.dim(2)};
    auto s0 = geno_.pruned[0] ? Tensor<S>::zeros(in_shape)
                              : ops::scale(inputs_.pre0(s0_in, training), static_cast<S>(geno_.g0));
    auto s1 = geno_.pruned[1] ? Tensor<S>::zeros(in_shape)
                              : ops::scale(inputs_.pre1(s1_in, training), static_cast<S>(geno_.g1));
    std::vector<Tensor<S>> states{s0, s1};
    std::size_t k = 0;
    for (std::size_t j = 0; j < kNumIntermediate; ++j) {
      std::vector<Tensor<S>> terms;
      for (const auto& e : geno_.nodes[j]) {
        auto y = ops_[k++](states[e.from], training);
        if (e.op != OpKind::skip_connect) y = drop_path(y, drop_p, training, rng);
        terms.push_back(y);
      }
      states.push_back(ops::add_n(terms));
    }
    return ops::concat(std::vector<Tensor<S>>(states.begin() + 2, states.end()));
  }

  void collect(ParamList<S>& out) const {
    inputs_.collect(out);
    for (const auto& o : ops_) o.collect(out);
  }
  void collect_buffers(std::vector<std::vector<S>*>& out) {
    inputs_.collect_buffers(out);
    for (auto& o : ops_) o.collect_buffers(out);
  }

 private:
  CellPlan plan_;
  CellGenotype geno_;
  CellInputs<S> inputs_;
  std::vector<CandidateOp<S>> ops_;
};

// A network built from a genotype: one distinct cell per genotype entry, no
// stacking, fresh weights.
template <typename S>
class DiscreteNetwork {
 public:
  DiscreteNetwork(Genotype geno, SupernetConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), geno_(std::move(geno)), seed_(seed) {
    cfg_.validate();
    if (geno_.vocab != op_vocabulary()) throw FormatError("genotype vocabulary does not match this engine's op order");
    if (geno_.cells.size() != cfg_.num_cells)
      throw FormatError("genotype has " + std::to_string(geno_.cells.size()) + " cells but the config expects " +
                        std::to_string(cfg_.num_cells));
    Rng rng = Rng::derive(seed, 3);
    stem_ = Stem<S>(cfg_.input_channels, cfg_.init_channels, true, rng);
    const auto plan = channel_plan(cfg_);
    for (std::size_t i = 0; i < plan.size(); ++i) cells_.emplace_back(plan[i], geno_.cells[i], rng);
    head_ = LinearHead<S>(kNumIntermediate * plan.back().c_node, cfg_.num_classes, rng);
  }

  const SupernetConfig& config() const { return cfg_; }
  const Genotype& genotype() const { return geno_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t num_cells() const { return cells_.size(); }
  DiscreteCell<S>& cell(std::size_t i) { return cells_.at(i); }

  NetOutput<S> forward(const Tensor<S>& batch, bool training, double drop_p, Rng& rng) {
    if (batch.rank() != 3 || batch.dim(1) != cfg_.input_channels)
      throw ShapeError("network_forward", "expected [B, " + std::to_string(cfg_.input_channels) + ", T], got " +
                                              shape_str(batch));
    check_temporal_length(cfg_, batch.dim(2));
    auto s = stem_(batch, training);
    Tensor<S> prev_prev = s, prev = s;
    for (auto& c : cells_) {
      auto out = c.forward(prev_prev, prev, training, drop_p, rng);
      prev_prev = prev;
      prev = out;
    }
    auto emb = ops::global_avg_pool(prev);
    return {head_(emb), emb};
  }

  NetOutput<S> evaluate(const Tensor<S>& batch) {
    Rng unused(0);
    return forward(batch, false, 0.0, unused);
  }

  ParamList<S> parameters() const {
    ParamList<S> out;
    stem_.collect(out);
    for (const auto& c : cells_) c.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<std::vector<S>*> buffers() {
    std::vector<std::vector<S>*> out;
    stem_.collect_buffers(out);
    for (auto& c : cells_) c.collect_buffers(out);
    return out;
  }

 private:
  SupernetConfig cfg_;
  Genotype geno_;
  std::uint64_t seed_;
  Stem<S> stem_;
  std::vector<DiscreteCell<S>> cells_;
  LinearHead<S> head_;
};

template <typename S>
DiscreteNetwork<S> instantiate_discrete(const Genotype& geno, const SupernetConfig& cfg, std::uint64_t seed) {
  for (std::size_t i = 0; i < geno.cells.size() && i < cfg.layout.size(); ++i)
    if (geno.cells[i].kind != cfg.layout[i])
      throw FormatError("genotype cell " + std::to_string(i) + " is " + to_string(geno.cells[i].kind) +
                        " but the layout expects " + to_string(cfg.layout[i]));
  return DiscreteNetwork<S>(geno, cfg, seed);
}

}  // namespace rdarts
