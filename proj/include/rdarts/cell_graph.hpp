#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/errors.hpp"
#include "rdarts/op_vocabulary.hpp"

namespace rdarts {

enum class CellKind { normal, reduction };

inline std::string to_string(CellKind k) { return k == CellKind::normal ? "normal" : "reduction"; }

inline CellKind cell_kind_from(const std::string& s) {
  if (s == "normal" || s == "N") return CellKind::normal;
  if (s == "reduction" || s == "R") return CellKind::reduction;
  throw FormatError("unknown cell kind '" + s + "'");
}

inline constexpr std::size_t kNumIntermediate = 4;
inline constexpr std::size_t kNumEdges = 14;  // 2 + 3 + 4 + 5

// Node numbering: 0 and 1 are the cell inputs, 2..5 the intermediate nodes.
struct Edge {
  std::size_t from;
  std::size_t to;  // intermediate node index 0..3
};

// Index of the edge feeding intermediate node `node` from `from`.
constexpr std::size_t edge_index(std::size_t node, std::size_t from) {
  return 2 * node + node * (node - (node > 0 ? 1 : 0)) / 2 + from;
}

struct CellSpec {
  CellKind kind = CellKind::normal;
  std::size_t num_intermediate = kNumIntermediate;

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (std::size_t j = 0; j < num_intermediate; ++j)
      for (std::size_t i = 0; i < 2 + j; ++i) out.push_back({i, j});
    return out;
  }

  std::size_t stride(std::size_t from) const { return kind == CellKind::reduction && from < 2 ? 2 : 1; }
};

struct GenoEdge {
  OpKind op = OpKind::skip_connect;
  std::size_t from = 0;
  bool operator==(const GenoEdge&) const = default;
};

struct CellGenotype {
  CellKind kind = CellKind::normal;
  std::array<std::array<GenoEdge, 2>, kNumIntermediate> nodes{};
  double g0 = 1.0;
  double g1 = 1.0;
  std::array<bool, 2> pruned{false, false};

  // Structure only: chosen ops, sources and pruning.
  bool same_structure(const CellGenotype& o) const { return kind == o.kind && nodes == o.nodes && pruned == o.pruned; }
  bool operator==(const CellGenotype&) const = default;
};

struct Genotype {
  std::vector<CellGenotype> cells;
  std::vector<std::string> vocab = op_vocabulary();
  nlohmann::json meta = nlohmann::json::object();

  bool operator==(const Genotype& o) const { return cells == o.cells && vocab == o.vocab && meta == o.meta; }
};

// Per-cell architecture logits, row-major [kNumEdges x kNumOps].
using AlphaMatrix = std::vector<double>;

inline std::vector<double> softmax_row(const double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  std::vector<double> p(n);
  double z = 0;
  for (std::size_t i = 0; i < n; ++i) z += (p[i] = std::exp(row[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

// Discretizes one cell: for every intermediate node keep the two incoming
// edges whose strongest non-"none" candidate has the highest softmax weight,
// labeled with that candidate. Ties go to the lower source node, then the
// lower op index.
inline std::array<std::array<GenoEdge, 2>, kNumIntermediate> derive_cell_edges(const AlphaMatrix& alpha) {
  if (alpha.size() != kNumEdges * kNumOps)
    throw ShapeError("derive_genotype", "alpha must hold " + std::to_string(kNumEdges * kNumOps) + " values, got " +
                                            std::to_string(alpha.size()));
  std::array<std::array<GenoEdge, 2>, kNumIntermediate> nodes{};
  for (std::size_t j = 0; j < kNumIntermediate; ++j) {
    struct Scored {
      double score;
      std::size_t from;
      OpKind op;
    };
    std::vector<Scored> cand;
    for (std::size_t i = 0; i < 2 + j; ++i) {
      const double* row = alpha.data() + edge_index(j, i) * kNumOps;
      for (std::size_t k = 0; k < kNumOps; ++k)
        if (std::isnan(row[k])) throw NumericalError("derive_genotype: NaN in architecture weights");
      auto p = softmax_row(row, kNumOps);
      std::size_t best = 1;
      for (std::size_t k = 2; k < kNumOps; ++k)
        if (p[k] > p[best]) best = k;
      cand.push_back({p[best], i, static_cast<OpKind>(best)});
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
    std::array<GenoEdge, 2> keep{GenoEdge{cand[0].op, cand[0].from}, GenoEdge{cand[1].op, cand[1].from}};
    if (keep[0].from > keep[1].from) std::swap(keep[0], keep[1]);
    nodes[j] = keep;
  }
  return nodes;
}

// Slack under the pruning threshold that absorbs softmax rounding, so a
// coefficient that is mathematically equal to the threshold is kept.
inline constexpr double kPruneSlack = 1e-12;

// Whole-network derivation. `gates` holds each cell's coefficient pair;
// input k of a cell is pruned iff its coefficient is below `threshold`
// (by more than kPruneSlack).
inline Genotype derive_genotype(const std::vector<AlphaMatrix>& alphas,
                                const std::vector<std::pair<double, double>>& gates,
                                const std::vector<CellKind>& kinds, double threshold) {
  if (alphas.size() != kinds.size() || gates.size() != kinds.size())
    throw ShapeError("derive_genotype", "need one alpha matrix and one gate pair per cell (" +
                                            std::to_string(kinds.size()) + " cells, " + std::to_string(alphas.size()) +
                                            " alphas, " + std::to_string(gates.size()) + " gates)");
  if (!(threshold >= 0.0) || !std::isfinite(threshold))
    throw UsageError("derive_genotype: threshold must be a finite non-negative value");
  Genotype g;
  for (std::size_t c = 0; c < kinds.size(); ++c) {
    CellGenotype cell;
    cell.kind = kinds[c];
    cell.nodes = derive_cell_edges(alphas[c]);
    cell.g0 = gates[c].first;
    cell.g1 = gates[c].second;
    cell.pruned = {cell.g0 < threshold - kPruneSlack, cell.g1 < threshold - kPruneSlack};
    if (cell.pruned[0] && cell.pruned[1])
      throw NumericalError("derive_genotype: cell " + std::to_string(c) + " has both input gates below " +
                           std::to_string(threshold));
    g.cells.push_back(cell);
  }
  std::vector<std::string> kind_names;
  for (auto k : kinds) kind_names.push_back(to_string(k));
  g.meta["cell_kinds"] = kind_names;
  g.meta["gate_threshold"] = threshold;
  return g;
}

inline nlohmann::json to_json(const Genotype& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : g.cells) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : c.nodes) {
      nlohmann::json pair = nlohmann::json::array();
      for (const auto& e : n) pair.push_back({{"op", std::string(op_name(e.op))}, {"from", e.from}});
      nodes.push_back(pair);
    }
    cells.push_back({{"kind", to_string(c.kind)},
                     {"nodes", nodes},
                     {"gates", {{"s0", c.g0}, {"s1", c.g1}, {"pruned", {c.pruned[0], c.pruned[1]}}}}});
  }
  return {{"cells", cells}, {"vocab", g.vocab}, {"meta", g.meta}};
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
  try {
    Genotype g;
    g.vocab = j.at("vocab").get<std::vector<std::string>>();
    if (g.vocab != op_vocabulary()) throw FormatError("genotype vocabulary does not match this engine's op order");
    g.meta = j.value("meta", nlohmann::json::object());
    for (const auto& jc : j.at("cells")) {
      CellGenotype c;
      c.kind = cell_kind_from(jc.at("kind").get<std::string>());
      const auto& nodes = jc.at("nodes");
      if (nodes.size() != kNumIntermediate) throw FormatError("each cell needs exactly 4 intermediate nodes");
      for (std::size_t n = 0; n < kNumIntermediate; ++n) {
        if (nodes[n].size() != 2) throw FormatError("each intermediate node needs exactly 2 edges");
        for (std::size_t e = 0; e < 2; ++e) {
          const auto name = nodes[n][e].at("op").get<std::string>();
          auto op = op_from_name(name);
          if (!op) throw FormatError("unknown op '" + name + "'");
          if (*op == OpKind::none) throw FormatError("retained edge may not carry op 'none'");
          const auto from = nodes[n][e].at("from").get<std::size_t>();
          if (from >= 2 + n) throw FormatError("edge into node " + std::to_string(n) + " from later node " + std::to_string(from));
          c.nodes[n][e] = {*op, from};
        }
      }
      const auto& gates = jc.at("gates");
      c.g0 = gates.at("s0").get<double>();
      c.g1 = gates.at("s1").get<double>();
      c.pruned = {gates.at("pruned").at(0).get<bool>(), gates.at("pruned").at(1).get<bool>()};
      if (c.pruned[0] && c.pruned[1]) throw FormatError("a cell may not prune both inputs");
      g.cells.push_back(c);
    }
    if (g.cells.empty()) throw FormatError("genotype has no cells");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed genotype JSON: ") + e.what());
  }
}

inline std::string dot_node_name(std::size_t node) {
  return node < 2 ? "s" + std::to_string(node) : "n" + std::to_string(node - 2);
}

// One digraph per cell. Edges leaving a pruned input are omitted along with
// the input itself.
inline std::string genotype_to_dot(const Genotype& g) {
  std::ostringstream os;
  for (std::size_t ci = 0; ci < g.cells.size(); ++ci) {
    const auto& c = g.cells[ci];
    os << "digraph cell_" << ci << " {\n";
    os << "  rankdir=LR;\n";
    os << "  label=\"cell " << ci << " (" << to_string(c.kind) << ")\";\n";
    os << "  node [shape=box];\n";
    for (std::size_t k = 0; k < 2; ++k)
      if (!c.pruned[k]) {
        const double gk = k == 0 ? c.g0 : c.g1;
        os << "  s" << k << " [label=\"s" << k << " (g=" << gk << ")\", style=filled, fillcolor=lightblue];\n";
      }
    for (std::size_t n = 0; n < kNumIntermediate; ++n) os << "  n" << n << ";\n";
    os << "  out [label=\"concat\", style=filled, fillcolor=palegoldenrod];\n";
    for (std::size_t n = 0; n < kNumIntermediate; ++n)
      for (const auto& e : c.nodes[n]) {
        if (e.from < 2 && c.pruned[e.from]) continue;
        os << "  " << dot_node_name(e.from) << " -> n" << n << " [label=\"" << op_name(e.op) << "\"];\n";
      }
    for (std::size_t n = 0; n < kNumIntermediate; ++n) os << "  n" << n << " -> out;\n";
    os << "}\n";
  }
  return os.str();
}

}  // namespace rdarts
