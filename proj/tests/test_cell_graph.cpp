#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rdarts/cell_graph.hpp"
#include "rdarts/supernet.hpp"

using namespace rdarts;

namespace {

AlphaMatrix one_hot_alpha(const std::vector<std::pair<std::size_t, OpKind>>& strong) {
  AlphaMatrix a(kNumEdges * kNumOps, 0.0);
  for (auto [e, op] : strong) a[e * kNumOps + static_cast<std::size_t>(op)] = 8.0;
  return a;
}

const std::vector<CellKind> kOne{CellKind::normal};

}  // namespace

TEST(CellTopology, FourteenEdgesInEnumerationOrder) {
  CellSpec spec;
  const auto edges = spec.edges();
  ASSERT_EQ(edges.size(), kNumEdges);
  for (std::size_t e = 0; e < edges.size(); ++e) EXPECT_EQ(edge_index(edges[e].to, edges[e].from), e);
  EXPECT_EQ(edge_index(0, 0), 0u);
  EXPECT_EQ(edge_index(1, 0), 2u);
  EXPECT_EQ(edge_index(2, 0), 5u);
  EXPECT_EQ(edge_index(3, 4), 13u);
}

TEST(CellTopology, ReductionStridesOnlyOnInputEdges) {
  CellSpec red{CellKind::reduction};
  CellSpec nor{CellKind::normal};
  for (std::size_t from = 0; from < 6; ++from) {
    EXPECT_EQ(red.stride(from), from < 2 ? 2u : 1u);
    EXPECT_EQ(nor.stride(from), 1u);
  }
}

TEST(Derivation, KeepsTopTwoEdgesWithStrongestNonNoneOp) {
  AlphaMatrix a(kNumEdges * kNumOps, 0.0);
  // Node 2 (edges 5..8): edge from node 3 prefers sep_conv_5, from node 0 dil_conv_3.
  a[edge_index(2, 3) * kNumOps + 5] = 4.0;
  a[edge_index(2, 0) * kNumOps + 6] = 3.0;
  a[edge_index(2, 1) * kNumOps + 2] = 1.0;
  // A dominant "none" is ignored when scoring.
  a[edge_index(2, 2) * kNumOps + 0] = 20.0;
  const auto nodes = derive_cell_edges(a);
  EXPECT_EQ(nodes[2][0], (GenoEdge{OpKind::dil_conv_3, 0}));
  EXPECT_EQ(nodes[2][1], (GenoEdge{OpKind::sep_conv_5, 3}));
}

TEST(Derivation, TiesGoToLowerSourceThenLowerOp) {
  const AlphaMatrix flat(kNumEdges * kNumOps, 0.0);
  const auto nodes = derive_cell_edges(flat);
  for (std::size_t j = 0; j < kNumIntermediate; ++j) {
    EXPECT_EQ(nodes[j][0], (GenoEdge{OpKind::skip_connect, 0}));
    EXPECT_EQ(nodes[j][1], (GenoEdge{OpKind::skip_connect, 1}));
  }
}

TEST(Derivation, NeverEmitsNoneAndSourcesPrecedeTarget) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    AlphaMatrix a(kNumEdges * kNumOps);
    for (auto& v : a) v = 2.0 * rng.normal();
    const auto nodes = derive_cell_edges(a);
    for (std::size_t j = 0; j < kNumIntermediate; ++j) {
      EXPECT_LT(nodes[j][0].from, nodes[j][1].from);
      EXPECT_LT(nodes[j][1].from, 2 + j);
      for (const auto& e : nodes[j]) EXPECT_NE(e.op, OpKind::none);
    }
  }
}

TEST(Gates, CoefficientsSumToScale) {
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    const double b0 = 5 * rng.normal(), b1 = 5 * rng.normal();
    auto [g0, g1] = gate_coefficients(b0, b1);
    EXPECT_NEAR(g0 + g1, 2.0, 1e-12);
    auto [h0, h1] = gate_coefficients(b0, b1, 1.0);
    EXPECT_NEAR(h0 + h1, 1.0, 1e-12);
  }
}

TEST(Gates, PruningAtThreshold) {
  const AlphaMatrix a(kNumEdges * kNumOps, 0.0);
  // beta = (3, 0): g1 = 2 / (1 + e^3) ~ 0.0949 < 0.2.
  auto g = derive_genotype({a}, {gate_coefficients(3.0, 0.0)}, kOne, 0.2);
  EXPECT_FALSE(g.cells[0].pruned[0]);
  EXPECT_TRUE(g.cells[0].pruned[1]);
  auto [b0, b1] = gate_coefficients(std::log(9.0), 0.0);
  EXPECT_NEAR(b1, 0.2, 1e-12);
  // The computed boundary value lands a rounding step either side of 0.2; it is kept.
  g = derive_genotype({a}, {{b0, b1}}, kOne, 0.2);
  EXPECT_FALSE(g.cells[0].pruned[1]);
  g = derive_genotype({a}, {{1.8, std::nextafter(0.2, 0.0)}}, kOne, 0.2);
  EXPECT_FALSE(g.cells[0].pruned[1]);
  g = derive_genotype({a}, {{1.85, 0.15}}, kOne, 0.2);
  EXPECT_TRUE(g.cells[0].pruned[1]);
  g = derive_genotype({a}, {{1.8 - 1e-9, 0.2 + 1e-9}}, kOne, 0.2);
  EXPECT_FALSE(g.cells[0].pruned[1]);
  g = derive_genotype({a}, {{1.8 + 1e-9, 0.2 - 1e-9}}, kOne, 0.2);
  EXPECT_TRUE(g.cells[0].pruned[1]);
  g = derive_genotype({a}, {{1.8, 0.2}}, kOne, 0.2);
  EXPECT_FALSE(g.cells[0].pruned[1]);
  EXPECT_THROW(derive_genotype({a}, {{0.1, 0.1}}, kOne, 0.2), NumericalError);
}

TEST(GenotypeJson, RoundTripIsExact) {
  const std::vector<CellKind> kinds{CellKind::normal, CellKind::reduction};
  auto g = derive_genotype({one_hot_alpha({{0, OpKind::sep_conv_3}, {5, OpKind::max_pool_3}}),
                            one_hot_alpha({{1, OpKind::dil_conv_5}})},
                           {{1.7, 0.3}, {0.15, 1.85}}, kinds, 0.2);
  const auto text = to_json(g).dump();
  const auto back = genotype_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(back, g);
  EXPECT_EQ(to_json(back).dump(), text);
  EXPECT_TRUE(back.cells[1].pruned[0]);
}

TEST(GenotypeJson, RejectsInvalidDocuments) {
  const std::vector<CellKind> kinds{CellKind::normal};
  const auto good = to_json(derive_genotype({AlphaMatrix(kNumEdges * kNumOps, 0.0)}, {{1, 1}}, kinds, 0.2));
  auto bad = good;
  bad["cells"][0]["nodes"][1][0]["op"] = "none";
  EXPECT_THROW(genotype_from_json(bad), FormatError);
  bad = good;
  bad["cells"][0]["nodes"][0][1]["from"] = 3;
  EXPECT_THROW(genotype_from_json(bad), FormatError);
  bad = good;
  bad["cells"][0]["gates"]["pruned"] = {true, true};
  EXPECT_THROW(genotype_from_json(bad), FormatError);
  bad = good;
  bad["vocab"][2] = "avg_pool_3";
  EXPECT_THROW(genotype_from_json(bad), FormatError);
  bad = good;
  bad.erase("cells");
  EXPECT_THROW(genotype_from_json(bad), FormatError);
  EXPECT_THROW(genotype_from_json(nlohmann::json::array()), FormatError);
}

TEST(GenotypeDot, OneGraphPerCellAndPrunedInputsOmitted) {
  const std::vector<CellKind> kinds{CellKind::normal, CellKind::reduction};
  const AlphaMatrix flat(kNumEdges * kNumOps, 0.0);
  auto g = derive_genotype({flat, flat}, {{1.0, 1.0}, {1.95, 0.05}}, kinds, 0.2);
  const auto dot = genotype_to_dot(g);
  EXPECT_NE(dot.find("digraph cell_0"), std::string::npos);
  EXPECT_NE(dot.find("digraph cell_1"), std::string::npos);
  const auto cell1 = dot.substr(dot.find("digraph cell_1"));
  EXPECT_EQ(cell1.find("s1 ->"), std::string::npos);
  EXPECT_EQ(cell1.find("  s1 ["), std::string::npos);
  EXPECT_NE(cell1.find("s0 -> n0"), std::string::npos);
  EXPECT_NE(dot.substr(0, dot.find("digraph cell_1")).find("s1 -> n0"), std::string::npos);
}
