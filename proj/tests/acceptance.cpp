// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Criterion 8 is a soft check: an ordering inversion inside the tolerance band
// is flagged in its line but still passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "commands.hpp"
#include "rdarts/rdarts.hpp"
#include "support/grad_check.hpp"
#include "support/oracles.hpp"

using namespace rdarts;
using namespace rdarts::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "rdarts_acceptance" / name;
  fs::remove_all(p);
  return p;
}

SupernetConfig tiny_net(std::size_t classes) {
  SupernetConfig c;
  c.num_cells = 2;
  c.layout = {CellKind::normal, CellKind::reduction};
  c.init_channels = 2;
  c.num_classes = classes;
  c.input_channels = 2;
  return c;
}

void randomize_arch(Supernet<double>& net, Rng& rng) {
  for (auto& a : net.alphas())
    for (auto& v : a.data()) v = 0.5 * rng.normal();
  for (auto& g : net.gates()) {
    g.beta[0] = 0.3 * rng.normal();
    g.beta[1] = 0.3 * rng.normal();
  }
}

// Small synthetic set for the structural checks.
struct SmallData {
  WindowedDataset ds;
  SearchSplit split;
};

SmallData small_data() {
  SmallData d;
  d.ds = make_windows(synth_generate(4, 2, 256, 2, 0), 32, 32, true);
  d.split = split_for_search(d.ds, d.ds.indices_where_session(1), 0.5, 0);
  return d;
}

SearchRunConfig small_search(Tier tier) {
  SearchRunConfig c;
  c.epochs = 2;
  c.train_batch = 8;
  c.val_batch = 8;
  c.tier = tier;
  c.net.init_channels = 4;
  return c;
}

// ---------------------------------------------------------------------------

Verdict gradient_integrity() {
  const auto t0 = Clock::now();
  Supernet<double> net(tiny_net(2), 11);
  Rng rng(11);
  randomize_arch(net, rng);
  auto x = random_tensor({4, 2, 16}, rng, false);
  const std::vector<int> y{0, 1, 1, 0};
  auto f = [&] {
    NoGradGuard ng;
    return ops::cross_entropy(net.forward(x).logits, y).item();
  };
  auto w = net.weights();
  auto arch = net.arch_parameters();
  zero_grads(w);
  zero_grads(arch);
  backward(ops::cross_entropy(net.forward(x).logits, y));

  auto worst = [&](ParamList<double> ps) {
    double e = 0;
    for (auto& p : ps) {
      const std::vector<double> g(p.grad().begin(), p.grad().end());
      e = std::max(e, max_rel_error(g, numeric_grad(p, f, 1e-5), 1e-8));
    }
    return e;
  };
  const double ew = worst(w), ea = worst(ParamList<double>(net.alphas().begin(), net.alphas().end())),
               eb = worst(net.betas());
  const double t = seconds_since(t0);
  std::size_t nw = 0;
  for (auto& p : w) nw += p.numel();
  return {ew < 1e-4 && ea < 1e-4 && eb < 1e-4 && t < 60.0,
          "central differences (step 1e-5), max rel error w " + fmt("%.2e", ew) + " (" + std::to_string(nw) + " entries), alpha " + fmt("%.2e", ea) +
              ", beta " + fmt("%.2e", eb) + "; " + fmt("%.1f s", t)};
}

// Also drives a 2-epoch search step by step; the same loop serves criterion 3.
struct StepChecks {
  double softmax_dev = 0, gate_dev = 0;
  std::size_t steps = 0;
};

StepChecks two_epoch_search_checks() {
  const auto d = small_data();
  auto cfg = small_search(Tier::independent_alpha_plus_gates);
  SearchEngine<float> engine(cfg, d.ds, d.split);
  auto& net = engine.net();
  StepChecks out;
  auto check = [&] {
    for (const auto& a : net.alphas()) {
      const auto p = ops::softmax(a, 1);
      for (std::size_t e = 0; e < kNumEdges; ++e) {
        double s = 0;
        for (std::size_t k = 0; k < kNumOps; ++k) s += p[e * kNumOps + k];
        out.softmax_dev = std::max(out.softmax_dev, std::abs(s - 1.0));
      }
    }
    for (const auto& g : net.gates()) {
      const auto c = g.coefficients();
      out.gate_dev = std::max(out.gate_dev, std::abs(static_cast<double>(c[0]) + static_cast<double>(c[1]) - 2.0));
    }
  };
  check();
  TripleState<float> st;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cosine_lr(static_cast<double>(e), static_cast<double>(cfg.epochs), cfg.optim.w_lr0);
    const auto tb = epoch_batches(d.split.train, cfg.train_batch, cfg.seed, e, 0);
    const auto vb = epoch_batches(d.split.val, cfg.val_batch, cfg.seed, e, 1);
    for (std::size_t k = 0; k < std::max(tb.size(), vb.size()); ++k) {
      const auto& ti = tb[k % tb.size()];
      const auto& vi = vb[k % vb.size()];
      triple_step(net, Batch<float>{d.ds.tensor<float>(ti), d.ds.labels_of(ti)},
                  Batch<float>{d.ds.tensor<float>(vi), d.ds.labels_of(vi)}, st, cfg.optim, lr);
      ++out.steps;
      check();
    }
  }
  return out;
}

Verdict mixing_semantics(const StepChecks& sc) {
  double dev = 0;
  for (std::size_t stride : {1u, 2u}) {
    Rng rng(5);
    MixedOp<double> mix(4, stride, OpStyle::search(), rng);
    auto x = random_tensor({2, 4, 16}, rng, false);
    const Tensor<double> alpha(Shape{kNumOps}, 0.3, false);
    const auto yv = mix(x, alpha);
    for (std::size_t k = 0; k < yv.numel(); ++k) {
      double mean = 0;
      for (std::size_t i = 0; i < kNumOps; ++i) {
        const auto c = mix.candidate(i)(x, true);
        mean += c[k] / kNumOps;
      }
      dev = std::max(dev, std::abs(yv[k] - mean));
    }
  }
  return {dev < 1e-6 && sc.softmax_dev < 1e-6,
          "uniform-alpha mix vs candidate mean " + fmt("%.1e", dev) + "; softmax row-sum deviation " +
              fmt("%.1e", sc.softmax_dev) + " over " + std::to_string(sc.steps) + " search steps"};
}

Verdict gate_semantics(const StepChecks& sc) {
  Supernet<double> net(tiny_net(2), 1);
  auto derive_with = [&](double b0) {
    for (auto& g : net.gates()) {
      g.beta[0] = b0;
      g.beta[1] = 0.0;
    }
    return net.derive(0.2);
  };
  const auto strong = derive_with(3.0);
  const auto boundary = derive_with(std::log(9.0));
  const auto [c0, c1] = gate_coefficients(std::log(9.0), 0.0);
  const bool pruned = strong.cells[0].pruned == std::array<bool, 2>{false, true};
  const bool kept = boundary.cells[0].pruned == std::array<bool, 2>{false, false};
  const bool edge = std::abs(c1 - 0.2) < 1e-6 && std::abs(c0 - 1.8) < 1e-6;
  return {sc.gate_dev < 1e-6 && pruned && kept && edge,
          "gate sum deviation " + fmt("%.1e", sc.gate_dev) + " over " + std::to_string(sc.steps) +
              " steps; beta=(3,0) prunes s1: " + (pruned ? "yes" : "no") + "; beta=(ln 9,0) gives " + fmt("%.6f", c1) +
              ", kept: " + (kept ? "yes" : "no")};
}

Verdict independent_alpha_structure() {
  const auto d = small_data();
  const auto darts = run_search<float>(small_search(Tier::baseline_darts), d.ds, d.split);
  const auto& c = darts.genotype.cells;
  const bool shared = c[0].same_structure(c[2]) && c[2].same_structure(c[4]);

  SearchEngine<float> engine(small_search(Tier::independent_alpha), d.ds, d.split);
  for (std::size_t i = 0; i < engine.net().alphas().size(); ++i) {
    auto& a = engine.net().alphas()[i];
    for (auto& v : a.data()) v = 0;
    for (std::size_t e = 0; e < kNumEdges; ++e) a[e * kNumOps + 1 + (i + e) % (kNumOps - 1)] = 8.0f;
  }
  const auto g = engine.net().derive();
  bool distinct = true;
  for (std::size_t i = 0; i < g.cells.size(); ++i)
    for (std::size_t k = i + 1; k < g.cells.size(); ++k)
      if (g.cells[i].kind == g.cells[k].kind && g.cells[i].same_structure(g.cells[k])) distinct = false;

  SearchEngine<float> relax(small_search(Tier::independent_alpha_plus_gates), d.ds, d.split);
  const std::size_t n_alpha = relax.net().alphas().size();
  return {shared && distinct && n_alpha == 6,
          std::string("darts Normal cells identical: ") + (shared ? "yes" : "no") +
              "; alpha tier per-cell distinct: " + (distinct ? "yes" : "no") + "; relax alpha tensors: " +
              std::to_string(n_alpha)};
}

Verdict algorithm_fidelity() {
  const auto d = small_data();
  auto cfg = small_search(Tier::independent_alpha_plus_gates);
  cfg.optim.w_lr0 = 0;
  cfg.optim.arch_lr = 0;
  SearchEngine<float> engine(cfg, d.ds, d.split);
  const auto w0 = snapshot_values(engine.net().weights());
  const auto a0 = snapshot_values(engine.net().arch_parameters());
  const auto res = engine.run();
  const bool noop = snapshot_values(engine.net().weights()) == w0 && snapshot_values(engine.net().arch_parameters()) == a0;

  // Second-order gradient against the unrolled loss on the tiny net, 64-bit.
  Supernet<double> net(tiny_net(3), 4);
  Rng rng(4);
  randomize_arch(net, rng);
  auto batch = [&] {
    Batch<double> b{random_tensor({4, 2, 16}, rng, false), {0, 1, 2, 0}};
    return b;
  };
  const auto tr = batch(), va = batch();
  const double xi = 0.05;
  arch_gradients(net, tr, va, xi);
  auto arch = net.arch_parameters();
  std::vector<std::vector<double>> analytic;
  for (auto& p : arch) analytic.emplace_back(p.grad().begin(), p.grad().end());
  zero_grads(arch);
  const double err = unrolled_fd_error(net, tr, va, xi, analytic, 24);
  return {noop && err < 1e-3, std::string("zero rates leave parameters bit-identical over ") +
                                  std::to_string(res.steps.size()) + " steps: " + (noop ? "yes" : "no") +
                                  "; second-order vs unrolled FD (xi 0.05, default 64-bit HVP radius) rel error " + fmt("%.2e", err)};
}

Verdict metric_oracle() {
  Rng rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t ng = 1 + rng.below(200), ni = 1 + rng.below(800);
    const auto s = random_scores(rng, ng, ni, rng.uniform(0, 3), trial % 3 == 0);
    worst = std::max(worst, std::abs(compute_eer(s) - brute_eer(s)));
    for (double t : {1e-1, 1e-2, 1e-3}) worst = std::max(worst, std::abs(frr_at_far(s, t) - brute_frr(s, t)));
  }
  const double perfect = compute_eer(ScoreSet{{0.9, 0.8, 0.95}, {0.1, 0.2, 0.3, 0.4}});
  ScoreSet same;
  for (int i = 0; i < 500; ++i) same.genuine.push_back(rng.normal());
  same.impostor = same.genuine;
  const double identical = compute_eer(same);
  return {worst <= 1e-12 && perfect == 0.0 && identical == 0.5,
          "max |engine - brute sweep| over 200 sets " + fmt("%.1e", worst) + "; perfect separation " +
              fmt("%.3g", perfect) + "; identical distributions " + fmt("%.3g", identical)};
}

// Desk-scale pipeline with the CLI defaults: 20 subjects, T=128, stride 64.
struct DeskRun {
  double seconds = 0, eer = 1;
  std::vector<double> untrained;
};

DeskRun desk_pipeline() {
  DeskRun r;
  const auto t0 = Clock::now();
  const cli::DataOptions data_opts;
  const auto recs = synth_generate(data_opts.subjects, 2, data_opts.record_length, data_opts.channels, 0);
  const auto ds = make_windows(recs, data_opts.window, data_opts.stride, true);
  const auto s1 = ds.indices_where_session(1);
  SearchRunConfig sc;
  sc.epochs = 10;
  const auto split = split_for_search(ds, s1, sc.split_ratio, sc.seed);
  const auto res = run_search<float>(sc, ds, split);
  auto cfg = sc.resolved_net();
  cfg.input_channels = ds.channels;
  cfg.num_classes = ds.num_classes;
  auto net = instantiate_discrete<float>(res.genotype, cfg, 0);
  TrainConfig tc;
  tc.epochs = 30;
  const auto tr = train_final(net, ds, s1, tc);
  apply(net, tr.best);
  r.eer = compute_eer(verification_scores(net, ds));
  r.seconds = seconds_since(t0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto fresh = instantiate_discrete<float>(res.genotype, cfg, 100 + seed);
    r.untrained.push_back(compute_eer(verification_scores(fresh, ds)));
  }
  return r;
}

Verdict end_to_end(const DeskRun& r) {
  bool chance = true;
  std::string list;
  for (double e : r.untrained) {
    chance = chance && e >= 0.35 && e <= 0.65;
    list += (list.empty() ? "" : ", ") + fmt("%.3f", e);
  }
  return {r.seconds < 900 && r.eer < 0.15 && chance, "EER " + fmt("%.4f", r.eer) + " after 10+30 epochs in " +
                                                          fmt("%.0f s", r.seconds) + "; untrained EER over 5 seeds [" +
                                                          list + "]"};
}

Verdict ablation_echo() {
  cli::AblateOptions o;
  o.data.synthetic = true;
  o.quiet = true;
  o.out = scratch("ablate").string();
  const auto report = cli::cmd_ablate(o);
  const auto md = slurp(fs::path(o.out) / "ablation.md");
  std::size_t rows = 0;
  for (const auto* label : {"| DARTS |", "| +alpha |", "| +beta (Relax DARTS) |"}) rows += md.find(label) != std::string::npos;
  const auto& ord = report["ordering"];
  std::string eers;
  for (const auto& r : report["rows"]) eers += (eers.empty() ? "" : ", ") + r["tier"].get<std::string>() + " " + fmt("%.4f", r["eer"]);
  const bool strict = ord["strict"], band = ord["within_band"];
  std::string flag = strict ? "ordering holds" : band ? "FLAG: inverted within the 0.05 band" : "inverted beyond the band";
  return {rows == 3 && report["rows"].size() == 3 && band,
          "median EER over seeds 0,1,2: " + eers + "; " + flag + "; three-row table: " + (rows == 3 ? "yes" : "no")};
}

Verdict determinism() {
  cli::DataOptions data;
  data.synthetic = true;
  data.subjects = 6;
  data.record_length = 512;
  std::string geno[2], metrics[2];
  for (int k = 0; k < 2; ++k) {
    const auto root = scratch("det_" + std::to_string(k));
    cli::SearchOptions so;
    so.data = data;
    so.quiet = true;
    so.run.epochs = 2;
    so.run.seed = 7;
    so.run.out_dir = (root / "search").string();
    cli::cmd_search(so);
    cli::TrainOptions to;
    to.data = data;
    to.quiet = true;
    to.genotype_path = (root / "search" / "genotype.json").string();
    to.train.epochs = 2;
    to.train.seed = 7;
    to.out = (root / "train").string();
    const auto tr = cli::cmd_train(to);
    cli::EvalOptions eo;
    eo.data = data;
    eo.quiet = true;
    eo.weights = tr.weights.string();
    eo.out = (root / "eval").string();
    cli::cmd_eval(eo);
    geno[k] = slurp(root / "search" / "genotype.json");
    metrics[k] = slurp(root / "eval" / "metrics.json");
  }
  const bool g = !geno[0].empty() && geno[0] == geno[1], m = !metrics[0].empty() && metrics[0] == metrics[1];
  return {g && m, std::string("genotype.json identical: ") + (g ? "yes" : "no") + "; metrics.json identical: " +
                      (m ? "yes" : "no")};
}

Verdict hyperparameters() {
  const SearchRunConfig s;
  const TrainConfig t;
  const EvalConfig e;
  const cli::SearchOptions so;
  const cli::TrainOptions to;
  const cli::EvalOptions eo;
  const bool lr = s.optim.w_lr0 == 0.025 && t.optim.w_lr0 == 0.025 && cosine_lr(0, 300, 0.025) == 0.025 &&
                  std::abs(cosine_lr(300, 300, 0.025)) < 1e-15;
  const bool sgd = s.optim.momentum == 0.9 && t.optim.momentum == 0.9 && s.optim.weight_decay == 5e-4 &&
                   t.optim.weight_decay == 5e-4;
  const bool rest = t.drop_path_p == 0.3 && s.epochs == 50 && t.epochs == 300 && s.train_batch == 32 && t.batch == 32 &&
                    e.batch == 256;
  const bool cli_same = to_json(so.run) == to_json(s) && to_json(to.train) == to_json(t) && eo.eval.batch == 256;
  return {lr && sgd && rest && cli_same,
          "lr0 " + fmt("%g", s.optim.w_lr0) + " cosine to 0, momentum " + fmt("%g", s.optim.momentum) + ", wd " +
              fmt("%g", s.optim.weight_decay) + ", drop-path " + fmt("%g", t.drop_path_p) + ", search/train epochs " +
              std::to_string(s.epochs) + "/" + std::to_string(t.epochs) + ", train batch " + std::to_string(t.batch) +
              ", eval batch " + std::to_string(e.batch) + "; CLI defaults match: " + (cli_same ? "yes" : "no")};
}

}  // namespace

// With arguments, only the listed criteria run (e.g. `acceptance 1 6`).
int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0, ran = 0;
  auto report = [&](int n, const char* name, const std::function<Verdict()>& fn) {
    if (!only.empty() && !only.count(n)) return;
    ++ran;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& ex) {
      v = {false, std::string("threw: ") + ex.what()};
    }
    failed += !v.pass;
    std::printf("[%s] %2d. %s: %s\n", v.pass ? "PASS" : "FAIL", n, name, v.detail.c_str());
    std::fflush(stdout);
  };

  StepChecks sc;
  if (only.empty() || only.count(2) || only.count(3)) try {
    sc = two_epoch_search_checks();
  } catch (const std::exception& ex) {
    sc.softmax_dev = sc.gate_dev = INFINITY;
    std::printf("step checks threw: %s\n", ex.what());
  }

  report(1, "gradient integrity", gradient_integrity);
  report(2, "mixed-op semantics", [&] { return mixing_semantics(sc); });
  report(3, "gate semantics", [&] { return gate_semantics(sc); });
  report(4, "independent-alpha structure", independent_alpha_structure);
  report(5, "search-step fidelity", algorithm_fidelity);
  report(6, "metric oracle", metric_oracle);
  report(7, "end-to-end desk scale", [] { return end_to_end(desk_pipeline()); });
  report(8, "ablation ordering echo", ablation_echo);
  report(9, "determinism", determinism);
  report(10, "hyperparameter defaults", hyperparameters);
  std::printf("%d of %d criteria failed\n", failed, ran);
  return failed ? 1 : 0;
}
