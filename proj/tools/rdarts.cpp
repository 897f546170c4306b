#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace rdarts;
using namespace rdarts::cli;

namespace {

void add_data_flags(CLI::App* cmd, DataOptions& d) {
  auto* data = cmd->add_option("--data", d.path, "CSV file of gaze records (see docs/data_format.md)");
  auto* synth = cmd->add_flag("--synthetic", d.synthetic, "Use the seeded synthetic subject generator");
  data->excludes(synth);
  cmd->add_option("--subjects", d.subjects, "Synthetic subjects")->capture_default_str();
  cmd->add_option("--record-length", d.record_length, "Synthetic samples per record")->capture_default_str();
  cmd->add_option("--channels", d.channels, "Synthetic channels")->capture_default_str();
  cmd->add_option("--data-seed", d.data_seed, "Synthetic generator seed")->capture_default_str();
  cmd->add_option("--noise", d.noise, "Synthetic white-noise level")->capture_default_str();
  cmd->add_option("--jitter", d.jitter, "Synthetic fixation-offset level")->capture_default_str();
  cmd->add_option("--window", d.window, "Window length T")->capture_default_str();
  cmd->add_option("--stride", d.stride, "Window stride")->capture_default_str();
  cmd->add_option("--sampling-rate", d.sampling_rate_hz, "CSV sampling rate in Hz")->capture_default_str();
  cmd->add_option("--channel-columns", d.channel_columns, "CSV channel columns (default: all others)")->delimiter(',');
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Relax DARTS: differentiable architecture search for temporal biometrics"};
  app.set_config("--config", "", "Read options from a TOML/INI file (flags take precedence)");
  app.set_version_flag("--version", std::string(engine_version()));
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  SearchOptions so;
  std::string tier = "relax";
  auto* search = app.add_subcommand("search", "Run the architecture search and write genotype.json");
  add_data_flags(search, so.data);
  search->add_option("--epochs", so.run.epochs, "Search epochs")->capture_default_str();
  search->add_option("--tier", tier, "darts | alpha | relax")
      ->check(CLI::IsMember({"darts", "alpha", "relax"}))
      ->capture_default_str();
  search->add_option("--xi", so.run.optim.xi, "Unrolled step for the second-order gradient (0 = first order)")
      ->capture_default_str();
  search->add_option("--gate-scale", so.run.net.gate_scale, "Sum of the two gate coefficients")
      ->check(CLI::IsMember({1.0, 2.0}))
      ->capture_default_str();
  search->add_option("--threshold", so.run.net.gate_threshold, "Input pruning threshold c")->capture_default_str();
  search->add_option("--seed", so.run.seed, "Run seed")->capture_default_str();
  search->add_option("--out", so.run.out_dir, "Run directory")->capture_default_str();
  search->add_option("--init-channels", so.run.net.init_channels, "Stem channels")->capture_default_str();
  search->add_option("--train-batch", so.run.train_batch, "Weight-step batch size")->capture_default_str();
  search->add_option("--val-batch", so.run.val_batch, "Architecture-step batch size")->capture_default_str();
  search->add_option("--split-ratio", so.run.split_ratio, "Share of session-1 windows used for weight steps")
      ->capture_default_str();
  search->add_option("--resume", so.resume, "Continue from a search checkpoint");
  so.run.out_dir = "runs/search";

  TrainOptions to;
  std::size_t train_init_channels = 0;
  auto* train = app.add_subcommand("train", "Train the network described by a genotype from scratch");
  add_data_flags(train, to.data);
  train->add_option("--genotype", to.genotype_path, "genotype.json from a search run")->required();
  train->add_option("--epochs", to.train.epochs, "Training epochs")->capture_default_str();
  train->add_option("--drop-path", to.train.drop_path_p, "Drop-path probability")->capture_default_str();
  train->add_flag("--drop-path-ramp,!--constant-drop-path", to.train.drop_path_ramp,
                  "Ramp the drop-path rate linearly from 0 (default) or hold it constant");
  train->add_option("--batch", to.train.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", to.train.optim.w_lr0, "Initial learning rate (cosine to 0)")->capture_default_str();
  train->add_option("--seed", to.train.seed, "Run seed")->capture_default_str();
  train->add_option("--init-channels", train_init_channels, "Stem channels (default: from the genotype)");
  train->add_option("--out", to.out, "Run directory")->capture_default_str();

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Session-2 verification: metrics.json and det.csv");
  add_data_flags(eval, eo.data);
  eval->add_option("--weights", eo.weights, "weights.ckpt from a train run")->required();
  eval->add_option("--batch", eo.eval.batch, "Evaluation batch size")->capture_default_str();
  eval->add_option("--out", eo.out, "Run directory")->capture_default_str();

  AblateOptions ao;
  auto* ablate = app.add_subcommand("ablate", "Search, train and evaluate every tier and tabulate the results");
  add_data_flags(ablate, ao.data);
  ablate->add_option("--seeds", ao.seeds, "Seeds (comma separated)")->delimiter(',')->capture_default_str();
  ablate->add_option("--search-epochs", ao.search_epochs, "Search epochs per run")->capture_default_str();
  ablate->add_option("--train-epochs", ao.train_epochs, "Training epochs per run")->capture_default_str();
  ablate->add_option("--init-channels", ao.init_channels, "Stem channels")->capture_default_str();
  ablate->add_option("--xi", ao.xi, "Unrolled step for the second-order gradient")->capture_default_str();
  ablate->add_option("--gate-scale", ao.gate_scale, "Sum of the two gate coefficients")
      ->check(CLI::IsMember({1.0, 2.0}))
      ->capture_default_str();
  ablate->add_option("--threshold", ao.threshold, "Input pruning threshold c")->capture_default_str();
  ablate->add_option("--drop-path", ao.drop_path, "Drop-path probability")->capture_default_str();
  ablate->add_flag("--drop-path-ramp,!--constant-drop-path", ao.drop_path_ramp,
                   "Ramp the drop-path rate linearly from 0 (default) or hold it constant");
  ablate->add_option("--out", ao.out, "Run directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (search->parsed()) {
      so.run.tier = tier_from(tier);
      so.quiet = quiet;
      const auto r = cmd_search(so, args);
      if (!quiet) std::cerr << "genotype written to " << (std::filesystem::path(so.run.out_dir) / "genotype.json") << '\n';
      (void)r;
    } else if (train->parsed()) {
      if (train_init_channels) to.init_channels = train_init_channels;
      to.quiet = quiet;
      const auto r = cmd_train(to, args);
      if (!quiet) std::cerr << "weights written to " << r.weights << '\n';
    } else if (eval->parsed()) {
      eo.quiet = quiet;
      std::cout << cmd_eval(eo, args).dump(2) << '\n';
    } else if (ablate->parsed()) {
      ao.quiet = quiet;
      std::cout << ablation_markdown(cmd_ablate(ao, args));
    }
  } catch (const rdarts::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
