#pragma once

// Argument parsing for the `v3fusion` tool; maps errors onto exit statuses.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "v3fusion/cli/commands.hpp"

namespace v3fusion::cli {

namespace detail {

inline void add_io(CLI::App* cmd, Inputs& io, bool needs_out) {
  cmd->add_option("--log", io.log, "episode log (JSON lines)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--manifest", io.manifest, "pool manifest")->required()->check(CLI::ExistingFile);
  if (needs_out) cmd->add_option("--out", io.out, "run directory")->required();
  cmd->add_option("--seed", io.seed, "top-level seed");
}

}  // namespace detail

/// Parses argv and runs one stage. Never throws.
inline int run_app(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Ensemble pruning, fusion and uncertainty verification over recorded model outputs", "v3fusion"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic pool and episode log");
  synth_cmd->add_option("--out", synth.io.out, "run directory")->required();
  synth_cmd->add_option("--seed", synth.io.seed, "top-level seed");
  synth_cmd->add_option("--models", synth.models, "pool size")->check(CLI::Range(2, 64));
  synth_cmd->add_option("--episodes", synth.episodes, "episode count")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--choices", synth.choices, "choices per MCQ episode");
  synth_cmd->add_option("--task", synth.task, "mcq or oeq")->check(CLI::IsMember({"mcq", "oeq", "MCQ", "OEQ"}));
  synth_cmd->add_option("--accuracy", synth.accuracies, "per-model accuracy")->delimiter(',');
  synth_cmd->add_option("--group", synth.groups, "correlation group, e.g. 0+1+2:0.8 (repeatable)");
  synth_cmd->add_flag("--planted", synth.planted, "planted-signal log");
  synth_cmd->add_option("--pattern-fraction", synth.pattern_fraction, "planted pattern share");
  synth_cmd->add_option("--minority", synth.minority, "planted minority model index");
  synth_cmd->add_option("--noise", synth.noise, "embedding noise scale");

  Inputs validate;
  auto* validate_cmd = app.add_subcommand("validate", "check a log against its manifest");
  detail::add_io(validate_cmd, validate, false);

  AnalyzeOptions analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "score teams and select the ensemble");
  detail::add_io(analyze_cmd, analyze.io, true);
  analyze_cmd->add_option("--fitness-weights", analyze.fitness_weights, "k=v,... over focal_error, focal_cka, fleiss_kappa, plurality_acc");
  auto* ga_flag = analyze_cmd->add_flag("--ga", "genetic-algorithm search");
  auto* bf_flag = analyze_cmd->add_flag("--brute-force", "exhaustive search (N <= 20)");
  ga_flag->excludes(bf_flag);
  analyze_cmd->add_option("--cka-scope", analyze.cka_scope, "negative or global")->check(CLI::IsMember({"negative", "global"}));
  analyze_cmd->add_option("--min-episodes", analyze.min_episodes, "negative episodes needed for focal CKA");
  analyze_cmd->add_flag("--strict-cka", analyze.strict_cka, "error instead of global fallback");
  analyze_cmd->add_option("--oeq-threshold", analyze.oeq_threshold, "unigram recall needed to pass (OEQ)");
  analyze_cmd->add_option("--ga-population", analyze.ga_population, "GA population size");
  analyze_cmd->add_option("--ga-stall", analyze.ga_stall, "generations without improvement before stopping");
  analyze_cmd->add_option("--ga-max-generations", analyze.ga_max_generations, "hard generation cap");
  bool no_ablation = false;
  analyze_cmd->add_flag("--no-metric-ablation", no_ablation, "skip the pairwise-metric ablation searches");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train-fusion", "train fusion heads for the selected teams");
  detail::add_io(train_cmd, train.io, true);
  train_cmd->add_option("--epochs", train.epochs, "training epochs")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", train.learning_rate, "learning rate");
  train_cmd->add_option("--batch-size", train.batch_size, "minibatch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--optimizer", train.optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  train_cmd->add_option("--activation", train.activation, "hidden-layer activation")->check(CLI::IsMember({"relu", "sigmoid"}));
  train_cmd->add_option("--hidden", train.hidden, "hidden widths")->delimiter(',');
  std::size_t patience = 0;
  auto* patience_opt = train_cmd->add_option("--patience", patience, "early-stop patience in epochs");

  Inputs predict_io;
  auto* predict_cmd = app.add_subcommand("predict", "fused predictions on validation and test splits");
  detail::add_io(predict_cmd, predict_io, true);

  VerifyOptions verify;
  auto* verify_cmd = app.add_subcommand("verify", "uncertainty threshold, rejection and rectification");
  detail::add_io(verify_cmd, verify.io, true);
  verify_cmd->add_option("--uncertainty-mode", verify.mode, "total uncertainty from the member mean or the fused output")->check(CLI::IsMember({"mixture", "fusion"}));
  verify_cmd->add_option("--alpha", verify.alpha, "likelihood-ratio margin for the two-component fit");

  Inputs report_io;
  auto* report_cmd = app.add_subcommand("report", "comparison and ablation tables");
  detail::add_io(report_cmd, report_io, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    for (auto* sub : app.get_subcommands()) err << sub->help();
    return kUsageError;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth, out);
    if (validate_cmd->parsed()) return cmd_validate(validate, out);
    if (analyze_cmd->parsed()) {
      if (*ga_flag) analyze.method = SearchMethod::Genetic;
      if (*bf_flag) analyze.method = SearchMethod::BruteForce;
      analyze.metric_ablation = !no_ablation;
      return cmd_analyze(analyze, out);
    }
    if (train_cmd->parsed()) {
      if (*patience_opt) train.patience = patience;
      return cmd_train_fusion(train, out);
    }
    if (predict_cmd->parsed()) return cmd_predict(predict_io, out);
    if (verify_cmd->parsed()) return cmd_verify(verify, out);
    if (report_cmd->parsed()) return cmd_report(report_io, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternalError;
  }
  return kUsageError;
}

}  // namespace v3fusion::cli
