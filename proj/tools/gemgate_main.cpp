// Command-line front end: synthetic data generation, standalone mixture
// fitting and scoring, training, and the experiment protocols. Exit codes:
// 0 success, 1 usage/configuration/I-O error, 2 numeric failure.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gemgate/gemgate.hpp"

namespace {

using namespace gemgate;

std::vector<double> parse_value_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

struct CliState {
  harness::SyntheticConfig synth;
  harness::TrainConfig train;
  std::string dataset_path;
  std::string features_path;
  std::string params_path;
  std::string out_path;
  std::string trace_path;
  std::string report_path;
  std::string surrogate = "relu";
  std::string em_init = "kmeans";
  std::string axis = "external";
  std::string values_csv;
  std::string levels_csv = "0,0.1,0.2,0.3,0.5";
  double lambda1 = std::numeric_limits<double>::quiet_NaN();
  double percentile = 0.05;
  bool use_percentile = false;
};

void apply_enum_flags(CliState& st) {
  if (st.surrogate == "relu") {
    st.train.surrogate = ood::GateSurrogate::kRelu;
  } else if (st.surrogate == "sigmoid") {
    st.train.surrogate = ood::GateSurrogate::kSigmoid;
  } else {
    throw ConfigError("surrogate must be relu or sigmoid");
  }
  if (st.em_init == "kmeans") {
    st.train.em_init = gmm::InitStrategy::kKmeansLike;
  } else if (st.em_init == "random") {
    st.train.em_init = gmm::InitStrategy::kRandomSubset;
  } else {
    throw ConfigError("em-init must be random or kmeans");
  }
  st.train.lambda1 = st.lambda1;
}

void add_train_flags(CLI::App* cmd, CliState& st) {
  cmd->add_option("--epochs", st.train.epochs, "training epochs");
  cmd->add_option("--lr", st.train.learning_rate, "learning rate");
  cmd->add_option("--batch", st.train.batch_size, "batch size");
  cmd->add_option("--k", st.train.k, "mixture components");
  cmd->add_option("--lambda1", st.lambda1, "gate threshold (default: percentile rule)");
  cmd->add_option("--lambda1-percentile", st.train.lambda1_percentile,
                  "quantile of fitting scores used when lambda1 is unset");
  cmd->add_option("--lambda2", st.train.lambda2, "attention inverse temperature");
  cmd->add_option("--lambda3", st.train.lambda3, "mlm loss weight");
  cmd->add_option("--em-iters", st.train.em_max_iters, "fixed-point iteration cap");
  cmd->add_option("--em-tol", st.train.em_tol, "fixed-point convergence tolerance");
  cmd->add_option("--eps-cov", st.train.eps_cov, "covariance ridge");
  cmd->add_option("--em-init", st.em_init, "mixture init: random|kmeans");
  cmd->add_option("--depth", st.train.fusion_depth, "fusion encoder blocks");
  cmd->add_option("--heads", st.train.fusion_heads, "attention heads");
  cmd->add_option("--ffn-mult", st.train.ffn_mult, "feed-forward width multiplier");
  cmd->add_option("--init-scale", st.train.init_scale, "weight init scale");
  cmd->add_option("--surrogate", st.surrogate, "gate surrogate: relu|sigmoid");
  cmd->add_option("--gate-temperature", st.train.gate_temperature, "sigmoid gate temperature");
  cmd->add_option("--mask-rate", st.train.mask_rate, "masked token fraction");
  cmd->add_option("--corruption-rate", st.train.corruption_rate,
                  "triple blanking applied before training");
  cmd->add_option("--max-external", st.train.max_external, "cap on external triples per sample");
  cmd->add_flag("--no-kg", [&st](std::int64_t) { st.train.use_knowledge = false; },
                "drop external triples");
  cmd->add_flag("--no-ood", [&st](std::int64_t) { st.train.use_ood = false; },
                "force every gate open");
  cmd->add_flag("--route-negatives",
                [&st](std::int64_t) { st.train.route_gated_to_negatives = true; },
                "feed gated-out triples to the matching loss as negatives");
  cmd->add_flag("--interaction", [&st](std::int64_t) { st.train.interaction_mode = true; },
                "make mixture means trainable");
  cmd->add_flag("--gate-vision", [&st](std::int64_t) { st.train.gate_vision = true; },
                "score image patches against their own mixture");
  cmd->add_option("--seed", st.train.seed, "training seed");
  cmd->set_config("--config", "", "flat key=value config file (flags override)");
}

int run(CLI::App& app, CliState& st) {
  if (app.got_subcommand("gen")) {
    const harness::Dataset ds = harness::gen_synthetic(st.synth);
    harness::save_dataset(ds, st.out_path);
    std::cout << "wrote " << ds.samples.size() << " samples, vocab " << ds.table.size() << " to "
              << st.out_path << "\n";
    return 0;
  }

  apply_enum_flags(st);

  if (app.got_subcommand("fit")) {
    std::vector<Vec> features;
    if (!st.features_path.empty()) {
      features = harness::load_features(st.features_path);
    } else {
      const harness::Dataset ds = harness::load_dataset(st.dataset_path);
      for (const auto& s : ds.samples)
        for (const auto& t : s.triples)
          if (t.triple.source == kg::TripleSource::kId)
            features.push_back(kg::encode_triple(t.triple, ds.table));
    }
    if (features.empty()) throw ConfigError("fit: no features");
    gmm::FitConfig fc;
    fc.max_iters = st.train.em_max_iters;
    fc.tol = st.train.em_tol;
    fc.eps_cov = st.train.eps_cov;
    fc.seed = st.train.seed;
    fc.init = st.train.em_init;
    const gmm::GmmParams init =
        gmm::init_params(features, st.train.k, fc.seed, fc.init, fc.eps_cov);
    const gmm::FitResult fit = gmm::fit_fixed_point(features, init, fc);
    gmm::save_params(fit.params, st.out_path);
    std::cout << "fit " << features.size() << " features, k=" << fit.params.k << ", iterations="
              << fit.iterations_run << ", converged=" << (fit.converged ? "yes" : "no")
              << ", displacement=" << format_double(fit.final_displacement) << "\n";
    return 0;
  }

  if (app.got_subcommand("score")) {
    const std::vector<Vec> features = harness::load_features(st.features_path);
    const gmm::GmmParams params = gmm::load_params(st.params_path);
    double threshold = st.lambda1;
    if (st.use_percentile || !std::isfinite(threshold)) {
      std::vector<double> scores;
      const gmm::ComponentSolver solver(params);
      for (const Vec& f : features) scores.push_back(ood::gem_score(f, solver));
      threshold = ood::calibrate_threshold(std::move(scores), st.percentile);
    }
    ood::OodLayerConfig cfg;
    cfg.threshold = threshold;
    const std::vector<ood::OodDecision> decisions = ood::score_batch(features, params, cfg);
    std::ostringstream os;
    ood::write_decisions_csv(decisions, os);
    write_text_file(st.out_path, os.str());
    std::cout << "scored " << decisions.size() << " features at lambda1="
              << format_double(threshold) << " -> " << st.out_path << "\n";
    return 0;
  }

  const harness::Dataset ds = harness::load_dataset(st.dataset_path);

  if (app.got_subcommand("train")) {
    const harness::TrainOutcome out = harness::train(ds, st.train);
    if (!st.trace_path.empty()) {
      std::ostringstream os;
      harness::write_loss_trace_csv(out.report, os);
      write_text_file(st.trace_path, os.str());
    }
    if (!st.report_path.empty()) {
      std::ostringstream os;
      harness::write_epoch_csv(out.report, os);
      write_text_file(st.report_path, os.str());
    }
    std::cout << "trained " << out.report.steps.size() << " steps, final loss "
              << format_double(out.report.steps.back().total) << ", accuracy "
              << format_double(out.report.final_accuracy) << ", wall "
              << format_double(out.report.wall_seconds) << "s\n";
    return 0;
  }

  if (app.got_subcommand("ablate")) {
    const auto cells = harness::ablate_components(ds, st.train);
    std::ostringstream os;
    harness::write_ablation_csv(cells, os);
    write_text_file(st.out_path, os.str());
    std::cout << os.str();
    return 0;
  }

  if (app.got_subcommand("sweep")) {
    harness::SweepAxis axis;
    if (st.axis == "external") {
      axis = harness::SweepAxis::kNExternal;
    } else if (st.axis == "k") {
      axis = harness::SweepAxis::kComponents;
    } else {
      throw ConfigError("sweep axis must be external or k");
    }
    const auto rows = harness::sweep(ds, st.train, axis, parse_value_list(st.values_csv));
    std::ostringstream os;
    harness::write_sweep_csv(rows, os);
    write_text_file(st.out_path, os.str());
    std::cout << os.str();
    return 0;
  }

  if (app.got_subcommand("robustness")) {
    const auto rows = harness::robustness(ds, st.train, parse_value_list(st.levels_csv));
    std::ostringstream os;
    harness::write_robustness_csv(rows, os);
    write_text_file(st.out_path, os.str());
    std::cout << os.str();
    return 0;
  }

  if (app.got_subcommand("export")) {
    const harness::TrainOutcome out = harness::train(ds, st.train);
    harness::export_embeddings(ds, out.model, st.out_path);
    std::cout << "exported " << ds.samples.size() << " fused embeddings to " << st.out_path
              << "\n";
    return 0;
  }

  throw ConfigError("no subcommand selected");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OOD-gated knowledge fusion trainer (desk scale)"};
  app.require_subcommand(1);
  CliState st;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--dim", st.synth.dim, "feature dimension");
  gen->add_option("--patches", st.synth.patches, "patches per image");
  gen->add_option("--clusters", st.synth.clusters, "ground-truth concept clusters");
  gen->add_option("--samples", st.synth.samples, "sample count");
  gen->add_option("--n-id", st.synth.n_id, "seed triples per caption");
  gen->add_option("--n-external", st.synth.n_external, "retrieved triples per caption");
  gen->add_option("--noise-rate", st.synth.noise_rate, "fraction of noisy external triples");
  gen->add_option("--shift", st.synth.shift, "sigma-multiple of the off-distribution shift");
  gen->add_option("--sigma", st.synth.sigma, "within-cluster standard deviation");
  gen->add_option("--center-scale", st.synth.center_scale, "cluster center radius");
  gen->add_option("--concepts-per-cluster", st.synth.concepts_per_cluster, "token pool size");
  gen->add_option("--relations", st.synth.relations, "relation token count");
  gen->add_option("--seed", st.synth.seed, "generator seed");
  gen->add_option("--out", st.out_path, "output dataset file")->required();
  gen->set_config("--config", "", "flat key=value config file (flags override)");

  CLI::App* fit = app.add_subcommand("fit", "fit the mixture on features");
  fit->add_option("--features", st.features_path, "feature file (`n d` header)");
  fit->add_option("--dataset", st.dataset_path, "dataset file (uses seed-triple features)");
  fit->add_option("--out", st.out_path, "output params file")->required();
  add_train_flags(fit, st);

  CLI::App* score = app.add_subcommand("score", "score features against fitted params");
  score->add_option("--features", st.features_path, "feature file")->required();
  score->add_option("--params", st.params_path, "params file")->required();
  score->add_option("--percentile", st.percentile, "threshold percentile over these scores");
  score->add_flag("--use-percentile", st.use_percentile,
                  "calibrate lambda1 from the scored features");
  score->add_option("--lambda1", st.lambda1, "explicit threshold");
  score->add_option("--out", st.out_path, "output decisions CSV")->required();
  score->set_config("--config", "", "flat key=value config file (flags override)");

  CLI::App* train = app.add_subcommand("train", "train on a dataset");
  train->add_option("--dataset", st.dataset_path, "dataset file")->required();
  train->add_option("--trace", st.trace_path, "loss trace CSV output");
  train->add_option("--report", st.report_path, "per-epoch report CSV output");
  add_train_flags(train, st);

  CLI::App* ablate = app.add_subcommand("ablate", "component ablation table");
  ablate->add_option("--dataset", st.dataset_path, "dataset file")->required();
  ablate->add_option("--out", st.out_path, "output CSV")->required();
  add_train_flags(ablate, st);

  CLI::App* sweep = app.add_subcommand("sweep", "hyperparameter sweep");
  sweep->add_option("--dataset", st.dataset_path, "dataset file")->required();
  sweep->add_option("--axis", st.axis, "external|k");
  sweep->add_option("--values", st.values_csv, "comma-separated values")->required();
  sweep->add_option("--out", st.out_path, "output CSV")->required();
  add_train_flags(sweep, st);

  CLI::App* robust = app.add_subcommand("robustness", "incomplete-knowledge robustness table");
  robust->add_option("--dataset", st.dataset_path, "dataset file")->required();
  robust->add_option("--levels", st.levels_csv, "comma-separated corruption levels");
  robust->add_option("--out", st.out_path, "output CSV")->required();
  add_train_flags(robust, st);

  CLI::App* exp = app.add_subcommand("export", "train, then export fused embeddings");
  exp->add_option("--dataset", st.dataset_path, "dataset file")->required();
  exp->add_option("--out", st.out_path, "output CSV")->required();
  add_train_flags(exp, st);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run(app, st);
  } catch (const gemgate::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
