// SPDX-License-Identifier: Apache-2.0
// ttaforge command line: data generation, source training, statistics, runs and sweeps.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ttaforge/backbone.hpp"
#include "ttaforge/bench.hpp"
#include "ttaforge/data.hpp"
#include "ttaforge/error.hpp"
#include "ttaforge/methods.hpp"
#include "ttaforge/stats.hpp"

using namespace ttaforge;

namespace {

struct Overrides {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> method, lambda, k_moments, lr, batch_size, clip, modulation, seeds, stats_path,
      model_path, out, corruption, severity, jobs;
  std::string summary;
};

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key = value experiment config file");
  cmd->add_option("--method", o.method, "comma separated methods (source, tent, pl, shot-im, tfa, t3a, cfa-f, cfa-c, cfa)");
  cmd->add_option("--lambda", o.lambda, "class-conditional weight");
  cmd->add_option("--k-moments", o.k_moments, "highest central moment order");
  cmd->add_option("--lr", o.lr, "adaptation learning rate");
  cmd->add_option("--batch-size", o.batch_size, "target batch size");
  cmd->add_option("--clip", o.clip, "global gradient-norm clip, or 'off'");
  cmd->add_option("--modulation", o.modulation, "ln, cls, feature or all");
  cmd->add_option("--seeds", o.seeds, "number of data-ordering seeds");
  cmd->add_option("--stats-path", o.stats_path, "source statistics file");
  cmd->add_option("--model-path", o.model_path, "source checkpoint (trained on the fly when absent)");
  cmd->add_option("--corruption", o.corruption, "comma separated corruption kinds");
  cmd->add_option("--severity", o.severity, "comma separated severities or a range like 1-8");
  cmd->add_option("--jobs", o.jobs, "parallel runs");
  cmd->add_option("--out", o.out, "CSV report path");
  cmd->add_option("--summary", o.summary, "also write the table summary to this file");
  cmd->add_option("--set", o.sets, "extra key=value override (repeatable)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  auto apply = [&](const char* key, const std::optional<std::string>& v) {
    if (v) c.set(key, *v);
  };
  apply("methods", o.method);
  apply("lambda", o.lambda);
  apply("k_moments", o.k_moments);
  apply("lr", o.lr);
  apply("batch_size", o.batch_size);
  apply("clip", o.clip);
  apply("modulation", o.modulation);
  apply("seeds", o.seeds);
  apply("stats_path", o.stats_path);
  apply("model_path", o.model_path);
  apply("corruptions", o.corruption);
  apply("severities", o.severity);
  apply("jobs", o.jobs);
  apply("out", o.out);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    c.set(s.substr(0, eq), s.substr(eq + 1));
  }
  c.validate();
  return c;
}

void emit(const RunReport& report, const Overrides& o) {
  write_csv(report, report.config.out);
  write_summary(report, std::cout);
  if (!o.summary.empty()) {
    std::ofstream f(o.summary);
    if (!f) throw Error("cannot write summary " + o.summary);
    write_summary(report, f);
  }
  std::cout << "report written to " << report.config.out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ttaforge: test-time adaptation experiments on a tiny vision transformer"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  SyntheticSpec gspec;
  std::uint64_t gseed = 1, gnoise = 5;
  std::string gcorr = "identity", gout;
  int gsev = 0;
  gen->add_option("--classes", gspec.num_classes);
  gen->add_option("--per-class", gspec.per_class);
  gen->add_option("--image-size", gspec.image_size);
  gen->add_option("--channels", gspec.channels);
  gen->add_option("--seed", gseed);
  gen->add_option("--corruption", gcorr);
  gen->add_option("--severity", gsev);
  gen->add_option("--noise-seed", gnoise);
  gen->add_option("--out", gout)->required();

  // train
  auto* train = app.add_subcommand("train", "train a source model on a dataset file");
  std::string tdata, tout;
  ModelConfig tmodel;
  TrainConfig tcfg;
  std::uint64_t tseed = 7;
  train->add_option("--data", tdata)->required();
  train->add_option("--out", tout)->required();
  train->add_option("--d-model", tmodel.d_model);
  train->add_option("--depth", tmodel.depth);
  train->add_option("--heads", tmodel.heads);
  train->add_option("--patch-size", tmodel.patch_size);
  train->add_option("--steps", tcfg.steps);
  train->add_option("--lr", tcfg.lr);
  train->add_option("--batch-size", tcfg.batch_size);
  train->add_option("--seed", tseed, "initialisation seed");

  // stats
  auto* stats = app.add_subcommand("stats", "compute source statistics for a model and labelled split");
  std::string smodel, sdata, sout;
  int sk = 3;
  bool sraw = false;
  stats->add_option("--model", smodel)->required();
  stats->add_option("--data", sdata)->required();
  stats->add_option("--k", sk, "highest central moment order");
  stats->add_flag("--raw", sraw, "store statistics of unnormalized features");
  stats->add_option("--out", sout)->required();

  // run / sweep
  auto* run = app.add_subcommand("run", "run methods x corruptions x severities x seeds");
  Overrides ro;
  add_run_options(run, ro);
  auto* sw = app.add_subcommand("sweep", "one-axis hyperparameter sweep");
  Overrides so;
  std::string axis;
  sw->add_option("--axis", axis, "lr, batch_size, lambda or clip")->required();
  add_run_options(sw, so);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Dataset d = gen_synthetic_dataset(gspec, gseed);
      if (gsev != 0 || parse_corruption(gcorr) != CorruptionKind::Identity)
        d = corrupt(d, CorruptionSpec{parse_corruption(gcorr), gsev}, gnoise);
      save_dataset(d, gout);
      std::cout << "wrote " << d.size() << " samples to " << gout << '\n';
    } else if (*train) {
      Dataset d = load_dataset(tdata);
      tmodel.num_classes = d.num_classes;
      tmodel.image_size = d.images.shape()[1];
      tmodel.channels = d.images.shape()[3];
      Model m = Model::init(tmodel, tseed);
      auto losses = train_source_model(m, d.images, d.labels, tcfg);
      const auto pred = argmax_rows(m.evaluate(d.images).second);
      std::size_t wrong = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != d.labels[i];
      save_model(m, tout);
      std::printf("final loss %.4f, train error %.2f%%, checkpoint %s\n", losses.back(),
                  100.0 * static_cast<double>(wrong) / static_cast<double>(pred.size()), tout.c_str());
    } else if (*stats) {
      Model m = load_model(smodel);
      Dataset d = load_dataset(sdata);
      if (d.num_classes != m.config().num_classes) throw ConfigError("dataset and model disagree on class count");
      SourceStatistics st = compute_source_statistics(m, d, sk, !sraw, m.config().ln_eps);
      FeatureGaussian g = compute_feature_gaussian(m, d);
      save_source_statistics(st, &g, sout);
      std::cout << "wrote statistics (K=" << sk << ", " << st.num_classes << " classes, dim " << st.dim << ") to "
                << sout << '\n';
    } else if (*run) {
      emit(run_experiment(resolve(ro)), ro);
    } else if (*sw) {
      const SweepAxis a = parse_axis(axis);
      emit(sweep(resolve(so), a), so);
    }
  } catch (const std::exception& e) {
    std::cerr << "ttaforge: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
