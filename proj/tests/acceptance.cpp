// SPDX-License-Identifier: Apache-2.0
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "ttaforge/bench.hpp"
#include "ttaforge/data.hpp"
#include "ttaforge/error.hpp"
#include "ttaforge/methods.hpp"
#include "ttaforge/stats.hpp"

using namespace ttaforge;

namespace {

// Pinned tolerances.
constexpr double kCmdAbsTol = 1e-10;
constexpr double kCmdSeconds = 5.0;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kZeroShiftLoss = 1e-2;
constexpr double kZeroShiftErrorPp = 1.0;
constexpr double kOracleAccuracy = 95.0;
constexpr double kShiftMarginPp = 5.0;
constexpr double kShiftSeconds = 120.0;
constexpr int kFirstAdaptedSeverity = 4;
// Ties at the stream's resolution: 3 samples of the 6000-sample target stream.
constexpr double kSeverityTiePp = 0.05;
constexpr double kVarianceRatio = 10.0;
constexpr int kAblationOrder = 5;
constexpr double kAblationSlackPp = 1.0;
constexpr double kSweepBandPp = 10.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig shift_config() {
  ExperimentConfig c;
  c.corruptions = {CorruptionKind::PixelAffine};
  c.severities = {8};
  c.seeds = 3;
  return c;
}

const CellResult& cell(const RunReport& r, Method m) {
  for (const auto& c : r.cells)
    if (c.method == m) return c;
  throw Error("missing cell");
}

bool finite_losses(const CellResult& c) {
  for (const auto& seed : c.losses)
    for (double l : seed)
      if (!std::isfinite(l)) return false;
  return true;
}

// ---- 1 -----------------------------------------------------------------

Outcome cmd_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> n_dist(1, 8), d_dist(1, 4), k_dist(1, 5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = n_dist(gen), m = n_dist(gen), d = d_dist(gen), k = k_dist(gen);
    Tensor x({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
    Tensor y({static_cast<std::size_t>(m), static_cast<std::size_t>(d)});
    for (double& v : x.storage()) v = u(gen);
    for (double& v : y.storage()) v = u(gen);
    auto src = source_statistics(x, std::vector<int>(static_cast<std::size_t>(n), 0), k, 1);
    auto tgt = batch_statistics(y, std::vector<int>(static_cast<std::size_t>(m), 0), k);
    const double got = cmd_loss(src, tgt, k);
    const double want = oracle::cmd_from_samples(oracle::to_mat(x), oracle::to_mat(y), k);
    worst = std::max(worst, std::abs(got - want));
  }
  const double secs = seconds_since(t0);
  return {worst <= kCmdAbsTol && secs < kCmdSeconds,
          fmt("100 instances, max |diff| %.2e (tol %.0e), %.3f s", worst, kCmdAbsTol, secs)};
}

// ---- 2 -----------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.num_classes = 3;
  Model model = Model::init(mc, 40);
  std::mt19937_64 gen(41);
  // Perturb the LN affines away from identity so every path is exercised.
  for (auto& p : model.parameters())
    for (double& v : p.var.mutable_value().storage()) v += 0.05 * std::normal_distribution<double>()(gen);
  auto images = [&](std::size_t n) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t({n, 8, 8, 1});
    for (double& v : t.storage()) v = u(gen);
    return t;
  };
  Tensor src = images(60), batch = images(12);
  auto [f, z] = model.evaluate(src);
  std::vector<int> labels(60);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  auto stats = source_statistics(normalize_features(f), labels, 3, 3);
  auto gauss = feature_gaussian(f);

  double worst = 0.0;
  std::string where;
  std::size_t coords = 0;
  for (Method m : {Method::Tent, Method::PL, Method::ShotIM, Method::TFA, Method::CFA_F, Method::CFA_C, Method::CFA})
    for (ModulationMode mode : {ModulationMode::LN, ModulationMode::CLS, ModulationMode::Feature, ModulationMode::All}) {
      AdaptConfig cfg;
      cfg.method = m;
      cfg.modulation = mode;
      const std::size_t per_tensor = mode == ModulationMode::LN || mode == ModulationMode::CLS ? 64 : 8;
      auto r = oracle::check_method_gradient(model, batch, cfg, {&stats, &gauss}, per_tensor, 5);
      coords += r.coords;
      if (r.worst >= worst) {
        worst = r.worst;
        where = std::string(to_string(m)) + "/" + std::string(to_string(mode)) + " " + r.worst_param;
      }
    }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < kGradSeconds,
          fmt("7 methods x 4 modes, %zu coords, worst rel err %.2e at %s (tol %.0e), %.1f s", coords, worst,
              where.c_str(), kGradRelTol, secs)};
}

// ---- 3 -----------------------------------------------------------------

Outcome zero_shift(const ExperimentContext& base) {
  // Loss on one batch holding the whole source split: the statistics match exactly.
  Model m = base.model;
  AdaptConfig full;
  full.method = Method::CFA;
  full.batch_size = base.source.size();
  auto r = adapt_online(m, std::vector<Tensor>{base.source.images}, full, {&base.stats, nullptr});
  const double first_loss = r.losses.at(0);

  ExperimentContext ctx = base;
  ctx.target = base.source;
  ExperimentConfig c;
  c.methods = {Method::Source, Method::CFA};
  c.corruptions = {CorruptionKind::Identity};
  c.severities = {0};
  auto report = run_experiment(c, ctx);
  const double src = cell(report, Method::Source).summary.mean, cfa = cell(report, Method::CFA).summary.mean;
  return {first_loss < kZeroShiftLoss && std::abs(cfa - src) < kZeroShiftErrorPp,
          fmt("first-batch CFA loss %.2e (< %.0e); error Source %.2f%% vs CFA %.2f%% (|diff| < %.1f pp)", first_loss,
              kZeroShiftLoss, src, cfa, kZeroShiftErrorPp)};
}

// ---- 4 -----------------------------------------------------------------

Outcome constructed_shift(const ExperimentContext& ctx, const RunReport& report) {
  const auto t0 = Clock::now();
  Dataset shifted = corrupt(ctx.target, {CorruptionKind::PixelAffine, 8}, 0);
  Tensor restored = invert_pixel_affine(shifted.images, 8);
  auto pred = argmax_rows(ctx.model.evaluate(restored).second);
  std::size_t right = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) right += pred[i] == shifted.labels[i];
  const double oracle_acc = 100.0 * static_cast<double>(right) / static_cast<double>(pred.size());
  const double src = cell(report, Method::Source).summary.mean, cfa = cell(report, Method::CFA).summary.mean;
  const double secs = seconds_since(t0) + report.wall_seconds;
  return {oracle_acc >= kOracleAccuracy && src - cfa >= kShiftMarginPp && secs < kShiftSeconds,
          fmt("inverse-shift accuracy %.2f%% (>= %.0f%%); error Source %.2f%% vs CFA %.2f%% over 3 seeds "
              "(margin %.2f >= %.0f pp), %.1f s",
              oracle_acc, kOracleAccuracy, src, cfa, src - cfa, kShiftMarginPp, secs)};
}

// ---- 5 -----------------------------------------------------------------

Outcome severity(const ExperimentContext& ctx) {
  ExperimentConfig c;
  c.methods = {Method::Source, Method::CFA};
  c.corruptions = {CorruptionKind::GaussianNoise};
  c.severities = {1, 2, 3, 4, 5, 6, 7, 8};
  c.seeds = 3;
  auto report = run_experiment(c, ctx);
  std::vector<double> src(9), cfa(9);
  for (const auto& cl : report.cells) (cl.method == Method::Source ? src : cfa)[cl.severity] = cl.summary.mean;
  bool monotone = true, adapted = true;
  std::string line = "Source/CFA:";
  for (int s = 1; s <= 8; ++s) {
    if (s > 1 && src[s] < src[s - 1]) monotone = false;
    if (s >= kFirstAdaptedSeverity && cfa[s] > src[s] + kSeverityTiePp) adapted = false;
    line += fmt(" %d:%.4f/%.4f", s, src[s], cfa[s]);
  }
  return {monotone && adapted,
          fmt("%s; Source non-decreasing %s, CFA <= Source (+%.2f pp tie) at s >= %d %s", line.c_str(),
              monotone ? "yes" : "no", kSeverityTiePp, kFirstAdaptedSeverity, adapted ? "yes" : "no")};
}

// ---- 6 -----------------------------------------------------------------

double variance(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

Outcome ablation(const ExperimentContext& ctx, const RunReport& report) {
  ExperimentContext raw = ctx;
  raw.stats = compute_source_statistics(ctx.model, ctx.source, kAblationOrder, false, ctx.model.config().ln_eps);
  ExperimentContext norm = ctx;
  norm.stats = compute_source_statistics(ctx.model, ctx.source, kAblationOrder, true, ctx.model.config().ln_eps);
  ExperimentConfig c = shift_config();
  c.methods = {Method::CFA_F};
  c.adapt.k_moments = kAblationOrder;
  auto on = run_experiment(c, norm);
  c.adapt.normalize_features = false;
  auto off = run_experiment(c, raw);
  double min_ratio = INFINITY;
  for (std::size_t s = 0; s < c.seeds; ++s)
    min_ratio = std::min(min_ratio, variance(off.cells[0].losses[s]) / variance(on.cells[0].losses[s]));

  const double cfa = cell(report, Method::CFA).summary.mean;
  const double f = cell(report, Method::CFA_F).summary.mean, cc = cell(report, Method::CFA_C).summary.mean;
  return {min_ratio > kVarianceRatio && cfa <= std::min(f, cc) + kAblationSlackPp,
          fmt("K=%d loss variance raw/normalized >= %.0fx on every seed (> %.0fx); error CFA %.2f%%, CFA-F %.2f%%, "
              "CFA-C %.2f%% (slack %.1f pp)",
              kAblationOrder, min_ratio, kVarianceRatio, cfa, f, cc, kAblationSlackPp)};
}

// ---- 7 -----------------------------------------------------------------

bool params_equal(const Model& a, const Model& b, const std::vector<std::string>& skip) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& name = a.parameters()[i].name;
    if (std::find(skip.begin(), skip.end(), name) != skip.end()) continue;
    if (!bit_equal(a.parameters()[i].var.value(), b.parameters()[i].var.value())) return false;
  }
  return true;
}

Outcome invariants(const ExperimentContext& ctx) {
  Dataset shifted = corrupt(ctx.target, {CorruptionKind::PixelAffine, 8}, 0);
  std::vector<Tensor> stream;
  for (auto& b : batches(shifted, 64, 0)) {
    stream.push_back(std::move(b.images));
    if (stream.size() == 6) break;
  }
  const AlignmentSources sources{&ctx.stats, &ctx.gaussian};
  bool first_batch_same = true, frozen_ok = true, moved = true, t3a_ok = true;
  std::vector<int> reference;
  for (Method m : {Method::Source, Method::Tent, Method::PL, Method::ShotIM, Method::TFA, Method::T3A, Method::CFA_F,
                   Method::CFA_C, Method::CFA})
    for (ModulationMode mode : {ModulationMode::LN, ModulationMode::CLS, ModulationMode::Feature, ModulationMode::All}) {
      Model model = ctx.model;
      AdaptConfig cfg;
      cfg.method = m;
      cfg.modulation = mode;
      cfg.lr = 1e-2;
      auto r = adapt_online(model, stream, cfg, sources);
      if (reference.empty()) reference = r.predictions[0];
      if (r.predictions[0] != reference) first_batch_same = false;
      if (!is_gradient_method(m)) {
        if (!params_equal(model, ctx.model, {})) (m == Method::T3A ? t3a_ok : frozen_ok) = false;
        continue;
      }
      if (!params_equal(model, ctx.model, modulation_param_names(ctx.model, mode))) frozen_ok = false;
      if (params_equal(model, ctx.model, {})) moved = false;
    }

  ExperimentConfig c = shift_config();
  c.methods = {Method::Source, Method::T3A, Method::CFA};
  c.seeds = 2;
  const auto csv = [&](std::size_t jobs) {
    c.jobs = jobs;
    std::ostringstream out;
    write_csv(run_experiment(c, ctx), out);
    return out.str();
  };
  const std::string a = csv(1), b = csv(1), p = csv(2);
  const bool csv_ok = a == b && a == p;
  return {first_batch_same && frozen_ok && moved && t3a_ok && csv_ok,
          fmt("batch-1 predictions identical %s; non-modulated params bit-unchanged %s (modulated params moved %s); "
              "T3A params bit-unchanged %s; CSV byte-identical on rerun and with 2 jobs %s",
              first_batch_same ? "yes" : "no", frozen_ok ? "yes" : "no", moved ? "yes" : "no", t3a_ok ? "yes" : "no",
              csv_ok ? "yes" : "no")};
}

// ---- 8 -----------------------------------------------------------------

Outcome robustness(const ExperimentContext& ctx, const RunReport& report) {
  const double def = cell(report, Method::CFA).summary.mean;
  ExperimentConfig c = shift_config();
  c.methods = {Method::CFA};
  bool ok = true;
  double worst = 0.0;
  std::string line;
  for (SweepAxis axis : {SweepAxis::LearningRate, SweepAxis::BatchSize, SweepAxis::Lambda, SweepAxis::Clip}) {
    auto r = sweep(c, axis, ctx);
    for (const auto& cl : r.cells) {
      const bool finite = finite_losses(cl) && std::none_of(cl.catastrophic.begin(), cl.catastrophic.end(),
                                                            [](bool b) { return b; });
      const double gap = std::abs(cl.summary.mean - def);
      worst = std::max(worst, gap);
      ok = ok && finite && gap <= kSweepBandPp;
      line += fmt(" %s=%s:%.2f%s", cl.axis.c_str(), cl.axis_value.c_str(), cl.summary.mean, finite ? "" : "(non-finite)");
    }
  }
  return {ok, fmt("default %.2f%%;%s; max |gap| %.2f pp (<= %.0f)", def, line.c_str(), worst, kSweepBandPp)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "cmd-oracle", cmd_oracle);
  report(2, "gradients", gradients);

  const auto t0 = Clock::now();
  const ExperimentContext ctx = prepare_context(shift_config());
  const double prep = seconds_since(t0);
  std::printf("note: source model and statistics prepared in %.1f s\n", prep);
  ExperimentConfig main_cfg = shift_config();
  main_cfg.methods = {Method::Source, Method::CFA_F, Method::CFA_C, Method::CFA};
  const RunReport shift = run_experiment(main_cfg, ctx);

  report(3, "zero-shift", [&] { return zero_shift(ctx); });
  report(4, "constructed-shift", [&] { return constructed_shift(ctx, shift); });
  report(5, "severity", [&] { return severity(ctx); });
  report(6, "ablation", [&] { return ablation(ctx, shift); });
  report(7, "invariants", [&] { return invariants(ctx); });
  report(8, "robustness", [&] { return robustness(ctx, shift); });
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
