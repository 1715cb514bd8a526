// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/bench.hpp"

#include <omp.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>

#include "ttaforge/container.hpp"
#include "ttaforge/error.hpp"

namespace ttaforge {
namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t end = s.find(',', start);
    if (end == std::string_view::npos) end = s.size();
    std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("config key '" + std::string(key) + "': expected " + std::string(want) + ", got '" +
                    std::string(value) + "'");
}

std::uint64_t to_u64(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, raw, "a non-negative integer");
  return out;
}

std::size_t to_size(std::string_view key, std::string_view raw) { return static_cast<std::size_t>(to_u64(key, raw)); }

int to_int(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, raw, "an integer");
  return out;
}

double to_double(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out))
    bad_value(key, raw, "a finite number");
  return out;
}

bool to_bool(std::string_view key, std::string_view raw) {
  const std::string v = lower(trim(raw));
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  bad_value(key, raw, "a boolean");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += f(items[i]);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"classes", [](auto& c, auto k, auto v) { c.classes = to_size(k, v); }},
      {"source_per_class", [](auto& c, auto k, auto v) { c.source_per_class = to_size(k, v); }},
      {"target_per_class", [](auto& c, auto k, auto v) { c.target_per_class = to_size(k, v); }},
      {"image_size", [](auto& c, auto k, auto v) { c.image_size = to_size(k, v); }},
      {"channels", [](auto& c, auto k, auto v) { c.channels = to_size(k, v); }},
      {"data_seed", [](auto& c, auto k, auto v) { c.data_seed = to_u64(k, v); }},
      {"target_seed", [](auto& c, auto k, auto v) { c.target_seed = to_u64(k, v); }},
      {"noise_seed", [](auto& c, auto k, auto v) { c.noise_seed = to_u64(k, v); }},
      {"patch_size", [](auto& c, auto k, auto v) { c.patch_size = to_size(k, v); }},
      {"d_model", [](auto& c, auto k, auto v) { c.d_model = to_size(k, v); }},
      {"depth", [](auto& c, auto k, auto v) { c.depth = to_size(k, v); }},
      {"heads", [](auto& c, auto k, auto v) { c.heads = to_size(k, v); }},
      {"mlp_ratio", [](auto& c, auto k, auto v) { c.mlp_ratio = to_size(k, v); }},
      {"model_seed", [](auto& c, auto k, auto v) { c.model_seed = to_u64(k, v); }},
      {"train_steps", [](auto& c, auto k, auto v) { c.train_steps = to_size(k, v); }},
      {"train_lr", [](auto& c, auto k, auto v) { c.train_lr = to_double(k, v); }},
      {"train_batch_size", [](auto& c, auto k, auto v) { c.train_batch_size = to_size(k, v); }},
      {"model_path", [](auto& c, auto, auto v) { c.model_path = trim(v); }},
      {"stats_path", [](auto& c, auto, auto v) { c.stats_path = trim(v); }},
      {"methods",
       [](auto& c, auto k, auto v) {
         c.methods.clear();
         for (const auto& m : split_list(v)) c.methods.push_back(parse_method(m));
         if (c.methods.empty()) bad_value(k, v, "a method list");
       }},
      {"corruptions",
       [](auto& c, auto k, auto v) {
         c.corruptions.clear();
         for (const auto& m : split_list(v)) c.corruptions.push_back(parse_corruption(m));
         if (c.corruptions.empty()) bad_value(k, v, "a corruption list");
       }},
      {"severities",
       [](auto& c, auto k, auto v) {
         c.severities.clear();
         for (const auto& m : split_list(v)) {
           const auto dash = m.find('-');
           if (dash != std::string::npos && dash > 0) {
             const int lo = to_int(k, m.substr(0, dash)), hi = to_int(k, m.substr(dash + 1));
             if (hi < lo) bad_value(k, v, "an ascending range");
             for (int s = lo; s <= hi; ++s) c.severities.push_back(s);
           } else {
             c.severities.push_back(to_int(k, m));
           }
         }
         if (c.severities.empty()) bad_value(k, v, "a severity list");
       }},
      {"seeds", [](auto& c, auto k, auto v) { c.seeds = to_size(k, v); }},
      {"lr", [](auto& c, auto k, auto v) { c.adapt.lr = to_double(k, v); }},
      {"momentum", [](auto& c, auto k, auto v) { c.adapt.momentum = to_double(k, v); }},
      {"clip",
       [](auto& c, auto k, auto v) {
         const std::string s = lower(trim(v));
         if (s == "off" || s == "none") {
           c.adapt.clip_norm.reset();
         } else if (s == "on") {
           c.adapt.clip_norm = 1.0;
         } else {
           c.adapt.clip_norm = to_double(k, v);
         }
       }},
      {"batch_size", [](auto& c, auto k, auto v) { c.adapt.batch_size = to_size(k, v); }},
      {"lambda", [](auto& c, auto k, auto v) { c.adapt.lambda = to_double(k, v); }},
      {"k_moments", [](auto& c, auto k, auto v) { c.adapt.k_moments = to_int(k, v); }},
      {"modulation", [](auto& c, auto, auto v) { c.adapt.modulation = parse_modulation(trim(v)); }},
      {"normalize_features", [](auto& c, auto k, auto v) { c.adapt.normalize_features = to_bool(k, v); }},
      {"tfa_beta1", [](auto& c, auto k, auto v) { c.adapt.tfa_beta1 = to_double(k, v); }},
      {"tfa_beta2", [](auto& c, auto k, auto v) { c.adapt.tfa_beta2 = to_double(k, v); }},
      {"t3a_filter_size", [](auto& c, auto k, auto v) { c.adapt.t3a_filter_size = to_size(k, v); }},
      {"jobs", [](auto& c, auto k, auto v) { c.jobs = to_size(k, v); }},
      {"out", [](auto& c, auto, auto v) { c.out = trim(v); }},
  };
  return table;
}

std::string normalize_key(std::string_view key) {
  std::string k = lower(trim(key));
  std::replace(k.begin(), k.end(), '-', '_');
  if (k == "method") k = "methods";
  if (k == "corruption") k = "corruptions";
  if (k == "severity") k = "severities";
  return k;
}

}  // namespace

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  const std::string k = normalize_key(key);
  const auto& table = setters();
  auto it = table.find(k);
  if (it == table.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(*this, k, value);
}

void ExperimentConfig::validate() const {
  if (classes < 2) throw ConfigError("classes must be at least 2");
  if (seeds < 1) throw ConfigError("seeds must be at least 1");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  if (methods.empty()) throw ConfigError("no methods configured");
  if (corruptions.empty()) throw ConfigError("no corruptions configured");
  if (severities.empty()) throw ConfigError("no severities configured");
  for (int s : severities)
    if (s < 0 || s > kMaxSeverity) throw ConfigError("severity must lie in 0.." + std::to_string(kMaxSeverity));
  if (train_steps < 1 || train_batch_size < 1) throw ConfigError("training needs positive steps and batch size");
  if (!(train_lr > 0.0)) throw ConfigError("train_lr must be positive");
  if (out.empty()) throw ConfigError("out must name a file");
  source_spec().validate();
  target_spec().validate();
  model_config().validate();
  adapt.validate();
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  return {
      {"classes", u(classes)},
      {"source_per_class", u(source_per_class)},
      {"target_per_class", u(target_per_class)},
      {"image_size", u(image_size)},
      {"channels", u(channels)},
      {"data_seed", u(data_seed)},
      {"target_seed", u(target_seed)},
      {"noise_seed", u(noise_seed)},
      {"patch_size", u(patch_size)},
      {"d_model", u(d_model)},
      {"depth", u(depth)},
      {"heads", u(heads)},
      {"mlp_ratio", u(mlp_ratio)},
      {"model_seed", u(model_seed)},
      {"train_steps", u(train_steps)},
      {"train_lr", fmt(train_lr)},
      {"train_batch_size", u(train_batch_size)},
      {"model_path", model_path},
      {"stats_path", stats_path},
      {"methods", join(methods, [](Method m) { return std::string(to_string(m)); })},
      {"corruptions", join(corruptions, [](CorruptionKind k) { return std::string(to_string(k)); })},
      {"severities", join(severities, [](int s) { return std::to_string(s); })},
      {"seeds", u(seeds)},
      {"lr", fmt(adapt.lr)},
      {"momentum", fmt(adapt.momentum)},
      {"clip", adapt.clip_norm ? fmt(*adapt.clip_norm) : std::string("off")},
      {"batch_size", u(adapt.batch_size)},
      {"lambda", fmt(adapt.lambda)},
      {"k_moments", std::to_string(adapt.k_moments)},
      {"modulation", std::string(to_string(adapt.modulation))},
      {"normalize_features", adapt.normalize_features ? "true" : "false"},
      {"tfa_beta1", fmt(adapt.tfa_beta1)},
      {"tfa_beta2", fmt(adapt.tfa_beta2)},
      {"t3a_filter_size", u(adapt.t3a_filter_size)},
      {"jobs", u(jobs)},
      {"out", out},
  };
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.image_size = image_size;
  m.channels = channels;
  m.patch_size = patch_size;
  m.d_model = d_model;
  m.depth = depth;
  m.heads = heads;
  m.mlp_ratio = mlp_ratio;
  m.num_classes = classes;
  m.ln_eps = adapt.ln_eps;
  return m;
}

SyntheticSpec ExperimentConfig::source_spec() const {
  SyntheticSpec s;
  s.num_classes = classes;
  s.per_class = source_per_class;
  s.image_size = image_size;
  s.channels = channels;
  return s;
}

SyntheticSpec ExperimentConfig::target_spec() const {
  SyntheticSpec s = source_spec();
  s.per_class = target_per_class;
  return s;
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig config;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    config.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in);
}

SourceStatistics compute_source_statistics(const Model& model, const Dataset& source, int max_order, bool normalize,
                                           double eps) {
  auto [features, logits] = model.evaluate(source.images);
  (void)logits;
  const Tensor h = normalize ? normalize_features(features, eps) : features;
  return source_statistics(h, source.labels, max_order, model.config().num_classes, normalize);
}

FeatureGaussian compute_feature_gaussian(const Model& model, const Dataset& source) {
  return feature_gaussian(model.evaluate(source.images).first);
}

void save_source_statistics(const SourceStatistics& stats, const FeatureGaussian* gaussian,
                            const std::filesystem::path& path) {
  Container c = statistics_to_container(stats);
  if (gaussian) add_feature_gaussian(c, *gaussian);
  write_container(c, path);
}

ExperimentContext prepare_context(const ExperimentConfig& config) {
  config.validate();
  Dataset source = gen_synthetic_dataset(config.source_spec(), config.data_seed);
  Dataset target = gen_synthetic_dataset(config.target_spec(), config.target_seed);

  Model model = [&] {
    if (!config.model_path.empty()) {
      Model m = load_model(config.model_path);
      if (m.config().num_classes != config.classes || m.config().image_size != config.image_size ||
          m.config().channels != config.channels)
        throw ConfigError("checkpoint " + config.model_path + " does not match the configured task");
      return m;
    }
    Model m = Model::init(config.model_config(), config.model_seed);
    TrainConfig tc;
    tc.steps = config.train_steps;
    tc.batch_size = config.train_batch_size;
    tc.lr = config.train_lr;
    train_source_model(m, source.images, source.labels, tc);
    return m;
  }();

  SourceStatistics stats;
  std::optional<FeatureGaussian> gaussian;
  if (!config.stats_path.empty()) {
    Container c = read_container(config.stats_path, "source-statistics");
    stats = statistics_from_container(c);
    gaussian = feature_gaussian_from_container(c);
    if (stats.dim != model.config().d_model || stats.num_classes != config.classes)
      throw ConfigError("statistics file " + config.stats_path + " does not match the model");
    if (stats.normalized != config.adapt.normalize_features)
      throw ConfigError("statistics file " + config.stats_path + " was built with normalize_features=" +
                        (stats.normalized ? "true" : "false"));
    if (stats.max_order < config.adapt.k_moments)
      throw ConfigError("statistics file " + config.stats_path + " stores moments up to order " +
                        std::to_string(stats.max_order) + " only");
  } else {
    stats = compute_source_statistics(model, source, config.adapt.k_moments, config.adapt.normalize_features,
                                      config.adapt.ln_eps);
  }
  if (!gaussian) gaussian = compute_feature_gaussian(model, source);

  return ExperimentContext{std::move(model), std::move(source), std::move(target), std::move(stats),
                           std::move(*gaussian)};
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw Error("aggregate of an empty list");
  Aggregate a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  if (values.size() == 1) {
    a.single = true;
    return a;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return a;
}

double top1_error(const std::vector<std::vector<int>>& predictions, const std::vector<Batch>& stream) {
  if (predictions.size() != stream.size()) throw Error("prediction stream does not match the batch stream");
  std::size_t wrong = 0, total = 0;
  for (std::size_t b = 0; b < stream.size(); ++b) {
    if (predictions[b].size() != stream[b].labels.size()) throw Error("prediction batch size mismatch");
    for (std::size_t i = 0; i < stream[b].labels.size(); ++i) wrong += predictions[b][i] != stream[b].labels[i];
    total += stream[b].labels.size();
  }
  if (total == 0) throw Error("empty prediction stream");
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(total);
}

namespace {

struct Job {
  std::size_t cell = 0;
  std::size_t seed_slot = 0;
};

struct JobResult {
  double error = 100.0;
  bool catastrophic = false;
  std::string failure;
  std::vector<double> losses;
};

struct Variant {
  std::string axis, value;
  ExperimentConfig config;
};

RunReport run_variants(const ExperimentConfig& base, const std::vector<Variant>& variants,
                       const ExperimentContext& context) {
  const auto start = std::chrono::steady_clock::now();

  // Corrupted target sets are shared by every method and seed of a cell.
  std::map<std::pair<CorruptionKind, int>, Dataset> targets;
  for (const auto& v : variants)
    for (auto kind : v.config.corruptions)
      for (int s : v.config.severities)
        if (!targets.count({kind, s}))
          targets.emplace(std::make_pair(kind, s),
                          corrupt(context.target, CorruptionSpec{kind, s}, v.config.noise_seed));

  RunReport report;
  report.config = base;
  std::vector<const ExperimentConfig*> cell_config;
  for (const auto& v : variants) {
    for (Method m : v.config.methods)
      for (auto kind : v.config.corruptions)
        for (int s : v.config.severities) {
          CellResult cell;
          cell.axis = v.axis;
          cell.axis_value = v.value;
          cell.method = m;
          cell.corruption = kind;
          cell.severity = s;
          for (std::size_t i = 0; i < v.config.seeds; ++i) cell.seeds.push_back(i);
          report.cells.push_back(std::move(cell));
          cell_config.push_back(&v.config);
        }
  }

  std::vector<Job> jobs;
  for (std::size_t c = 0; c < report.cells.size(); ++c)
    for (std::size_t s = 0; s < report.cells[c].seeds.size(); ++s) jobs.push_back({c, s});
  std::vector<JobResult> results(jobs.size());

  auto run_job = [&](std::size_t j) {
    const CellResult& cell = report.cells[jobs[j].cell];
    const ExperimentConfig& cfg = *cell_config[jobs[j].cell];
    AdaptConfig adapt = cfg.adapt;
    adapt.method = cell.method;
    adapt.seed = cell.seeds[jobs[j].seed_slot];
    const Dataset& data = targets.at({cell.corruption, cell.severity});
    const std::vector<Batch> stream = batches(data, adapt.batch_size, adapt.seed);
    std::vector<Tensor> images;
    images.reserve(stream.size());
    for (const auto& b : stream) images.push_back(b.images);
    Model model = context.model;
    JobResult& r = results[j];
    try {
      AdaptResult out = adapt_online(model, images, adapt, AlignmentSources{&context.stats, &context.gaussian});
      r.error = top1_error(out.predictions, stream);
      r.losses = std::move(out.losses);
    } catch (const CatastrophicFailure& e) {
      r.error = 100.0;
      r.catastrophic = true;
      r.failure = e.what();
    }
  };

  const int threads = static_cast<int>(std::min<std::size_t>(base.jobs, std::max<std::size_t>(jobs.size(), 1)));
  if (threads <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
  } else {
    std::vector<std::string> errors(jobs.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      try {
        run_job(j);
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    }
    for (const auto& e : errors)
      if (!e.empty()) throw Error(e);
  }

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    CellResult& cell = report.cells[jobs[j].cell];
    cell.errors.push_back(results[j].error);
    cell.catastrophic.push_back(results[j].catastrophic);
    if (results[j].catastrophic) cell.failures.push_back(results[j].failure);
    cell.losses.push_back(std::move(results[j].losses));
  }
  for (auto& cell : report.cells) cell.summary = aggregate(cell.errors);

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, const ExperimentContext& context) {
  config.validate();
  return run_variants(config, {Variant{"", "", config}}, context);
}

RunReport run_experiment(const ExperimentConfig& config) { return run_experiment(config, prepare_context(config)); }

SweepAxis parse_axis(std::string_view name) {
  const std::string s = normalize_key(name);
  if (s == "lr") return SweepAxis::LearningRate;
  if (s == "batch_size" || s == "batch") return SweepAxis::BatchSize;
  if (s == "lambda") return SweepAxis::Lambda;
  if (s == "clip") return SweepAxis::Clip;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "' (expected lr, batch_size, lambda or clip)");
}

std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::LearningRate: return "lr";
    case SweepAxis::BatchSize: return "batch_size";
    case SweepAxis::Lambda: return "lambda";
    case SweepAxis::Clip: return "clip";
  }
  return "?";
}

std::vector<std::string> sweep_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::LearningRate: return {"0.0001", "0.001", "0.01"};
    case SweepAxis::BatchSize: return {"32", "64", "128"};
    case SweepAxis::Lambda: return {"0.5", "1", "2"};
    case SweepAxis::Clip: return {"on", "off"};
  }
  return {};
}

RunReport sweep(const ExperimentConfig& config, SweepAxis axis, const ExperimentContext& context) {
  config.validate();
  std::vector<Variant> variants;
  for (const auto& value : sweep_values(axis)) {
    Variant v{std::string(to_string(axis)), value, config};
    v.config.set(to_string(axis), value);
    v.config.validate();
    variants.push_back(std::move(v));
  }
  return run_variants(config, variants, context);
}

RunReport sweep(const ExperimentConfig& config, SweepAxis axis) {
  return sweep(config, axis, prepare_context(config));
}

void write_csv(const RunReport& report, std::ostream& out) {
  out << kCsvHeader << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  for (const auto& cell : report.cells) {
    const std::string prefix = cell.axis + "," + cell.axis_value + "," + std::string(to_string(cell.method)) + "," +
                               std::string(to_string(cell.corruption)) + "," + std::to_string(cell.severity) + ",";
    std::size_t failures = 0;
    for (std::size_t i = 0; i < cell.errors.size(); ++i) {
      failures += cell.catastrophic[i];
      out << prefix << "seed," << cell.seeds[i] << ',' << num(cell.errors[i]) << ",,,," << (cell.catastrophic[i] ? 1 : 0)
          << '\n';
    }
    out << prefix << "aggregate,,," << num(cell.summary.mean) << ',' << num(cell.summary.std) << ','
        << cell.errors.size() << ',' << failures << '\n';
  }
}

void write_csv(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report " + path.string());
  write_csv(report, out);
  if (!out) throw Error("failed writing report " + path.string());
}

void write_summary(const RunReport& report, std::ostream& out) {
  // Group cells by (axis value) into one table each: rows are methods,
  // columns corruption@severity, entries mean +- std over seeds.
  std::vector<std::string> groups;
  for (const auto& c : report.cells)
    if (std::find(groups.begin(), groups.end(), c.axis_value) == groups.end()) groups.push_back(c.axis_value);

  char buf[128];
  for (const auto& group : groups) {
    std::vector<std::string> columns;
    std::vector<Method> rows;
    for (const auto& c : report.cells) {
      if (c.axis_value != group) continue;
      const std::string col = std::string(to_string(c.corruption)) + "@" + std::to_string(c.severity);
      if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
      if (std::find(rows.begin(), rows.end(), c.method) == rows.end()) rows.push_back(c.method);
    }
    if (!group.empty()) out << "== " << report.cells.front().axis << " = " << group << " ==\n";
    std::snprintf(buf, sizeof buf, "%-10s", "method");
    out << buf;
    for (const auto& col : columns) {
      std::snprintf(buf, sizeof buf, " %18s", col.c_str());
      out << buf;
    }
    out << (columns.size() > 1 ? "                avg\n" : "\n");
    for (Method m : rows) {
      std::snprintf(buf, sizeof buf, "%-10s", std::string(to_string(m)).c_str());
      out << buf;
      double total = 0.0;
      for (const auto& col : columns) {
        for (const auto& c : report.cells) {
          if (c.axis_value != group || c.method != m) continue;
          if (std::string(to_string(c.corruption)) + "@" + std::to_string(c.severity) != col) continue;
          const bool failed = std::find(c.catastrophic.begin(), c.catastrophic.end(), true) != c.catastrophic.end();
          std::snprintf(buf, sizeof buf, "%.1f+-%.1f%s", c.summary.mean, c.summary.std, failed ? "!" : "");
          std::string cellstr = buf;
          std::snprintf(buf, sizeof buf, " %18s", cellstr.c_str());
          out << buf;
          total += c.summary.mean;
        }
      }
      if (columns.size() > 1) {
        std::snprintf(buf, sizeof buf, " %18.1f", total / static_cast<double>(columns.size()));
        out << buf;
      }
      out << '\n';
    }
    out << '\n';
  }
  bool any_single = false;
  for (const auto& c : report.cells) any_single |= c.summary.single;
  out << "top-1 error in percent, mean+-unbiased std over seeds";
  if (any_single) out << " (single seed: std reported as 0)";
  out << "; '!' marks cells with a catastrophic failure (recorded as 100)\n\n";

  for (const auto& c : report.cells)
    for (const auto& f : c.failures)
      out << "failure: " << to_string(c.method) << " " << to_string(c.corruption) << "@" << c.severity << ": " << f
          << '\n';

  out << "optimizer: SGD, v <- mu v + g, p <- p - lr v, global-norm clipping before the step\n";
  std::vector<Method> seen;
  for (const auto& c : report.cells)
    if (std::find(seen.begin(), seen.end(), c.method) == seen.end()) {
      seen.push_back(c.method);
      out << "objective " << to_string(c.method) << ": " << objective_formula(c.method) << '\n';
    }
  out << "\nconfig:\n";
  for (const auto& [k, v] : report.config.entries()) out << "  " << k << " = " << v << '\n';
  std::snprintf(buf, sizeof buf, "%.2f", report.wall_seconds);
  out << "wall clock: " << buf << " s\n";
}

}  // namespace ttaforge
