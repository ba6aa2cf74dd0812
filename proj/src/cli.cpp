#include "excessmtl/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

namespace excessmtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// One JSON object of the config file. Tracks consumed keys so that leftovers
// can be reported as unknown fields.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T required(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where(key) + ": required field is missing");
    return get<T>(key);
  }

  template <class T>
  T optional(const std::string& key, T fallback) {
    return j_.contains(key) ? get<T>(key) : std::move(fallback);
  }

  Section child(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where(key) + ": required section is missing");
    seen_.insert(key);
    return Section(j_.at(key), where(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where(item.key()) + ": unknown field");
    }
  }

 private:
  template <class T>
  T get(const std::string& key) {
    seen_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<Index>>) {
      if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number_integer(); })) {
        throw ConfigError(where(key) + ": expected a list of integers");
      }
    }
    try {
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

DatasetConfig parse_dataset(Section s) {
  DatasetConfig d;
  d.kind = s.required<std::string>("kind");
  d.seed = s.required<std::uint64_t>("seed");
  d.standardize = s.optional<bool>("standardize", true);
  if (d.kind == "synthetic_classification") {
    d.num_tasks = s.required<std::size_t>("num_tasks");
    d.classes = s.required<std::size_t>("classes");
    d.dim = s.required<Index>("dim");
    d.n = s.required<Index>("n");
    d.separation = s.required<double>("separation");
  } else if (d.kind == "synthetic_regression") {
    d.num_tasks = s.required<std::size_t>("num_tasks");
    d.dim = s.required<Index>("dim");
    d.n = s.required<Index>("n");
    d.noise_std = s.required<double>("noise_std");
  } else if (d.kind == "multimnist") {
    d.num_tasks = 2;
    d.classes = 10;
    d.train_images = s.required<std::string>("train_images");
    d.train_labels = s.required<std::string>("train_labels");
    d.test_images = s.required<std::string>("test_images");
    d.test_labels = s.required<std::string>("test_labels");
    d.limit = s.optional<std::size_t>("limit", 0);
    d.canvas = s.optional<Index>("canvas", 36);
  } else {
    throw ConfigError(s.where("kind") + ": unknown dataset kind '" + d.kind + "'");
  }
  s.finish();
  return d;
}

TrainConfig parse_train(Section s) {
  TrainConfig t;
  t.strategy = strategy_from_string(s.required<std::string>("strategy"));
  t.eta_theta = s.required<double>("eta_theta");
  t.eta_alpha = s.required<double>("eta_alpha");
  t.epochs = s.required<std::size_t>("epochs");
  t.batch_size = s.required<std::size_t>("batch_size");
  t.seed = s.required<std::uint64_t>("seed");
  t.warmup_epochs = s.optional<std::size_t>("warmup_epochs", 3);
  t.weight_decay = s.optional<double>("weight_decay", 0.0);
  t.eta_decay = s.optional<bool>("eta_decay", false);
  t.relative_excess = s.optional<bool>("relative_excess", true);
  s.finish();
  t.validate();
  return t;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  Section root(j, "");
  ExperimentConfig cfg;
  cfg.dataset = parse_dataset(root.child("dataset"));

  Section model = root.child("model");
  cfg.trunk_layers = model.required<std::vector<Index>>("trunk_layers");
  model.finish();

  if (root.has("noise")) {
    const json& list = root.raw("noise");
    if (!list.is_array()) throw ConfigError("noise: expected an array");
    for (std::size_t k = 0; k < list.size(); ++k) {
      Section n(list[k], "noise[" + std::to_string(k) + "]");
      NoiseSpec spec;
      spec.task_id = n.required<std::size_t>("task");
      spec.kind = noise_kind_from_string(n.required<std::string>("kind"));
      spec.level = n.required<double>("level");
      spec.seed = n.required<std::uint64_t>("seed");
      n.finish();
      if (spec.task_id >= cfg.dataset.num_tasks) {
        throw ConfigError(n.where("task") + ": task " + std::to_string(spec.task_id) +
                          " does not exist");
      }
      if (!(spec.level >= 0.0 && spec.level <= 1.0)) {
        throw ConfigError(n.where("level") + ": must lie in [0, 1]");
      }
      cfg.noise.push_back(spec);
    }
  }

  cfg.train = parse_train(root.child("train"));

  Section output = root.child("output");
  cfg.output.directory = output.required<std::string>("directory");
  cfg.output.formats = output.optional<std::vector<std::string>>("formats", cfg.output.formats);
  for (const auto& f : cfg.output.formats) {
    if (f != "csv" && f != "jsonl") throw ConfigError("output.formats: unknown format '" + f + "'");
  }
  output.finish();
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  json dataset = {{"kind", d.kind}, {"seed", d.seed}, {"standardize", d.standardize}};
  if (d.kind == "synthetic_classification") {
    dataset.update({{"num_tasks", d.num_tasks}, {"classes", d.classes}, {"dim", d.dim}, {"n", d.n},
                    {"separation", d.separation}});
  } else if (d.kind == "synthetic_regression") {
    dataset.update({{"num_tasks", d.num_tasks}, {"dim", d.dim}, {"n", d.n}, {"noise_std", d.noise_std}});
  } else {
    dataset.update({{"train_images", d.train_images}, {"train_labels", d.train_labels},
                    {"test_images", d.test_images}, {"test_labels", d.test_labels},
                    {"limit", d.limit}, {"canvas", d.canvas}});
  }
  json noise = json::array();
  for (const auto& n : cfg.noise) {
    noise.push_back({{"task", n.task_id}, {"kind", to_string(n.kind)}, {"level", n.level}, {"seed", n.seed}});
  }
  const auto& t = cfg.train;
  return {{"dataset", dataset},
          {"model", {{"trunk_layers", cfg.trunk_layers}}},
          {"noise", noise},
          {"train",
           {{"strategy", to_string(t.strategy)}, {"eta_theta", t.eta_theta}, {"eta_alpha", t.eta_alpha},
            {"epochs", t.epochs}, {"batch_size", t.batch_size}, {"seed", t.seed},
            {"warmup_epochs", t.warmup_epochs}, {"weight_decay", t.weight_decay},
            {"eta_decay", t.eta_decay}, {"relative_excess", t.relative_excess}}},
          {"output", {{"directory", cfg.output.directory}, {"formats", cfg.output.formats}}}};
}

namespace {

IdxTensor head_images(IdxTensor t, std::size_t limit) {
  if (limit == 0 || t.dims.empty() || limit >= t.dims[0]) return t;
  std::size_t per = 1;
  for (std::size_t k = 1; k < t.dims.size(); ++k) per *= t.dims[k];
  t.dims[0] = static_cast<std::uint32_t>(limit);
  t.data.resize(limit * per);
  return t;
}

std::vector<TaskSplits> load_multimnist(const DatasetConfig& d) {
  const auto train_images = head_images(read_idx(d.train_images), d.limit);
  const auto train_labels = head_images(read_idx(d.train_labels), d.limit);
  const auto test_images = head_images(read_idx(d.test_images), d.limit);
  const auto test_labels = head_images(read_idx(d.test_labels), d.limit);
  MultiMnistLayout layout;
  layout.canvas = d.canvas;
  auto [train_left, train_right] = compose_multimnist(train_images, train_labels, train_images,
                                                      train_labels, d.seed, Split::Train, layout);
  auto [test_left, test_right] = compose_multimnist(test_images, test_labels, test_images,
                                                    test_labels, d.seed + 1, Split::Test, layout);
  return {TaskSplits{std::move(train_left), std::move(test_left)},
          TaskSplits{std::move(train_right), std::move(test_right)}};
}

}  // namespace

std::vector<TaskSplits> build_datasets(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  std::vector<TaskSplits> data;
  if (d.kind == "synthetic_classification") {
    data = gen_synthetic_classification(d.num_tasks, d.classes, d.dim, d.n, d.separation, d.seed);
  } else if (d.kind == "synthetic_regression") {
    data = gen_synthetic_regression(d.num_tasks, d.dim, d.n, d.noise_std, d.seed);
  } else {
    data = load_multimnist(d);
  }
  for (const auto& spec : cfg.noise) apply_noise(data, spec, d.classes);
  if (d.standardize) {
    for (auto& task : data) {
      auto [train, stats] = standardize(task.train);
      task.test = standardize(task.test, stats).first;
      task.train = std::move(train);
    }
  }
  return data;
}

ModelSpec build_model_spec(const ExperimentConfig& cfg, const std::vector<TaskSplits>& data) {
  ModelSpec spec;
  spec.input_dim = data.empty() ? 0 : data.front().train.x.cols();
  spec.trunk_layers = cfg.trunk_layers;
  for (const auto& task : data) {
    if (task.train.is_classification()) {
      spec.task_heads.push_back({static_cast<Index>(cfg.dataset.classes), LossKind::SoftmaxCrossEntropy});
    } else {
      spec.task_heads.push_back({std::get<DenseMatrix>(task.train.y).cols(), LossKind::SquaredError});
    }
  }
  spec.validate();
  return spec;
}

fs::path resolve_output_dir(const std::string& directory) {
  fs::path dir(directory);
  if (dir.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
      return fs::path(root) / dir;
    }
  }
  return dir;
}

json to_json(const RunSummary& s) {
  return {{"strategy", s.strategy},
          {"num_tasks", s.final_test_metric.size()},
          {"metric_kinds", s.metric_kinds},
          {"final_test_metric", s.final_test_metric},
          {"final_train_loss", s.final_train_loss},
          {"final_alpha", s.final_alpha},
          {"noisy_tasks", s.noisy_tasks},
          {"steps", s.steps}};
}

RunSummary summary_from_json(const json& j) {
  try {
    RunSummary s;
    s.strategy = j.at("strategy").get<std::string>();
    s.metric_kinds = j.at("metric_kinds").get<std::vector<std::string>>();
    s.final_test_metric = j.at("final_test_metric").get<std::vector<double>>();
    s.final_train_loss = j.at("final_train_loss").get<std::vector<double>>();
    s.final_alpha = j.at("final_alpha").get<std::vector<double>>();
    s.noisy_tasks = j.at("noisy_tasks").get<std::vector<std::size_t>>();
    s.steps = j.at("steps").get<std::size_t>();
    const std::size_t m = s.final_test_metric.size();
    if (s.final_train_loss.size() != m || s.final_alpha.size() != m || s.metric_kinds.size() != m) {
      throw FormatError("summary arrays disagree on the task count");
    }
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed summary: ") + e.what());
  }
}

RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const auto data = build_datasets(cfg);
  const ModelSpec spec = build_model_spec(cfg, data);
  const std::size_t m = data.size();

  fs::create_directories(out_dir);
  {
    std::ofstream resolved(out_dir / "config.resolved.json");
    resolved << to_json(cfg).dump(2) << '\n';
  }
  const auto has_format = [&](const char* f) {
    return std::find(cfg.output.formats.begin(), cfg.output.formats.end(), f) != cfg.output.formats.end();
  };
  std::ofstream csv;
  std::ofstream jsonl;
  if (has_format("csv")) {
    csv.open(out_dir / "metrics.csv", std::ios::binary);
    write_metrics_csv_header(csv, m);
  }
  if (has_format("jsonl")) jsonl.open(out_dir / "metrics.jsonl", std::ios::binary);

  const FitResult result = fit(data, spec, cfg.train, [&](const MetricsRecord& r) {
    if (csv.is_open()) write_metrics_csv_row(csv, r);
    if (jsonl.is_open()) jsonl << to_json_line(r) << '\n';
  });

  RunSummary s;
  s.strategy = to_string(cfg.train.strategy);
  s.steps = result.metrics.size();
  for (const auto& n : cfg.noise) s.noisy_tasks.push_back(n.task_id);
  std::sort(s.noisy_tasks.begin(), s.noisy_tasks.end());
  s.noisy_tasks.erase(std::unique(s.noisy_tasks.begin(), s.noisy_tasks.end()), s.noisy_tasks.end());
  for (std::size_t i = 0; i < m; ++i) {
    const bool cls = spec.task_heads[i].loss == LossKind::SoftmaxCrossEntropy;
    s.metric_kinds.push_back(cls ? "accuracy" : "mse");
    s.final_test_metric.push_back(
        evaluate_metric(result.params, spec, data[i].test.x, data[i].test.y, i));
    s.final_alpha.push_back(result.weighting.weights.alpha[static_cast<Index>(i)]);
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : result.metrics) {
      if (r.epoch + 1 == cfg.train.epochs) {
        sum += r.per_task_train_loss[i];
        ++count;
      }
    }
    s.final_train_loss.push_back(count ? sum / static_cast<double>(count) : 0.0);
  }
  std::ofstream(out_dir / "summary.json") << to_json(s).dump(2) << '\n';
  return s;
}

std::uint64_t sweep_cell_seed(std::uint64_t base_seed, const std::string& strategy, double level) {
  const std::string key = strategy + "|" + format_double(level);
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return base_seed ^ h;
}

int cmd_run(const fs::path& config_path, std::ostream& out, std::ostream& err) {
  try {
    const ExperimentConfig cfg = load_config(config_path);
    const fs::path dir = resolve_output_dir(cfg.output.directory);
    const RunSummary s = run_experiment(cfg, dir);
    out << "run complete: " << s.steps << " steps, results in " << dir.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int cmd_sweep(const fs::path& config_path, const std::vector<double>& levels,
              const std::vector<std::string>& strategies, std::ostream& out, std::ostream& err) {
  ExperimentConfig base;
  try {
    base = load_config(config_path);
    if (levels.empty() || strategies.empty()) {
      throw ConfigError("sweep needs at least one noise level and one strategy");
    }
    if (base.noise.empty()) throw ConfigError("noise: sweep needs at least one noise entry to vary");
    for (double level : levels) {
      if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("--noise-levels: values must lie in [0, 1]");
    }
    for (const auto& s : strategies) strategy_from_string(s);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  }

  const fs::path root = resolve_output_dir(base.output.directory);
  fs::create_directories(root);
  std::ofstream csv(root / "sweep.csv", std::ios::binary);
  csv << "strategy,noise_level,clean_task_metric_mean,noisy_task_metric,final_clean_weight_sum\n";
  std::ostringstream failures;
  int failed = 0;

  for (const auto& strategy : strategies) {
    for (double level : levels) {
      ExperimentConfig cell = base;
      cell.train.strategy = strategy_from_string(strategy);
      cell.train.seed = sweep_cell_seed(base.train.seed, strategy, level);
      for (auto& n : cell.noise) n.level = level;
      const fs::path cell_dir = fs::path(base.output.directory) / (strategy + "_noise" + format_double(level));
      cell.output.directory = cell_dir.string();
      try {
        const RunSummary s = run_experiment(cell, resolve_output_dir(cell.output.directory));
        double clean_sum = 0.0, clean_weight = 0.0, noisy_sum = 0.0;
        std::size_t clean_count = 0;
        for (std::size_t i = 0; i < s.final_test_metric.size(); ++i) {
          const bool noisy = std::find(s.noisy_tasks.begin(), s.noisy_tasks.end(), i) != s.noisy_tasks.end();
          if (noisy) {
            noisy_sum += s.final_test_metric[i];
          } else {
            clean_sum += s.final_test_metric[i];
            clean_weight += s.final_alpha[i];
            ++clean_count;
          }
        }
        const double clean_mean = clean_count ? clean_sum / static_cast<double>(clean_count) : 0.0;
        const double noisy_mean = noisy_sum / static_cast<double>(s.noisy_tasks.size());
        csv << strategy << ',' << format_double(level) << ',' << format_double(clean_mean) << ','
            << format_double(noisy_mean) << ',' << format_double(clean_weight) << '\n';
        out << strategy << " @ " << format_double(level) << ": clean " << clean_mean << ", noisy "
            << noisy_mean << ", clean weight " << clean_weight << '\n';
      } catch (const std::exception& e) {
        ++failed;
        failures << strategy << ',' << format_double(level) << ",\"" << e.what() << "\"\n";
        err << "cell " << strategy << " @ " << format_double(level) << " failed: " << e.what() << '\n';
      }
    }
  }
  if (failed > 0) {
    std::ofstream f(root / "sweep_failures.csv", std::ios::binary);
    f << "strategy,noise_level,error\n" << failures.str();
    return 1;
  }
  return 0;
}

int cmd_compare(const std::vector<fs::path>& run_dirs, const fs::path& csv_path, std::ostream& out,
                std::ostream& err) {
  std::vector<RunSummary> runs;
  try {
    if (run_dirs.empty()) throw FormatError("compare needs at least one run directory");
    for (const auto& dir : run_dirs) {
      std::ifstream in(dir / "summary.json");
      if (!in) throw FormatError("missing " + (dir / "summary.json").string());
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw FormatError((dir / "summary.json").string() + " is not valid JSON: " + e.what());
      }
      runs.push_back(summary_from_json(j));
      if (runs.back().final_test_metric.size() != runs.front().final_test_metric.size()) {
        throw FormatError(dir.string() + " has a different task count");
      }
    }
  } catch (const FormatError& e) {
    err << "compare: " << e.what() << '\n';
    return 2;
  }

  const std::size_t m = runs.front().final_test_metric.size();
  std::vector<std::string> dominated(runs.size());
  for (std::size_t a = 0; a < runs.size(); ++a) {
    for (std::size_t b = 0; b < runs.size(); ++b) {
      if (a != b && pareto_dominates(runs[a].final_train_loss, runs[b].final_train_loss)) {
        if (!dominated[a].empty()) dominated[a] += ';';
        dominated[a] += run_dirs[b].filename().string();
      }
    }
  }

  std::ofstream csv(csv_path, std::ios::binary);
  csv << "run,strategy";
  out << std::left << std::setw(28) << "run" << std::setw(12) << "strategy";
  for (std::size_t i = 0; i < m; ++i) {
    csv << ",task" << i << "_test_metric,task" << i << "_train_loss,alpha" << i;
    out << std::setw(12) << ("metric" + std::to_string(i)) << std::setw(12) << ("loss" + std::to_string(i))
        << std::setw(10) << ("alpha" + std::to_string(i));
  }
  csv << ",pareto_dominates\n";
  out << "pareto_dominates\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto name = run_dirs[r].filename().string();
    csv << name << ',' << runs[r].strategy;
    out << std::setw(28) << name << std::setw(12) << runs[r].strategy;
    for (std::size_t i = 0; i < m; ++i) {
      csv << ',' << format_double(runs[r].final_test_metric[i]) << ','
          << format_double(runs[r].final_train_loss[i]) << ',' << format_double(runs[r].final_alpha[i]);
      out << std::setw(12) << std::setprecision(4) << runs[r].final_test_metric[i] << std::setw(12)
          << runs[r].final_train_loss[i] << std::setw(10) << runs[r].final_alpha[i];
    }
    csv << ',' << dominated[r] << '\n';
    out << (dominated[r].empty() ? "-" : dominated[r]) << '\n';
  }
  return 0;
}

}  // namespace excessmtl
