#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "excessmtl/cli.hpp"

using namespace excessmtl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "excessmtl_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json minimal_config(const fs::path& out_dir) {
  return {
      {"dataset",
       {{"kind", "synthetic_classification"},
        {"num_tasks", 2},
        {"classes", 3},
        {"dim", 8},
        {"n", 150},
        {"separation", 4.0},
        {"seed", 3}}},
      {"model", {{"trunk_layers", {6}}}},
      {"noise", json::array({{{"task", 1}, {"kind", "symmetric_flip"}, {"level", 0.3}, {"seed", 9}}})},
      {"train",
       {{"strategy", "excess_mtl"},
        {"eta_theta", 0.05},
        {"eta_alpha", 0.5},
        {"epochs", 3},
        {"batch_size", 20},
        {"seed", 11},
        {"warmup_epochs", 1}}},
      {"output", {{"directory", out_dir.string()}}}};
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t data_rows(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) rows += !line.empty();
  return rows - 1;
}

std::string config_error(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

int run_binary(const std::string& args) {
  const int status = std::system((std::string(EXCESSMTL_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing is strict") {
  const json base = minimal_config("out");
  CHECK_NOTHROW(parse_config(base));

  json j = base;
  j["train"].erase("eta_theta");
  CHECK(config_error(j).find("train.eta_theta") != std::string::npos);

  j = base;
  j["train"].erase("seed");
  CHECK(config_error(j).find("train.seed") != std::string::npos);

  j = base;
  j["dataset"]["bogus"] = 1;
  CHECK(config_error(j).find("dataset.bogus") != std::string::npos);

  j = base;
  j["train"]["epochs"] = -2;
  CHECK(config_error(j).find("train.epochs") != std::string::npos);

  j = base;
  j["noise"][0]["task"] = 4;
  CHECK(config_error(j).find("noise[0].task") != std::string::npos);

  j = base;
  j["train"]["strategy"] = "gradnorm";
  CHECK_FALSE(config_error(j).empty());

  j = base;
  j["output"]["formats"] = {"parquet"};
  CHECK_FALSE(config_error(j).empty());
}

TEST_CASE("resolved config spells out every default") {
  const auto cfg = parse_config(minimal_config("out"));
  const json resolved = to_json(cfg);
  CHECK(resolved["train"]["weight_decay"] == 0.0);
  CHECK(resolved["train"]["eta_decay"] == false);
  CHECK(resolved["train"]["relative_excess"] == true);
  CHECK(resolved["dataset"]["standardize"] == true);
  CHECK(resolved["output"]["formats"] == json({"csv", "jsonl"}));
  CHECK(to_json(parse_config(resolved)) == resolved);
}

TEST_CASE("run writes its outputs and reproduces itself") {
  const fs::path dir = scratch("run");
  const fs::path out = dir / "result";
  const fs::path config = write_config(dir, minimal_config(out));
  std::ostringstream o, e;
  REQUIRE(cmd_run(config, o, e) == 0);
  for (const char* f : {"metrics.csv", "metrics.jsonl", "summary.json", "config.resolved.json"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  const json summary = read_json(out / "summary.json");
  CHECK(summary["final_test_metric"].size() == 2);
  CHECK(summary["final_alpha"][0].get<double>() + summary["final_alpha"][1].get<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(summary["noisy_tasks"] == json({1}));
  CHECK(summary["metric_kinds"] == json({"accuracy", "accuracy"}));
  // 120 train rows in batches of 20 over three epochs.
  CHECK(summary["steps"] == 18);
  CHECK(data_rows(out / "metrics.csv") == 18);

  std::ifstream jsonl(out / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(jsonl, line)) {
    CHECK(json::parse(line)["alpha"].size() == 2);
    ++lines;
  }
  CHECK(lines == 18);

  const std::string csv = slurp(out / "metrics.csv");
  const std::string jl = slurp(out / "metrics.jsonl");
  REQUIRE(cmd_run(config, o, e) == 0);
  CHECK(slurp(out / "metrics.csv") == csv);
  CHECK(slurp(out / "metrics.jsonl") == jl);

  // The resolved copy alone reproduces the run.
  const fs::path resolved = dir / "resolved.json";
  fs::copy_file(out / "config.resolved.json", resolved);
  fs::remove_all(out);
  REQUIRE(cmd_run(resolved, o, e) == 0);
  CHECK(slurp(out / "metrics.csv") == csv);
}

TEST_CASE("run error paths") {
  const fs::path dir = scratch("errors");
  std::ostringstream o, e;
  CHECK(cmd_run(dir / "absent.json", o, e) == 2);
  CHECK(e.str().find("absent.json") != std::string::npos);

  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(cmd_run(dir / "broken.json", o, e) == 2);

  json j = minimal_config(dir / "out");
  j["train"]["eta_theta"] = 1e12;
  j["train"]["epochs"] = 40;
  std::ostringstream e3;
  CHECK(cmd_run(write_config(dir, j, "diverge.json"), o, e3) == 3);
  CHECK(e3.str().find("task") != std::string::npos);
}

TEST_CASE("relative output directories honour the output root") {
  const fs::path root = scratch("root");
  const fs::path dir = scratch("relative");
  ::setenv(kOutputRootEnv, root.c_str(), 1);
  std::ostringstream o, e;
  const int code = cmd_run(write_config(dir, minimal_config("nested/run")), o, e);
  ::unsetenv(kOutputRootEnv);
  REQUIRE(code == 0);
  CHECK(fs::exists(root / "nested" / "run" / "summary.json"));
  CHECK(resolve_output_dir("/abs/path") == fs::path("/abs/path"));
}

TEST_CASE("sweep") {
  const fs::path dir = scratch("sweep");
  json j = minimal_config(dir / "cells");
  j["train"]["epochs"] = 2;
  const fs::path config = write_config(dir, j);
  std::ostringstream o, e;

  SUBCASE("one cell") {
    REQUIRE(cmd_sweep(config, {0.2}, {"uniform"}, o, e) == 0);
    CHECK(data_rows(dir / "cells" / "sweep.csv") == 1);
    CHECK(fs::exists(dir / "cells" / "uniform_noise0.2" / "summary.json"));
  }
  SUBCASE("grid") {
    REQUIRE(cmd_sweep(config, {0, 0.4, 0.8}, {"excess_mtl", "uniform", "groupdro", "mgda"}, o, e) == 0);
    CHECK(data_rows(dir / "cells" / "sweep.csv") == 12);
    CHECK(slurp(dir / "cells" / "sweep.csv").rfind(
              "strategy,noise_level,clean_task_metric_mean,noisy_task_metric,final_clean_weight_sum\n", 0) == 0);

    // Level 0 against an independent noise-free run with the derived seed.
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : std::string("groupdro|0")) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    CHECK(sweep_cell_seed(11, "groupdro", 0.0) == (11 ^ h));
    json clean = j;
    clean.erase("noise");
    clean["train"]["strategy"] = "groupdro";
    clean["train"]["seed"] = 11 ^ h;
    clean["output"]["directory"] = (dir / "clean").string();
    REQUIRE(cmd_run(write_config(dir, clean, "clean.json"), o, e) == 0);
    const json summary = read_json(dir / "clean" / "summary.json");

    std::ifstream csv(dir / "cells" / "sweep.csv");
    std::string line;
    bool found = false;
    while (std::getline(csv, line)) {
      if (line.rfind("groupdro,0,", 0) != 0) continue;
      found = true;
      std::stringstream cells(line);
      std::string s, level, clean_metric, noisy_metric, weight;
      std::getline(cells, s, ',');
      std::getline(cells, level, ',');
      std::getline(cells, clean_metric, ',');
      std::getline(cells, noisy_metric, ',');
      std::getline(cells, weight, ',');
      CHECK(std::stod(clean_metric) == summary["final_test_metric"][0].get<double>());
      CHECK(std::stod(noisy_metric) == summary["final_test_metric"][1].get<double>());
      CHECK(std::stod(weight) == summary["final_alpha"][0].get<double>());
    }
    CHECK(found);
  }
  SUBCASE("bad inputs") {
    CHECK(cmd_sweep(config, {1.5}, {"uniform"}, o, e) == 2);
    CHECK(cmd_sweep(config, {0.1}, {"nope"}, o, e) == 2);
    json quiet = j;
    quiet.erase("noise");
    CHECK(cmd_sweep(write_config(dir, quiet, "quiet.json"), {0.1}, {"uniform"}, o, e) == 2);
  }
  SUBCASE("failed cells are recorded and the rest continue") {
    json wild = j;
    wild["train"]["eta_theta"] = 1e12;
    wild["train"]["epochs"] = 40;
    const fs::path wild_config = write_config(dir, wild, "wild.json");
    CHECK(cmd_sweep(wild_config, {0.1, 0.2}, {"uniform"}, o, e) == 1);
    CHECK(data_rows(dir / "cells" / "sweep_failures.csv") == 2);
    CHECK(data_rows(dir / "cells" / "sweep.csv") == 0);
  }
}

TEST_CASE("compare") {
  const fs::path dir = scratch("compare");
  auto write_summary = [&](const std::string& name, std::vector<double> loss) {
    RunSummary s;
    s.strategy = name;
    s.metric_kinds = {"accuracy", "accuracy"};
    s.final_test_metric = {0.9, 0.8};
    s.final_train_loss = std::move(loss);
    s.final_alpha = {0.5, 0.5};
    fs::create_directories(dir / name);
    std::ofstream(dir / name / "summary.json") << to_json(s).dump();
    return dir / name;
  };
  const auto a = write_summary("good", {0.1, 0.2});
  const auto b = write_summary("worse", {0.3, 0.2});
  const auto c = write_summary("other", {0.05, 0.5});
  std::ostringstream o, e;
  REQUIRE(cmd_compare({a, b, c}, dir / "compare.csv", o, e) == 0);
  const std::string csv = slurp(dir / "compare.csv");
  CHECK(csv.find("good,good,0.9,0.1,0.5,0.8,0.2,0.5,worse\n") != std::string::npos);
  CHECK(csv.find("worse,worse,0.9,0.3,0.5,0.8,0.2,0.5,\n") != std::string::npos);
  CHECK(csv.find("other,other,0.9,0.05,0.5,0.8,0.5,0.5,\n") != std::string::npos);
  CHECK(o.str().find("good") != std::string::npos);

  fs::create_directories(dir / "bad");
  std::ofstream(dir / "bad" / "summary.json") << R"({"strategy": "uniform"})";
  CHECK(cmd_compare({a, dir / "bad"}, dir / "c2.csv", o, e) == 2);
  std::ofstream(dir / "bad" / "summary.json") << "garbage";
  CHECK(cmd_compare({a, dir / "bad"}, dir / "c2.csv", o, e) == 2);
  CHECK(cmd_compare({a, dir / "missing"}, dir / "c2.csv", o, e) == 2);
}

TEST_CASE("command-line binary") {
  const fs::path dir = scratch("binary");
  const fs::path config = write_config(dir, minimal_config(dir / "out"));
  CHECK(run_binary("run " + config.string()) == 0);
  CHECK(fs::exists(dir / "out" / "summary.json"));
  CHECK(run_binary("run " + (dir / "missing.json").string()) == 2);
  CHECK(run_binary("frobnicate") == 2);
  CHECK(run_binary("sweep " + config.string()) == 2);
  CHECK(run_binary("sweep " + config.string() + " --noise-levels 0,0.5 --strategies uniform,mgda") == 0);
  CHECK(data_rows(dir / "out" / "sweep.csv") == 4);
  CHECK(run_binary("compare " + (dir / "out" / "uniform_noise0").string() + " " +
                   (dir / "out" / "mgda_noise0.5").string() + " --out " + (dir / "cmp.csv").string()) == 0);
  CHECK(data_rows(dir / "cmp.csv") == 2);
}
