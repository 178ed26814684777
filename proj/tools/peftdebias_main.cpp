#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "peftdebias/checkpoint.hpp"
#include "peftdebias/config.hpp"
#include "peftdebias/metrics.hpp"
#include "peftdebias/pipeline.hpp"
#include "peftdebias/synthetic.hpp"

namespace fs = std::filesystem;
using namespace peftdebias;

namespace {

std::string fmt_opt(const std::optional<double>& v, int precision = 4) {
  if (!v.has_value()) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

void print_report(const MetricReport& r, const std::string& run_dir) {
  std::cout << "run: " << run_dir << (r.transfer ? "  (transfer)" : "") << "\n";
  std::cout << "seed: " << r.seed << "  config: " << r.config_hash << "\n";
  std::cout << std::left;
  const std::vector<std::pair<const char*, std::string>> rows = {
      {"SS LM", fmt_opt(r.ss_lm, 2)},        {"SS Score", fmt_opt(r.ss_score, 2)},
      {"CrowS", fmt_opt(r.crows, 2)},        {"ACC", fmt_opt(r.accuracy)},
      {"F1", fmt_opt(r.f1)},                 {"TPR-GAP", fmt_opt(r.tpr_gap_value)},
      {"FPRD", fmt_opt(r.fprd_value)},       {"FPRD_IPTTS", fmt_opt(r.fprd_iptts)},
      {"FN", fmt_opt(r.fn_neutral)},
  };
  for (const auto& [name, value] : rows)
    std::cout << "  " << std::setw(11) << name << " " << value << "\n";
  if (!r.tpr_by_occupation.empty()) {
    std::cout << "  per-occupation TPR gap:\n";
    for (const auto& [name, gap] : r.tpr_by_occupation)
      std::cout << "    " << std::setw(12) << name << " " << std::showpos << std::fixed
                << std::setprecision(4) << gap << std::noshowpos << "\n";
  }
  if (!r.fprd_by_identifier.empty()) {
    std::cout << "  per-identifier FPRD terms:\n";
    for (const auto& [name, term] : r.fprd_by_identifier)
      std::cout << "    " << std::setw(12) << name << " " << std::fixed << std::setprecision(4)
                << term << "\n";
  }
}

// ----------------------------------------------------------------------
// grid
// ----------------------------------------------------------------------

struct GridConfig {
  std::vector<std::string> suites;       // base config paths
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
  std::string transfer_source;           // base config path (optional)
  std::string transfer_target;
  std::vector<std::string> transfer_methods;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

GridConfig parse_grid_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read grid config: " + path);
  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](const std::string& p) {
    return fs::path(p).is_relative() ? (base / p).lexically_normal().string() : p;
  };
  GridConfig grid;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "suite")
      grid.suites.push_back(resolve(value));
    else if (key == "methods")
      grid.methods = split_list(value);
    else if (key == "seeds") {
      for (const auto& s : split_list(value)) grid.seeds.push_back(std::stoull(s));
    } else if (key == "jobs")
      grid.jobs = std::stoi(value);
    else if (key == "transfer.source")
      grid.transfer_source = resolve(value);
    else if (key == "transfer.target")
      grid.transfer_target = resolve(value);
    else if (key == "transfer.methods")
      grid.transfer_methods = split_list(value);
    else
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (grid.suites.empty()) throw std::runtime_error(path + ": needs at least one suite");
  if (grid.methods.empty())
    grid.methods = {"ft", "full_debias", "adapter", "prompt", "lora", "sft"};
  if (grid.seeds.empty()) grid.seeds = {13};
  return grid;
}

struct GridCell {
  std::string name;
  std::string suite;        // suite stem for reporting
  std::string method;
  std::uint64_t seed = 0;
  ExperimentConfig cfg;
  bool transfer = false;
  bool ok = false;
  std::string error;
  MetricReport report;
};

std::string suite_stem(const std::string& cfg_path) {
  return fs::path(cfg_path).parent_path().filename().string();
}

// Pre-trains one backbone per (suite, seed) so grid cells share their
// foundation model instead of re-running the seeded pre-training pass.
std::string ensure_init_checkpoint(const std::string& suite_cfg, std::uint64_t seed,
                                   const std::string& init_dir) {
  const ExperimentConfig cfg =
      parse_config(suite_cfg, {"seed=" + std::to_string(seed), "run_dir=" + init_dir});
  const std::string path =
      init_dir + "/" + suite_stem(suite_cfg) + "_seed" + std::to_string(seed) + ".ckpt";
  if (fs::exists(path)) return path;
  const Vocabulary vocab = Vocabulary::load(cfg.vocab_path);
  const TransformerParams backbone = init_foundation_model(cfg, vocab);
  save_model_checkpoint(path, backbone, Rng(seed));
  return path;
}

void run_cells(std::vector<GridCell>& cells, int jobs) {
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next == cells.size()) return;
        i = next++;
      }
      GridCell& cell = cells[i];
      try {
        const RunArtifacts artifacts = run_experiment(cell.cfg);
        cell.report = artifacts.report;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      {
        std::lock_guard<std::mutex> lock(mu);
        std::cout << (cell.ok ? "done " : "FAIL ") << cell.name;
        if (!cell.ok) std::cout << "  " << cell.error;
        std::cout << std::endl;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::max(1, jobs);
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

void write_summary(const std::vector<GridCell>& cells, const std::string& out_dir) {
  std::ofstream tsv(out_dir + "/summary.tsv");
  tsv << "suite\tmethod\tseed\ttransfer\tACC\tF1\tTPR-GAP\tFPRD\tFPRD_IPTTS\tFN\tSS LM\tSS "
         "Score\tCrowS\n";
  auto cell_fmt = [](const std::optional<double>& v) {
    return v.has_value() ? format_double(*v) : std::string("-");
  };
  for (const auto& c : cells) {
    if (!c.ok) continue;
    tsv << c.suite << "\t" << c.method << "\t" << c.seed << "\t" << (c.transfer ? 1 : 0) << "\t"
        << cell_fmt(c.report.accuracy) << "\t" << cell_fmt(c.report.f1) << "\t"
        << cell_fmt(c.report.tpr_gap_value) << "\t" << cell_fmt(c.report.fprd_value) << "\t"
        << cell_fmt(c.report.fprd_iptts) << "\t" << cell_fmt(c.report.fn_neutral) << "\t"
        << cell_fmt(c.report.ss_lm) << "\t" << cell_fmt(c.report.ss_score) << "\t"
        << cell_fmt(c.report.crows) << "\n";
  }

  // per-occupation TPR-GAP rows for plotting
  std::ofstream occ(out_dir + "/tpr_gap_by_occupation.tsv");
  occ << "suite\tmethod\tseed\toccupation\ttpr_gap\n";
  for (const auto& c : cells) {
    if (!c.ok) continue;
    for (const auto& [name, gap] : c.report.tpr_by_occupation)
      occ << c.suite << "\t" << c.method << "\t" << c.seed << "\t" << name << "\t"
          << format_double(gap) << "\n";
  }
}

void print_grid_table(const std::vector<GridCell>& cells) {
  // seed-averaged table per (suite, transfer, method), one row per method
  struct Agg {
    int n = 0;
    std::map<std::string, double> sums;
  };
  std::map<std::string, std::map<std::string, Agg>> groups;  // group -> method -> agg
  for (const auto& c : cells) {
    if (!c.ok) continue;
    const std::string group = c.suite + (c.transfer ? " (transfer)" : "");
    Agg& agg = groups[group][c.method];
    ++agg.n;
    auto add = [&](const char* key, const std::optional<double>& v) {
      if (v.has_value()) agg.sums[key] += *v;
    };
    add("ACC", c.report.accuracy);
    add("F1", c.report.f1);
    add("TPR-GAP", c.report.tpr_gap_value);
    add("FPRD", c.report.fprd_value);
    add("FPRD_IPTTS", c.report.fprd_iptts);
    add("FN", c.report.fn_neutral);
  };
  for (const auto& [group, methods] : groups) {
    std::cout << "\n== " << group << " (seed means) ==\n";
    std::cout << std::left << std::setw(13) << "method";
    const std::vector<const char*> cols = {"ACC", "F1", "TPR-GAP", "FPRD", "FPRD_IPTTS", "FN"};
    for (const char* col : cols) std::cout << std::setw(12) << col;
    std::cout << "\n";
    for (const auto& [method, agg] : methods) {
      std::cout << std::setw(13) << method;
      for (const char* col : cols) {
        const auto it = agg.sums.find(col);
        if (it == agg.sums.end())
          std::cout << std::setw(12) << "-";
        else
          std::cout << std::setw(12) << std::fixed << std::setprecision(4)
                    << it->second / agg.n;
      }
      std::cout << "\n";
    }
  }
}

int cmd_grid(const std::string& config_path, int jobs_override) {
  const GridConfig grid = parse_grid_config(config_path);
  const int jobs = jobs_override > 0 ? jobs_override : grid.jobs;
  const std::string out_dir =
      (fs::absolute(config_path).parent_path() / "grid_runs").string();
  fs::create_directories(out_dir);
  const std::string init_dir = out_dir + "/init";
  fs::create_directories(init_dir);

  // shared foundation models per (suite, seed)
  std::map<std::string, std::string> init_ckpts;
  std::vector<std::string> all_suites = grid.suites;
  if (!grid.transfer_target.empty()) all_suites.push_back(grid.transfer_target);
  for (const auto& suite : all_suites)
    for (std::uint64_t seed : grid.seeds) {
      const std::string key = suite + "#" + std::to_string(seed);
      init_ckpts[key] = ensure_init_checkpoint(suite, seed, init_dir);
      std::cout << "init " << suite_stem(suite) << " seed " << seed << "\n";
    }

  auto make_cell = [&](const std::string& suite, const std::string& method, std::uint64_t seed,
                       const std::vector<std::string>& extra) {
    GridCell cell;
    cell.suite = suite_stem(suite);
    cell.method = method;
    cell.seed = seed;
    cell.transfer = false;
    cell.name = cell.suite + "-" + method + "-s" + std::to_string(seed);
    std::vector<std::string> overrides = {
        "peft.kind=" + method, "seed=" + std::to_string(seed),
        "run_dir=" + out_dir + "/" + cell.name,
        "model.init_checkpoint=" + init_ckpts.at(suite + "#" + std::to_string(seed))};
    overrides.insert(overrides.end(), extra.begin(), extra.end());
    cell.cfg = parse_config(suite, overrides);
    return cell;
  };

  std::vector<GridCell> cells;
  for (const auto& suite : grid.suites)
    for (const auto& method : grid.methods)
      for (std::uint64_t seed : grid.seeds) cells.push_back(make_cell(suite, method, seed, {}));
  run_cells(cells, jobs);

  // transfer stage depends on the source cells' upstream checkpoints
  std::vector<GridCell> transfer_cells;
  if (!grid.transfer_target.empty() && !grid.transfer_source.empty()) {
    for (std::uint64_t seed : grid.seeds) {
      transfer_cells.push_back(make_cell(grid.transfer_target, "ft", seed, {}));
      for (const auto& method : grid.transfer_methods) {
        const std::string src_run = out_dir + "/" + suite_stem(grid.transfer_source) + "-" +
                                    method + "-s" + std::to_string(seed);
        GridCell cell = make_cell(grid.transfer_target, method, seed,
                                  {"transfer.peft_checkpoint=" + src_run + "/upstream.ckpt"});
        cell.transfer = true;
        cell.name += "-transfer";
        cell.cfg.run_dir += "-transfer";
        transfer_cells.push_back(std::move(cell));
      }
    }
    run_cells(transfer_cells, jobs);
    cells.insert(cells.end(), transfer_cells.begin(), transfer_cells.end());
  }

  write_summary(cells, out_dir);
  print_grid_table(cells);
  std::cout << "\nsummary written to " << out_dir << "/summary.tsv\n";

  for (const auto& c : cells)
    if (!c.ok) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"axis-specific debiasing of a small masked language model via "
               "parameter-efficient fine-tuning, with intrinsic and extrinsic bias metrics"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config,-c", config_path, "experiment config file")->required();
    cmd->add_option("--set,-O", overrides, "config override key=value (repeatable)");
  };

  auto* prepare = app.add_subcommand("prepare-data", "generate the synthetic task suites");
  std::string out_dir = "suites";
  std::uint64_t data_seed = 0;
  prepare->add_option("--out,-o", out_dir, "output directory")->capture_default_str();
  prepare->add_option("--seed", data_seed, "generator seed")->capture_default_str();

  auto* train_up = app.add_subcommand("train-upstream", "run the upstream debiasing stage");
  add_common(train_up);
  auto* train_down =
      app.add_subcommand("train-downstream", "fine-tune on the task with the PEFT frozen");
  add_common(train_down);
  auto* transfer = app.add_subcommand("transfer", "downstream run with a transferred PEFT");
  add_common(transfer);
  std::string transfer_peft;
  transfer->add_option("--peft", transfer_peft, "PEFT checkpoint trained on another corpus");
  auto* evaluate = app.add_subcommand("evaluate", "recompute metrics from saved checkpoints");
  add_common(evaluate);

  auto* report_cmd = app.add_subcommand("report", "print the metric report of a run directory");
  std::string run_dir;
  report_cmd->add_option("run_dir", run_dir, "run directory containing report.json")->required();

  auto* grid = app.add_subcommand("grid", "run the full method/seed matrix and summarize");
  std::string grid_config;
  int jobs = 0;
  grid->add_option("--config,-c", grid_config, "grid config file")->required();
  grid->add_option("--jobs,-j", jobs, "concurrent cells (default from the grid config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2, help exits 0
  }

  try {
    if (prepare->parsed()) {
      SyntheticOptions opts;
      opts.seed = data_seed;
      write_synthetic_suites(out_dir, opts);
      std::cout << "suites written to " << out_dir << "\n";
      return 0;
    }
    if (train_up->parsed()) {
      const ExperimentConfig cfg = parse_config(config_path, overrides);
      RunOptions options;
      options.downstream = false;
      const RunArtifacts artifacts = run_experiment(cfg, options);
      std::cout << "upstream stage complete\n";
      print_report(artifacts.report, artifacts.run_dir);
      return 0;
    }
    if (train_down->parsed()) {
      const ExperimentConfig cfg = parse_config(config_path, overrides);
      RunOptions options;
      options.reuse_upstream = true;
      const RunArtifacts artifacts = run_experiment(cfg, options);
      print_report(artifacts.report, artifacts.run_dir);
      return 0;
    }
    if (transfer->parsed()) {
      if (!transfer_peft.empty()) overrides.push_back("transfer.peft_checkpoint=" + transfer_peft);
      const ExperimentConfig cfg = parse_config(config_path, overrides);
      const RunArtifacts artifacts = transfer_run(cfg);
      print_report(artifacts.report, artifacts.run_dir);
      return 0;
    }
    if (evaluate->parsed()) {
      const ExperimentConfig cfg = parse_config(config_path, overrides);
      RunOptions options;
      options.reuse_upstream = true;
      options.reuse_downstream = true;
      const RunArtifacts artifacts = run_experiment(cfg, options);
      print_report(artifacts.report, artifacts.run_dir);
      return 0;
    }
    if (report_cmd->parsed()) {
      const MetricReport r = load_report(
          (fs::path(run_dir) / "report.json").string());
      print_report(r, run_dir);
      return 0;
    }
    if (grid->parsed()) return cmd_grid(grid_config, jobs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
