// SPDX-License-Identifier: Apache-2.0
//
// loraserve: desk-scale serving runtime for low-rank-adapted models.
//
// Subcommands:
//   tune          offline tiling search; writes the shape-keyed config table
//   gen-workload  synthesize a request trace CSV
//   bench         run the serving loop on a trace and emit metrics files
//   fuse          accuracy-aware knowledge packing into adapters
//   verify        run the invariant suite and report pass/fail per property
//
// Exit codes: 0 success, 1 usage, 2 verification/constraint failure, 3 I/O.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "loraserve/atmm.hpp"
#include "loraserve/fusion.hpp"
#include "loraserve/model.hpp"
#include "loraserve/model_io.hpp"
#include "loraserve/serving.hpp"
#include "loraserve/verify.hpp"
#include "loraserve/workload.hpp"

namespace fs = std::filesystem;
using namespace loraserve;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitIo = 3;

std::vector<GemmShape> parse_shapes(const std::vector<std::string>& specs) {
  std::vector<GemmShape> shapes;
  for (const std::string& s : specs) {
    GemmShape shape;
    if (std::sscanf(s.c_str(), "%zux%zux%zu", &shape.m, &shape.k, &shape.n) != 3 ||
        shape.m == 0 || shape.k == 0 || shape.n == 0) {
      throw ConfigError("bad shape '" + s + "', expected MxKxN");
    }
    shapes.push_back(shape);
  }
  return shapes;
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    out.push_back(std::stoul(cell));
  }
  if (out.empty()) throw ConfigError("empty size list");
  return out;
}

AppProfile profile_by_name(const std::string& name) {
  if (name == "vqa") return vqa_profile();
  if (name == "video") return video_profile();
  if (name == "micro") return micro_profile();
  throw ConfigError("unknown profile '" + name + "' (vqa, video, micro)");
}

// name=weight[,name=weight...]
std::vector<std::pair<AppProfile, double>> parse_mix(const std::string& spec) {
  std::vector<std::pair<AppProfile, double>> mix;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      mix.emplace_back(profile_by_name(item), 1.0);
    } else {
      mix.emplace_back(profile_by_name(item.substr(0, eq)),
                       std::stod(item.substr(eq + 1)));
    }
  }
  if (mix.empty()) throw ConfigError("empty profile mix");
  return mix;
}

nlohmann::json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad json in " + path.string() + ": " + e.what());
  }
  return j;
}

int cmd_tune(const std::string& out_path, std::size_t dim,
             const std::vector<std::string>& shape_specs,
             const std::string& candidate_mode, std::size_t budget_bytes,
             int trials, const std::string& ranks_csv) {
  std::vector<GemmShape> grid;
  if (!shape_specs.empty()) {
    grid = parse_shapes(shape_specs);
  } else {
    grid = default_shape_grid(dim, parse_sizes(ranks_csv));
  }
  std::vector<TilingConfig> candidates =
      candidate_mode == "full" ? candidate_configs(budget_bytes, sizeof(float))
                               : default_candidates(budget_bytes, sizeof(float));

  std::printf("tuning %zu shapes x %zu candidates, %d trials each\n", grid.size(),
              candidates.size(), trials);
  std::vector<std::string> failures;
  TilingTable table = tiling_search(grid, candidates, trials, &failures);
  for (const std::string& f : failures) {
    std::fprintf(stderr, "warning: %s\n", f.c_str());
  }
  for (const auto& [key, entry] : table.entries()) {
    std::printf("  m<=%-5d k=%-5d n=%-5d -> %s  (%.3f ms)\n", key.m_bucket, key.k,
                key.n, entry.config.to_string().c_str(),
                double(entry.measured_ns) / 1e6);
  }
  std::printf("default: %s\n", table.default_config().to_string().c_str());
  table.save(out_path);
  std::printf("wrote %s (%zu entries)\n", out_path.c_str(), table.size());
  return kExitOk;
}

int cmd_gen_workload(const std::string& out_path, double duration_s, double rate,
                     const std::string& arrival, int num_adapters, double skew,
                     const std::string& mix_spec, double budget_ms,
                     std::uint64_t seed) {
  WorkloadSpec spec;
  spec.duration_ms = duration_s * 1000.0;
  spec.rate_rps = rate;
  spec.arrival =
      arrival == "uniform" ? ArrivalProcess::Uniform : ArrivalProcess::Poisson;
  if (arrival != "uniform" && arrival != "poisson") {
    throw ConfigError("arrival must be poisson or uniform");
  }
  spec.num_adapters = num_adapters;
  spec.skewness = skew;
  spec.mix = parse_mix(mix_spec);
  if (budget_ms > 0) {
    for (auto& [p, w] : spec.mix) p.budget_ms = budget_ms;
  }
  spec.seed = seed;
  auto trace = generate(spec);
  save_trace(trace, out_path);
  std::printf("wrote %s (%zu requests)\n", out_path.c_str(), trace.size());
  return kExitOk;
}

struct BenchArgs {
  std::string table_path;
  std::string trace_path;
  std::string model_dir;
  std::string out_dir = "results";
  std::string mode = "auto";
  std::size_t layers = 4, dim = 256, vocab = 1024;
  std::string ranks_csv = "8,16,64";
  int num_adapters = 4;
  int max_bs = 8;
  int cache_capacity = 0;
  double load_ms = 0.0;
  std::uint64_t seed = 7;
};

int cmd_bench(const BenchArgs& args) {
  TilingTable table = args.table_path.empty()
                          ? TilingTable{}
                          : TilingTable::load(args.table_path);
  std::vector<Request> trace = load_trace(args.trace_path);

  std::optional<BaseModel> model;
  AdapterSet adapters;
  if (!args.model_dir.empty()) {
    ModelFixture fixture = load_model_fixture(args.model_dir);
    model.emplace(std::move(fixture.model));
    adapters = std::move(fixture.adapters);
  } else {
    model.emplace(BaseModel::random(args.layers, args.dim, args.vocab, args.seed));
    const std::vector<std::size_t> ranks = parse_sizes(args.ranks_csv);
    for (int id = 0; id < args.num_adapters; ++id) {
      adapters.emplace(
          id, LoraAdapter::random(id, args.layers, args.dim,
                                  ranks[id % ranks.size()], args.seed + 100 + id,
                                  args.vocab >= 16 ? std::optional<std::size_t>(16)
                                                   : std::nullopt));
    }
  }

  ServeConfig config;
  config.max_bs = args.max_bs;
  config.adapter_cache_capacity = args.cache_capacity;
  config.adapter_load_ms = args.load_ms;
  config.seed = args.seed;
  if (args.mode == "merged") {
    config.forced_mode = InferMode::Merged;
  } else if (args.mode == "unmerged") {
    config.forced_mode = InferMode::Unmerged;
  } else if (args.mode == "mixture") {
    config.forced_mode = InferMode::Mixture;
  } else if (args.mode != "auto") {
    throw ConfigError("mode must be auto, merged, unmerged, or mixture");
  }

  Metrics metrics = serve_loop(*model, adapters, trace, config, table);

  fs::create_directories(args.out_dir);
  write_request_csv(metrics, fs::path(args.out_dir) / "requests.csv");
  write_summary_json(metrics, fs::path(args.out_dir) / "summary.json");

  std::printf("completed %zu requests, %d unserved\n", metrics.per_request.size(),
              metrics.unserved);
  std::printf("avg_token_latency_ms: %.4f\n", metrics.avg_token_latency_ms);
  std::printf("throughput_rps:       %.3f\n", metrics.throughput_rps);
  std::printf("switches: %d (%.3f ms total)\n", metrics.switches,
              metrics.switch_time_ms);
  std::printf("mode occupancy: unmerged %.2f merged %.2f mixture %.2f\n",
              metrics.mode_occupancy[0], metrics.mode_occupancy[1],
              metrics.mode_occupancy[2]);
  std::printf("budget violations: %d\n", metrics.budget_violations);
  std::printf("wrote %s/requests.csv and %s/summary.json\n", args.out_dir.c_str(),
              args.out_dir.c_str());
  return kExitOk;
}

int cmd_fuse(const std::string& sources_path, const std::string& out_path,
             std::uint64_t seed) {
  nlohmann::json spec = load_json_file(sources_path);
  std::vector<KnowledgeSource> sources = load_sources_spec(spec);
  if (!spec.contains("oracle")) {
    throw ConfigError("sources spec needs an 'oracle' object");
  }
  auto oracle = synthetic_oracle(spec.at("oracle"), sources);

  FusionPlan plan;
  try {
    plan = fuse(sources, *oracle, seed);
  } catch (const UnsatisfiableSourceError& e) {
    std::fprintf(stderr, "unsatisfiable source: %s\n", e.what());
    return kExitVerify;
  }
  ValidationReport report = validate_plan(plan, sources, *oracle);

  plan.save(out_path);
  std::printf("%zu adapters for %zu sources\n", plan.adapters.size(),
              sources.size());
  for (std::size_t i = 0; i < plan.adapters.size(); ++i) {
    const PlanAdapter& a = plan.adapters[i];
    std::printf("  adapter %zu: %zu sources%s\n", i, a.source_ids.size(),
                a.has_task_head ? " [task head]" : "");
    for (const auto& [task, acc] : a.task_accuracy) {
      std::printf("    %-20s %.4f\n", task.c_str(), acc);
    }
  }
  if (!report.ok()) {
    std::fprintf(stderr, "validation found %zu violations\n",
                 report.violations.size());
    return kExitVerify;
  }
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

int cmd_verify(bool quick, std::uint64_t seed, const std::string& fault,
               const std::string& report_path) {
  VerifyOptions opt;
  opt.quick = quick;
  opt.seed = seed;
  opt.inject_fault = fault;
  std::vector<CheckResult> results = run_verification(opt);
  bool all_pass = true;
  for (const CheckResult& r : results) {
    std::printf("%-18s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write " + report_path);
    out << verification_json(results).dump(2) << "\n";
  }
  return all_pass ? kExitOk : kExitVerify;
}

// Optional JSON config file: supplies values for flags the user did not pass
// on the command line; explicit flags always win.
void apply_config_defaults(CLI::App* cmd, const std::string& config_path) {
  if (config_path.empty()) return;
  nlohmann::json j = load_json_file(config_path);
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr || opt->count() > 0) continue;
    std::string text =
        value.is_string() ? value.get<std::string>() : value.dump();
    opt->add_result(text);
    opt->run_callback();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale serving runtime for low-rank-adapted models"};
  app.require_subcommand(1);

  // tune
  auto* tune = app.add_subcommand("tune", "offline tiling search");
  std::string tune_out = "tiling_table.json";
  std::size_t tune_dim = 256;
  std::vector<std::string> tune_shapes;
  std::string tune_candidates = "default";
  std::size_t tune_budget = 1 << 20;
  int tune_trials = 5;
  std::string tune_ranks = "16,32,64,128";
  tune->add_option("--out", tune_out, "output table path");
  tune->add_option("--dim", tune_dim, "model hidden dimension for the grid");
  tune->add_option("--shapes", tune_shapes, "explicit MxKxN shapes");
  tune->add_option("--candidates", tune_candidates, "default | full");
  tune->add_option("--budget-bytes", tune_budget, "cache budget for tiles");
  tune->add_option("--trials", tune_trials, "benchmark trials per point");
  tune->add_option("--ranks", tune_ranks, "rank list for the default grid");

  // gen-workload
  auto* gen = app.add_subcommand("gen-workload", "synthesize a request trace");
  std::string gen_out = "trace.csv";
  double gen_duration = 10.0, gen_rate = 5.0, gen_skew = 0.5, gen_budget = 0.0;
  std::string gen_arrival = "poisson", gen_mix = "micro";
  int gen_adapters = 4;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output trace path");
  gen->add_option("--duration-s", gen_duration, "trace duration in seconds");
  gen->add_option("--rate", gen_rate, "mean requests per second");
  gen->add_option("--arrival", gen_arrival, "poisson | uniform");
  gen->add_option("--num-adapters", gen_adapters, "adapter count");
  gen->add_option("--skew", gen_skew, "hot-adapter share in (0,1]");
  gen->add_option("--profile", gen_mix, "profile mix, e.g. vqa=0.5,video=0.5");
  gen->add_option("--budget-ms", gen_budget, "latency budget for all requests");
  gen->add_option("--seed", gen_seed, "rng seed");

  // bench
  auto* bench = app.add_subcommand("bench", "run the serving loop on a trace");
  BenchArgs ba;
  std::string bench_config;
  bench->add_option("--tiling-table", ba.table_path, "tiling table path");
  bench->add_option("--trace", ba.trace_path, "input trace CSV")->required();
  bench->add_option("--model-dir", ba.model_dir, "model fixture directory");
  bench->add_option("--out-dir", ba.out_dir, "metrics output directory");
  bench->add_option("--mode", ba.mode, "auto | merged | unmerged | mixture");
  bench->add_option("--layers", ba.layers, "model layers");
  bench->add_option("--dim", ba.dim, "hidden dimension");
  bench->add_option("--vocab", ba.vocab, "vocabulary size");
  bench->add_option("--ranks", ba.ranks_csv, "adapter ranks, round-robin");
  bench->add_option("--num-adapters", ba.num_adapters, "adapter count");
  bench->add_option("--max-bs", ba.max_bs, "batch row budget");
  bench->add_option("--cache-capacity", ba.cache_capacity,
                    "adapter cache slots (0 = unlimited)");
  bench->add_option("--load-ms", ba.load_ms, "adapter load charge on miss");
  bench->add_option("--seed", ba.seed, "rng seed");
  bench->add_option("--config", bench_config, "JSON config file (flags win)");

  // fuse
  auto* fusec = app.add_subcommand("fuse", "accuracy-aware knowledge packing");
  std::string fuse_sources, fuse_out = "plan.json";
  std::uint64_t fuse_seed = 1;
  fusec->add_option("--sources", fuse_sources, "sources spec JSON")->required();
  fusec->add_option("--out", fuse_out, "output plan path");
  fusec->add_option("--seed", fuse_seed, "rng seed");

  // verify
  auto* verify = app.add_subcommand("verify", "run the invariant suite");
  bool verify_quick = false;
  std::uint64_t verify_seed = 42;
  std::string verify_fault, verify_report;
  verify->add_flag("--quick", verify_quick, "smaller instance sizes");
  verify->add_option("--seed", verify_seed, "rng seed");
  verify->add_option("--inject-fault", verify_fault,
                     "perturb a named check (testing the verifier)");
  verify->add_option("--report", verify_report, "write JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (tune->parsed()) {
      return cmd_tune(tune_out, tune_dim, tune_shapes, tune_candidates,
                      tune_budget, tune_trials, tune_ranks);
    }
    if (gen->parsed()) {
      return cmd_gen_workload(gen_out, gen_duration, gen_rate, gen_arrival,
                              gen_adapters, gen_skew, gen_mix, gen_budget,
                              gen_seed);
    }
    if (bench->parsed()) {
      apply_config_defaults(bench, bench_config);
      return cmd_bench(ba);
    }
    if (fusec->parsed()) {
      return cmd_fuse(fuse_sources, fuse_out, fuse_seed);
    }
    if (verify->parsed()) {
      return cmd_verify(verify_quick, verify_seed, verify_fault, verify_report);
    }
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return kExitIo;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
