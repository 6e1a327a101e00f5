#pragma once

// Command wiring: run (one task), eval (whole corpus), stats (report
// aggregation). Resolution failure is not process failure; nonzero exit
// codes are reserved for configuration and environment problems.

#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patchforge/config.hpp"
#include "patchforge/evalkit.hpp"
#include "patchforge/gateway.hpp"
#include "patchforge/orchestrator.hpp"

namespace patchforge {

namespace detail {

inline std::unique_ptr<ChatBackend> make_backend(const CliConfig& cfg,
                                                 const CorpusManifest& corpus) {
  if (cfg.backend == "scripted") {
    auto backend = std::make_unique<ScriptedBackend>();
    bool any = false;
    if (!cfg.script.empty()) {
      *backend = ScriptedBackend::from_file(cfg.script);
      any = true;
    }
    for (const auto& entry : corpus.entries) {
      if (entry.script.empty()) continue;
      backend->load_file_for_task(entry.task.task_id(), entry.script);
      any = true;
    }
    if (!any)
      throw ConfigError("scripted backend needs --script or per-task script files");
    return backend;
  }
  if (cfg.backend == "live") {
    HttpBackendConfig http;
    http.endpoint = cfg.endpoint;
    http.model = cfg.model;
    http.api_key = cfg.api_key;
    http.retry_limit = cfg.retry_limit;
    http.request_timeout_s = cfg.exec_timeout_s;
    return std::make_unique<HttpBackend>(http);
  }
  throw ConfigError("config key 'backend' must be 'scripted' or 'live', got '" + cfg.backend +
                    "'");
}

inline void print_tool_table(std::ostream& out, const ToolTelemetry& tools, size_t task_count) {
  out << "tool          avg_calls/task  failure_rate\n";
  for (const auto& schema : tool_registry()) {
    ToolTelemetry::Counter c;
    if (auto it = tools.per_tool.find(schema.name); it != tools.per_tool.end()) c = it->second;
    double avg = task_count ? static_cast<double>(c.calls) / static_cast<double>(task_count) : 0.0;
    char line[128];
    if (c.calls == 0)
      std::snprintf(line, sizeof(line), "%-12s  %14.2f  0.0%% (no calls)\n", schema.name.c_str(),
                    avg);
    else
      std::snprintf(line, sizeof(line), "%-12s  %14.2f  %.1f%%\n", schema.name.c_str(), avg,
                    100.0 * static_cast<double>(c.failures) / static_cast<double>(c.calls));
    out << line;
  }
}

}  // namespace detail

inline int cmd_run(const CliConfig& cfg, const std::string& task_path, const std::string& out_file,
                   std::ostream& out) {
  CorpusTask entry = load_task(task_path);
  CorpusManifest single;
  single.entries.push_back(entry);
  if (cfg.backend == "scripted" && cfg.script.empty() && entry.script.empty())
    throw ConfigError("scripted backend needs --script or a script in the task descriptor");
  std::unique_ptr<ChatBackend> backend = detail::make_backend(cfg, single);

  StageConfig stage = cfg.stage_config();
  RunReport report = resolve(entry.task.input, stage, *backend);

  fs::path patch_path =
      out_file.empty() ? fs::path(cfg.report_dir) / (report.task_id + ".patch") : fs::path(out_file);
  write_file(patch_path, report.final_patch.diff_text);
  json report_doc = report.to_json();
  report_doc["config"] = cfg.echo();
  fs::path report_path = fs::path(cfg.report_dir) / (report.task_id + ".report.json");
  write_file(report_path, report_doc.dump(2) + "\n");

  out << "task: " << report.task_id << "\n";
  out << "termination: " << to_string(report.termination) << "\n";
  out << "bundles: " << report.bundle_count << "  rounds: " << report.rounds_executed
      << "  test_gen_runs: " << report.test_gen_runs
      << "  stage2_executions: " << report.stage2_executions << "\n";
  out << "cost_usd: " << report.cost_usd.to_string() << "\n";
  out << "patch: " << patch_path.string()
      << (report.final_patch.empty() ? " (empty)" : "") << "\n";
  out << "report: " << report_path.string() << "\n";
  detail::print_tool_table(out, report.telemetry, 1);
  return 0;
}

inline int cmd_eval(const CliConfig& cfg, const std::string& corpus_path, std::ostream& out) {
  CorpusManifest corpus = load_corpus(corpus_path);
  std::unique_ptr<ChatBackend> backend = detail::make_backend(cfg, corpus);
  StageConfig stage = cfg.stage_config();

  EvalReport report = run_benchmark(corpus, stage, *backend, cfg.workers);
  report.config_echo = cfg.echo();

  fs::path report_path = fs::path(cfg.report_dir) / "eval_report.json";
  write_file(report_path, report.to_json().dump(2) + "\n");
  for (const auto& record : report.records)
    write_file(fs::path(cfg.report_dir) / (record.task_id + ".patch"), record.patch_text);

  out << report.render_table();
  detail::print_tool_table(out, report.merged_tools(), report.task_count());
  out << "report: " << report_path.string() << "\n";
  return report.all_completed() ? 0 : 1;
}

inline int cmd_stats(const std::vector<std::string>& report_paths, std::ostream& out) {
  if (report_paths.empty()) throw ReportUnreadable("no report files given");
  ToolTelemetry merged;
  size_t total_tasks = 0;
  for (const auto& path : report_paths) {
    if (!fs::exists(path)) throw ReportUnreadable("report not found: " + path);
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw ReportUnreadable(path + ": " + e.what());
    }
    EvalReport report = EvalReport::from_json(doc);
    merged.merge(report.merged_tools());
    total_tasks += report.task_count();
  }
  out << "tasks: " << total_tasks << "\n";
  detail::print_tool_table(out, merged, total_tasks);
  return 0;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"patchforge: adversarial test/code patch refinement harness"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  struct Flags {
    int max_iterations = 0;
    int candidates_target = 0;
    int step_budget = 0;
    int workers = 0;
    long seed = 0;
    std::string backend, script, isolation, prompt_dir, report_dir, container_image;
    bool no_adversarial = false;
    bool no_selection = false;
  } flags;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--max-iterations", flags.max_iterations, "stage-1 round cap");
    cmd->add_option("--candidates-target", flags.candidates_target, "bundle top-up target");
    cmd->add_option("--step-budget", flags.step_budget, "tool calls per agent run");
    cmd->add_flag("--no-adversarial", flags.no_adversarial, "single test round, no strengthening");
    cmd->add_flag("--no-selection", flags.no_selection, "skip stage-2 re-verification");
    cmd->add_option("--backend", flags.backend, "scripted or live")
        ->check(CLI::IsMember({"scripted", "live"}));
    cmd->add_option("--script", flags.script, "scripted-backend turns file");
    cmd->add_option("--isolation", flags.isolation, "process or container")
        ->check(CLI::IsMember({"process", "container"}));
    cmd->add_option("--container-image", flags.container_image, "image for container isolation");
    cmd->add_option("--workers", flags.workers, "parallel tasks");
    cmd->add_option("--seed", flags.seed, "recorded in reports");
    cmd->add_option("--prompt-dir", flags.prompt_dir, "agent prompt templates");
    cmd->add_option("--report", flags.report_dir, "output directory");
  };

  std::string task_path, out_file, corpus_path;
  std::vector<std::string> stat_reports;

  CLI::App* run = app.add_subcommand("run", "resolve one task");
  run->add_option("--task", task_path, "task directory")->required();
  run->add_option("--out", out_file, "patch output file");
  add_common(run);

  CLI::App* eval = app.add_subcommand("eval", "run the benchmark corpus");
  eval->add_option("--corpus", corpus_path, "corpus manifest")->required();
  add_common(eval);

  CLI::App* stats = app.add_subcommand("stats", "aggregate report telemetry");
  stats->add_option("reports", stat_reports, "eval report files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    CliConfig cfg;
    if (!config_path.empty())
      cfg.apply_file(fs::path(config_path));
    else if (fs::exists("patchforge.json"))
      cfg.apply_file(fs::path("patchforge.json"));
    cfg.apply_env();

    CLI::App* active = app.get_subcommands().front();
    if (active == run || active == eval) {
      auto passed = [&](const std::string& name) { return active->count(name) > 0; };
      if (passed("--max-iterations")) cfg.max_iterations = flags.max_iterations;
      if (passed("--candidates-target")) cfg.candidates_target = flags.candidates_target;
      if (passed("--step-budget")) cfg.step_budget = flags.step_budget;
      if (passed("--no-adversarial")) cfg.adversarial = false;
      if (passed("--no-selection")) cfg.selection = false;
      if (passed("--backend")) cfg.backend = flags.backend;
      if (passed("--script")) cfg.script = flags.script;
      if (passed("--isolation")) cfg.isolation = flags.isolation;
      if (passed("--container-image")) cfg.container_image = flags.container_image;
      if (passed("--workers")) cfg.workers = flags.workers;
      if (passed("--seed")) cfg.seed = flags.seed;
      if (passed("--prompt-dir")) cfg.prompt_dir = flags.prompt_dir;
      if (passed("--report")) cfg.report_dir = flags.report_dir;
    }

    if (run->parsed()) return cmd_run(cfg, task_path, out_file, out);
    if (eval->parsed()) return cmd_eval(cfg, corpus_path, out);
    if (stats->parsed()) return cmd_stats(stat_reports, out);
    err << "no command given\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace patchforge
