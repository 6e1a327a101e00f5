#pragma once

// Corpus loading, hidden-test evaluation, and benchmark aggregation.
// Hidden test lists live only in IssueTask and are consumed here; the
// generation pipeline over in orchestrator.hpp never sees them.

#include <atomic>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "patchforge/model.hpp"
#include "patchforge/orchestrator.hpp"
#include "patchforge/workspace.hpp"

namespace patchforge {

struct CorpusTask {
  IssueTask task;
  fs::path dir;
  fs::path script;           // scripted-backend turns for this task, optional
  fs::path reference_patch;  // known-good patch, optional
};

struct CorpusManifest {
  std::string version;
  std::vector<CorpusTask> entries;
};

namespace detail {

inline std::string require_string(const json& obj, const std::string& key,
                                  const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_string())
    throw ManifestInvalid(where + ": missing or non-string field '" + key + "'");
  return obj[key].get<std::string>();
}

}  // namespace detail

// Loads one task directory containing task.json; paths inside are resolved
// relative to the directory.
inline CorpusTask load_task(const fs::path& task_dir) {
  fs::path meta_path = task_dir / "task.json";
  if (!fs::exists(meta_path))
    throw ManifestInvalid("task descriptor not found: " + meta_path.string());
  json meta;
  try {
    meta = json::parse(read_file(meta_path));
  } catch (const json::exception& e) {
    throw ManifestInvalid(meta_path.string() + ": " + e.what());
  }
  const std::string where = meta_path.string();

  CorpusTask entry;
  entry.dir = task_dir;
  IssueTask& task = entry.task;
  task.input.task_id = detail::require_string(meta, "task_id", where);

  task.input.repo_root = task_dir / meta.value("repo", "repo");
  if (!fs::is_directory(task.input.repo_root))
    throw ManifestInvalid(where + ": repo directory missing: " + task.input.repo_root.string());

  fs::path issue_path = task_dir / meta.value("issue_file", "issue.md");
  if (!fs::exists(issue_path))
    throw ManifestInvalid(where + ": issue file missing: " + issue_path.string());
  task.input.issue_text = read_file(issue_path);

  if (!meta.contains("env") || !meta["env"].is_object())
    throw ManifestInvalid(where + ": missing 'env' object");
  const json& env = meta["env"];
  task.input.env.test_cmd_template = detail::require_string(env, "test_cmd_template", where);
  if (task.input.env.test_cmd_template.find("{id}") == std::string::npos)
    throw ManifestInvalid(where + ": test_cmd_template must contain {id}");
  task.input.env.repo_test_cmd = env.value("repo_test_cmd", "");
  for (const auto& cmd : env.value("install_cmds", json::array())) {
    if (!cmd.is_string()) throw ManifestInvalid(where + ": install_cmds must be strings");
    task.input.env.install_cmds.push_back(cmd.get<std::string>());
  }

  // The pin is verified when given, computed when not, so every workspace
  // copy is checked against the same revision.
  std::string actual = tree_hash(task.input.repo_root);
  std::string pinned = meta.value("base_revision", "");
  if (!pinned.empty() && pinned != actual)
    throw ManifestInvalid(where + ": base_revision " + pinned + " does not match repo tree " +
                          actual);
  task.input.base_revision = actual;

  for (const auto& id : meta.value("hidden_fail_to_pass", json::array()))
    task.hidden_fail_to_pass.push_back(id.get<std::string>());
  for (const auto& id : meta.value("hidden_pass_to_pass", json::array()))
    task.hidden_pass_to_pass.push_back(id.get<std::string>());

  if (!task.hidden_fail_to_pass.empty() || !task.hidden_pass_to_pass.empty()) {
    task.eval_tests_dir = task_dir / meta.value("eval_tests_dir", "eval_tests");
    if (!fs::is_directory(task.eval_tests_dir))
      throw ManifestInvalid(where + ": eval_tests dir missing: " + task.eval_tests_dir.string());
    std::string mount = task.eval_tests_dir.filename().string();
    auto check_ids = [&](const std::vector<std::string>& ids, const char* kind) {
      for (const auto& id : ids) {
        if (id.rfind(mount + "/", 0) != 0)
          throw ManifestInvalid(where + ": " + kind + " id '" + id + "' must live under " +
                                mount + "/");
        if (!fs::exists(task_dir / id))
          throw ManifestInvalid(where + ": " + kind + " test file missing: " + id);
      }
    };
    check_ids(task.hidden_fail_to_pass, "fail_to_pass");
    check_ids(task.hidden_pass_to_pass, "pass_to_pass");
  }

  if (meta.contains("script")) entry.script = task_dir / meta["script"].get<std::string>();
  if (meta.contains("reference_patch"))
    entry.reference_patch = task_dir / meta["reference_patch"].get<std::string>();
  return entry;
}

inline CorpusManifest load_corpus(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path))
    throw ManifestInvalid("manifest not found: " + manifest_path.string());
  json doc;
  try {
    doc = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ManifestInvalid(manifest_path.string() + ": " + e.what());
  }
  CorpusManifest manifest;
  manifest.version = doc.value("version", "0");
  if (!doc.contains("tasks") || !doc["tasks"].is_array() || doc["tasks"].empty())
    throw ManifestInvalid(manifest_path.string() + ": 'tasks' must be a non-empty array");

  fs::path base = manifest_path.parent_path();
  std::map<std::string, std::string> seen;  // task_id -> dir
  for (const auto& entry : doc["tasks"]) {
    fs::path dir;
    if (entry.is_string())
      dir = base / entry.get<std::string>();
    else if (entry.is_object() && entry.contains("dir"))
      dir = base / entry["dir"].get<std::string>();
    else
      throw ManifestInvalid(manifest_path.string() + ": each task needs a 'dir'");
    CorpusTask task = load_task(dir);
    auto [it, inserted] = seen.emplace(task.task.task_id(), dir.string());
    if (!inserted)
      throw ManifestInvalid(manifest_path.string() + ": duplicate task_id '" +
                            task.task.task_id() + "' in " + it->second + " and " + dir.string());
    manifest.entries.push_back(std::move(task));
  }
  return manifest;
}

struct EvalVerdict {
  bool resolved = false;
  std::map<std::string, bool> detail;  // hidden test id -> passed
  std::string reason;
};

// Applies the patch in a fresh workspace, injects the hidden tests, and
// requires every fail-to-pass and pass-to-pass test to pass.
inline EvalVerdict evaluate_patch(const IssueTask& task, const Patch& patch,
                                  const WorkspaceConfig& ws_cfg) {
  for (const auto& path : patch.parse().paths())
    if (is_test_path(path))
      throw UnfilteredTestEdit("patch touches test path " + path +
                               "; run it through filter_test_files first");

  Workspace ws = Workspace::create(task.input, ws_cfg);
  EvalVerdict verdict;
  try {
    if (!patch.empty()) ws.apply_patch(patch);
  } catch (const Error& e) {
    verdict.reason = e.category() + ": " + e.what();
    for (const auto& id : task.hidden_fail_to_pass) verdict.detail[id] = false;
    for (const auto& id : task.hidden_pass_to_pass) verdict.detail[id] = false;
    return verdict;
  }

  if (!task.eval_tests_dir.empty()) {
    std::string mount = task.eval_tests_dir.filename().string();
    for (const auto& rel : list_tree(task.eval_tests_dir))
      write_file(ws.root() / mount / rel, read_file(task.eval_tests_dir / rel));
  }

  verdict.resolved = true;
  auto run_ids = [&](const std::vector<std::string>& ids) {
    for (const auto& id : ids) {
      ExecResult r = ws.exec(detail::test_command(task.input.env, id));
      bool passed = r.exit_code == 0 && !r.timed_out;
      verdict.detail[id] = passed;
      if (!passed) verdict.resolved = false;
    }
  };
  run_ids(task.hidden_fail_to_pass);
  run_ids(task.hidden_pass_to_pass);
  if (!verdict.resolved && verdict.reason.empty()) verdict.reason = "hidden tests failed";
  return verdict;
}

struct TaskRecord {
  std::string task_id;
  bool resolved = false;
  bool completed = true;
  std::string termination;
  Decimal cost_usd;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  int rounds_executed = 0;
  int test_gen_runs = 0;
  long stage2_executions = 0;
  size_t bundle_count = 0;
  std::string patch_text;
  std::map<std::string, bool> test_detail;
  std::string failure_detail;
  ToolTelemetry tools;

  json to_json() const {
    json detail = json::object();
    for (const auto& [id, passed] : test_detail) detail[id] = passed;
    return {{"task_id", task_id},
            {"resolved", resolved},
            {"completed", completed},
            {"termination", termination},
            {"cost_usd", cost_usd.to_string()},
            {"prompt_tokens", prompt_tokens},
            {"completion_tokens", completion_tokens},
            {"rounds_executed", rounds_executed},
            {"test_gen_runs", test_gen_runs},
            {"stage2_executions", stage2_executions},
            {"bundle_count", bundle_count},
            {"patch_text", patch_text},
            {"test_detail", detail},
            {"failure_detail", failure_detail},
            {"tool_stats", tools.to_json()}};
  }

  static TaskRecord from_json(const json& j) {
    TaskRecord r;
    r.task_id = j.at("task_id").get<std::string>();
    r.resolved = j.at("resolved").get<bool>();
    r.completed = j.value("completed", true);
    r.termination = j.value("termination", "");
    r.cost_usd = Decimal::parse(j.value("cost_usd", "0"));
    r.prompt_tokens = j.value("prompt_tokens", 0L);
    r.completion_tokens = j.value("completion_tokens", 0L);
    r.rounds_executed = j.value("rounds_executed", 0);
    r.test_gen_runs = j.value("test_gen_runs", 0);
    r.stage2_executions = j.value("stage2_executions", 0L);
    r.bundle_count = j.value("bundle_count", size_t{0});
    r.patch_text = j.value("patch_text", "");
    json detail = j.value("test_detail", json::object());
    for (auto it = detail.begin(); it != detail.end(); ++it)
      r.test_detail[it.key()] = it.value().get<bool>();
    r.failure_detail = j.value("failure_detail", "");
    r.tools = ToolTelemetry::from_json(j.value("tool_stats", json::object()));
    return r;
  }
};

struct EvalReport {
  json config_echo = json::object();
  std::vector<TaskRecord> records;

  size_t task_count() const { return records.size(); }

  size_t resolved_count() const {
    size_t n = 0;
    for (const auto& r : records) n += r.resolved ? 1 : 0;
    return n;
  }

  bool all_completed() const {
    for (const auto& r : records)
      if (!r.completed) return false;
    return true;
  }

  double resolved_rate() const {
    if (records.empty()) return 0.0;
    return 100.0 * static_cast<double>(resolved_count()) / static_cast<double>(task_count());
  }

  Decimal total_cost() const {
    Decimal sum;
    for (const auto& r : records) sum += r.cost_usd;
    return sum;
  }

  double avg_cost_usd() const {
    if (records.empty()) return 0.0;
    return total_cost().to_double() / static_cast<double>(task_count());
  }

  ToolTelemetry merged_tools() const {
    ToolTelemetry merged;
    for (const auto& r : records) merged.merge(r.tools);
    return merged;
  }

  json to_json() const {
    json tasks = json::array();
    for (const auto& r : records) tasks.push_back(r.to_json());
    return {{"config", config_echo},
            {"tasks", tasks},
            {"aggregate",
             {{"task_count", task_count()},
              {"resolved_count", resolved_count()},
              {"resolved_rate", resolved_rate()},
              {"total_cost_usd", total_cost().to_string()},
              {"avg_cost_usd", avg_cost_usd()},
              {"all_completed", all_completed()}}},
            {"tool_stats", merged_tools().to_json()}};
  }

  static EvalReport from_json(const json& j) {
    EvalReport report;
    report.config_echo = j.value("config", json::object());
    if (!j.contains("tasks") || !j["tasks"].is_array())
      throw ReportUnreadable("report has no 'tasks' array");
    for (const auto& t : j["tasks"]) report.records.push_back(TaskRecord::from_json(t));
    return report;
  }

  std::string render_table() const {
    std::ostringstream out;
    out << std::left << std::setw(24) << "task" << std::setw(10) << "resolved" << std::setw(12)
        << "cost_usd" << "termination\n";
    for (const auto& r : records) {
      out << std::left << std::setw(24) << r.task_id << std::setw(10)
          << (r.resolved ? "yes" : "no") << std::setw(12) << r.cost_usd.to_string()
          << (r.completed ? r.termination : "INCOMPLETE: " + r.failure_detail) << "\n";
    }
    out << std::fixed << std::setprecision(2);
    out << "resolved: " << resolved_count() << "/" << task_count() << " (" << resolved_rate()
        << "%)  avg cost: $" << avg_cost_usd() << "\n";
    return out.str();
  }
};

// Runs resolve + evaluate for every task with a shared backend; per-task
// failures are recorded, never thrown.
inline EvalReport run_benchmark(const CorpusManifest& corpus, const StageConfig& cfg,
                                ChatBackend& backend, int workers = 1) {
  EvalReport report;
  report.records.resize(corpus.entries.size());

  std::atomic<size_t> next{0};
  auto worker = [&] {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= corpus.entries.size()) return;
      const CorpusTask& entry = corpus.entries[i];
      TaskRecord record;
      record.task_id = entry.task.task_id();
      try {
        RunReport run = resolve(entry.task.input, cfg, backend);
        record.termination = to_string(run.termination);
        record.cost_usd = run.cost_usd;
        record.prompt_tokens = run.prompt_tokens;
        record.completion_tokens = run.completion_tokens;
        record.rounds_executed = run.rounds_executed;
        record.test_gen_runs = run.test_gen_runs;
        record.stage2_executions = run.stage2_executions;
        record.bundle_count = run.bundle_count;
        record.patch_text = run.final_patch.diff_text;
        record.tools = run.telemetry;
        EvalVerdict verdict = evaluate_patch(entry.task, run.final_patch, cfg.workspace);
        record.resolved = verdict.resolved;
        record.test_detail = verdict.detail;
        if (!verdict.resolved) record.failure_detail = verdict.reason;
      } catch (const std::exception& e) {
        record.completed = false;
        record.resolved = false;
        record.failure_detail = e.what();
      }
      report.records[i] = std::move(record);
    }
  };

  int n = std::max(1, workers);
  std::vector<std::thread> pool;
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return report;
}

}  // namespace patchforge
