#pragma once

// Stage 1: adversarial co-refinement of test and code patches with a hard
// iteration cap. Stage 2: candidate re-verification against the union test
// suite and deterministic ranking. Both stages see only the agent-visible
// TaskInput; hidden evaluation tests are structurally out of reach.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "patchforge/agents.hpp"
#include "patchforge/gateway.hpp"
#include "patchforge/model.hpp"
#include "patchforge/tools.hpp"
#include "patchforge/workspace.hpp"

namespace patchforge {

inline constexpr int kDefaultMaxIterations = 3;
inline constexpr int kDefaultCandidatesTarget = 3;
inline constexpr int kDefaultCodeAttempts = 2;
inline constexpr int kDefaultReproductionAttempts = 2;

struct StageConfig {
  int max_iterations = kDefaultMaxIterations;
  bool adversarial_enabled = true;
  bool selection_enabled = true;
  int candidates_target = kDefaultCandidatesTarget;
  int step_budget = kDefaultStepBudget;
  int code_attempts = kDefaultCodeAttempts;
  int reproduction_attempts = kDefaultReproductionAttempts;
  fs::path prompt_dir;
  WorkspaceConfig workspace;
  PricingConfig pricing;

  void validate() const {
    if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
    if (candidates_target < 1) throw ConfigError("candidates_target must be >= 1");
    if (step_budget < 1) throw ConfigError("step_budget must be >= 1");
    if (code_attempts < 1) throw ConfigError("code_attempts must be >= 1");
    if (reproduction_attempts < 1) throw ConfigError("reproduction_attempts must be >= 1");
    if (prompt_dir.empty()) throw ConfigError("prompt_dir is required");
  }
};

enum class Termination {
  cap_reached,
  tests_strengthened_still_passing,
  no_reproducing_test,
  generator_failed
};

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::cap_reached: return "cap_reached";
    case Termination::tests_strengthened_still_passing:
      return "tests_strengthened_still_passing";
    case Termination::no_reproducing_test: return "no_reproducing_test";
    case Termination::generator_failed: return "generator_failed";
  }
  return "?";
}

struct StageOutcome {
  std::vector<CandidateBundle> bundles;
  std::optional<Patch> selected;
  Termination termination = Termination::cap_reached;

  std::vector<Trajectory> trajectories;
  ToolTelemetry telemetry;
  int rounds_executed = 0;
  int test_gen_runs = 0;
  long stage2_executions = 0;
  std::optional<size_t> selected_index;
};

namespace detail {

// Test ids named by a test patch: every non-deleted test file it touches.
inline std::vector<std::string> patch_test_ids(const Patch& patch) {
  std::vector<std::string> ids;
  for (const auto& fd : patch.parse().files)
    if (!fd.is_deleted_file() && is_test_path(fd.display_path())) ids.push_back(fd.display_path());
  return ids;
}

inline std::string test_command(const EnvSpec& env, const std::string& id) {
  std::string cmd = env.test_cmd_template;
  size_t slot = cmd.find("{id}");
  if (slot == std::string::npos) throw ConfigError("test_cmd_template must contain {id}");
  cmd.replace(slot, 4, id);
  return cmd;
}

struct SuiteRun {
  std::map<std::string, bool> results;
  std::string failing_output;
  long executions = 0;
  bool all_passed = true;
};

inline std::string tail(const std::string& text, size_t limit = 2000) {
  if (text.size() <= limit) return text;
  return "..." + text.substr(text.size() - limit);
}

inline SuiteRun run_suite(Workspace& ws, const EnvSpec& env,
                          const std::vector<std::string>& ids) {
  SuiteRun run;
  for (const auto& id : ids) {
    ExecResult r = ws.exec(test_command(env, id));
    ++run.executions;
    bool passed = r.exit_code == 0 && !r.timed_out;
    run.results[id] = passed;
    if (!passed) {
      run.all_passed = false;
      run.failing_output += "test " + id + ": FAIL (exit " + std::to_string(r.exit_code) + ")\n" +
                            tail(r.stdout_text) + tail(r.stderr_text) + "\n";
    } else {
      run.failing_output += "test " + id + ": PASS\n";
    }
  }
  return run;
}

inline std::string render_suite(const std::vector<Patch>& patches) {
  std::string out;
  for (size_t i = 0; i < patches.size(); ++i) {
    out += "# test patch " + std::to_string(i + 1) + "\n";
    out += patches[i].diff_text;
    if (!out.empty() && out.back() != '\n') out += '\n';
  }
  return out;
}

inline void absorb(StageOutcome& outcome, const Trajectory& trajectory) {
  outcome.trajectories.push_back(trajectory);
  for (const auto& turn : trajectory.turns)
    if (turn.kind == TrajectoryEvent::Kind::tool_invocation)
      outcome.telemetry.record(turn.invocation);
}

// Applies each patch in order; returns false (tree untouched beyond prior
// patches) if one conflicts.
inline bool apply_all(Workspace& ws, const std::vector<Patch>& patches) {
  try {
    for (const auto& patch : patches) ws.apply_patch(patch);
    return true;
  } catch (const Error&) {
    return false;
  }
}

// One code-generation phase: run the agent on a tree with the suite applied,
// extract the non-test part of its submission, verify on a reset tree.
struct CodePhaseResult {
  bool produced = false;
  Patch code_patch;
  std::map<std::string, bool> verification;
  bool verified = false;
  std::string failing_output;
};

inline CodePhaseResult run_code_phase(const TaskInput& input, const StageConfig& cfg,
                                      ChatBackend& backend, Workspace& ws,
                                      const AgentRole& code_role, StageOutcome& outcome,
                                      const std::vector<Patch>& suite,
                                      const std::vector<std::string>& suite_ids,
                                      const StageState& state, int round) {
  CodePhaseResult phase;
  ws.reset();
  if (!apply_all(ws, suite)) return phase;

  AgentContext ctx = build_context(AgentRoleKind::code_generator, input, state);
  AgentOutcome out = run_agent(code_role, ctx, input.task_id, ws, backend, cfg.pricing);
  absorb(outcome, out.trajectory);
  if (!out.submitted) return phase;

  UnifiedDiff submitted;
  try {
    submitted = parse_diff(*out.diff_text);
  } catch (const MalformedDiff&) {
    return phase;
  }
  UnifiedDiff code_only = filter_test_files(submitted);
  if (code_only.empty()) return phase;
  phase.code_patch = make_patch(PatchKind::code, code_only, PatchProducer::code_generator, round);
  phase.produced = true;

  ws.reset();
  if (!apply_all(ws, {phase.code_patch}) || !apply_all(ws, suite)) {
    phase.failing_output = "candidate patch failed to apply cleanly\n";
    return phase;
  }
  SuiteRun run = run_suite(ws, input.env, suite_ids);
  phase.verification = run.results;
  phase.verified = run.all_passed;
  phase.failing_output = run.failing_output;
  return phase;
}

// When refinement ends early with capacity to spare, additional independent
// code rollouts are attempted against the settled suite, best-effort: any
// failure (including an exhausted script) just stops the top-up.
inline void top_up_candidates(const TaskInput& input, const StageConfig& cfg,
                              ChatBackend& backend, Workspace& ws, const AgentRole& code_role,
                              StageOutcome& outcome, const std::vector<Patch>& suite,
                              const std::vector<std::string>& suite_ids, StageState state,
                              int round) {
  while (static_cast<int>(outcome.bundles.size()) < cfg.candidates_target) {
    state.failing_output.clear();
    CodePhaseResult phase = run_code_phase(input, cfg, backend, ws, code_role, outcome, suite,
                                           suite_ids, state, round);
    if (!phase.produced || !phase.verified) return;
    bool duplicate = false;
    for (const auto& bundle : outcome.bundles)
      if (bundle.code_patch.diff_text == phase.code_patch.diff_text) duplicate = true;
    if (duplicate) return;
    CandidateBundle bundle;
    bundle.code_patch = phase.code_patch;
    bundle.test_patches = suite;
    bundle.verification = phase.verification;
    bundle.iteration_created = round;
    bundle.verified = true;
    outcome.bundles.push_back(std::move(bundle));
  }
}

}  // namespace detail

// Reproduction gate: a test patch is accepted only if at least one of its
// tests fails on the unpatched tree.
inline bool reproduces_on_base(Workspace& ws, const EnvSpec& env, const Patch& test_patch) {
  ws.reset();
  if (!detail::apply_all(ws, {test_patch})) return false;
  std::vector<std::string> ids = detail::patch_test_ids(test_patch);
  if (ids.empty()) return false;
  detail::SuiteRun run = detail::run_suite(ws, env, ids);
  ws.reset();
  return !run.all_passed;
}

inline StageOutcome stage1(const TaskInput& input, const StageConfig& cfg, ChatBackend& backend,
                           Workspace& ws) {
  cfg.validate();
  AgentRole test_role =
      load_role(AgentRoleKind::test_generator, cfg.prompt_dir / "test_generator.txt",
                cfg.step_budget);
  AgentRole code_role =
      load_role(AgentRoleKind::code_generator, cfg.prompt_dir / "code_generator.txt",
                cfg.step_budget);

  StageOutcome outcome;
  StageState state;
  std::vector<Patch> suite;             // accepted reproducing test patches
  std::vector<std::string> suite_ids;   // their test ids, in acceptance order

  // Disabling the adversarial loop removes refinement entirely: one test
  // round, and no reproduction retries within it.
  const int rounds = cfg.adversarial_enabled ? cfg.max_iterations : 1;
  const int repro_attempts = cfg.adversarial_enabled ? cfg.reproduction_attempts : 1;
  for (int round = 0; round < rounds; ++round) {
    outcome.rounds_executed = round + 1;
    state.round = round;

    // Phase A: test generation behind the reproduction gate.
    std::optional<Patch> accepted;
    std::string reproduction_output;
    bool testgen_hard_failure = false;
    for (int attempt = 0; attempt < repro_attempts && !accepted; ++attempt) {
      ws.reset();
      AgentContext ctx = build_context(AgentRoleKind::test_generator, input, state);
      AgentOutcome out = run_agent(test_role, ctx, input.task_id, ws, backend, cfg.pricing);
      detail::absorb(outcome, out.trajectory);
      ++outcome.test_gen_runs;
      if (!out.submitted) {
        testgen_hard_failure = true;
        break;
      }
      Patch candidate;
      try {
        candidate = make_patch(PatchKind::test, *out.diff_text, PatchProducer::test_generator,
                               round);
      } catch (const Error&) {
        continue;  // malformed or touching non-test files; try again
      }
      ws.reset();
      if (!detail::apply_all(ws, {candidate})) continue;
      std::vector<std::string> ids = detail::patch_test_ids(candidate);
      if (ids.empty()) continue;
      detail::SuiteRun base_run = detail::run_suite(ws, input.env, ids);
      if (base_run.all_passed) continue;  // does not reproduce the issue
      accepted = candidate;
      reproduction_output = base_run.failing_output;
    }

    if (testgen_hard_failure) {
      outcome.termination = Termination::generator_failed;
      return outcome;
    }
    if (!accepted) {
      outcome.termination = Termination::no_reproducing_test;
      if (round == 0 && outcome.bundles.empty()) {
        // Fall back to a single code-generation run from the issue alone.
        ws.reset();
        AgentContext ctx = build_context(AgentRoleKind::code_generator, input, StageState{});
        AgentOutcome out = run_agent(code_role, ctx, input.task_id, ws, backend, cfg.pricing);
        detail::absorb(outcome, out.trajectory);
        if (out.submitted) {
          try {
            UnifiedDiff code_only = filter_test_files(parse_diff(*out.diff_text));
            if (!code_only.empty()) {
              CandidateBundle bundle;
              bundle.code_patch = make_patch(PatchKind::code, code_only,
                                             PatchProducer::code_generator, round);
              bundle.iteration_created = round;
              bundle.verified = false;
              outcome.bundles.push_back(std::move(bundle));
            }
          } catch (const Error&) {
          }
        }
      }
      return outcome;
    }

    // Phase A2 (strengthening rounds): if the whole suite including the new
    // tests passes against the current candidate, the loop terminates at
    // once and the new patch is discarded.
    if (round > 0 && !outcome.bundles.empty()) {
      ws.reset();
      const Patch& current = outcome.bundles.back().code_patch;
      std::vector<std::string> new_ids = detail::patch_test_ids(*accepted);
      std::vector<Patch> extended = suite;
      extended.push_back(*accepted);
      std::vector<std::string> extended_ids = suite_ids;
      extended_ids.insert(extended_ids.end(), new_ids.begin(), new_ids.end());
      if (detail::apply_all(ws, {current}) && detail::apply_all(ws, extended)) {
        detail::SuiteRun check = detail::run_suite(ws, input.env, extended_ids);
        if (check.all_passed) {
          outcome.termination = Termination::tests_strengthened_still_passing;
          detail::top_up_candidates(input, cfg, backend, ws, code_role, outcome, suite,
                                    suite_ids, state, round);
          return outcome;
        }
        reproduction_output = check.failing_output;
      }
    }

    suite.push_back(*accepted);
    for (const auto& id : detail::patch_test_ids(*accepted)) suite_ids.push_back(id);
    state.prior_tests_text = detail::render_suite(suite);
    state.failing_output = reproduction_output;

    // Phase B: code generation with verification, retried within the round.
    bool bundle_recorded = false;
    for (int attempt = 0; attempt < cfg.code_attempts && !bundle_recorded; ++attempt) {
      detail::CodePhaseResult phase = detail::run_code_phase(
          input, cfg, backend, ws, code_role, outcome, suite, suite_ids, state, round);
      if (phase.produced && phase.verified) {
        CandidateBundle bundle;
        bundle.code_patch = phase.code_patch;
        bundle.test_patches = suite;
        bundle.verification = phase.verification;
        bundle.iteration_created = round;
        bundle.verified = true;
        outcome.bundles.push_back(std::move(bundle));
        bundle_recorded = true;
      } else if (!phase.failing_output.empty()) {
        state.failing_output = phase.failing_output;
      }
    }
    if (!bundle_recorded) {
      outcome.termination = Termination::generator_failed;
      return outcome;
    }

    state.code_patch_text = outcome.bundles.back().code_patch.diff_text;
  }

  outcome.termination = Termination::cap_reached;
  return outcome;
}

inline StageOutcome stage1(const TaskInput& input, const StageConfig& cfg, ChatBackend& backend) {
  Workspace ws = Workspace::create(input, cfg.workspace);
  return stage1(input, cfg, backend, ws);
}

// Pure ranking core, exposed for oracle testing. Orders candidate indices
// best-first by union-suite passes desc, regression passes desc, diff size
// asc, then earliest iteration; remaining ties keep input order.
struct CandidateScore {
  size_t index = 0;
  long union_passes = 0;
  long regression_passes = 0;
  long diff_size = 0;
  int iteration_created = 0;
};

inline std::vector<size_t> rank_candidates(std::vector<CandidateScore> scores) {
  std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
    if (a.union_passes != b.union_passes) return a.union_passes > b.union_passes;
    if (a.regression_passes != b.regression_passes) return a.regression_passes > b.regression_passes;
    if (a.diff_size != b.diff_size) return a.diff_size < b.diff_size;
    return a.iteration_created < b.iteration_created;
  });
  std::vector<size_t> order;
  for (const auto& s : scores) order.push_back(s.index);
  return order;
}

namespace detail {

inline std::string render_candidates(const std::vector<CandidateBundle>& bundles,
                                     const std::vector<CandidateScore>& scores) {
  std::string out;
  for (const auto& score : scores) {
    const CandidateBundle& b = bundles[score.index];
    out += "candidate " + std::to_string(score.index) + ": union_passes=" +
           std::to_string(score.union_passes) + " regression_passes=" +
           std::to_string(score.regression_passes) + " changed_lines=" +
           std::to_string(score.diff_size) + " iteration=" +
           std::to_string(b.iteration_created) + "\n";
    out += b.code_patch.diff_text;
    if (!out.empty() && out.back() != '\n') out += '\n';
  }
  return out;
}

// One-shot consultation to break an exact ranking tie; any failure falls
// back to the first tied candidate.
inline size_t consult_selector(const TaskInput& input, const StageConfig& cfg,
                               ChatBackend& backend, StageOutcome& outcome,
                               const std::vector<CandidateBundle>& bundles,
                               const std::vector<CandidateScore>& tied) {
  size_t fallback = tied.front().index;
  fs::path template_path = cfg.prompt_dir / "selector.txt";
  if (!fs::exists(template_path)) return fallback;
  try {
    AgentRole role = load_role(AgentRoleKind::selector, template_path, 1);
    StageState state;
    state.candidates_text = render_candidates(bundles, tied);
    AgentContext ctx = build_context(AgentRoleKind::selector, input, state);
    std::vector<ChatTurn> history{{ChatRole::system, role.system_prompt, {}, {}},
                                  {ChatRole::user, interpolate(role.user_template, ctx), {}, {}}};
    ChatResult reply = backend.chat({input.task_id, AgentRoleKind::selector, history, {}});

    Trajectory trajectory;
    trajectory.role = AgentRoleKind::selector;
    TrajectoryEvent event;
    event.kind = TrajectoryEvent::Kind::assistant_message;
    event.content = reply.turn.content;
    trajectory.turns.push_back(event);
    trajectory.prompt_tokens = reply.usage.prompt_tokens;
    trajectory.completion_tokens = reply.usage.completion_tokens;
    trajectory.cost_usd = accrue_cost(reply.usage, cfg.pricing);
    outcome.trajectories.push_back(trajectory);

    size_t pos = reply.turn.content.find_first_of("0123456789");
    if (pos == std::string::npos) return fallback;
    size_t chosen = std::stoul(reply.turn.content.substr(pos));
    for (const auto& score : tied)
      if (score.index == chosen) return chosen;
    return fallback;
  } catch (const std::exception&) {
    return fallback;
  }
}

}  // namespace detail

// Stage 2: re-verify every candidate against the union of all bundles' test
// suites plus the repository's own test command, then rank.
inline void stage2(const TaskInput& input, const StageConfig& cfg, ChatBackend& backend,
                   Workspace& ws, StageOutcome& outcome) {
  if (outcome.bundles.empty()) throw NoCandidates("no candidate bundles to select from");
  const std::vector<CandidateBundle>& bundles = outcome.bundles;

  if (!cfg.selection_enabled) {
    // "w/o Selection": first verified bundle, no re-verification executions.
    size_t pick = 0;
    for (size_t i = 0; i < bundles.size(); ++i)
      if (bundles[i].verified) {
        pick = i;
        break;
      }
    outcome.selected_index = pick;
    outcome.selected = bundles[pick].code_patch;
    return;
  }
  if (bundles.size() == 1) {
    outcome.selected_index = 0;
    outcome.selected = bundles[0].code_patch;
    return;
  }

  // Union suite: every distinct test patch, kept only if it still applies on
  // the base tree after the ones before it.
  std::vector<Patch> union_patches;
  std::set<std::string> seen;
  for (const auto& bundle : bundles)
    for (const auto& patch : bundle.test_patches)
      if (seen.insert(patch.diff_text).second) union_patches.push_back(patch);
  ws.reset();
  std::vector<Patch> applicable;
  std::vector<std::string> union_ids;
  for (const auto& patch : union_patches) {
    try {
      ws.apply_patch(patch);
      applicable.push_back(patch);
      for (const auto& id : detail::patch_test_ids(patch)) union_ids.push_back(id);
    } catch (const Error&) {
      // conflicting strengthened suites: skip deterministically
    }
  }

  std::vector<CandidateScore> scores;
  for (size_t i = 0; i < bundles.size(); ++i) {
    CandidateScore score;
    score.index = i;
    score.diff_size = changed_line_count(bundles[i].code_patch.parse());
    score.iteration_created = bundles[i].iteration_created;
    ws.reset();
    bool applied = detail::apply_all(ws, {bundles[i].code_patch}) &&
                   detail::apply_all(ws, applicable);
    if (applied) {
      detail::SuiteRun run = detail::run_suite(ws, input.env, union_ids);
      outcome.stage2_executions += run.executions;
      for (const auto& entry : run.results)
        if (entry.second) ++score.union_passes;
      if (!input.env.repo_test_cmd.empty()) {
        ExecResult reg = ws.exec(input.env.repo_test_cmd);
        ++outcome.stage2_executions;
        if (reg.exit_code == 0 && !reg.timed_out) ++score.regression_passes;
      }
    }
    scores.push_back(score);
  }
  ws.reset();

  std::vector<size_t> order = rank_candidates(scores);
  auto key = [&](size_t idx) {
    const CandidateScore& s = scores[idx];
    return std::tuple(s.union_passes, s.regression_passes, s.diff_size, s.iteration_created);
  };
  std::vector<CandidateScore> tied;
  for (size_t idx : order)
    if (key(idx) == key(order[0])) tied.push_back(scores[idx]);

  size_t winner = tied.size() > 1
                      ? detail::consult_selector(input, cfg, backend, outcome, bundles, tied)
                      : order[0];
  outcome.selected_index = winner;
  outcome.selected = bundles[winner].code_patch;
}

struct RunReport {
  std::string task_id;
  Patch final_patch;
  Termination termination = Termination::generator_failed;
  int rounds_executed = 0;
  int test_gen_runs = 0;
  long stage2_executions = 0;
  size_t bundle_count = 0;
  std::optional<size_t> selected_index;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  Decimal cost_usd;
  ToolTelemetry telemetry;
  std::vector<Trajectory> trajectories;
  bool completed = true;
  std::string failure_detail;

  json to_json() const {
    json out = {{"task_id", task_id},
                {"final_patch", final_patch.diff_text},
                {"termination", to_string(termination)},
                {"rounds_executed", rounds_executed},
                {"test_gen_runs", test_gen_runs},
                {"stage2_executions", stage2_executions},
                {"bundle_count", bundle_count},
                {"prompt_tokens", prompt_tokens},
                {"completion_tokens", completion_tokens},
                {"cost_usd", cost_usd.to_string()},
                {"tool_stats", telemetry.to_json()},
                {"completed", completed},
                {"failure_detail", failure_detail}};
    if (selected_index) out["selected_index"] = *selected_index;
    return out;
  }
};

inline RunReport resolve(const TaskInput& input, const StageConfig& cfg, ChatBackend& backend) {
  cfg.validate();
  RunReport report;
  report.task_id = input.task_id;

  Workspace ws = Workspace::create(input, cfg.workspace);  // EnvBuildFailed propagates
  StageOutcome outcome = stage1(input, cfg, backend, ws);
  if (!outcome.bundles.empty()) {
    try {
      stage2(input, cfg, backend, ws, outcome);
    } catch (const NoCandidates&) {
    }
  }

  report.termination = outcome.termination;
  report.rounds_executed = outcome.rounds_executed;
  report.test_gen_runs = outcome.test_gen_runs;
  report.stage2_executions = outcome.stage2_executions;
  report.bundle_count = outcome.bundles.size();
  report.selected_index = outcome.selected_index;
  report.trajectories = std::move(outcome.trajectories);
  report.telemetry = outcome.telemetry;
  for (const auto& trajectory : report.trajectories) {
    report.prompt_tokens += trajectory.prompt_tokens;
    report.completion_tokens += trajectory.completion_tokens;
    report.cost_usd += trajectory.cost_usd;
  }

  if (outcome.selected) {
    UnifiedDiff final_diff = filter_test_files(outcome.selected->parse());
    report.final_patch =
        make_patch(PatchKind::code, final_diff, PatchProducer::code_generator,
                   outcome.bundles[*outcome.selected_index].iteration_created);
  } else {
    report.final_patch = Patch{PatchKind::code, "", PatchProducer::code_generator, 0};
    report.failure_detail = "no candidate selected";
  }
  return report;
}

}  // namespace patchforge
