#pragma once

// Generic agent loop plus the three role specializations. An agent run is a
// single conversational thread: query the gateway, dispatch tool calls,
// append results, until the submitter fires, the step budget runs out, or
// the backend errors.

#include <optional>
#include <string>
#include <vector>

#include "patchforge/gateway.hpp"
#include "patchforge/model.hpp"
#include "patchforge/tools.hpp"
#include "patchforge/workspace.hpp"

namespace patchforge {

inline constexpr int kDefaultStepBudget = 50;
// Consecutive assistant turns without a tool call before the run is cut off.
inline constexpr int kMaxToollessTurns = 2;

struct AgentRole {
  AgentRoleKind kind = AgentRoleKind::test_generator;
  std::string system_prompt;
  std::string user_template;
  int step_budget = kDefaultStepBudget;
};

// Template file layout: system prompt, a line "---", then the user template.
inline AgentRole load_role(AgentRoleKind kind, const fs::path& template_path,
                           int step_budget = kDefaultStepBudget) {
  if (step_budget < 1) throw ConfigError("step_budget must be >= 1");
  std::string text = read_file(template_path);
  size_t split = text.find("\n---\n");
  if (split == std::string::npos)
    throw ConfigError("prompt template " + template_path.string() +
                      " must contain a '---' separator line");
  AgentRole role;
  role.kind = kind;
  role.system_prompt = text.substr(0, split);
  role.user_template = text.substr(split + 5);
  role.step_budget = step_budget;
  return role;
}

// The four interpolation slots a template may reference.
struct AgentContext {
  std::string issue_text = "(none)";
  std::string test_output = "(none)";
  std::string current_patch = "(none)";
  std::string candidates = "(none)";
};

inline std::string interpolate(const std::string& templ, const AgentContext& ctx) {
  std::string out = templ;
  auto replace_all = [&out](const std::string& slot, const std::string& value) {
    for (size_t pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos))
      out.replace(pos, slot.size(), value), pos += value.size();
  };
  replace_all("{issue_text}", ctx.issue_text);
  replace_all("{test_output}", ctx.test_output);
  replace_all("{current_patch}", ctx.current_patch);
  replace_all("{candidates}", ctx.candidates);
  return out;
}

// Orchestrator-maintained inputs for context building. Every field is
// derived from agent-produced artifacts or the issue itself; hidden
// evaluation data has no path into this structure.
struct StageState {
  int round = 0;
  std::string code_patch_text;
  std::string prior_tests_text;
  std::string failing_output;
  std::string candidates_text;
};

inline AgentContext build_context(AgentRoleKind kind, const TaskInput& task,
                                  const StageState& state) {
  AgentContext ctx;
  ctx.issue_text = task.issue_text;
  switch (kind) {
    case AgentRoleKind::test_generator:
      if (state.round > 0) {
        if (!state.code_patch_text.empty()) ctx.current_patch = state.code_patch_text;
        if (!state.prior_tests_text.empty()) ctx.test_output = state.prior_tests_text;
      }
      break;
    case AgentRoleKind::code_generator:
      if (!state.failing_output.empty()) ctx.test_output = state.failing_output;
      if (!state.prior_tests_text.empty()) ctx.current_patch = state.prior_tests_text;
      break;
    case AgentRoleKind::selector:
      if (!state.candidates_text.empty()) ctx.candidates = state.candidates_text;
      break;
  }
  return ctx;
}

enum class TerminalReason { submitted, budget_exhausted, backend_error };

inline const char* to_string(TerminalReason reason) {
  switch (reason) {
    case TerminalReason::submitted: return "submitted";
    case TerminalReason::budget_exhausted: return "budget_exhausted";
    case TerminalReason::backend_error: return "backend_error";
  }
  return "?";
}

struct AgentOutcome {
  bool submitted = false;
  std::optional<std::string> diff_text;
  Trajectory trajectory;
  TerminalReason terminal_reason = TerminalReason::budget_exhausted;
  std::string error_detail;  // backend_error only
};

namespace detail {

inline std::string render_tool_result(const ToolInvocation& inv) {
  if (inv.tool == ToolName::bash && inv.outcome.is_object() && inv.outcome.contains("exit_code")) {
    std::string out = "exit_code: " + inv.outcome["exit_code"].dump();
    out += "\nstdout:\n" + inv.outcome.value("stdout", "");
    out += "\nstderr:\n" + inv.outcome.value("stderr", "");
    if (inv.outcome.contains("category"))
      out += "\nerror: " + inv.outcome.value("category", "");
    return out;
  }
  return inv.outcome.dump(2);
}

}  // namespace detail

inline AgentOutcome run_agent(const AgentRole& role, const AgentContext& context,
                              const std::string& task_id, Workspace& ws, ChatBackend& backend,
                              const PricingConfig& pricing) {
  AgentOutcome outcome;
  outcome.trajectory.role = role.kind;

  std::vector<ChatTurn> history;
  history.push_back({ChatRole::system, role.system_prompt, {}, {}});
  history.push_back({ChatRole::user, interpolate(role.user_template, context), {}, {}});

  int steps_used = 0;
  int toolless_streak = 0;
  while (true) {
    ChatResult reply;
    try {
      reply = backend.chat({task_id, role.kind, history, tool_registry()});
    } catch (const Error& e) {
      outcome.terminal_reason = TerminalReason::backend_error;
      outcome.error_detail = e.category() + ": " + e.what();
      return outcome;
    }
    history.push_back(reply.turn);

    TrajectoryEvent assistant;
    assistant.kind = TrajectoryEvent::Kind::assistant_message;
    assistant.content = reply.turn.content;
    assistant.tool_calls = reply.turn.tool_calls;
    outcome.trajectory.turns.push_back(assistant);
    outcome.trajectory.prompt_tokens += reply.usage.prompt_tokens;
    outcome.trajectory.completion_tokens += reply.usage.completion_tokens;
    outcome.trajectory.cost_usd += accrue_cost(reply.usage, pricing);

    if (reply.turn.tool_calls.empty()) {
      if (++toolless_streak > kMaxToollessTurns) {
        outcome.terminal_reason = TerminalReason::budget_exhausted;
        return outcome;
      }
      history.push_back({ChatRole::user,
                         "Continue by calling a tool. When your change is complete, call the "
                         "submitter tool to finish.",
                         {},
                         {}});
      continue;
    }
    toolless_streak = 0;

    for (const auto& call : reply.turn.tool_calls) {
      if (steps_used >= role.step_budget) {
        outcome.terminal_reason = TerminalReason::budget_exhausted;
        return outcome;
      }
      ToolInvocation inv = dispatch(ws, call);
      ++steps_used;

      TrajectoryEvent invocation;
      invocation.kind = TrajectoryEvent::Kind::tool_invocation;
      invocation.invocation = inv;
      outcome.trajectory.turns.push_back(invocation);

      std::string rendered = detail::render_tool_result(inv);
      TrajectoryEvent result;
      result.kind = TrajectoryEvent::Kind::tool_result;
      result.content = rendered;
      result.tool_call_id = call.call_id;
      outcome.trajectory.turns.push_back(result);
      history.push_back({ChatRole::tool, rendered, {}, call.call_id});

      if (inv.tool == ToolName::submitter && inv.success) {
        std::string diff = inv.outcome.value("diff_text", "");
        if (diff.empty()) {
          // An empty submission produces no candidate; treat like running out
          // of budget rather than a success.
          outcome.terminal_reason = TerminalReason::budget_exhausted;
          return outcome;
        }
        outcome.submitted = true;
        outcome.diff_text = diff;
        outcome.terminal_reason = TerminalReason::submitted;
        return outcome;
      }
    }
  }
}

}  // namespace patchforge
