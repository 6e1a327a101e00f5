#pragma once

// Shared domain types: tasks, patches, tool invocations, trajectories, and
// candidate bundles. All are immutable value objects once constructed and
// safe to move between workers.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchforge/decimal.hpp"
#include "patchforge/diff.hpp"
#include "patchforge/util.hpp"

namespace patchforge {

using json = nlohmann::json;

class PatchKindViolation : public Error {
 public:
  explicit PatchKindViolation(const std::string& message) : Error("PatchKindViolation", message) {}
};

struct EnvSpec {
  std::vector<std::string> install_cmds;
  // Command template for one test id; "{id}" is replaced with the identifier.
  std::string test_cmd_template;
  // The repository's own pre-existing suite command; empty if none.
  std::string repo_test_cmd;
};

// The agent-visible portion of a task. Operations reachable from agents or
// the orchestrator accept only this type, never the hidden test lists.
struct TaskInput {
  std::string task_id;
  fs::path repo_root;
  std::string base_revision;  // content hash of the clean tree; empty = unpinned
  std::string issue_text;
  EnvSpec env;
};

struct IssueTask {
  TaskInput input;
  std::vector<std::string> hidden_fail_to_pass;
  std::vector<std::string> hidden_pass_to_pass;
  fs::path eval_tests_dir;  // tree injected into evaluation workspaces only

  const std::string& task_id() const { return input.task_id; }
};

enum class PatchKind { code, test };
enum class PatchProducer { test_generator, code_generator };

inline const char* to_string(PatchKind kind) {
  return kind == PatchKind::code ? "code" : "test";
}
inline const char* to_string(PatchProducer producer) {
  return producer == PatchProducer::test_generator ? "test_generator" : "code_generator";
}

struct Patch {
  PatchKind kind = PatchKind::code;
  std::string diff_text;  // normalized serialization of the parsed diff
  PatchProducer producer = PatchProducer::code_generator;
  int iteration = 0;

  UnifiedDiff parse() const { return parse_diff(diff_text); }
  bool empty() const { return diff_text.empty(); }
};

// Validates the kind rule at construction: test patches touch only test
// paths, code patches touch none.
inline Patch make_patch(PatchKind kind, const UnifiedDiff& diff, PatchProducer producer,
                        int iteration) {
  for (const auto& path : diff.paths()) {
    if (kind == PatchKind::test && !is_test_path(path))
      throw PatchKindViolation("test patch touches non-test file: " + path);
    if (kind == PatchKind::code && is_test_path(path))
      throw PatchKindViolation("code patch touches test file: " + path);
  }
  return Patch{kind, serialize_diff(diff), producer, iteration};
}

inline Patch make_patch(PatchKind kind, const std::string& diff_text, PatchProducer producer,
                        int iteration) {
  return make_patch(kind, parse_diff(diff_text), producer, iteration);
}

enum class ToolName { bash, editor, searcher, submitter };

inline const char* to_string(ToolName tool) {
  switch (tool) {
    case ToolName::bash: return "bash";
    case ToolName::editor: return "editor";
    case ToolName::searcher: return "searcher";
    case ToolName::submitter: return "submitter";
  }
  return "?";
}

struct ToolInvocation {
  ToolName tool = ToolName::bash;
  json args;
  json outcome;  // captured output or {category, message} on failure
  bool success = false;
  double duration_s = 0.0;

  std::string error_category() const {
    return outcome.is_object() ? outcome.value("category", "") : "";
  }
};

struct ToolCallRequest {
  std::string call_id;
  std::string name;
  json args;
};

enum class AgentRoleKind { test_generator, code_generator, selector };

inline const char* to_string(AgentRoleKind role) {
  switch (role) {
    case AgentRoleKind::test_generator: return "test_generator";
    case AgentRoleKind::code_generator: return "code_generator";
    case AgentRoleKind::selector: return "selector";
  }
  return "?";
}

struct TrajectoryEvent {
  enum class Kind { assistant_message, tool_invocation, tool_result };
  Kind kind = Kind::assistant_message;
  std::string content;                       // assistant text or tool result payload
  std::vector<ToolCallRequest> tool_calls;   // assistant_message only
  std::string tool_call_id;                  // tool_result only
  ToolInvocation invocation;                 // tool_invocation only
};

struct Trajectory {
  AgentRoleKind role = AgentRoleKind::test_generator;
  std::vector<TrajectoryEvent> turns;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  Decimal cost_usd;

  size_t tool_call_count() const {
    size_t count = 0;
    for (const auto& turn : turns)
      if (turn.kind == TrajectoryEvent::Kind::tool_invocation) ++count;
    return count;
  }
};

struct CandidateBundle {
  Patch code_patch;
  std::vector<Patch> test_patches;
  std::map<std::string, bool> verification;  // test id (or suite command) -> passed
  int iteration_created = 0;
  bool verified = false;  // false for the no-reproducing-test fallback bundle
};

}  // namespace patchforge
