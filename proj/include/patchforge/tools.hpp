#pragma once

// Agent-callable tools: bash, editor, searcher, submitter. Every call goes
// through dispatch(), which validates arguments against the registered
// schema and reports all failures in-band (success=false) so a bad call
// never aborts an agent run.

#include <chrono>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "patchforge/model.hpp"
#include "patchforge/workspace.hpp"

namespace patchforge {

struct ToolParam {
  std::string name;
  std::string type;  // "string" or "integer"
  bool required = false;
  std::string description;
};

struct ToolSchema {
  ToolName tool = ToolName::bash;
  std::string name;
  std::string description;
  std::vector<ToolParam> params;
};

inline const std::vector<ToolSchema>& tool_registry() {
  static const std::vector<ToolSchema> registry = {
      {ToolName::bash,
       "bash",
       "Execute a shell command inside the task workspace and return its "
       "output and exit code.",
       {{"command", "string", true, "shell command to run"}}},
      {ToolName::editor,
       "editor",
       "File editing commands: create a file, view line ranges, insert "
       "content after a line, or replace a unique string.",
       {{"command", "string", true, "one of create, view, insert, str_replace"},
        {"path", "string", true, "repository-relative file path"},
        {"content", "string", false, "content for create/insert"},
        {"start", "integer", false, "first line for view (1-based, default 1)"},
        {"end", "integer", false, "last line for view (default end of file)"},
        {"line", "integer", false, "insert after this line (0 prepends)"},
        {"old_str", "string", false, "exact string to replace; must occur exactly once"},
        {"new_str", "string", false, "replacement string"}}},
      {ToolName::searcher,
       "searcher",
       "Search file contents under the workspace root with a regular "
       "expression; returns matching lines ordered by path and line number.",
       {{"pattern", "string", true, "regular expression, matched per line"},
        {"path_filter", "string", false, "glob limiting which files are scanned"},
        {"max_results", "integer", false, "result cap (default 1000)"}}},
      {ToolName::submitter,
       "submitter",
       "Extract the current workspace diff against the clean revision and "
       "submit it as this run's patch.",
       {}}};
  return registry;
}

inline const ToolSchema* find_tool(const std::string& name) {
  for (const auto& schema : tool_registry())
    if (schema.name == name) return &schema;
  return nullptr;
}

// Function-calling declaration for the LLM gateway.
inline json schema_to_json(const ToolSchema& schema) {
  json properties = json::object();
  json required = json::array();
  for (const auto& p : schema.params) {
    properties[p.name] = {{"type", p.type}, {"description", p.description}};
    if (p.required) required.push_back(p.name);
  }
  return {{"name", schema.name},
          {"description", schema.description},
          {"parameters",
           {{"type", "object"}, {"properties", properties}, {"required", required}}}};
}

struct SearchMatch {
  std::string path;
  long line_number = 0;  // 1-based
  std::string line_text;

  bool operator==(const SearchMatch&) const = default;
};

inline constexpr size_t kSearchDefaultCap = 1000;

namespace detail {

inline ToolInvocation tool_failure(ToolName tool, json args, const std::string& category,
                                   const std::string& message) {
  ToolInvocation inv;
  inv.tool = tool;
  inv.args = std::move(args);
  inv.success = false;
  inv.outcome = {{"category", category}, {"message", message}};
  return inv;
}

inline ToolInvocation tool_success(ToolName tool, json args, json outcome) {
  ToolInvocation inv;
  inv.tool = tool;
  inv.args = std::move(args);
  inv.success = true;
  inv.outcome = std::move(outcome);
  return inv;
}

// Positions where needle occurs in haystack (overlapping occurrences count).
inline std::vector<size_t> find_occurrences(const std::string& haystack,
                                            const std::string& needle) {
  std::vector<size_t> positions;
  if (needle.empty()) return positions;
  for (size_t pos = haystack.find(needle); pos != std::string::npos;
       pos = haystack.find(needle, pos + 1))
    positions.push_back(pos);
  return positions;
}

}  // namespace detail

inline ToolInvocation tool_bash(Workspace& ws, const std::string& command) {
  json args = {{"command", command}};
  try {
    ExecResult r = ws.exec(command);
    json outcome = {{"exit_code", r.exit_code},
                    {"stdout", r.stdout_text},
                    {"stderr", r.stderr_text},
                    {"timed_out", r.timed_out}};
    if (r.timed_out) {
      outcome["category"] = "Timeout";
      return ToolInvocation{ToolName::bash, args, outcome, false, 0.0};
    }
    if (r.exit_code != 0) {
      outcome["category"] = "NonZeroExit";
      return ToolInvocation{ToolName::bash, args, outcome, false, 0.0};
    }
    return detail::tool_success(ToolName::bash, args, outcome);
  } catch (const Error& e) {
    return detail::tool_failure(ToolName::bash, args, e.category(), e.what());
  }
}

enum class EditorCommand { create, view, insert, str_replace };

inline ToolInvocation tool_editor(Workspace& ws, EditorCommand command, const json& args) {
  auto fail = [&](const std::string& category, const std::string& message) {
    return detail::tool_failure(ToolName::editor, args, category, message);
  };
  try {
    const std::string rel = args.at("path").get<std::string>();
    fs::path target = resolve_under_root(ws.root(), rel);

    switch (command) {
      case EditorCommand::create: {
        if (fs::exists(target)) return fail("FileExists", rel + " already exists");
        write_file(target, args.value("content", ""));
        return detail::tool_success(ToolName::editor, args, {{"created", rel}});
      }
      case EditorCommand::view: {
        if (!fs::is_regular_file(target)) return fail("FileNotFound", rel);
        std::vector<std::string> lines = split_lines(read_file(target));
        long total = static_cast<long>(lines.size());
        long start = args.value("start", 1L);
        long end = args.value("end", total);
        if (start < 1 || end < start)
          return fail("BadRange", "need 1 <= start <= end, got " + std::to_string(start) +
                                      ".." + std::to_string(end));
        if (start > total && total > 0)
          return fail("BadRange", "start " + std::to_string(start) + " beyond last line " +
                                      std::to_string(total));
        end = std::min(end, total);
        std::string view;
        for (long i = start; i <= end; ++i)
          view += std::to_string(i) + "\t" + lines[static_cast<size_t>(i - 1)] + "\n";
        return detail::tool_success(
            ToolName::editor, args,
            {{"content", view}, {"start", start}, {"end", end}, {"total_lines", total}});
      }
      case EditorCommand::insert: {
        if (!fs::is_regular_file(target)) return fail("FileNotFound", rel);
        std::string original = read_file(target);
        std::vector<std::string> lines = split_lines(original);
        long total = static_cast<long>(lines.size());
        long at = args.value("line", -1L);
        if (at < 0 || at > total)
          return fail("BadRange", "insert line must be in [0, " + std::to_string(total) +
                                      "], got " + std::to_string(at));
        std::vector<std::string> added = split_lines(args.value("content", ""));
        lines.insert(lines.begin() + at, added.begin(), added.end());
        bool final_newline = original.empty() || original.back() == '\n';
        std::string updated;
        for (size_t i = 0; i < lines.size(); ++i) {
          updated += lines[i];
          if (i + 1 < lines.size() || final_newline) updated += '\n';
        }
        write_file(target, updated);
        return detail::tool_success(ToolName::editor, args,
                                    {{"inserted_after", at},
                                     {"lines_added", static_cast<long>(added.size())}});
      }
      case EditorCommand::str_replace: {
        if (!fs::is_regular_file(target)) return fail("FileNotFound", rel);
        std::string old_str = args.value("old_str", "");
        if (old_str.empty()) return fail("ProtocolError", "old_str must be non-empty");
        std::string content = read_file(target);
        auto positions = detail::find_occurrences(content, old_str);
        if (positions.empty()) return fail("OldStrNotFound", "old_str not found in " + rel);
        if (positions.size() != 1)
          return fail("OldStrAmbiguous", "old_str occurs " + std::to_string(positions.size()) +
                                             " times in " + rel);
        content.replace(positions[0], old_str.size(), args.value("new_str", ""));
        write_file(target, content);
        return detail::tool_success(ToolName::editor, args, {{"replaced_in", rel}});
      }
    }
    return fail("ProtocolError", "unknown editor command");
  } catch (const Error& e) {
    return fail(e.category(), e.what());
  } catch (const json::exception& e) {
    return fail("ProtocolError", e.what());
  }
}

inline ToolInvocation tool_search(Workspace& ws, const std::string& pattern,
                                  const std::string& path_filter = "",
                                  size_t max_results = kSearchDefaultCap) {
  json args = {{"pattern", pattern}};
  if (!path_filter.empty()) args["path_filter"] = path_filter;
  args["max_results"] = max_results;
  try {
    std::regex re;
    try {
      re = std::regex(pattern, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
      return detail::tool_failure(ToolName::searcher, args, "BadPattern", e.what());
    }
    json matches = json::array();
    size_t found = 0;
    bool truncated = false;
    for (const auto& rel : list_tree(ws.root())) {
      if (!path_filter.empty() && !glob_match(path_filter, rel)) continue;
      std::string content = read_file(ws.root() / rel);
      if (looks_binary(content)) continue;
      std::vector<std::string> lines = split_lines(content);
      for (size_t i = 0; i < lines.size(); ++i) {
        if (!std::regex_search(lines[i], re)) continue;
        if (found == max_results) {
          truncated = true;
          break;
        }
        matches.push_back({{"path", rel},
                           {"line_number", static_cast<long>(i + 1)},
                           {"line_text", lines[i]}});
        ++found;
      }
      if (truncated) break;
    }
    return detail::tool_success(
        ToolName::searcher, args,
        {{"matches", matches}, {"count", found}, {"truncated", truncated}});
  } catch (const Error& e) {
    return detail::tool_failure(ToolName::searcher, args, e.category(), e.what());
  }
}

// Structured view of a search outcome, for callers that want typed matches.
inline std::vector<SearchMatch> search_matches(const ToolInvocation& inv) {
  std::vector<SearchMatch> out;
  if (!inv.success) return out;
  for (const auto& m : inv.outcome.at("matches")) {
    out.push_back({m.at("path").get<std::string>(), m.at("line_number").get<long>(),
                   m.at("line_text").get<std::string>()});
  }
  return out;
}

inline ToolInvocation tool_submit(Workspace& ws) {
  try {
    std::string diff = ws.extract_diff_text();
    return detail::tool_success(ToolName::submitter, json::object(),
                                {{"diff_text", diff}, {"empty", diff.empty()}});
  } catch (const Error& e) {
    return detail::tool_failure(ToolName::submitter, json::object(), e.category(), e.what());
  }
}

namespace detail {

inline bool type_matches(const json& value, const std::string& type) {
  if (type == "string") return value.is_string();
  if (type == "integer") return value.is_number_integer();
  return false;
}

inline ToolInvocation dispatch_inner(Workspace& ws, const ToolCallRequest& call) {
  const ToolSchema* schema = find_tool(call.name);
  if (!schema)
    return tool_failure(ToolName::bash, call.args, "ProtocolError",
                        "unknown tool: " + call.name);
  json args = call.args.is_null() ? json::object() : call.args;
  if (!args.is_object())
    return tool_failure(schema->tool, call.args, "ProtocolError", "arguments must be an object");
  for (const auto& p : schema->params) {
    if (!args.contains(p.name)) {
      if (p.required)
        return tool_failure(schema->tool, args, "ProtocolError",
                            "missing required argument: " + p.name);
      continue;
    }
    if (!type_matches(args[p.name], p.type))
      return tool_failure(schema->tool, args, "ProtocolError",
                          "argument " + p.name + " must be a " + p.type);
  }

  switch (schema->tool) {
    case ToolName::bash: {
      std::string command = args["command"].get<std::string>();
      if (command.empty())
        return tool_failure(ToolName::bash, args, "ProtocolError", "command must be non-empty");
      return tool_bash(ws, command);
    }
    case ToolName::editor: {
      std::string sub = args["command"].get<std::string>();
      if (sub == "create") return tool_editor(ws, EditorCommand::create, args);
      if (sub == "view") return tool_editor(ws, EditorCommand::view, args);
      if (sub == "insert") return tool_editor(ws, EditorCommand::insert, args);
      if (sub == "str_replace") return tool_editor(ws, EditorCommand::str_replace, args);
      return tool_failure(ToolName::editor, args, "ProtocolError",
                          "unknown editor command: " + sub);
    }
    case ToolName::searcher:
      return tool_search(ws, args["pattern"].get<std::string>(), args.value("path_filter", ""),
                         static_cast<size_t>(std::max(0L, args.value("max_results",
                                                                     (long)kSearchDefaultCap))));
    case ToolName::submitter:
      return tool_submit(ws);
  }
  return tool_failure(schema->tool, args, "ProtocolError", "unroutable tool");
}

}  // namespace detail

inline ToolInvocation dispatch(Workspace& ws, const ToolCallRequest& call) {
  auto start = std::chrono::steady_clock::now();
  ToolInvocation inv = detail::dispatch_inner(ws, call);
  inv.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return inv;
}

// Per-tool call and failure counters; merged across tasks for reports.
struct ToolTelemetry {
  struct Counter {
    long calls = 0;
    long failures = 0;
  };
  std::map<std::string, Counter> per_tool;

  void record(const ToolInvocation& inv) {
    auto& c = per_tool[to_string(inv.tool)];
    ++c.calls;
    if (!inv.success) ++c.failures;
  }

  void merge(const ToolTelemetry& other) {
    for (const auto& [name, c] : other.per_tool) {
      per_tool[name].calls += c.calls;
      per_tool[name].failures += c.failures;
    }
  }

  long total_calls() const {
    long sum = 0;
    for (const auto& [_, c] : per_tool) sum += c.calls;
    return sum;
  }

  json to_json() const {
    json out = json::object();
    for (const auto& [name, c] : per_tool)
      out[name] = {{"calls", c.calls}, {"failures", c.failures}};
    return out;
  }

  static ToolTelemetry from_json(const json& j) {
    ToolTelemetry t;
    for (auto it = j.begin(); it != j.end(); ++it)
      t.per_tool[it.key()] = {it.value().at("calls").get<long>(),
                              it.value().at("failures").get<long>()};
    return t;
  }
};

}  // namespace patchforge
