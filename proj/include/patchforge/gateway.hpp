#pragma once

// Backend-agnostic chat interface. Two implementations: a deterministic
// scripted backend for tests and a live HTTP chat-completions client with
// retry and exponential backoff. Token cost accounting is exact decimal.

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "patchforge/decimal.hpp"
#include "patchforge/model.hpp"
#include "patchforge/tools.hpp"
#include "patchforge/util.hpp"

namespace patchforge {

enum class ChatRole { system, user, assistant, tool };

inline const char* to_string(ChatRole role) {
  switch (role) {
    case ChatRole::system: return "system";
    case ChatRole::user: return "user";
    case ChatRole::assistant: return "assistant";
    case ChatRole::tool: return "tool";
  }
  return "?";
}

struct ChatTurn {
  ChatRole role = ChatRole::user;
  std::string content;
  std::vector<ToolCallRequest> tool_calls;  // assistant turns only
  std::string tool_call_id;                 // tool turns only
};

struct Usage {
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

struct ChatResult {
  ChatTurn turn;  // role is always assistant
  Usage usage;
};

struct PricingConfig {
  Decimal prompt_price_per_1k;
  Decimal completion_price_per_1k;

  static PricingConfig parse(const std::string& prompt, const std::string& completion) {
    PricingConfig p{Decimal::parse(prompt), Decimal::parse(completion)};
    if (p.prompt_price_per_1k.negative() || p.completion_price_per_1k.negative())
      throw ConfigError("prices must be >= 0");
    return p;
  }
};

// tokens/1000 x price per 1k, exact.
inline Decimal accrue_cost(const Usage& usage, const PricingConfig& pricing) {
  if (usage.prompt_tokens < 0 || usage.completion_tokens < 0)
    throw ConfigError("token counts must be >= 0");
  Decimal prompt = pricing.prompt_price_per_1k.times(usage.prompt_tokens).shift_down(3);
  Decimal completion = pricing.completion_price_per_1k.times(usage.completion_tokens).shift_down(3);
  return prompt + completion;
}

struct ChatRequest {
  std::string task_id;
  AgentRoleKind role = AgentRoleKind::test_generator;
  std::vector<ChatTurn> history;
  std::vector<ToolSchema> tools;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResult chat(const ChatRequest& request) = 0;
  virtual std::string name() const = 0;
};

struct ScriptTurn {
  std::string content;
  std::vector<ToolCallRequest> tool_calls;
  std::optional<long> prompt_tokens;
  std::optional<long> completion_tokens;
};

using RoleScript = std::map<std::string, std::vector<ScriptTurn>>;

// Replays pre-authored assistant turns. Matching is positional per
// (task_id, role); scripts are keyed by task id, with "*" as a fallback
// applying to any task.
class ScriptedBackend : public ChatBackend {
 public:
  ScriptedBackend() = default;

  static ScriptedBackend from_file(const fs::path& path) {
    ScriptedBackend backend;
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw ConfigError("script " + path.string() + " is not valid JSON: " + e.what());
    }
    backend.load_document(doc, path.string());
    return backend;
  }

  static ScriptedBackend from_json(const json& doc) {
    ScriptedBackend backend;
    backend.load_document(doc, "<inline>");
    return backend;
  }

  // Loads a role-keyed script file and registers it under a specific task.
  void load_file_for_task(const std::string& task_id, const fs::path& path) {
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw ConfigError("script " + path.string() + " is not valid JSON: " + e.what());
    }
    load_role_map(task_id, doc, path.string());
  }

  // Registers turns for one (task, role); task "*" matches any task.
  void add_turns(const std::string& task_id, const std::string& role,
                 std::vector<ScriptTurn> turns) {
    auto& slot = scripts_[task_id][role];
    slot.insert(slot.end(), std::make_move_iterator(turns.begin()),
                std::make_move_iterator(turns.end()));
  }

  bool has_script_for(const std::string& task_id) const {
    return scripts_.count(task_id) || scripts_.count("*");
  }

  ChatResult chat(const ChatRequest& request) override {
    std::lock_guard<std::mutex> lock(*mu_);
    const std::string role = to_string(request.role);
    const RoleScript* script = nullptr;
    if (auto it = scripts_.find(request.task_id); it != scripts_.end())
      script = &it->second;
    else if (auto any = scripts_.find("*"); any != scripts_.end())
      script = &any->second;
    if (!script)
      throw ScriptExhausted("no script registered for task " + request.task_id);

    auto turns = script->find(role);
    if (turns == script->end())
      throw ScriptExhausted("no script for role " + role + " in task " + request.task_id);
    size_t& cursor = cursors_[{request.task_id, role}];
    if (cursor >= turns->second.size())
      throw ScriptExhausted("script for task " + request.task_id + " role " + role +
                            " exhausted after " + std::to_string(cursor) + " turns");
    const ScriptTurn& scripted = turns->second[cursor];
    ++cursor;

    ChatResult result;
    result.turn.role = ChatRole::assistant;
    result.turn.content = scripted.content;
    result.turn.tool_calls = scripted.tool_calls;
    for (size_t i = 0; i < result.turn.tool_calls.size(); ++i)
      if (result.turn.tool_calls[i].call_id.empty())
        result.turn.tool_calls[i].call_id =
            "call_" + role + "_" + std::to_string(cursor) + "_" + std::to_string(i);

    long history_words = 0;
    for (const auto& turn : request.history)
      history_words += static_cast<long>(word_count(turn.content));
    result.usage.prompt_tokens = scripted.prompt_tokens.value_or(history_words);
    long reply_words = static_cast<long>(word_count(scripted.content));
    for (const auto& call : scripted.tool_calls)
      reply_words += static_cast<long>(word_count(call.args.dump()));
    result.usage.completion_tokens = scripted.completion_tokens.value_or(reply_words);
    return result;
  }

  std::string name() const override { return "scripted"; }

 private:
  void load_document(const json& doc, const std::string& origin) {
    if (!doc.is_object()) throw ConfigError("script " + origin + ": top level must be an object");
    // Two layouts: {role: [turns]} for a single task, or {task_id: {role: [turns]}}.
    bool role_keyed = false;
    for (auto it = doc.begin(); it != doc.end(); ++it)
      if (it.value().is_array()) role_keyed = true;
    if (role_keyed) {
      load_role_map("*", doc, origin);
    } else {
      for (auto it = doc.begin(); it != doc.end(); ++it)
        load_role_map(it.key(), it.value(), origin);
    }
  }

  void load_role_map(const std::string& task_id, const json& role_map,
                     const std::string& origin) {
    if (!role_map.is_object())
      throw ConfigError("script " + origin + ": expected {role: [turns]} for " + task_id);
    for (auto it = role_map.begin(); it != role_map.end(); ++it) {
      if (!it.value().is_array())
        throw ConfigError("script " + origin + ": turns for role " + it.key() +
                          " must be an array");
      std::vector<ScriptTurn> turns;
      for (const auto& raw : it.value()) {
        ScriptTurn turn;
        turn.content = raw.value("content", "");
        if (raw.contains("prompt_tokens")) turn.prompt_tokens = raw["prompt_tokens"].get<long>();
        if (raw.contains("completion_tokens"))
          turn.completion_tokens = raw["completion_tokens"].get<long>();
        for (const auto& call : raw.value("tool_calls", json::array())) {
          ToolCallRequest req;
          req.call_id = call.value("call_id", "");
          req.name = call.at("name").get<std::string>();
          req.args = call.value("args", json::object());
          turn.tool_calls.push_back(std::move(req));
        }
        turns.push_back(std::move(turn));
      }
      add_turns(task_id, it.key(), std::move(turns));
    }
  }

  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  std::map<std::string, RoleScript> scripts_;
  std::map<std::pair<std::string, std::string>, size_t> cursors_;
};

struct HttpBackendConfig {
  std::string endpoint = "http://127.0.0.1:8080";  // scheme://host:port
  std::string path = "/v1/chat/completions";
  std::string model = "default";
  std::string api_key;  // resolved from the environment by the config layer
  int retry_limit = 3;  // retries after the first attempt
  double backoff_base_s = 0.5;
  double request_timeout_s = 120.0;
};

// Chat-completions client. Transport failures and 5xx/429 responses are
// retried with exponential backoff; 4xx context-length failures map to
// ContextOverflow.
class HttpBackend : public ChatBackend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  ChatResult chat(const ChatRequest& request) override {
    json body = {{"model", cfg_.model}, {"messages", json::array()}};
    for (const auto& turn : request.history) body["messages"].push_back(turn_to_json(turn));
    if (!request.tools.empty()) {
      body["tools"] = json::array();
      for (const auto& schema : request.tools)
        body["tools"].push_back({{"type", "function"}, {"function", schema_to_json(schema)}});
    }
    const std::string payload = body.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.retry_limit; ++attempt) {
      attempts_.fetch_add(1);
      if (attempt > 0) {
        double delay = cfg_.backoff_base_s * static_cast<double>(1 << (attempt - 1));
        std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      }
      httplib::Client client(cfg_.endpoint);
      client.set_connection_timeout(std::chrono::duration<double>(cfg_.request_timeout_s));
      client.set_read_timeout(std::chrono::duration<double>(cfg_.request_timeout_s));
      httplib::Headers headers;
      if (!cfg_.api_key.empty())
        headers.emplace("Authorization", "Bearer " + cfg_.api_key);
      auto res = client.Post(cfg_.path, headers, payload, "application/json");
      if (!res) {
        last_error = "transport: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "http " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        if (is_context_overflow(res->body))
          throw ContextOverflow("backend reported context overflow: " + res->body);
        throw BackendUnavailable("http " + std::to_string(res->status) + ": " + res->body);
      }
      return parse_response(res->body);
    }
    throw BackendUnavailable("retries exhausted (" + std::to_string(cfg_.retry_limit + 1) +
                             " attempts): " + last_error);
  }

  std::string name() const override { return "live"; }

  long attempts() const { return attempts_.load(); }

 private:
  static bool is_context_overflow(const std::string& body) {
    if (body.find("context_length_exceeded") != std::string::npos) return true;
    return body.find("maximum context length") != std::string::npos;
  }

  static json turn_to_json(const ChatTurn& turn) {
    json out = {{"role", to_string(turn.role)}, {"content", turn.content}};
    if (!turn.tool_calls.empty()) {
      out["tool_calls"] = json::array();
      for (const auto& call : turn.tool_calls)
        out["tool_calls"].push_back(
            {{"id", call.call_id},
             {"type", "function"},
             {"function", {{"name", call.name}, {"arguments", call.args.dump()}}}});
    }
    if (!turn.tool_call_id.empty()) out["tool_call_id"] = turn.tool_call_id;
    return out;
  }

  static ChatResult parse_response(const std::string& body) {
    json doc;
    try {
      doc = json::parse(body);
    } catch (const json::exception& e) {
      throw BackendUnavailable(std::string("unparseable response: ") + e.what());
    }
    try {
      ChatResult result;
      result.turn.role = ChatRole::assistant;
      const json& message = doc.at("choices").at(0).at("message");
      if (message.contains("content") && message["content"].is_string())
        result.turn.content = message["content"].get<std::string>();
      for (const auto& call : message.value("tool_calls", json::array())) {
        ToolCallRequest req;
        req.call_id = call.value("id", "");
        req.name = call.at("function").at("name").get<std::string>();
        const std::string raw_args = call.at("function").value("arguments", "{}");
        try {
          req.args = raw_args.empty() ? json::object() : json::parse(raw_args);
        } catch (const json::exception&) {
          req.args = raw_args;  // leave malformed args for dispatch to reject
        }
        result.turn.tool_calls.push_back(std::move(req));
      }
      if (doc.contains("usage")) {
        result.usage.prompt_tokens = doc["usage"].value("prompt_tokens", 0L);
        result.usage.completion_tokens = doc["usage"].value("completion_tokens", 0L);
      }
      return result;
    } catch (const json::exception& e) {
      throw BackendUnavailable(std::string("malformed completion payload: ") + e.what());
    }
  }

  HttpBackendConfig cfg_;
  std::atomic<long> attempts_{0};
};

}  // namespace patchforge
