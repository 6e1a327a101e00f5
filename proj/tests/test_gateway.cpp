#include <atomic>
#include <string>
#include <thread>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "patchforge/gateway.hpp"

using namespace patchforge;

namespace {

ChatRequest req(const std::string& task, AgentRoleKind role,
                std::vector<ChatTurn> history = {}) {
  return ChatRequest{task, role, std::move(history), {}};
}

}  // namespace

TEST_CASE("accrue_cost is exact decimal arithmetic") {
  PricingConfig pricing = PricingConfig::parse("0.27", "1.10");

  CHECK(accrue_cost({1234, 567}, pricing).to_string() == "0.95688");
  CHECK(accrue_cost({0, 0}, pricing).to_string() == "0");
  CHECK(accrue_cost({1000, 0}, pricing).to_string() == "0.27");
  CHECK(accrue_cost({0, 1000}, pricing).to_string() == "1.1");
  CHECK(accrue_cost({1, 1}, pricing).to_string() == "0.00137");

  // Per-turn accrual sums to the same exact total as one combined accrual.
  Decimal split = accrue_cost({1234, 567}, pricing) + accrue_cost({980, 210}, pricing);
  CHECK(split == accrue_cost({1234 + 980, 567 + 210}, pricing));

  CHECK_THROWS_AS(accrue_cost({-1, 0}, pricing), ConfigError);
  CHECK_THROWS_AS(PricingConfig::parse("-0.1", "1.0"), ConfigError);
  CHECK_THROWS_AS(PricingConfig::parse("abc", "1.0"), Error);
}

TEST_CASE("scripted backend replays turns positionally per task and role") {
  json doc = {{"test_generator",
               {{{"content", "first"},
                 {"tool_calls", {{{"name", "bash"}, {"args", {{"command", "ls"}}}}}}},
                {{"content", "second"}}}},
              {"code_generator", {{{"content", "codegen one"}}}}};
  ScriptedBackend backend = ScriptedBackend::from_json(doc);

  ChatResult one = backend.chat(req("task-a", AgentRoleKind::test_generator));
  CHECK(one.turn.content == "first");
  REQUIRE(one.turn.tool_calls.size() == 1);
  CHECK(one.turn.tool_calls[0].name == "bash");
  CHECK(one.turn.tool_calls[0].call_id == "call_test_generator_1_0");

  // Role cursors are independent.
  CHECK(backend.chat(req("task-a", AgentRoleKind::code_generator)).turn.content == "codegen one");
  CHECK(backend.chat(req("task-a", AgentRoleKind::test_generator)).turn.content == "second");
  CHECK_THROWS_AS(backend.chat(req("task-a", AgentRoleKind::test_generator)), ScriptExhausted);
  CHECK_THROWS_AS(backend.chat(req("task-a", AgentRoleKind::selector)), ScriptExhausted);
}

TEST_CASE("scripted backend keys cursors by task id with wildcard fallback") {
  ScriptedBackend backend;
  backend.add_turns("t1", "test_generator", {{"for t1 only", {}, {}, {}}});
  backend.add_turns("*", "test_generator", {{"fallback", {}, {}, {}}});

  CHECK(backend.chat(req("t1", AgentRoleKind::test_generator)).turn.content == "for t1 only");
  // A different task never consumes t1's script.
  CHECK(backend.chat(req("t2", AgentRoleKind::test_generator)).turn.content == "fallback");
  CHECK_THROWS_AS(backend.chat(req("t1", AgentRoleKind::test_generator)), ScriptExhausted);
  CHECK(backend.has_script_for("anything"));

  ScriptedBackend empty;
  CHECK_FALSE(empty.has_script_for("t1"));
  CHECK_THROWS_AS(empty.chat(req("t1", AgentRoleKind::test_generator)), ScriptExhausted);
}

TEST_CASE("scripted backend token counts default to word counts") {
  json doc = {{"test_generator",
               {{{"content", "three word reply"},
                 {"tool_calls", {{{"name", "bash"}, {"args", {{"command", "echo hi"}}}}}}},
                {{"content", "pinned"}, {"prompt_tokens", 42}, {"completion_tokens", 7}}}}};
  ScriptedBackend backend = ScriptedBackend::from_json(doc);

  std::vector<ChatTurn> history{{ChatRole::system, "be good", {}, {}},
                                {ChatRole::user, "fix the bug now", {}, {}}};
  ChatResult r = backend.chat(req("t", AgentRoleKind::test_generator, history));
  CHECK(r.usage.prompt_tokens == 6);  // "be good" + "fix the bug now"
  long args_words = static_cast<long>(word_count(json({{"command", "echo hi"}}).dump()));
  CHECK(r.usage.completion_tokens == 3 + args_words);

  ChatResult pinned = backend.chat(req("t", AgentRoleKind::test_generator, history));
  CHECK(pinned.usage.prompt_tokens == 42);
  CHECK(pinned.usage.completion_tokens == 7);
}

TEST_CASE("scripted backend rejects malformed script documents") {
  CHECK_THROWS_AS(ScriptedBackend::from_json(json::array({1, 2})), ConfigError);
  CHECK_THROWS_AS(ScriptedBackend::from_json({{"t1", {{"role", "not an array"}}}}), ConfigError);
  pftest::TempDir tmp;
  write_file(tmp.dir / "broken.json", "{not json");
  CHECK_THROWS_AS(ScriptedBackend::from_file(tmp.dir / "broken.json"), ConfigError);
}

TEST_CASE("http backend retries 5xx then parses a completion") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& request, httplib::Response& res) {
    int n = hits.fetch_add(1);
    if (n < 2) {
      res.status = 500;
      res.set_content("overloaded", "text/plain");
      return;
    }
    json body = json::parse(request.body);
    REQUIRE(body["model"] == "unit-model");
    REQUIRE(body["messages"].size() == 2);
    REQUIRE(body["tools"].size() == 4);
    json reply = {
        {"choices",
         {{{"message",
            {{"content", "done"},
             {"tool_calls",
              {{{"id", "call_9"},
                {"type", "function"},
                {"function", {{"name", "bash"}, {"arguments", "{\"command\": \"ls\"}"}}}},
               {{"id", "call_10"},
                {"type", "function"},
                {"function", {{"name", "editor"}, {"arguments", "{broken"}}}}}}}}}}},
        {"usage", {{"prompt_tokens", 11}, {"completion_tokens", 5}}}};
    res.set_content(reply.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpBackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.model = "unit-model";
  cfg.api_key = "sk-unit";
  cfg.retry_limit = 3;
  cfg.backoff_base_s = 0.01;
  HttpBackend backend(cfg);

  ChatRequest request{"t", AgentRoleKind::code_generator,
                      {{ChatRole::system, "sys", {}, {}}, {ChatRole::user, "user", {}, {}}},
                      tool_registry()};
  ChatResult result = backend.chat(request);
  CHECK(backend.attempts() == 3);
  CHECK(result.turn.content == "done");
  REQUIRE(result.turn.tool_calls.size() == 2);
  CHECK(result.turn.tool_calls[0].name == "bash");
  CHECK(result.turn.tool_calls[0].args == json({{"command", "ls"}}));
  // Unparseable arguments survive as a raw string for dispatch to reject.
  CHECK(result.turn.tool_calls[1].args == json("{broken"));
  CHECK(result.usage.prompt_tokens == 11);
  CHECK(result.usage.completion_tokens == 5);

  server.stop();
  runner.join();
}

TEST_CASE("http backend maps context overflow and gives up after retries") {
  httplib::Server server;
  std::atomic<int> mode{0};
  std::atomic<int> hits{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    hits.fetch_add(1);
    if (mode == 0) {
      res.status = 400;
      res.set_content("{\"error\": {\"code\": \"context_length_exceeded\"}}", "application/json");
    } else {
      res.status = 503;
      res.set_content("down", "text/plain");
    }
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpBackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.retry_limit = 2;
  cfg.backoff_base_s = 0.01;
  HttpBackend backend(cfg);
  ChatRequest request{"t", AgentRoleKind::code_generator, {{ChatRole::user, "hi", {}, {}}}, {}};

  CHECK_THROWS_AS(backend.chat(request), ContextOverflow);
  CHECK(hits == 1);  // 4xx is not retried

  mode = 1;
  hits = 0;
  CHECK_THROWS_AS(backend.chat(request), BackendUnavailable);
  CHECK(hits == 3);  // first attempt + retry_limit retries

  server.stop();
  runner.join();
}

TEST_CASE("http backend reports unreachable endpoints as BackendUnavailable") {
  HttpBackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:9";  // discard port; nothing listens
  cfg.retry_limit = 1;
  cfg.backoff_base_s = 0.01;
  cfg.request_timeout_s = 1.0;
  HttpBackend backend(cfg);
  ChatRequest request{"t", AgentRoleKind::test_generator, {{ChatRole::user, "hi", {}, {}}}, {}};
  CHECK_THROWS_AS(backend.chat(request), BackendUnavailable);
  CHECK(backend.attempts() == 2);
}
