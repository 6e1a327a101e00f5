#pragma once

// Layered configuration: defaults, then config file, then environment
// (API key only), then command-line flags. The resolved config is echoed
// into every report.

#include <cstdlib>
#include <string>

#include "patchforge/gateway.hpp"
#include "patchforge/orchestrator.hpp"
#include "patchforge/util.hpp"

namespace patchforge {

struct CliConfig {
  int max_iterations = kDefaultMaxIterations;
  bool adversarial = true;
  bool selection = true;
  int candidates_target = kDefaultCandidatesTarget;
  int step_budget = kDefaultStepBudget;
  int code_attempts = kDefaultCodeAttempts;
  int reproduction_attempts = kDefaultReproductionAttempts;
  int workers = 1;
  long seed = 0;

  std::string isolation = "process";
  std::string container_image;
  std::string work_root;
  double exec_timeout_s = 120.0;

  std::string backend = "scripted";
  std::string script;
  std::string endpoint = "http://127.0.0.1:8080";
  std::string model = "default";
  std::string api_key_env = "PATCHFORGE_API_KEY";
  std::string api_key;  // environment only; never echoed
  int retry_limit = 3;
  std::string prompt_price = "0.27";
  std::string completion_price = "1.10";

  std::string prompt_dir = "prompts";
  std::string report_dir = "out";

  void apply_file(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      const std::string& key = it.key();
      const json& v = it.value();
      auto want_int = [&](int& slot) {
        if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
        slot = v.get<int>();
      };
      auto want_long = [&](long& slot) {
        if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
        slot = v.get<long>();
      };
      auto want_bool = [&](bool& slot) {
        if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
        slot = v.get<bool>();
      };
      auto want_string = [&](std::string& slot) {
        if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
        slot = v.get<std::string>();
      };
      if (key == "max_iterations") want_int(max_iterations);
      else if (key == "adversarial") want_bool(adversarial);
      else if (key == "selection") want_bool(selection);
      else if (key == "candidates_target") want_int(candidates_target);
      else if (key == "step_budget") want_int(step_budget);
      else if (key == "code_attempts") want_int(code_attempts);
      else if (key == "reproduction_attempts") want_int(reproduction_attempts);
      else if (key == "workers") want_int(workers);
      else if (key == "seed") want_long(seed);
      else if (key == "isolation") want_string(isolation);
      else if (key == "container_image") want_string(container_image);
      else if (key == "work_root") want_string(work_root);
      else if (key == "exec_timeout_s") {
        if (!v.is_number()) throw ConfigError("config key 'exec_timeout_s' must be a number");
        exec_timeout_s = v.get<double>();
      }
      else if (key == "backend") want_string(backend);
      else if (key == "script") want_string(script);
      else if (key == "endpoint") want_string(endpoint);
      else if (key == "model") want_string(model);
      else if (key == "api_key_env") want_string(api_key_env);
      else if (key == "retry_limit") want_int(retry_limit);
      else if (key == "prompt_price") want_string(prompt_price);
      else if (key == "completion_price") want_string(completion_price);
      else if (key == "prompt_dir") want_string(prompt_dir);
      else if (key == "report_dir") want_string(report_dir);
      else throw ConfigError("unknown config key '" + key + "'");
    }
  }

  void apply_file(const fs::path& path) {
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    apply_file(doc);
  }

  // Environment carries secrets only.
  void apply_env() {
    if (const char* key = std::getenv(api_key_env.c_str())) api_key = key;
  }

  Isolation isolation_enum() const {
    if (isolation == "process") return Isolation::process;
    if (isolation == "container") return Isolation::container;
    throw ConfigError("config key 'isolation' must be 'process' or 'container', got '" +
                      isolation + "'");
  }

  WorkspaceConfig workspace_config() const {
    WorkspaceConfig ws;
    ws.isolation = isolation_enum();
    if (!work_root.empty()) ws.work_root = work_root;
    if (exec_timeout_s <= 0) throw ConfigError("config key 'exec_timeout_s' must be positive");
    ws.exec_timeout_s = exec_timeout_s;
    ws.container_image = container_image;
    return ws;
  }

  StageConfig stage_config() const {
    StageConfig stage;
    stage.max_iterations = max_iterations;
    stage.adversarial_enabled = adversarial;
    stage.selection_enabled = selection;
    stage.candidates_target = candidates_target;
    stage.step_budget = step_budget;
    stage.code_attempts = code_attempts;
    stage.reproduction_attempts = reproduction_attempts;
    stage.prompt_dir = prompt_dir;
    stage.workspace = workspace_config();
    try {
      stage.pricing = PricingConfig::parse(prompt_price, completion_price);
    } catch (const Error& e) {
      throw ConfigError(std::string("config keys 'prompt_price'/'completion_price': ") +
                        e.what());
    }
    stage.validate();
    return stage;
  }

  json echo() const {
    return {{"max_iterations", max_iterations},
            {"adversarial", adversarial},
            {"selection", selection},
            {"candidates_target", candidates_target},
            {"step_budget", step_budget},
            {"code_attempts", code_attempts},
            {"reproduction_attempts", reproduction_attempts},
            {"workers", workers},
            {"seed", seed},
            {"isolation", isolation},
            {"container_image", container_image},
            {"work_root", work_root},
            {"exec_timeout_s", exec_timeout_s},
            {"backend", backend},
            {"script", script},
            {"endpoint", endpoint},
            {"model", model},
            {"api_key_env", api_key_env},
            {"retry_limit", retry_limit},
            {"prompt_price", prompt_price},
            {"completion_price", completion_price},
            {"prompt_dir", prompt_dir},
            {"report_dir", report_dir}};
  }
};

}  // namespace patchforge
