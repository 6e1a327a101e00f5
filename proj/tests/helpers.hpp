#pragma once

// Shared test scaffolding: throwaway directories, miniature Python repos,
// and TaskInput builders used across the suites.

#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "patchforge/workspace.hpp"

namespace pftest {

using namespace patchforge;

struct TempDir {
  fs::path dir;

  TempDir() {
    std::string templ = (fs::temp_directory_path() / "pf_test.XXXXXX").string();
    if (!mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
    dir = templ;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

// Miniature repo with one buggy module and one passing test.
struct PyRepo {
  TempDir holder;
  fs::path dir;

  explicit PyRepo(const std::map<std::string, std::string>& files) {
    dir = holder.dir;
    for (const auto& [rel, content] : files) write_file(dir / rel, content);
  }
};

inline std::map<std::string, std::string> calc_repo_files() {
  return {{"calc.py", "def add(a, b):\n    return a - b\n"},
          {"tests/test_existing.py", "from calc import add\n\nassert add(0, 0) == 0\nprint('ok')\n"}};
}

inline TaskInput make_input(const fs::path& repo_root, const std::string& task_id = "unit-task") {
  TaskInput input;
  input.task_id = task_id;
  input.repo_root = repo_root;
  input.issue_text = "add(2, 3) returns -1 instead of 5";
  input.env.test_cmd_template = "PYTHONPATH=. python3 {id}";
  input.env.repo_test_cmd = "PYTHONPATH=. python3 tests/test_existing.py";
  return input;
}

// Prompt templates with every slot, written to a fresh directory.
inline fs::path write_prompts(const fs::path& dir) {
  const char* body =
      "You repair repositories.\n---\nIssue:\n{issue_text}\n\nTests:\n{test_output}\n\n"
      "Patch:\n{current_patch}\n\nCandidates:\n{candidates}\n";
  write_file(dir / "test_generator.txt", body);
  write_file(dir / "code_generator.txt", body);
  write_file(dir / "selector.txt", body);
  return dir;
}

}  // namespace pftest
