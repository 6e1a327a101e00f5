#include <filesystem>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "patchforge/subprocess.hpp"
#include "patchforge/workspace.hpp"

using namespace patchforge;

namespace {

struct TempRepo {
  fs::path dir;

  TempRepo() {
    std::string templ = (fs::temp_directory_path() / "pf_repo.XXXXXX").string();
    REQUIRE(mkdtemp(templ.data()) != nullptr);
    dir = templ;
    write_file(dir / "src/calc.py", "def add(a, b):\n    return a - b\n");
    write_file(dir / "src/util.py", "PI = 3\n");
    write_file(dir / "tests/test_calc.py", "from src.calc import add\nassert add(1, 1) == 2\n");
    write_file(dir / "README.md", "demo repo\n");
  }
  ~TempRepo() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

TaskInput make_task(const TempRepo& repo, std::vector<std::string> install = {}) {
  TaskInput task;
  task.task_id = "demo";
  task.repo_root = repo.dir;
  task.issue_text = "add() subtracts";
  task.env.install_cmds = std::move(install);
  task.env.test_cmd_template = "python {id}";
  return task;
}

}  // namespace

TEST_CASE("run_command captures streams, exit code and cwd") {
  ExecResult r = run_command("echo out; echo err >&2; exit 3", fs::temp_directory_path(), 10.0);
  CHECK(r.stdout_text == "out\n");
  CHECK(r.stderr_text == "err\n");
  CHECK(r.exit_code == 3);
  CHECK_FALSE(r.timed_out);

  ExecResult pwd = run_command("pwd", fs::temp_directory_path(), 10.0);
  CHECK(pwd.stdout_text.find("tmp") != std::string::npos);
}

TEST_CASE("run_command kills the whole group on timeout") {
  ExecResult r = run_command("sleep 30 & sleep 30", fs::temp_directory_path(), 0.3);
  CHECK(r.timed_out);
  CHECK(r.exit_code == kTimeoutExitCode);
  CHECK(r.duration_s < 10.0);
}

TEST_CASE("run_command caps captured output with a marker") {
  ExecResult r =
      run_command("head -c 100000 /dev/zero | tr '\\0' 'x'", fs::temp_directory_path(), 10.0, 1024);
  CHECK(r.exit_code == 0);
  CHECK(r.stdout_text.size() <= 1024 + std::string(kTruncationMarker).size());
  CHECK(r.stdout_text.find(kTruncationMarker) != std::string::npos);

  ExecResult small = run_command("echo tiny", fs::temp_directory_path(), 10.0, 1024);
  CHECK(small.stdout_text == "tiny\n");
}

TEST_CASE("workspace copies the repo and pins the clean revision") {
  TempRepo repo;
  Workspace ws = Workspace::create(make_task(repo), {});
  CHECK(ws.root() != repo.dir);
  CHECK(fs::exists(ws.root() / "src/calc.py"));
  CHECK(ws.clean_revision() == tree_hash(repo.dir));
  CHECK(ws.current_tree_hash() == ws.clean_revision());
  CHECK(ws.extract_diff().empty());

  ExecResult r = ws.exec("cat src/util.py");
  CHECK(r.exit_code == 0);
  CHECK(r.stdout_text == "PI = 3\n");
}

TEST_CASE("base revision pin must match the tree") {
  TempRepo repo;
  TaskInput task = make_task(repo);
  task.base_revision = tree_hash(repo.dir);
  CHECK_NOTHROW(Workspace::create(task, {}));
  task.base_revision = "deadbeef";
  CHECK_THROWS_AS(Workspace::create(task, {}), RevisionNotFound);
}

TEST_CASE("failing install command raises EnvBuildFailed") {
  TempRepo repo;
  CHECK_NOTHROW(Workspace::create(make_task(repo, {"true", "true"}), {}));
  CHECK_THROWS_AS(Workspace::create(make_task(repo, {"true", "false"}), {}), EnvBuildFailed);
}

TEST_CASE("apply, conflict on re-apply, reset, extract round trip") {
  TempRepo repo;
  Workspace ws = Workspace::create(make_task(repo), {});

  UnifiedDiff fix = diff_trees(
      {{"src/calc.py", read_file(ws.root() / "src/calc.py")}},
      {{"src/calc.py", "def add(a, b):\n    return a + b\n"}});
  ws.apply_diff(fix);
  CHECK(read_file(ws.root() / "src/calc.py") == "def add(a, b):\n    return a + b\n");

  std::string patched_hash = ws.current_tree_hash();
  CHECK_THROWS_AS(ws.apply_diff(fix), PatchConflict);
  CHECK(ws.current_tree_hash() == patched_hash);  // all-or-nothing

  UnifiedDiff extracted = ws.extract_diff();
  CHECK(extracted.paths() == std::vector<std::string>{"src/calc.py"});

  ws.reset();
  CHECK(ws.current_tree_hash() == ws.clean_revision());
  ws.apply_diff(extracted);
  CHECK(ws.current_tree_hash() == patched_hash);
}

TEST_CASE("reset removes untracked files and restores deletions") {
  TempRepo repo;
  Workspace ws = Workspace::create(make_task(repo), {});
  REQUIRE(ws.exec("rm src/util.py && mkdir -p deep/nest && echo junk > deep/nest/new.txt")
              .exit_code == 0);
  CHECK(ws.current_tree_hash() != ws.clean_revision());
  CHECK(ws.extract_diff().paths() == std::vector<std::string>{"deep/nest/new.txt", "src/util.py"});

  ws.reset();
  CHECK(ws.current_tree_hash() == ws.clean_revision());
  CHECK_FALSE(fs::exists(ws.root() / "deep/nest/new.txt"));
  CHECK(read_file(ws.root() / "src/util.py") == "PI = 3\n");
}

TEST_CASE("patch kind rules are enforced at construction") {
  std::string code_diff =
      "--- a/src/calc.py\n+++ b/src/calc.py\n@@ -1 +1 @@\n-a\n+b\n";
  std::string test_diff =
      "--- a/tests/test_calc.py\n+++ b/tests/test_calc.py\n@@ -1 +1 @@\n-a\n+b\n";
  CHECK_NOTHROW(make_patch(PatchKind::code, code_diff, PatchProducer::code_generator, 0));
  CHECK_NOTHROW(make_patch(PatchKind::test, test_diff, PatchProducer::test_generator, 0));
  CHECK_THROWS_AS(make_patch(PatchKind::code, test_diff, PatchProducer::code_generator, 0),
                  PatchKindViolation);
  CHECK_THROWS_AS(make_patch(PatchKind::test, code_diff, PatchProducer::test_generator, 0),
                  PatchKindViolation);
}

TEST_CASE("path escapes never leave the workspace root") {
  TempRepo repo;
  Workspace ws = Workspace::create(make_task(repo), {});
  std::string evil =
      "--- /dev/null\n+++ b/../escape.txt\n@@ -0,0 +1 @@\n+boom\n";
  CHECK_THROWS_AS(ws.apply_diff(parse_diff(evil)), PathEscape);
  CHECK_FALSE(fs::exists(ws.root().parent_path() / "escape.txt"));
  CHECK(ws.current_tree_hash() == ws.clean_revision());
}

TEST_CASE("workspaces are mutually isolated and die on dispose") {
  TempRepo repo;
  Workspace a = Workspace::create(make_task(repo), {});
  Workspace b = Workspace::create(make_task(repo), {});
  CHECK(a.root() != b.root());
  REQUIRE(a.exec("echo tainted >> src/util.py").exit_code == 0);
  CHECK(read_file(b.root() / "src/util.py") == "PI = 3\n");
  CHECK(b.current_tree_hash() == b.clean_revision());

  fs::path a_root = a.root();
  a.dispose();
  CHECK_FALSE(fs::exists(a_root));
  CHECK_THROWS_AS(a.exec("true"), WorkspaceDead);
  CHECK_THROWS_AS(a.reset(), WorkspaceDead);
}
