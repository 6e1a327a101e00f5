#pragma once

// Per-task isolated execution environment. The repository is materialized
// into a scratch directory, a clean snapshot is kept in memory, and every
// mutation (apply/reset/extract) is defined relative to that snapshot.
// Command execution goes through the process sandbox or, when configured,
// a container runtime with the scratch directory bind-mounted.

#include <map>
#include <optional>
#include <string>
#include <utility>

#include "patchforge/diff.hpp"
#include "patchforge/model.hpp"
#include "patchforge/subprocess.hpp"
#include "patchforge/util.hpp"

namespace patchforge {

enum class Isolation { process, container };

inline const char* to_string(Isolation isolation) {
  return isolation == Isolation::process ? "process" : "container";
}

struct WorkspaceConfig {
  Isolation isolation = Isolation::process;
  fs::path work_root;  // parent for scratch dirs; empty = system temp
  double exec_timeout_s = 120.0;
  size_t capture_cap = kDefaultCaptureCap;
  std::string container_runtime = "docker";
  std::string container_image;  // required for container isolation
};

class Workspace {
 public:
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  Workspace(Workspace&& other) noexcept { *this = std::move(other); }
  Workspace& operator=(Workspace&& other) noexcept {
    if (this != &other) {
      cleanup();
      task_id_ = std::move(other.task_id_);
      root_ = std::move(other.root_);
      clean_revision_ = std::move(other.clean_revision_);
      snapshot_ = std::move(other.snapshot_);
      cfg_ = other.cfg_;
      alive_ = other.alive_;
      other.alive_ = false;
      other.root_.clear();
    }
    return *this;
  }

  ~Workspace() { cleanup(); }

  static Workspace create(const TaskInput& task, const WorkspaceConfig& cfg) {
    Workspace ws;
    ws.cfg_ = cfg;
    ws.task_id_ = task.task_id;
    if (!fs::exists(task.repo_root) || !fs::is_directory(task.repo_root))
      throw Error("RepoMissing", "repository not found: " + task.repo_root.string());

    fs::path parent = cfg.work_root.empty() ? fs::temp_directory_path() : cfg.work_root;
    fs::create_directories(parent);
    std::string templ = (parent / (task.task_id + ".XXXXXX")).string();
    if (!mkdtemp(templ.data()))
      throw Error("IoError", "mkdtemp failed under " + parent.string());
    ws.root_ = fs::path(templ);
    ws.alive_ = true;

    fs::copy(task.repo_root, ws.root_, fs::copy_options::recursive);
    ws.snapshot_ = snapshot_tree(ws.root_);
    ws.clean_revision_ = tree_hash(ws.snapshot_);
    if (!task.base_revision.empty() && task.base_revision != ws.clean_revision_)
      throw RevisionNotFound("task " + task.task_id + " pins revision " + task.base_revision +
                             " but repository tree is " + ws.clean_revision_);

    if (cfg.isolation == Isolation::container) ws.check_container_runtime();
    for (const auto& cmd : task.env.install_cmds) {
      ExecResult r = ws.exec(cmd);
      if (r.exit_code != 0 || r.timed_out)
        throw EnvBuildFailed("install command failed (" + std::to_string(r.exit_code) +
                             "): " + cmd + "\n" + r.stderr_text);
    }
    return ws;
  }

  const std::string& task_id() const { return task_id_; }
  const fs::path& root() const { return root_; }
  const std::string& clean_revision() const { return clean_revision_; }
  Isolation isolation() const { return cfg_.isolation; }
  double default_timeout() const { return cfg_.exec_timeout_s; }

  ExecResult exec(const std::string& command, std::optional<double> timeout = std::nullopt) {
    ensure_alive();
    double limit = timeout.value_or(cfg_.exec_timeout_s);
    if (cfg_.isolation == Isolation::container)
      return run_command(container_wrap(command), root_, limit, cfg_.capture_cap);
    return run_command(command, root_, limit, cfg_.capture_cap);
  }

  void apply_diff(const UnifiedDiff& diff) {
    ensure_alive();
    // Stage every file first so a conflict in any hunk leaves the tree unchanged.
    std::vector<std::pair<std::string, std::optional<std::string>>> staged;
    for (const auto& fd : diff.files) {
      const std::string& rel = fd.display_path();
      fs::path target = resolve_under_root(root_, rel);
      std::optional<std::string> before;
      if (fs::exists(target)) before = read_file(target);
      staged.emplace_back(rel, apply_file_diff(fd, before));
    }
    for (auto& [rel, content] : staged) {
      fs::path target = root_ / *normalize_repo_path(rel);
      if (content)
        write_file(target, *content);
      else
        fs::remove(target);
    }
  }

  void apply_patch(const Patch& patch) { apply_diff(patch.parse()); }

  // Restores the working tree byte-identical to the clean revision and
  // removes untracked files.
  void reset() {
    ensure_alive();
    for (const auto& rel : list_tree(root_))
      if (!snapshot_.count(rel)) fs::remove(root_ / rel);
    for (const auto& [rel, content] : snapshot_) {
      fs::path target = root_ / rel;
      if (!fs::exists(target) || read_file(target) != content) write_file(target, content);
    }
  }

  // Working tree vs clean revision, lexicographic by path, new files included.
  UnifiedDiff extract_diff() {
    ensure_alive();
    return diff_trees(snapshot_, snapshot_tree(root_));
  }

  std::string extract_diff_text() { return serialize_diff(extract_diff()); }

  std::string current_tree_hash() {
    ensure_alive();
    return tree_hash(root_);
  }

  void dispose() { cleanup(); }

 private:
  Workspace() = default;

  void ensure_alive() const {
    if (!alive_) throw WorkspaceDead("workspace for task " + task_id_ + " is disposed");
  }

  void check_container_runtime() {
    if (cfg_.container_image.empty())
      throw EnvBuildFailed("container isolation requires a container image");
    ExecResult probe = run_command(cfg_.container_runtime + " info", "", 30.0, cfg_.capture_cap);
    if (probe.exit_code != 0)
      throw EnvBuildFailed("container runtime unavailable: " + cfg_.container_runtime);
  }

  std::string container_wrap(const std::string& command) const {
    std::string quoted = "'";
    for (char c : command) {
      if (c == '\'')
        quoted += "'\"'\"'";
      else
        quoted += c;
    }
    quoted += "'";
    return cfg_.container_runtime + " run --rm -v " + root_.string() + ":/work -w /work " +
           cfg_.container_image + " sh -c " + quoted;
  }

  void cleanup() {
    if (alive_ && !root_.empty()) {
      std::error_code ec;
      fs::remove_all(root_, ec);
    }
    alive_ = false;
  }

  std::string task_id_;
  fs::path root_;
  std::string clean_revision_;
  std::map<std::string, std::string> snapshot_;
  WorkspaceConfig cfg_;
  bool alive_ = false;
};

inline Workspace create_workspace(const TaskInput& task, const WorkspaceConfig& cfg) {
  return Workspace::create(task, cfg);
}

}  // namespace patchforge
