#pragma once

// Shell command execution with wall-clock timeout and capped output capture.
// Commands run in their own process group so a timeout kill reaps any
// children the command spawned.

#include <chrono>
#include <csignal>
#include <cstring>
#include <string>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include "patchforge/util.hpp"

namespace patchforge {

struct ExecResult {
  int exit_code = 0;
  std::string stdout_text;
  std::string stderr_text;
  bool timed_out = false;
  double duration_s = 0.0;
};

inline constexpr int kTimeoutExitCode = 137;  // 128 + SIGKILL
inline constexpr double kExecGraceSeconds = 5.0;
inline constexpr size_t kDefaultCaptureCap = 64 * 1024;
inline constexpr const char* kTruncationMarker = "\n[output truncated]\n";

namespace detail {

struct CappedBuffer {
  std::string data;
  size_t cap;
  size_t total = 0;

  void append(const char* bytes, size_t n) {
    total += n;
    if (data.size() < cap) data.append(bytes, std::min(n, cap - data.size()));
  }

  std::string take() {
    if (total > data.size()) data += kTruncationMarker;
    return std::move(data);
  }
};

}  // namespace detail

inline ExecResult run_command(const std::string& command, const fs::path& cwd, double timeout_s,
                              size_t capture_cap = kDefaultCaptureCap) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

  int out_pipe[2], err_pipe[2];
  if (pipe(out_pipe) != 0 || pipe(err_pipe) != 0)
    throw Error("ExecError", "pipe() failed: " + std::string(strerror(errno)));

  pid_t pid = fork();
  if (pid < 0) throw Error("ExecError", "fork() failed: " + std::string(strerror(errno)));
  if (pid == 0) {
    setpgid(0, 0);
    if (!cwd.empty() && chdir(cwd.c_str()) != 0) _exit(126);
    dup2(out_pipe[1], STDOUT_FILENO);
    dup2(err_pipe[1], STDERR_FILENO);
    close(out_pipe[0]);
    close(out_pipe[1]);
    close(err_pipe[0]);
    close(err_pipe[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }

  setpgid(pid, pid);  // also set from the parent to avoid the classic race
  close(out_pipe[1]);
  close(err_pipe[1]);

  ExecResult result;
  detail::CappedBuffer out_buf{{}, capture_cap}, err_buf{{}, capture_cap};
  struct pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
  bool open_fd[2] = {true, true};
  bool killed = false;

  auto kill_group = [&] {
    if (!killed) {
      kill(-pid, SIGKILL);
      killed = true;
      result.timed_out = true;
    }
  };

  const double hard_deadline = timeout_s + kExecGraceSeconds;
  while (open_fd[0] || open_fd[1]) {
    if (!killed && elapsed() >= timeout_s) kill_group();
    if (elapsed() >= hard_deadline) break;
    double until_event = killed ? hard_deadline - elapsed() : timeout_s - elapsed();
    int poll_ms = std::max(1, static_cast<int>(until_event * 1000) + 1);
    int ready = poll(fds, 2, std::min(poll_ms, 200));
    if (ready < 0 && errno != EINTR)
      throw Error("ExecError", "poll() failed: " + std::string(strerror(errno)));
    for (int i = 0; i < 2; ++i) {
      if (!open_fd[i] || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      char chunk[4096];
      ssize_t n = read(fds[i].fd, chunk, sizeof(chunk));
      if (n > 0) {
        (i == 0 ? out_buf : err_buf).append(chunk, static_cast<size_t>(n));
      } else if (n == 0 || (n < 0 && errno != EINTR && errno != EAGAIN)) {
        close(fds[i].fd);
        open_fd[i] = false;
        fds[i].fd = -1;
      }
    }
  }
  for (int i = 0; i < 2; ++i)
    if (open_fd[i]) close(fds[i].fd);

  // Reap, enforcing the same deadlines if the command closed its pipes early.
  int status = 0;
  while (true) {
    pid_t reaped = waitpid(pid, &status, killed ? 0 : WNOHANG);
    if (reaped == pid) break;
    if (reaped < 0) {
      status = 0;
      break;
    }
    if (elapsed() >= timeout_s) {
      kill_group();
      continue;
    }
    usleep(5000);
  }

  result.duration_s = elapsed();
  result.stdout_text = out_buf.take();
  result.stderr_text = err_buf.take();
  if (result.timed_out)
    result.exit_code = kTimeoutExitCode;
  else if (WIFEXITED(status))
    result.exit_code = WEXITSTATUS(status);
  else if (WIFSIGNALED(status))
    result.exit_code = 128 + WTERMSIG(status);
  return result;
}

}  // namespace patchforge
