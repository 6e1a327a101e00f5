#pragma once

// Unified-diff model: parsing, normalized serialization, tree diffing
// (Myers), and strict application. Paths are stored without a/ b/ prefixes;
// a missing trailing newline is tracked per line op so round trips are
// byte-exact.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "patchforge/util.hpp"

namespace patchforge {

enum class LineOpKind { Context, Add, Del };

struct LineOp {
  LineOpKind kind = LineOpKind::Context;
  std::string text;  // without trailing newline
  bool has_newline = true;

  bool operator==(const LineOp&) const = default;
};

struct Hunk {
  long old_start = 0;  // 1-based; 0 only when old_count == 0
  long old_count = 0;
  long new_start = 0;
  long new_count = 0;
  std::vector<LineOp> lines;

  bool operator==(const Hunk&) const = default;
};

struct FileDiff {
  std::string old_path;  // empty means /dev/null (new file)
  std::string new_path;  // empty means /dev/null (deleted file)
  std::vector<Hunk> hunks;

  bool is_new_file() const { return old_path.empty(); }
  bool is_deleted_file() const { return new_path.empty(); }
  const std::string& display_path() const { return is_deleted_file() ? old_path : new_path; }

  bool operator==(const FileDiff&) const = default;
};

struct UnifiedDiff {
  std::vector<FileDiff> files;

  bool empty() const { return files.empty(); }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(f.display_path());
    return out;
  }

  bool operator==(const UnifiedDiff&) const = default;
};

// True iff the final path component begins with "test" (case-sensitive).
inline bool is_test_path(std::string_view path) {
  return std::string_view(path_basename(path)).substr(0, 4) == "test";
}

inline UnifiedDiff filter_test_files(const UnifiedDiff& diff) {
  UnifiedDiff out;
  for (const auto& f : diff.files)
    if (!is_test_path(f.display_path())) out.files.push_back(f);
  return out;
}

inline long changed_line_count(const UnifiedDiff& diff) {
  long count = 0;
  for (const auto& f : diff.files)
    for (const auto& h : f.hunks)
      for (const auto& op : h.lines)
        if (op.kind != LineOpKind::Context) ++count;
  return count;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string parse_diff_header_path(std::string_view line, std::string_view marker,
                                          std::string_view prefix) {
  std::string_view rest = line.substr(marker.size());
  size_t tab = rest.find('\t');
  if (tab != std::string_view::npos) rest = rest.substr(0, tab);
  if (rest == "/dev/null") return "";
  if (rest.substr(0, prefix.size()) == prefix) rest = rest.substr(prefix.size());
  if (rest.empty()) throw MalformedDiff("empty path in header: " + std::string(line));
  return std::string(rest);
}

inline bool parse_long(std::string_view text, size_t& pos, long& out) {
  if (pos >= text.size() || text[pos] < '0' || text[pos] > '9') return false;
  long value = 0;
  while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
    value = value * 10 + (text[pos] - '0');
    ++pos;
  }
  out = value;
  return true;
}

// "@@ -os[,oc] +ns[,nc] @@..." — counts default to 1 when omitted.
inline bool parse_hunk_header(std::string_view line, Hunk& hunk) {
  if (line.substr(0, 4) != "@@ -") return false;
  size_t pos = 4;
  hunk.old_count = hunk.new_count = 1;
  if (!parse_long(line, pos, hunk.old_start)) return false;
  if (pos < line.size() && line[pos] == ',') {
    ++pos;
    if (!parse_long(line, pos, hunk.old_count)) return false;
  }
  if (line.substr(pos, 2) != " +") return false;
  pos += 2;
  if (!parse_long(line, pos, hunk.new_start)) return false;
  if (pos < line.size() && line[pos] == ',') {
    ++pos;
    if (!parse_long(line, pos, hunk.new_count)) return false;
  }
  return line.substr(pos, 3) == " @@";
}

}  // namespace detail

inline UnifiedDiff parse_diff(std::string_view diff_text) {
  UnifiedDiff result;
  std::vector<std::string> lines = split_lines(diff_text);

  FileDiff* current = nullptr;   // file whose headers are complete
  Hunk* hunk = nullptr;          // hunk currently consuming body lines
  long old_left = 0, new_left = 0;
  std::string pending_old;
  bool have_pending_old = false;
  LineOp* last_op = nullptr;

  auto finish_hunk = [&](bool force) {
    if (hunk && (force || (old_left == 0 && new_left == 0))) {
      if (old_left != 0 || new_left != 0)
        throw MalformedDiff("truncated hunk in " + current->display_path());
      hunk = nullptr;
    }
  };

  for (const std::string& line : lines) {
    if (hunk && (old_left > 0 || new_left > 0)) {
      // Inside a hunk body.
      char tag = line.empty() ? ' ' : line[0];
      if (tag == '\\') {
        if (!last_op) throw MalformedDiff("no-newline marker without a preceding line");
        last_op->has_newline = false;
        continue;
      }
      LineOp op;
      op.text = line.empty() ? "" : line.substr(1);
      switch (tag) {
        case ' ':
          op.kind = LineOpKind::Context;
          if (--old_left < 0 || --new_left < 0)
            throw MalformedDiff("hunk line counts mismatch in " + current->display_path());
          break;
        case '-':
          op.kind = LineOpKind::Del;
          if (--old_left < 0)
            throw MalformedDiff("hunk line counts mismatch in " + current->display_path());
          break;
        case '+':
          op.kind = LineOpKind::Add;
          if (--new_left < 0)
            throw MalformedDiff("hunk line counts mismatch in " + current->display_path());
          break;
        default:
          throw MalformedDiff("unexpected line inside hunk: " + line);
      }
      hunk->lines.push_back(std::move(op));
      last_op = &hunk->lines.back();
      finish_hunk(false);
      continue;
    }
    finish_hunk(true);

    if (line.rfind("\\ No newline", 0) == 0) {
      if (!last_op) throw MalformedDiff("no-newline marker without a preceding line");
      last_op->has_newline = false;
      continue;
    }
    if (line.rfind("diff --git", 0) == 0 || line.rfind("index ", 0) == 0 ||
        line.rfind("old mode", 0) == 0 || line.rfind("new mode", 0) == 0 ||
        line.rfind("new file mode", 0) == 0 || line.rfind("deleted file mode", 0) == 0) {
      current = nullptr;
      continue;
    }
    if (line.rfind("rename from", 0) == 0 || line.rfind("rename to", 0) == 0 ||
        line.rfind("copy from", 0) == 0 || line.rfind("copy to", 0) == 0)
      throw MalformedDiff("rename/copy entries are not supported: " + line);
    if (line.rfind("Binary files", 0) == 0 || line.rfind("GIT binary patch", 0) == 0)
      throw MalformedDiff("binary file entry: " + line);
    if (line.rfind("--- ", 0) == 0) {
      pending_old = detail::parse_diff_header_path(line, "--- ", "a/");
      have_pending_old = true;
      current = nullptr;
      continue;
    }
    if (line.rfind("+++ ", 0) == 0) {
      if (!have_pending_old) throw MalformedDiff("+++ header without --- header: " + line);
      FileDiff fd;
      fd.old_path = pending_old;
      fd.new_path = detail::parse_diff_header_path(line, "+++ ", "b/");
      have_pending_old = false;
      if (fd.old_path.empty() && fd.new_path.empty())
        throw MalformedDiff("both sides of entry are /dev/null");
      if (!fd.old_path.empty() && !fd.new_path.empty() && fd.old_path != fd.new_path)
        throw MalformedDiff("path mismatch between --- and +++: " + fd.old_path + " vs " +
                            fd.new_path);
      result.files.push_back(std::move(fd));
      current = &result.files.back();
      last_op = nullptr;
      continue;
    }
    if (line.rfind("@@", 0) == 0) {
      Hunk parsed;
      if (!detail::parse_hunk_header(line, parsed))
        throw MalformedDiff("bad hunk header: " + line);
      if (!current) throw MalformedDiff("hunk without file headers: " + line);
      current->hunks.push_back(std::move(parsed));
      hunk = &current->hunks.back();
      old_left = hunk->old_count;
      new_left = hunk->new_count;
      last_op = nullptr;
      finish_hunk(false);  // a 0,0 hunk is complete immediately
      continue;
    }
    if (line.empty()) continue;  // tolerate trailing blank lines between entries
    throw MalformedDiff("unrecognized line: " + line);
  }
  finish_hunk(true);
  if (have_pending_old) throw MalformedDiff("--- header without +++ header");
  return result;
}

// ---------------------------------------------------------------------------
// Normalized serialization

inline std::string serialize_diff(const UnifiedDiff& diff) {
  std::string out;
  for (const auto& f : diff.files) {
    out += f.old_path.empty() ? "--- /dev/null" : "--- a/" + f.old_path;
    out += '\n';
    out += f.new_path.empty() ? "+++ /dev/null" : "+++ b/" + f.new_path;
    out += '\n';
    for (const auto& h : f.hunks) {
      out += "@@ -" + std::to_string(h.old_start) + ',' + std::to_string(h.old_count) + " +" +
             std::to_string(h.new_start) + ',' + std::to_string(h.new_count) + " @@\n";
      for (const auto& op : h.lines) {
        switch (op.kind) {
          case LineOpKind::Context: out += ' '; break;
          case LineOpKind::Add: out += '+'; break;
          case LineOpKind::Del: out += '-'; break;
        }
        out += op.text;
        out += '\n';
        if (!op.has_newline) out += "\\ No newline at end of file\n";
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tree diffing (Myers)

namespace detail {

struct Line {
  std::string text;
  bool has_newline = true;

  bool operator==(const Line&) const = default;
};

inline std::vector<Line> file_to_lines(std::string_view content) {
  std::vector<Line> lines;
  size_t pos = 0;
  while (pos < content.size()) {
    size_t nl = content.find('\n', pos);
    if (nl == std::string_view::npos) {
      lines.push_back({std::string(content.substr(pos)), false});
      break;
    }
    lines.push_back({std::string(content.substr(pos, nl - pos)), true});
    pos = nl + 1;
  }
  return lines;
}

inline std::string lines_to_content(const std::vector<Line>& lines) {
  std::string out;
  for (const auto& line : lines) {
    out += line.text;
    if (line.has_newline) out += '\n';
  }
  return out;
}

// Edit script entries: '=' keep a[idx], '-' delete a[idx], '+' insert b[idx].
struct EditOp {
  char op;
  size_t idx;
};

inline std::vector<EditOp> myers_script(const std::vector<Line>& a, const std::vector<Line>& b) {
  const long n = static_cast<long>(a.size());
  const long m = static_cast<long>(b.size());
  const long max = n + m;
  std::vector<EditOp> script;
  if (max == 0) return script;

  std::vector<long> v(2 * max + 1, 0);
  auto at = [&](std::vector<long>& vec, long k) -> long& { return vec[k + max]; };
  std::vector<std::vector<long>> trace;
  long d_found = -1;

  for (long d = 0; d <= max && d_found < 0; ++d) {
    trace.push_back(v);
    for (long k = -d; k <= d; k += 2) {
      long x;
      if (k == -d || (k != d && at(v, k - 1) < at(v, k + 1)))
        x = at(v, k + 1);
      else
        x = at(v, k - 1) + 1;
      long y = x - k;
      while (x < n && y < m && a[x] == b[y]) ++x, ++y;
      at(v, k) = x;
      if (x >= n && y >= m) {
        d_found = d;
        break;
      }
    }
  }

  long x = n, y = m;
  for (long d = d_found; d > 0; --d) {
    auto& prev = trace[d];
    long k = x - y;
    bool down = (k == -d || (k != d && at(prev, k - 1) < at(prev, k + 1)));
    long prev_k = down ? k + 1 : k - 1;
    long prev_x = at(prev, prev_k);
    long prev_y = prev_x - prev_k;
    if (down) {
      while (x > prev_x) {
        script.push_back({'=', static_cast<size_t>(--x)});
        --y;
      }
      script.push_back({'+', static_cast<size_t>(--y)});
    } else {
      while (y > prev_y) {
        script.push_back({'=', static_cast<size_t>(--x)});
        --y;
      }
      script.push_back({'-', static_cast<size_t>(--x)});
    }
  }
  while (x > 0 && y > 0) {
    script.push_back({'=', static_cast<size_t>(--x)});
    --y;
  }
  while (x > 0) script.push_back({'-', static_cast<size_t>(--x)});
  while (y > 0) script.push_back({'+', static_cast<size_t>(--y)});
  std::reverse(script.begin(), script.end());
  return script;
}

}  // namespace detail

inline constexpr int kDiffContextLines = 3;

// Diff for one file; nullopt when contents are identical. Absent optionals
// denote a missing file (new-file / deleted-file entries).
inline std::optional<FileDiff> diff_file(const std::string& path,
                                         const std::optional<std::string>& old_content,
                                         const std::optional<std::string>& new_content,
                                         int context = kDiffContextLines) {
  using detail::Line;
  if (!old_content && !new_content) return std::nullopt;
  if (old_content && new_content && *old_content == *new_content) return std::nullopt;

  FileDiff fd;
  fd.old_path = old_content ? path : "";
  fd.new_path = new_content ? path : "";

  std::vector<Line> a = old_content ? detail::file_to_lines(*old_content) : std::vector<Line>{};
  std::vector<Line> b = new_content ? detail::file_to_lines(*new_content) : std::vector<Line>{};
  auto script = detail::myers_script(a, b);

  // Group change runs whose surrounding context would overlap.
  std::vector<std::pair<size_t, size_t>> groups;  // [first, last] script indices of changes
  for (size_t i = 0; i < script.size(); ++i) {
    if (script[i].op == '=') continue;
    if (!groups.empty() && i - groups.back().second - 1 <= 2 * static_cast<size_t>(context))
      groups.back().second = i;
    else
      groups.emplace_back(i, i);
  }

  // Old/new line counts consumed before each script position.
  std::vector<long> old_before(script.size() + 1, 0), new_before(script.size() + 1, 0);
  for (size_t i = 0; i < script.size(); ++i) {
    old_before[i + 1] = old_before[i] + (script[i].op != '+' ? 1 : 0);
    new_before[i + 1] = new_before[i] + (script[i].op != '-' ? 1 : 0);
  }

  for (auto [first, last] : groups) {
    size_t begin = first >= static_cast<size_t>(context) ? first - context : 0;
    size_t end = std::min(script.size() - 1, last + context);
    Hunk hunk;
    for (size_t i = begin; i <= end; ++i) {
      const auto& entry = script[i];
      const Line& src = entry.op == '+' ? b[entry.idx] : a[entry.idx];
      LineOp op;
      op.kind = entry.op == '=' ? LineOpKind::Context
                                : (entry.op == '+' ? LineOpKind::Add : LineOpKind::Del);
      op.text = src.text;
      op.has_newline = src.has_newline;
      hunk.lines.push_back(std::move(op));
      if (entry.op != '+') ++hunk.old_count;
      if (entry.op != '-') ++hunk.new_count;
    }
    hunk.old_start = hunk.old_count > 0 ? old_before[begin] + 1 : old_before[begin];
    hunk.new_start = hunk.new_count > 0 ? new_before[begin] + 1 : new_before[begin];
    fd.hunks.push_back(std::move(hunk));
  }
  return fd;
}

// Unified diff between two trees, lexicographic by path. Binary files are
// not representable in unified diffs (the parser rejects binary markers), so
// entries with binary content on either side are omitted.
inline UnifiedDiff diff_trees(const std::map<std::string, std::string>& old_tree,
                              const std::map<std::string, std::string>& new_tree) {
  UnifiedDiff diff;
  auto it_old = old_tree.begin();
  auto it_new = new_tree.begin();
  auto add_entry = [&](const std::string& path, const std::optional<std::string>& before,
                       const std::optional<std::string>& after) {
    if (before && looks_binary(*before)) return;
    if (after && looks_binary(*after)) return;
    if (auto fd = diff_file(path, before, after)) diff.files.push_back(std::move(*fd));
  };
  while (it_old != old_tree.end() || it_new != new_tree.end()) {
    if (it_new == new_tree.end() || (it_old != old_tree.end() && it_old->first < it_new->first)) {
      add_entry(it_old->first, it_old->second, std::nullopt);
      ++it_old;
    } else if (it_old == old_tree.end() || it_new->first < it_old->first) {
      add_entry(it_new->first, std::nullopt, it_new->second);
      ++it_new;
    } else {
      add_entry(it_old->first, it_old->second, it_new->second);
      ++it_old;
      ++it_new;
    }
  }
  return diff;
}

// ---------------------------------------------------------------------------
// Application

namespace detail {

inline Line op_to_line(const LineOp& op) { return Line{op.text, op.has_newline}; }

inline bool line_matches(const Line& line, const LineOp& op) {
  return line.text == op.text && line.has_newline == op.has_newline;
}

}  // namespace detail

// Applies one file entry. old_content is absent when the file does not
// exist; the returned optional is empty when the file should be deleted.
inline std::optional<std::string> apply_file_diff(const FileDiff& fd,
                                                  const std::optional<std::string>& old_content) {
  using detail::Line;
  const std::string& path = fd.display_path();

  if (fd.is_new_file()) {
    if (old_content) throw PatchConflict("file already exists: " + path);
    std::vector<Line> out;
    for (const auto& h : fd.hunks)
      for (const auto& op : h.lines) {
        if (op.kind != LineOpKind::Add)
          throw PatchConflict("new-file entry contains non-addition lines: " + path);
        out.push_back(detail::op_to_line(op));
      }
    return detail::lines_to_content(out);
  }

  if (!old_content) throw PatchConflict("file not found: " + path);
  std::vector<Line> lines = detail::file_to_lines(*old_content);

  if (fd.is_deleted_file()) {
    long cursor = 0;
    for (const auto& h : fd.hunks)
      for (const auto& op : h.lines) {
        if (op.kind != LineOpKind::Del)
          throw PatchConflict("delete entry contains non-deletion lines: " + path);
        if (cursor >= static_cast<long>(lines.size()) ||
            !detail::line_matches(lines[cursor], op))
          throw PatchConflict("content mismatch deleting " + path + " at line " +
                              std::to_string(cursor + 1));
        ++cursor;
      }
    if (cursor != static_cast<long>(lines.size()))
      throw PatchConflict("delete entry does not cover " + path);
    return std::nullopt;
  }

  std::vector<Line> out;
  long cursor = 0;  // next unconsumed old line, 0-based
  for (const auto& h : fd.hunks) {
    long anchor = h.old_count > 0 ? h.old_start - 1 : h.old_start;
    if (anchor < cursor) throw PatchConflict("overlapping hunks in " + path);
    if (anchor > static_cast<long>(lines.size()))
      throw PatchConflict("hunk start beyond end of " + path);
    for (; cursor < anchor; ++cursor) out.push_back(lines[cursor]);
    for (const auto& op : h.lines) {
      switch (op.kind) {
        case LineOpKind::Context:
        case LineOpKind::Del:
          if (cursor >= static_cast<long>(lines.size()) ||
              !detail::line_matches(lines[cursor], op))
            throw PatchConflict("context mismatch in " + path + " at line " +
                                std::to_string(cursor + 1));
          if (op.kind == LineOpKind::Context) out.push_back(lines[cursor]);
          ++cursor;
          break;
        case LineOpKind::Add:
          out.push_back(detail::op_to_line(op));
          break;
      }
    }
  }
  for (; cursor < static_cast<long>(lines.size()); ++cursor) out.push_back(lines[cursor]);
  return detail::lines_to_content(out);
}

// All-or-nothing application to an in-memory tree. Paths are validated as
// repository-relative before anything is written.
inline void apply_diff_to_tree(std::map<std::string, std::string>& tree, const UnifiedDiff& diff) {
  std::vector<std::pair<std::string, std::optional<std::string>>> staged;
  for (const auto& fd : diff.files) {
    const std::string& path = fd.display_path();
    if (!normalize_repo_path(path)) throw PathEscape(path);
    std::optional<std::string> before;
    if (auto it = tree.find(path); it != tree.end()) before = it->second;
    staged.emplace_back(path, apply_file_diff(fd, before));
  }
  for (auto& [path, content] : staged) {
    if (content)
      tree[path] = std::move(*content);
    else
      tree.erase(path);
  }
}

}  // namespace patchforge
