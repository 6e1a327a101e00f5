#pragma once

// Small filesystem and string helpers shared across the library.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fnmatch.h>
#include <openssl/evp.h>

namespace patchforge {

namespace fs = std::filesystem;

class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

#define PATCHFORGE_DEFINE_ERROR(Name)                            \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

PATCHFORGE_DEFINE_ERROR(MalformedDiff);
PATCHFORGE_DEFINE_ERROR(PatchConflict);
PATCHFORGE_DEFINE_ERROR(PathEscape);
PATCHFORGE_DEFINE_ERROR(EnvBuildFailed);
PATCHFORGE_DEFINE_ERROR(RevisionNotFound);
PATCHFORGE_DEFINE_ERROR(WorkspaceDead);
PATCHFORGE_DEFINE_ERROR(BackendUnavailable);
PATCHFORGE_DEFINE_ERROR(ContextOverflow);
PATCHFORGE_DEFINE_ERROR(ScriptExhausted);
PATCHFORGE_DEFINE_ERROR(NoCandidates);
PATCHFORGE_DEFINE_ERROR(ManifestInvalid);
PATCHFORGE_DEFINE_ERROR(UnfilteredTestEdit);
PATCHFORGE_DEFINE_ERROR(ConfigError);
PATCHFORGE_DEFINE_ERROR(ReportUnreadable);

#undef PATCHFORGE_DEFINE_ERROR

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("IoError", "cannot read " + path.string());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline void write_file(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

// Validates a repository-relative path: non-empty, forward slashes, no
// absolute prefix, no "." or ".." components. Returns the normalized form.
inline std::optional<std::string> normalize_repo_path(std::string_view raw) {
  if (raw.empty() || raw.front() == '/' || raw.find('\\') != std::string_view::npos)
    return std::nullopt;
  std::vector<std::string> parts;
  size_t pos = 0;
  while (pos <= raw.size()) {
    size_t next = raw.find('/', pos);
    if (next == std::string_view::npos) next = raw.size();
    std::string part(raw.substr(pos, next - pos));
    if (part == "." || part == "..") return std::nullopt;
    if (!part.empty()) parts.push_back(std::move(part));
    pos = next + 1;
  }
  if (parts.empty()) return std::nullopt;
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '/';
    out += parts[i];
  }
  return out;
}

// Resolves rel under root, throwing PathEscape on traversal attempts.
inline fs::path resolve_under_root(const fs::path& root, std::string_view rel) {
  auto normalized = normalize_repo_path(rel);
  if (!normalized) throw PathEscape(std::string(rel));
  return root / *normalized;
}

inline std::string path_basename(std::string_view path) {
  size_t slash = path.rfind('/');
  return std::string(slash == std::string_view::npos ? path : path.substr(slash + 1));
}

// All regular files under root as sorted repo-relative paths.
inline std::vector<std::string> list_tree(const fs::path& root) {
  std::vector<std::string> paths;
  if (!fs::exists(root)) return paths;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    paths.push_back(fs::relative(entry.path(), root).generic_string());
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

// Content hash of a file tree; order-independent identity for a revision.
inline std::string tree_hash(const std::map<std::string, std::string>& files) {
  std::string buffer;
  for (const auto& [path, content] : files) {
    buffer += path;
    buffer += '\0';
    buffer += std::to_string(content.size());
    buffer += '\0';
    buffer += content;
  }
  return sha256_hex(buffer);
}

inline std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& rel : list_tree(root)) files[rel] = read_file(root / rel);
  return files;
}

inline std::string tree_hash(const fs::path& root) { return tree_hash(snapshot_tree(root)); }

inline bool looks_binary(std::string_view data) {
  size_t probe = std::min<size_t>(data.size(), 8192);
  return data.substr(0, probe).find('\0') != std::string_view::npos;
}

// Glob match against the full relative path or its basename.
inline bool glob_match(const std::string& pattern, const std::string& rel_path) {
  if (fnmatch(pattern.c_str(), rel_path.c_str(), 0) == 0) return true;
  return fnmatch(pattern.c_str(), path_basename(rel_path).c_str(), 0) == 0;
}

inline size_t word_count(std::string_view text) {
  size_t count = 0;
  bool in_word = false;
  for (char c : text) {
    bool space = (c == ' ' || c == '\n' || c == '\t' || c == '\r');
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      lines.emplace_back(text.substr(pos));
      break;
    }
    lines.emplace_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return lines;
}

}  // namespace patchforge
