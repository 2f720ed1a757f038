#pragma once

// Timestamped registration of fingerprint packages and models: an
// append-only record log plus content-addressed artifact storage. Logical
// sequence numbers are the authoritative order; wall-clock times are
// informational. Crash safety comes from single-write appends with a
// per-record digest — a torn final record is detected and dropped on load.

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fitprint/sha256.hpp"

namespace fitprint {

struct RegistryRecord {
  std::uint64_t seq = 0;  // authoritative total order, assigned 1,2,3,...
  std::string owner;
  std::string package_digest;
  std::string model_digest;
  std::int64_t unix_time = 0;
};

enum class Precedence { a_first, b_first };

inline Precedence precedence(const RegistryRecord& a, const RegistryRecord& b) {
  if (a.seq == b.seq) {
    throw std::invalid_argument("precedence: records share sequence number " +
                                std::to_string(a.seq));
  }
  return a.seq < b.seq ? Precedence::a_first : Precedence::b_first;
}

namespace detail {

inline bool valid_owner(const std::string& s) {
  if (s.empty() || s.size() > 64) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
          c == '_' || c == '-')) {
      return false;
    }
  }
  return true;
}

inline bool valid_digest(const std::string& s) {
  if (s.size() != 64) return false;
  for (char c : s) {
    if (!std::isxdigit(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

// Canonical record body; the on-disk line is this plus " digest=<sha256>".
inline std::string record_body(const RegistryRecord& r) {
  return "seq=" + std::to_string(r.seq) + " owner=" + r.owner +
         " package=" + r.package_digest + " model=" + r.model_digest +
         " time=" + std::to_string(r.unix_time);
}

inline std::string record_line(const RegistryRecord& r) {
  const std::string body = record_body(r);
  return body + " digest=" + sha256_hex(body) + "\n";
}

// Parses one log line; nullopt for anything malformed or digest-mismatched.
inline std::optional<RegistryRecord> parse_record(const std::string& line) {
  std::vector<std::string> tok;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    const std::size_t sp = line.find(' ', pos);
    tok.push_back(line.substr(pos, sp == std::string::npos ? sp : sp - pos));
    if (sp == std::string::npos) break;
    pos = sp + 1;
  }
  if (tok.size() != 6) return std::nullopt;
  const char* keys[6] = {"seq=", "owner=", "package=", "model=", "time=",
                         "digest="};
  std::string vals[6];
  for (int i = 0; i < 6; ++i) {
    if (tok[i].rfind(keys[i], 0) != 0) return std::nullopt;
    vals[i] = tok[i].substr(std::string(keys[i]).size());
  }
  RegistryRecord r;
  try {
    std::size_t used = 0;
    r.seq = std::stoull(vals[0], &used);
    if (used != vals[0].size()) return std::nullopt;
    r.unix_time = std::stoll(vals[4], &used);
    if (used != vals[4].size()) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  r.owner = vals[1];
  r.package_digest = vals[2];
  r.model_digest = vals[3];
  if (!valid_owner(r.owner) || !valid_digest(r.package_digest) ||
      !valid_digest(r.model_digest)) {
    return std::nullopt;
  }
  if (sha256_hex(record_body(r)) != vals[5]) return std::nullopt;
  return r;
}

}  // namespace detail

// One registry directory: `log.ndrec` append log, `artifacts/` holding
// registered files named by their SHA-256, `lock` for writer exclusion.
class Registry {
 public:
  Registry(Registry&& o) noexcept
      : dir_(std::move(o.dir_)),
        records_(std::move(o.records_)),
        tail_truncated_(o.tail_truncated_),
        lock_fd_(o.lock_fd_) {
    o.lock_fd_ = -1;
  }
  Registry& operator=(Registry&&) = delete;
  Registry(const Registry&) = delete;
  Registry& operator=(const Registry&) = delete;

  ~Registry() {
    if (lock_fd_ >= 0) ::close(lock_fd_);  // releases the flock
  }

  // Opens (creating if needed) a registry directory. Writers take an
  // exclusive advisory lock; concurrent readers need none.
  static Registry open(const std::string& dir, bool writer) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "artifacts");
    Registry reg(dir);
    if (writer) {
      const std::string lock_path = (fs::path(dir) / "lock").string();
      reg.lock_fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
      if (reg.lock_fd_ < 0) {
        throw std::runtime_error("registry: cannot open lock file " +
                                 lock_path);
      }
      if (::flock(reg.lock_fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(reg.lock_fd_);
        reg.lock_fd_ = -1;
        throw std::runtime_error(
            "registry: another writer holds the lock on " + dir);
      }
    }
    reg.load();
    return reg;
  }

  const std::vector<RegistryRecord>& records() const { return records_; }

  // True when load() dropped a torn final record (interrupted append).
  bool tail_truncated() const { return tail_truncated_; }

  std::optional<RegistryRecord> lookup_package(const std::string& digest) const {
    for (const auto& r : records_) {
      if (r.package_digest == digest) return r;
    }
    return std::nullopt;
  }

  std::vector<RegistryRecord> lookup_owner(const std::string& owner) const {
    std::vector<RegistryRecord> out;
    for (const auto& r : records_) {
      if (r.owner == owner) out.push_back(r);
    }
    return out;
  }

  std::vector<RegistryRecord> lookup_model(const std::string& digest) const {
    std::vector<RegistryRecord> out;
    for (const auto& r : records_) {
      if (r.model_digest == digest) out.push_back(r);
    }
    return out;
  }

  std::string artifact_path(const std::string& digest) const {
    return (std::filesystem::path(dir_) / "artifacts" / digest).string();
  }

  // Registers a package/model pair: artifacts are copied in first (content
  // addressed), then the record is appended with one durable write. A crash
  // anywhere leaves the log either without the record or with it complete.
  RegistryRecord add(const std::string& owner, const std::string& package_path,
                     const std::string& model_path) {
    if (lock_fd_ < 0) {
      throw std::logic_error("registry: opened read-only");
    }
    if (!detail::valid_owner(owner)) {
      throw std::invalid_argument(
          "registry: owner id must be 1-64 chars of [A-Za-z0-9._-], got '" +
          owner + "'");
    }
    RegistryRecord r;
    r.owner = owner;
    r.package_digest = store_artifact(package_path);
    r.model_digest = store_artifact(model_path);
    if (lookup_package(r.package_digest)) {
      throw std::invalid_argument("registry: package " + r.package_digest +
                                  " already registered");
    }
    r.seq = records_.empty() ? 1 : records_.back().seq + 1;
    r.unix_time = std::chrono::duration_cast<std::chrono::seconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count();
    append_line(detail::record_line(r));
    records_.push_back(r);
    return r;
  }

  // Recomputes the digest of every referenced artifact; returns the digests
  // whose files are missing or corrupted (empty = all intact).
  std::vector<std::string> verify_artifacts() const {
    std::vector<std::string> bad;
    auto check = [&](const std::string& digest) {
      const std::string path = artifact_path(digest);
      try {
        if (sha256_file_hex(path) == digest) return;
      } catch (const std::exception&) {
      }
      if (std::find(bad.begin(), bad.end(), digest) == bad.end()) {
        bad.push_back(digest);
      }
    };
    for (const auto& r : records_) {
      check(r.package_digest);
      check(r.model_digest);
    }
    return bad;
  }

 private:
  explicit Registry(std::string dir) : dir_(std::move(dir)) {}

  std::string log_path() const {
    return (std::filesystem::path(dir_) / "log.ndrec").string();
  }

  // Rebuilds the in-memory index. A malformed suffix that contains no
  // further valid record is a torn append and is dropped; a bad record
  // followed by a good one is genuine corruption and rejected.
  void load() {
    records_.clear();
    tail_truncated_ = false;
    std::ifstream in(log_path(), std::ios::binary);
    if (!in) return;  // no log yet
    std::string data((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    bool saw_bad = false;
    while (pos < data.size()) {
      std::size_t nl = data.find('\n', pos);
      const bool complete = nl != std::string::npos;
      if (!complete) nl = data.size();
      const std::string line = data.substr(pos, nl - pos);
      pos = nl + (complete ? 1 : 0);
      if (line.empty()) continue;
      auto rec = complete ? detail::parse_record(line) : std::nullopt;
      if (!rec) {
        saw_bad = true;
        tail_truncated_ = true;
        continue;
      }
      if (saw_bad) {
        throw std::runtime_error(
            "registry: corrupt record mid-log in " + log_path() +
            " (valid records follow it)");
      }
      if (!records_.empty() && rec->seq <= records_.back().seq) {
        throw std::runtime_error(
            "registry: sequence numbers not strictly increasing in " +
            log_path());
      }
      records_.push_back(*rec);
    }
  }

  // Content-addressed copy into artifacts/ (write-temp-then-rename).
  std::string store_artifact(const std::string& path) {
    const std::string digest = sha256_file_hex(path);
    namespace fs = std::filesystem;
    const fs::path dest = fs::path(dir_) / "artifacts" / digest;
    if (!fs::exists(dest)) {
      const fs::path tmp = dest.string() + ".tmp";
      fs::copy_file(path, tmp, fs::copy_options::overwrite_existing);
      fs::rename(tmp, dest);
    }
    return digest;
  }

  void append_line(const std::string& line) {
    const int fd = ::open(log_path().c_str(),
                          O_CREAT | O_WRONLY | O_APPEND, 0644);
    if (fd < 0) {
      throw std::runtime_error("registry: cannot open log " + log_path());
    }
    const ssize_t n = ::write(fd, line.data(), line.size());
    const bool ok = n == static_cast<ssize_t>(line.size()) &&
                    ::fsync(fd) == 0;
    ::close(fd);
    if (!ok) {
      throw std::runtime_error("registry: append failed for " + log_path());
    }
  }

  std::string dir_;
  std::vector<RegistryRecord> records_;
  bool tail_truncated_ = false;
  int lock_fd_ = -1;
};

}  // namespace fitprint
