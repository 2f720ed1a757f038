// Registry: append-only record log, content-addressed artifacts, writer
// locking, and crash recovery. The fault-injection case replays every
// possible torn-append prefix of a real log.

#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fitprint/registry.hpp"
#include "fitprint/sha256.hpp"
#include "fitprint/verification.hpp"

using namespace fitprint;

namespace {

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("fitprint_reg_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string write_file(const std::filesystem::path& dir,
                       const std::string& name, const std::string& content) {
  const std::string p = (dir / name).string();
  std::ofstream out(p, std::ios::binary);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  return p;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("registry assigns sequence numbers and round-trips", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  const std::string pkg_a = write_file(tmp.path, "a.fitp", "package-a");
  const std::string pkg_b = write_file(tmp.path, "b.fitp", "package-b");
  const std::string model = write_file(tmp.path, "m.fitm", "model-bytes");

  {
    Registry reg = Registry::open(reg_dir, true);
    const RegistryRecord r1 = reg.add("alice", pkg_a, model);
    const RegistryRecord r2 = reg.add("bob", pkg_b, model);
    CHECK(r1.seq == 1);
    CHECK(r2.seq == 2);
    CHECK(r1.owner == "alice");
    CHECK(r1.package_digest == sha256_hex(std::string("package-a")));
    CHECK(r1.model_digest == sha256_hex(std::string("model-bytes")));
    CHECK(r1.unix_time > 0);

    // Artifacts land content-addressed; the shared model is stored once.
    CHECK(read_file(reg.artifact_path(r1.package_digest)) == "package-a");
    CHECK(read_file(reg.artifact_path(r1.model_digest)) == "model-bytes");
    CHECK(r1.model_digest == r2.model_digest);
  }

  // A fresh reader sees the identical records.
  Registry reader = Registry::open(reg_dir, false);
  REQUIRE(reader.records().size() == 2);
  CHECK(reader.records()[0].seq == 1);
  CHECK(reader.records()[1].seq == 2);
  CHECK(reader.records()[0].owner == "alice");
  CHECK(reader.records()[1].owner == "bob");
  CHECK_FALSE(reader.tail_truncated());

  // Lookups by package, owner, and model.
  const std::string pkg_digest = sha256_hex(std::string("package-a"));
  auto hit = reader.lookup_package(pkg_digest);
  REQUIRE(hit.has_value());
  CHECK(hit->owner == "alice");
  CHECK_FALSE(reader.lookup_package(std::string(64, '0')).has_value());
  CHECK(reader.lookup_owner("alice").size() == 1);
  CHECK(reader.lookup_owner("nobody").empty());
  CHECK(reader.lookup_model(sha256_hex(std::string("model-bytes"))).size() == 2);
}

TEST_CASE("registry continues sequence numbers across reopen", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  const std::string model = write_file(tmp.path, "m.fitm", "model");
  {
    Registry reg = Registry::open(reg_dir, true);
    reg.add("alice", write_file(tmp.path, "1.fitp", "one"), model);
    reg.add("alice", write_file(tmp.path, "2.fitp", "two"), model);
  }
  Registry reg = Registry::open(reg_dir, true);
  const RegistryRecord r = reg.add(
      "alice", write_file(tmp.path, "3.fitp", "three"), model);
  CHECK(r.seq == 3);
  CHECK(reg.records().size() == 3);
}

TEST_CASE("registry rejects duplicates, bad owners, and read-only writes",
          "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  const std::string pkg = write_file(tmp.path, "p.fitp", "the-package");
  const std::string model = write_file(tmp.path, "m.fitm", "the-model");

  Registry reg = Registry::open(reg_dir, true);
  reg.add("alice", pkg, model);

  // Same package content again, even from another path or owner.
  const std::string copy = write_file(tmp.path, "p2.fitp", "the-package");
  CHECK_THROWS_WITH(reg.add("bob", copy, model),
                    Catch::Matchers::ContainsSubstring("already registered"));

  const std::string other = write_file(tmp.path, "q.fitp", "other-package");
  CHECK_THROWS_WITH(reg.add("", other, model),
                    Catch::Matchers::ContainsSubstring("owner id"));
  CHECK_THROWS_WITH(reg.add("has space", other, model),
                    Catch::Matchers::ContainsSubstring("owner id"));
  CHECK_THROWS_WITH(reg.add(std::string(65, 'a'), other, model),
                    Catch::Matchers::ContainsSubstring("owner id"));
  CHECK_NOTHROW(reg.add("A-z.0_9", other, model));

  Registry reader = Registry::open(reg_dir, false);
  const std::string more = write_file(tmp.path, "r.fitp", "more");
  CHECK_THROWS_WITH(reader.add("alice", more, model),
                    Catch::Matchers::ContainsSubstring("read-only"));
}

TEST_CASE("registry writer lock excludes a second writer", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  {
    Registry writer = Registry::open(reg_dir, true);
    CHECK_THROWS_WITH(Registry::open(reg_dir, true),
                      Catch::Matchers::ContainsSubstring(
                          "another writer holds the lock"));
    // Readers are never blocked.
    CHECK_NOTHROW(Registry::open(reg_dir, false));
  }
  // Destruction released the lock.
  CHECK_NOTHROW(Registry::open(reg_dir, true));
}

TEST_CASE("torn appends recover at every prefix length", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  const std::string model = write_file(tmp.path, "m.fitm", "model");
  {
    Registry reg = Registry::open(reg_dir, true);
    reg.add("alice", write_file(tmp.path, "1.fitp", "pkg-one"), model);
    reg.add("bob", write_file(tmp.path, "2.fitp", "pkg-two"), model);
    reg.add("carol", write_file(tmp.path, "3.fitp", "pkg-three"), model);
  }
  const std::string log_path =
      (std::filesystem::path(reg_dir) / "log.ndrec").string();
  const std::string full = read_file(log_path);

  // Line boundaries: a prefix cut at one of these is a clean shutdown, a
  // cut anywhere else is a torn append of the following record.
  std::vector<std::size_t> boundaries = {0};
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (full[i] == '\n') boundaries.push_back(i + 1);
  }
  REQUIRE(boundaries.size() == 4);  // 0 + three records

  for (std::size_t cut = 0; cut <= full.size(); ++cut) {
    std::ofstream out(log_path, std::ios::binary | std::ios::trunc);
    out.write(full.data(), static_cast<std::streamsize>(cut));
    out.close();

    std::size_t whole = 0;
    while (whole + 1 < boundaries.size() && boundaries[whole + 1] <= cut) {
      ++whole;
    }
    const bool torn = cut != boundaries[whole];

    Registry reg = Registry::open(reg_dir, false);
    INFO("cut=" << cut);
    CHECK(reg.records().size() == whole);
    CHECK(reg.tail_truncated() == torn);
    for (std::size_t i = 0; i < reg.records().size(); ++i) {
      CHECK(reg.records()[i].seq == i + 1);
    }
  }
}

TEST_CASE("corruption before valid records is rejected", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  const std::string model = write_file(tmp.path, "m.fitm", "model");
  {
    Registry reg = Registry::open(reg_dir, true);
    reg.add("alice", write_file(tmp.path, "1.fitp", "pkg-one"), model);
    reg.add("bob", write_file(tmp.path, "2.fitp", "pkg-two"), model);
  }
  const std::string log_path =
      (std::filesystem::path(reg_dir) / "log.ndrec").string();
  const std::string full = read_file(log_path);

  // Damage one byte of the first record; the intact second record proves
  // the damage is not a torn tail.
  std::string bad = full;
  bad[10] = bad[10] == 'x' ? 'y' : 'x';
  std::ofstream(log_path, std::ios::binary | std::ios::trunc) << bad;
  CHECK_THROWS_WITH(Registry::open(reg_dir, false),
                    Catch::Matchers::ContainsSubstring("corrupt record mid-log"));

  // Sequence numbers must be strictly increasing even if each line is
  // individually well-formed.
  RegistryRecord dup;
  dup.seq = 1;
  dup.owner = "mallory";
  dup.package_digest = std::string(64, 'a');
  dup.model_digest = std::string(64, 'b');
  dup.unix_time = 5;
  const std::size_t first_len = full.find('\n') + 1;
  std::ofstream(log_path, std::ios::binary | std::ios::trunc)
      << full.substr(0, first_len) << detail::record_line(dup);
  CHECK_THROWS_WITH(Registry::open(reg_dir, false),
                    Catch::Matchers::ContainsSubstring("strictly increasing"));
}

TEST_CASE("artifact verification pinpoints damaged files", "[registry]") {
  TempDir tmp;
  const std::string reg_dir = (tmp.path / "reg").string();
  Registry reg = Registry::open(reg_dir, true);
  const RegistryRecord r =
      reg.add("alice", write_file(tmp.path, "p.fitp", "package-bytes"),
              write_file(tmp.path, "m.fitm", "model-bytes"));
  CHECK(reg.verify_artifacts().empty());

  // One flipped byte in the stored package.
  {
    std::fstream f(reg.artifact_path(r.package_digest),
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(3);
    f.put('X');
  }
  std::vector<std::string> bad = reg.verify_artifacts();
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == r.package_digest);

  // A missing model artifact is reported alongside.
  std::filesystem::remove(reg.artifact_path(r.model_digest));
  bad = reg.verify_artifacts();
  REQUIRE(bad.size() == 2);
  CHECK(bad[0] == r.package_digest);
  CHECK(bad[1] == r.model_digest);
}

TEST_CASE("precedence follows sequence numbers only", "[registry]") {
  RegistryRecord a;
  a.seq = 3;
  a.unix_time = 900;  // later clock, earlier sequence: sequence wins
  RegistryRecord b;
  b.seq = 7;
  b.unix_time = 100;
  CHECK(precedence(a, b) == Precedence::a_first);
  CHECK(precedence(b, a) == Precedence::b_first);

  RegistryRecord c = a;
  CHECK_THROWS_WITH(precedence(a, c),
                    Catch::Matchers::ContainsSubstring("share sequence number"));
}

TEST_CASE("verification honors registration order", "[registry]") {
  // A perfect BER cannot rescue a package registered after the suspect.
  const std::vector<double> v = {0.4, -0.2, 0.1, -0.3};
  const Bits target = {1, -1, 1, -1};
  VerificationReport early = decide(v, target, 0.1, 1, 2);
  CHECK(early.ber_value == 0.0);
  CHECK(early.timestamp_check == TimestampCheck::pass);
  CHECK(early.reused);

  VerificationReport late = decide(v, target, 0.1, 2, 1);
  CHECK(late.ber_value == 0.0);
  CHECK(late.timestamp_check == TimestampCheck::fail);
  CHECK_FALSE(late.reused);

  // Unknown order leaves the check unset and the decision to BER alone.
  VerificationReport unknown = decide(v, target, 0.1);
  CHECK(unknown.timestamp_check == TimestampCheck::not_applicable);
  CHECK(unknown.reused);
}
