// The C library and the command-line tool, exercised only through their
// public surfaces.
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dmvton/dmvton.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Scratch {
 public:
  Scratch() {
    static int n = 0;
    path_ = fs::temp_directory_path() / ("dmvton_capi_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string operator/(const std::string& s) const { return (path_ / s).string(); }

 private:
  fs::path path_;
};

json take(char* s) {
  json j = json::parse(s);
  dmvton_string_free(s);
  return j;
}

json run(const char* cmd, const json& flags, dmvton_status expect = DMVTON_OK) {
  char* out = nullptr;
  const std::string f = flags.dump();
  const dmvton_status st = dmvton_run_command(cmd, nullptr, f.c_str(), &out);
  REQUIRE_MESSAGE(st == expect, dmvton_last_error());
  return out ? take(out) : json();
}

struct Proc {
  int code;
  std::string out;
};

Proc cli(const std::string& args) {
  const std::string cmd = std::string(DMVTON_CLI) + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  char buf[4096];
  while (size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = ::pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace

TEST_CASE("status names and last error") {
  CHECK(std::string(dmvton_status_name(DMVTON_OK)) == "ok");
  CHECK(std::string(dmvton_status_name(DMVTON_ERR_CONFIG)) == "config");
  CHECK(std::string(dmvton_version()).size() > 0);

  char* out = nullptr;
  CHECK(dmvton_run_command("bogus", nullptr, nullptr, &out) == DMVTON_ERR_CONFIG);
  CHECK(out == nullptr);
  CHECK(std::string(dmvton_last_error()).find("bogus") != std::string::npos);
  CHECK(dmvton_run_command("init", nullptr, "{not json", &out) == DMVTON_ERR_CONFIG);
  CHECK(dmvton_run_command(nullptr, nullptr, nullptr, &out) == DMVTON_ERR_ARGUMENT);
  CHECK(dmvton_run_command("init", nullptr, nullptr, nullptr) == DMVTON_ERR_ARGUMENT);

  REQUIRE(dmvton_command_list(&out) == DMVTON_OK);
  CHECK(std::string(dmvton_last_error()).empty());
  const json names = take(out);
  CHECK(std::find(names.begin(), names.end(), "serve") != names.end());
  REQUIRE(dmvton_command_schema("infer", &out) == DMVTON_OK);
  const json schema = take(out);
  CHECK(schema["name"] == "infer");
  CHECK(dmvton_command_schema("nope", &out) == DMVTON_ERR_CONFIG);
}

TEST_CASE("commands through the C API") {
  Scratch dir;
  const json toy = run("make-toy", {{"out", dir / "data"}, {"count", 2}});
  CHECK(toy["records"] == 2);
  const json a = run("init", {{"out", dir / "a"}, {"seed", 5}});
  const json b = run("init", {{"out", dir / "b"}, {"seed", 5}});
  CHECK(a["params"] == b["params"]);
  std::ifstream fa(dir / "a/weights.bin", std::ios::binary), fb(dir / "b/weights.bin", std::ios::binary);
  const std::string sa{std::istreambuf_iterator<char>(fa), {}}, sb{std::istreambuf_iterator<char>(fb), {}};
  CHECK_FALSE(sa.empty());
  CHECK(sa == sb);

  run("train-teacher", {{"data", dir / "data"}, {"out", dir / "t"}, {"steps", 0}}, DMVTON_ERR_CONFIG);
  run("train-teacher", {{"data", dir / "nothing"}, {"out", dir / "t"}, {"steps", 1}}, DMVTON_ERR_DATA);
  run("serve", {{"weights", dir / "a"}, {"assets", dir / "data"}}, DMVTON_ERR_CONFIG);

  std::ofstream(dir / "cfg.json") << json{{"out", dir / "c"}, {"kind", "teacher"}}.dump();
  char* out = nullptr;
  REQUIRE(dmvton_run_command("init", (dir / "cfg.json").c_str(), nullptr, &out) == DMVTON_OK);
  CHECK(take(out)["kind"] == "teacher");
}

TEST_CASE("model handles") {
  Scratch dir;
  dmvton_model* m = nullptr;
  CHECK(dmvton_model_create("wizard", "tiny", 1, &m) == DMVTON_ERR_CONFIG);
  CHECK(dmvton_model_create("student", "huge", 1, &m) == DMVTON_ERR_CONFIG);
  REQUIRE(dmvton_model_create("student", "tiny", 1, &m) == DMVTON_OK);
  char* out = nullptr;
  REQUIRE(dmvton_model_info(m, &out) == DMVTON_OK);
  const json info = take(out);
  CHECK(info["kind"] == "student");
  CHECK(info["height"] == 64);
  CHECK(info["width"] == 48);
  CHECK(info["params"].get<int64_t>() > 0);
  CHECK(info["flops"].get<int64_t>() > 0);

  const size_t n = 64 * 48 * 3;
  std::vector<uint8_t> person(n), garment(n), r1(n), r2(n);
  for (size_t i = 0; i < n; ++i) {
    person[i] = static_cast<uint8_t>(i * 7);
    garment[i] = static_cast<uint8_t>(255 - i % 251);
  }
  REQUIRE(dmvton_model_tryon(m, person.data(), garment.data(), r1.data()) == DMVTON_OK);
  REQUIRE(dmvton_model_tryon(m, person.data(), garment.data(), r2.data()) == DMVTON_OK);
  CHECK(r1 == r2);
  CHECK(dmvton_model_tryon(m, nullptr, garment.data(), r1.data()) == DMVTON_ERR_ARGUMENT);

  REQUIRE(dmvton_model_save(m, (dir / "w").c_str()) == DMVTON_OK);
  dmvton_model* loaded = nullptr;
  REQUIRE(dmvton_model_load((dir / "w").c_str(), "tiny", &loaded) == DMVTON_OK);
  REQUIRE(dmvton_model_tryon(loaded, person.data(), garment.data(), r2.data()) == DMVTON_OK);
  // f32 storage rounds the weights; 8-bit output hides most of it.
  int worst = 0;
  for (size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(int(r1[i]) - int(r2[i])));
  CHECK(worst <= 1);
  CHECK(dmvton_model_load((dir / "w").c_str(), "paper", &loaded) == DMVTON_ERR_CONFIG);
  CHECK(dmvton_model_load((dir / "missing").c_str(), "tiny", &loaded) == DMVTON_ERR_DATA);
  dmvton_model_free(loaded);

  dmvton_model* teacher = nullptr;
  REQUIRE(dmvton_model_create("teacher", "tiny", 1, &teacher) == DMVTON_OK);
  CHECK(dmvton_model_tryon(teacher, person.data(), garment.data(), r1.data()) == DMVTON_ERR_UNSUPPORTED);
  dmvton_model_free(teacher);
  dmvton_model_free(m);
  dmvton_model_free(nullptr);
}

TEST_CASE("command-line tool") {
  Scratch dir;
  auto p = cli("--help");
  CHECK(p.code == 0);
  CHECK(p.out.find("train-teacher") != std::string::npos);
  CHECK(cli("infer --help").code == 0);
  CHECK(cli("").code == 2);
  CHECK(cli("no-such-command").code == 2);
  CHECK(cli("init").code == 2);  // --out is required
  CHECK(cli("init --out " + (dir / "w") + " --seed abc").code == 2);

  p = cli("make-toy --out " + (dir / "data") + " --count 2");
  REQUIRE(p.code == 0);
  CHECK(json::parse(p.out)["records"] == 2);

  // Dashed and underscored spellings name the same option.
  CHECK(cli("init --out " + (dir / "w") + " --zero-flow").code == 0);
  CHECK(cli("init --out " + (dir / "w2") + " --zero_flow").code == 0);

  p = cli("train-teacher --data " + (dir / "data") + " --out " + (dir / "t") + " --steps 1 --batch-size 1");
  CHECK(p.code == 0);
  p = cli("train-teacher --data " + (dir / "missing") + " --out " + (dir / "t"));
  CHECK(p.code == 3);
  CHECK(p.out.find("missing") != std::string::npos);

  std::ofstream(dir / "cfg.json") << json{{"out", dir / "x"}, {"kind", "student"}, {"sede", 1}}.dump();
  p = cli("init --config " + (dir / "cfg.json"));
  CHECK(p.code == 2);
  CHECK(p.out.find("sede") != std::string::npos);
  std::ofstream(dir / "ok.json") << json{{"out", dir / "x"}, {"seed", 3}}.dump();
  CHECK(cli("init --config " + (dir / "ok.json") + " --seed 4").code == 0);

  p = cli("profile --iters 0");
  CHECK(p.code == 0);
  CHECK(p.out.find("student") != std::string::npos);
}

TEST_CASE("server handle") {
  Scratch dir;
  run("make-toy", {{"out", dir / "assets"}, {"kind", "assets"}, {"count", 2}});
  run("init", {{"out", dir / "w"}});
  dmvton_server* s = nullptr;
  const std::string bad = json{{"weights", dir / "w"}, {"assets", dir / "none"}}.dump();
  CHECK(dmvton_server_create(nullptr, bad.c_str(), &s) == DMVTON_ERR_DATA);
  const std::string flags = json{{"weights", dir / "w"}, {"assets", dir / "assets"}, {"port", 0}}.dump();
  REQUIRE(dmvton_server_create(nullptr, flags.c_str(), &s) == DMVTON_OK);
  int port = -1;
  REQUIRE(dmvton_server_start(s, &port) == DMVTON_OK);
  CHECK(port > 0);
  CHECK(dmvton_server_start(s, &port) == DMVTON_ERR_STATE);
  std::thread waiter([s] { dmvton_server_wait(s); });
  httplib::Client c("127.0.0.1", port);
  const auto r = c.Post("/api/tryon", R"({"person_id":"toy0","garment_id":"toy1"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(dmvton_server_stop(s) == DMVTON_OK);
  waiter.join();
  dmvton_server_free(s);
}
