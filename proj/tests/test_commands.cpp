#include <fstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dmvton/commands.hpp"
#include "dmvton/config.hpp"
#include "dmvton/errors.hpp"
#include "dmvton/weights.hpp"
#include "test_util.hpp"

using namespace dmvton;
using namespace dmvton::config;
using nlohmann::json;
using testutil::TempDir;

namespace {

CommandSchema demo_schema() {
  return {"demo",
          "demo command",
          {{"steps", OptionType::kInt, 10, false, "steps"},
           {"lr", OptionType::kFloat, 0.5, false, "rate"},
           {"fast", OptionType::kBool, false, false, "flag"},
           {"name", OptionType::kString, "x", false, "name"},
           {"data", OptionType::kPath, nullptr, true, "data dir"},
           {"extra", OptionType::kString, nullptr, false, "optional"}}};
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return Errc::kInternal;
}

void write_json(const std::filesystem::path& p, const json& j) { std::ofstream(p) << j.dump(); }

NamedTensors load(const std::filesystem::path& p) { return WeightArchive::load(p).unpack(); }

}  // namespace

TEST_CASE("config merge: defaults, then file, then flags") {
  TempDir dir("cfg");
  const CommandSchema s = demo_schema();
  write_json(dir / "c.json", {{"steps", 20}, {"lr", "0.25"}, {"data", "/d"}});
  const RunConfig rc = RunConfig::merge(s, dir / "c.json", {{"steps", "30"}, {"fast", true}});
  CHECK(rc.get_int("steps") == 30);
  CHECK(rc.get_float("lr") == 0.25);
  CHECK(rc.get_bool("fast"));
  CHECK(rc.get_string("name") == "x");
  CHECK(rc.get_path("data") == "/d");
  CHECK_FALSE(rc.has("extra"));
  CHECK_FALSE(rc.find_string("extra"));
  CHECK(rc.sources().at("steps") == "flag");
  CHECK(rc.sources().at("lr") == "file");
  CHECK(rc.sources().at("name") == "default");
  CHECK(rc.values()["steps"] == 30);
}

TEST_CASE("config errors name the key") {
  TempDir dir("cfg");
  const CommandSchema s = demo_schema();
  try {
    RunConfig::merge(s, std::nullopt, {{"data", "/d"}, {"stepz", 3}});
    FAIL("expected kConfig");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kConfig);
    CHECK(std::string(e.what()).find("stepz") != std::string::npos);
  }
  try {
    RunConfig::merge(s, std::nullopt, {});
    FAIL("expected kConfig");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("data") != std::string::npos);
  }
  CHECK(code_of([&] { RunConfig::merge(s, std::nullopt, {{"data", "/d"}, {"steps", "ten"}}); }) == Errc::kConfig);
  CHECK(code_of([&] { RunConfig::merge(s, std::nullopt, {{"data", "/d"}, {"steps", 1.5}}); }) == Errc::kConfig);
  CHECK(code_of([&] { RunConfig::merge(s, std::nullopt, {{"data", "/d"}, {"fast", "maybe"}}); }) == Errc::kConfig);
  write_json(dir / "arr.json", json::array({1, 2}));
  CHECK(code_of([&] { RunConfig::merge(s, dir / "arr.json", {{"data", "/d"}}); }) == Errc::kConfig);
  std::ofstream(dir / "bad.json") << "{ nope";
  CHECK(code_of([&] { RunConfig::merge(s, dir / "bad.json", {{"data", "/d"}}); }) == Errc::kConfig);
  CHECK(code_of([&] { RunConfig::merge(s, dir / "missing.json", {{"data", "/d"}}); }) == Errc::kConfig);
}

TEST_CASE("coercion") {
  const OptionSpec i{"n", OptionType::kInt, nullptr, false, ""};
  CHECK(coerce(i, "42") == 42);
  CHECK(coerce(i, 7) == 7);
  CHECK(coerce(i, 3.0) == 3);
  const OptionSpec f{"x", OptionType::kFloat, nullptr, false, ""};
  CHECK(coerce(f, "1e-4") == 1e-4);
  CHECK(coerce(f, 2) == 2.0);
  const OptionSpec b{"b", OptionType::kBool, nullptr, false, ""};
  CHECK(coerce(b, "true") == true);
  CHECK(coerce(b, "0") == false);
  const OptionSpec p{"p", OptionType::kPath, nullptr, false, ""};
  CHECK(coerce(p, "a/b") == "a/b");
  CHECK_THROWS_AS(coerce(p, 3), Error);
}

TEST_CASE("every command publishes a schema") {
  const auto names = commands::command_names();
  for (const char* n : {"make-toy", "init", "train-teacher", "train-student", "infer", "enrich", "profile", "eval",
                        "cluster-report", "serve"})
    CHECK(std::find(names.begin(), names.end(), n) != names.end());
  for (const auto& n : names) {
    const json j = commands::schema(n).to_json();
    CHECK(j["name"] == n);
    CHECK(j["options"].is_array());
  }
  CHECK(commands::schema("cluster-report").find("k")->required);
  CHECK_THROWS_AS(commands::schema("bogus"), Error);
}

TEST_CASE("pipeline commands end to end") {
  TempDir dir("cmd");
  const std::string d = dir.path().string();
  const json toy = commands::run("make-toy", std::nullopt, {{"out", d + "/data"}, {"count", 4}});
  CHECK(toy["records"] == 4);

  SUBCASE("teacher training writes one log row per step; seeds fix the result") {
    const json r = commands::run("train-teacher", std::nullopt,
                                 {{"data", d + "/data"}, {"out", d + "/t1"}, {"steps", 5}, {"batch_size", 2}});
    CHECK(r["rows"] == 5);
    std::ifstream log(dir / "t1/teacher/log.jsonl");
    int rows = 0;
    for (std::string line; std::getline(log, line);) rows += !line.empty();
    CHECK(rows == 5);
    CHECK(std::filesystem::exists(dir / "t1/teacher/report.json"));
    commands::run("train-teacher", std::nullopt,
                  {{"data", d + "/data"}, {"out", d + "/t2"}, {"steps", 5}, {"batch_size", 2}});
    const auto a = load(dir / "t1/teacher/final/weights"), b = load(dir / "t2/teacher/final/weights");
    REQUIRE(a.size() == b.size());
    for (const auto& [name, t] : a)
      for (int64_t i = 0; i < t.numel(); ++i) REQUIRE(t[i] == b.at(name)[i]);

    const json s = commands::run("train-student", std::nullopt,
                                 {{"data", d + "/data"},
                                  {"teacher", d + "/t1/teacher/final/weights"},
                                  {"out", d + "/s"},
                                  {"steps", 2},
                                  {"batch_size", 2}});
    CHECK(s["rows"] == 2);
    CHECK(std::filesystem::exists(dir / "s/student/final/weights"));
  }

  SUBCASE("init and infer") {
    commands::run("init", std::nullopt, {{"out", d + "/w"}, {"kind", "student"}, {"zero_flow", true}});
    const json r = commands::run("infer", std::nullopt,
                                 {{"person", d + "/data/person/toy0.png"},
                                  {"garment", d + "/data/garment/toy1.png"},
                                  {"weights", d + "/w"},
                                  {"out", d + "/out.png"}});
    CHECK(r["height"] == 64);
    CHECK(r["width"] == 48);
    CHECK(std::filesystem::exists(dir / "out.png"));
    try {
      commands::run("infer", std::nullopt,
                    {{"person", d + "/data/person/toy0.png"},
                     {"garment", d + "/data/garment/toy1.png"},
                     {"weights", d + "/w"},
                     {"out", d + "/no/such/dir/out.png"}});
      FAIL("expected kData");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::kData);
      CHECK(std::string(e.what()).find("no/such/dir") != std::string::npos);
    }
    CHECK(code_of([&] {
            commands::run("infer", std::nullopt,
                          {{"person", d + "/data/person/toy0.png"},
                           {"garment", d + "/data/garment/toy1.png"},
                           {"weights", d + "/w"},
                           {"preset", "paper"},
                           {"out", d + "/x.png"}});
          }) == Errc::kConfig);
  }

  SUBCASE("profile, eval and cluster-report") {
    const json p = commands::run("profile", std::nullopt, {{"iters", 0}});
    REQUIRE(p["rows"].size() == 2);
    CHECK(p["rows"][0]["name"] == "student");
    CHECK(p["rows"][0]["flops_ratio"].get<double>() < 1.0);
    CHECK(p["rows"][1]["flops_ratio"] == 1.0);
    CHECK(p["rows"][0]["latency_ms"].is_null());
    CHECK(p["text"].get<std::string>().find("teacher") != std::string::npos);

    const json e = commands::run("eval", std::nullopt, {{"real", d + "/data/person"}, {"fake", d + "/data/person"}});
    CHECK(std::abs(e["fid"].get<double>()) <= 1e-6);
    CHECK(e["lpips"] == 0.0);

    commands::run("make-toy", std::nullopt, {{"out", d + "/poses"}, {"kind", "poses"}, {"count", 6}});
    const json c = commands::run("cluster-report", std::nullopt, {{"poses", d + "/poses"}, {"k", 2}});
    std::vector<int64_t> sizes{c["clusters"][0]["size"], c["clusters"][1]["size"]};
    CHECK(sizes == std::vector<int64_t>{6, 6});
    CHECK(code_of([&] { commands::run("cluster-report", std::nullopt, {{"poses", d + "/poses"}}); }) ==
          Errc::kConfig);
  }

  SUBCASE("data errors") {
    CHECK(code_of([&] { commands::run("train-teacher", std::nullopt, {{"data", d + "/missing"}, {"out", d + "/o"}}); }) ==
          Errc::kData);
    CHECK(code_of([&] { commands::run("make-toy", std::nullopt, {{"out", d + "/z"}, {"kind", "movies"}}); }) ==
          Errc::kConfig);
    CHECK(code_of([&] { commands::run("serve", std::nullopt, {{"weights", "w"}, {"assets", "a"}}); }) ==
          Errc::kConfig);
  }
}
