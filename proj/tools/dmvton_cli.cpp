// Command-line front end. Every subcommand's flags come from the schema the
// library publishes, so flags, config keys and docs cannot drift apart.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dmvton/dmvton.h"

using nlohmann::json;

namespace {

struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { dmvton_string_free(p); }
};

int report_failure(dmvton_status st) {
  std::cerr << "error (" << dmvton_status_name(st) << "): " << dmvton_last_error() << '\n';
  // Internal and argument errors share the generic failure code.
  return st == DMVTON_ERR_CONFIG || st == DMVTON_ERR_DATA || st == DMVTON_ERR_NUMERIC ? static_cast<int>(st) : 1;
}

struct Subcommand {
  std::string name;
  CLI::App* app = nullptr;
  json schema;
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;

  json given() const {
    json j = json::object();
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      auto f = flags.find(key);
      if (f != flags.end())
        j[key] = f->second;
      else
        j[key] = values.at(key);
    }
    return j;
  }
};

std::unique_ptr<Subcommand> add_subcommand(CLI::App& app, const std::string& name) {
  OwnedString s;
  if (const auto st = dmvton_command_schema(name.c_str(), &s.p); st != DMVTON_OK) return nullptr;
  auto sub = std::make_unique<Subcommand>();
  sub->name = name;
  sub->schema = json::parse(s.p);
  sub->app = app.add_subcommand(name, sub->schema["summary"].get<std::string>());
  sub->app->add_option("--config", sub->config_file, "flat JSON config file; flags override its values");
  for (const auto& o : sub->schema["options"]) {
    const std::string key = o["key"].get<std::string>();
    std::string names = "--" + key;
    std::string dashed = key;
    for (char& ch : dashed)
      if (ch == '_') ch = '-';
    if (dashed != key) names += ",--" + dashed;
    std::string help = o["help"].get<std::string>();
    if (!o["default"].is_null()) help += " [default: " + (o["default"].is_string() ? o["default"].get<std::string>() : o["default"].dump()) + "]";
    if (o["required"].get<bool>()) help += " (required)";
    CLI::Option* opt = nullptr;
    if (o["type"] == "bool") {
      sub->flags[key] = false;
      opt = sub->app->add_flag(names, sub->flags[key], help);
    } else {
      sub->values[key];
      opt = sub->app->add_option(names, sub->values[key], help)->type_name(o["type"].get<std::string>());
    }
    sub->options[key] = opt;
  }
  return sub;
}

int run_serve(const Subcommand& sub) {
  // Block the termination signals before any thread starts; a dedicated
  // thread waits for them and stops the server.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  dmvton_server* server = nullptr;
  const std::string flags = sub.given().dump();
  auto st = dmvton_server_create(sub.config_file.empty() ? nullptr : sub.config_file.c_str(), flags.c_str(), &server);
  if (st != DMVTON_OK) return report_failure(st);
  int port = 0;
  st = dmvton_server_start(server, &port);
  if (st != DMVTON_OK) {
    const int code = report_failure(st);
    dmvton_server_free(server);
    return code;
  }
  std::cout << "listening on port " << port << std::endl;
  std::thread stopper([&] {
    int sig = 0;
    sigwait(&set, &sig);
    dmvton_server_stop(server);
  });
  dmvton_server_wait(server);
  // Wake the signal thread if the server stopped for another reason.
  pthread_kill(stopper.native_handle(), SIGTERM);
  stopper.join();
  dmvton_server_free(server);
  return 0;
}

int run_command(const Subcommand& sub) {
  if (sub.name == "serve") return run_serve(sub);
  OwnedString result;
  const std::string flags = sub.given().dump();
  const auto st = dmvton_run_command(sub.name.c_str(), sub.config_file.empty() ? nullptr : sub.config_file.c_str(),
                                     flags.c_str(), &result.p);
  if (st != DMVTON_OK) return report_failure(st);
  json r = json::parse(result.p);
  if (r.contains("text")) {
    std::cout << r["text"].get<std::string>();
    r.erase("text");
  }
  std::cout << r.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student virtual try-on: training, inference, data enrichment, profiling and serving"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dmvton_version());

  OwnedString names;
  if (const auto st = dmvton_command_list(&names.p); st != DMVTON_OK) return report_failure(st);
  std::vector<std::unique_ptr<Subcommand>> subs;
  for (const auto& n : json::parse(names.p)) {
    auto sub = add_subcommand(app, n.get<std::string>());
    if (!sub) return report_failure(DMVTON_ERR_INTERNAL);
    subs.push_back(std::move(sub));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    // Usage errors are configuration errors; --help and --version exit 0.
    return rc == 0 ? 0 : static_cast<int>(DMVTON_ERR_CONFIG);
  }
  for (const auto& sub : subs)
    if (sub->app->parsed()) return run_command(*sub);
  return static_cast<int>(DMVTON_ERR_CONFIG);
}
