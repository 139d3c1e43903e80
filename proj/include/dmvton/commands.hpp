#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmvton/config.hpp"
#include "dmvton/serve.hpp"

// Pipeline entry points shared by the C API and the command-line tool. Each
// command declares its options; run() merges a config file and flags,
// executes the phase and returns a JSON result.
namespace dmvton::commands {

std::vector<std::string> command_names();
// kConfig for an unknown command.
const config::CommandSchema& schema(const std::string& command);

nlohmann::json run(const std::string& command, const config::RunConfig& cfg);
nlohmann::json run(const std::string& command, const std::optional<std::filesystem::path>& config_file,
                   const nlohmann::json& flags);

// Serve options from a merged "serve" configuration.
serve::ServeOptions serve_options(const config::RunConfig& cfg);

}  // namespace dmvton::commands
