#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

// Flat key-value run configuration. A command declares its options; a JSON
// config file supplies values for any of them and command-line flags
// override the file.
namespace dmvton::config {

enum class OptionType { kInt, kFloat, kBool, kString, kPath };

const char* option_type_name(OptionType t);

struct OptionSpec {
  std::string key;  // also the long flag name (--key)
  OptionType type = OptionType::kString;
  nlohmann::json default_value;  // null: no default
  bool required = false;
  std::string help;
};

struct CommandSchema {
  std::string name;
  std::string summary;
  std::vector<OptionSpec> options;

  const OptionSpec* find(const std::string& key) const;
  nlohmann::json to_json() const;
};

class RunConfig {
 public:
  RunConfig() = default;

  // Defaults, then the file (flat JSON object), then flags. Keys outside the
  // schema are rejected by name. String values are converted to the declared
  // type. Missing required keys are an error.
  static RunConfig merge(const CommandSchema& schema, const std::optional<std::filesystem::path>& file,
                         const nlohmann::json& flags);

  bool has(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_float(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::filesystem::path get_path(const std::string& key) const;
  std::optional<std::string> find_string(const std::string& key) const;
  std::optional<std::filesystem::path> find_path(const std::string& key) const;

  // Effective values after merging, for logs and reports.
  const nlohmann::json& values() const { return values_; }
  // Where each value came from: "default", "file" or "flag".
  const std::map<std::string, std::string>& sources() const { return sources_; }

 private:
  const nlohmann::json& at(const std::string& key) const;

  std::string command_;
  nlohmann::json values_ = nlohmann::json::object();
  std::map<std::string, std::string> sources_;
};

// Converts `value` to the option's type. Accepts JSON of the right kind or
// a string spelling of it. kConfig names the key on failure.
nlohmann::json coerce(const OptionSpec& spec, const nlohmann::json& value);

}  // namespace dmvton::config
