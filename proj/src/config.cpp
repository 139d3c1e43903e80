#include "dmvton/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "dmvton/errors.hpp"

namespace dmvton::config {

using nlohmann::json;

const char* option_type_name(OptionType t) {
  switch (t) {
    case OptionType::kInt: return "int";
    case OptionType::kFloat: return "float";
    case OptionType::kBool: return "bool";
    case OptionType::kString: return "string";
    case OptionType::kPath: return "path";
  }
  return "unknown";
}

const OptionSpec* CommandSchema::find(const std::string& key) const {
  for (const auto& o : options)
    if (o.key == key) return &o;
  return nullptr;
}

json CommandSchema::to_json() const {
  json opts = json::array();
  for (const auto& o : options)
    opts.push_back({{"key", o.key},
                    {"type", option_type_name(o.type)},
                    {"default", o.default_value},
                    {"required", o.required},
                    {"help", o.help}});
  return {{"name", name}, {"summary", summary}, {"options", opts}};
}

namespace {

[[noreturn]] void bad_value(const OptionSpec& spec, const json& value) {
  fail(Errc::kConfig, "option '" + spec.key + "' expects " + option_type_name(spec.type) + ", got " + value.dump());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

json coerce(const OptionSpec& spec, const json& value) {
  switch (spec.type) {
    case OptionType::kInt: {
      if (value.is_number_integer()) return value.get<int64_t>();
      if (value.is_number_float()) {
        const double d = value.get<double>();
        if (std::isfinite(d) && d == std::floor(d)) return static_cast<int64_t>(d);
        bad_value(spec, value);
      }
      if (value.is_string()) {
        const std::string s = trim(value.get<std::string>());
        int64_t v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty()) return v;
      }
      bad_value(spec, value);
    }
    case OptionType::kFloat: {
      if (value.is_number()) return value.get<double>();
      if (value.is_string()) {
        const std::string s = trim(value.get<std::string>());
        double v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty() && std::isfinite(v)) return v;
      }
      bad_value(spec, value);
    }
    case OptionType::kBool: {
      if (value.is_boolean()) return value;
      if (value.is_string()) {
        const std::string s = trim(value.get<std::string>());
        if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
        if (s == "false" || s == "0" || s == "no" || s == "off") return false;
      }
      bad_value(spec, value);
    }
    case OptionType::kString:
    case OptionType::kPath:
      if (value.is_string()) return value;
      bad_value(spec, value);
  }
  bad_value(spec, value);
}

RunConfig RunConfig::merge(const CommandSchema& schema, const std::optional<std::filesystem::path>& file,
                           const json& flags) {
  RunConfig rc;
  rc.command_ = schema.name;
  for (const auto& o : schema.options)
    if (!o.default_value.is_null()) {
      rc.values_[o.key] = coerce(o, o.default_value);
      rc.sources_[o.key] = "default";
    }

  auto apply = [&](const json& layer, const std::string& source, const std::string& where) {
    if (layer.is_null()) return;
    if (!layer.is_object()) fail(Errc::kConfig, where + " must be a flat JSON object");
    for (const auto& [key, value] : layer.items()) {
      const OptionSpec* spec = schema.find(key);
      if (!spec) fail(Errc::kConfig, where + ": unknown key '" + key + "' for command " + schema.name);
      if (value.is_object() || value.is_array())
        fail(Errc::kConfig, where + ": key '" + key + "' must hold a scalar value");
      if (value.is_null()) continue;
      rc.values_[key] = coerce(*spec, value);
      rc.sources_[key] = source;
    }
  };

  if (file) {
    std::ifstream in(*file);
    if (!in) fail(Errc::kConfig, "cannot open config file " + file->string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      fail(Errc::kConfig, "config file " + file->string() + " is not valid JSON: " + e.what());
    }
    apply(j, "file", "config file " + file->string());
  }
  apply(flags, "flag", "flags");

  for (const auto& o : schema.options)
    if (o.required && !rc.values_.contains(o.key))
      fail(Errc::kConfig, "command " + schema.name + " requires --" + o.key);
  return rc;
}

bool RunConfig::has(const std::string& key) const { return values_.contains(key); }

const json& RunConfig::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(Errc::kConfig, "command " + command_ + ": option '" + key + "' is not set");
  return *it;
}

int64_t RunConfig::get_int(const std::string& key) const { return at(key).get<int64_t>(); }
double RunConfig::get_float(const std::string& key) const { return at(key).get<double>(); }
bool RunConfig::get_bool(const std::string& key) const { return at(key).get<bool>(); }
std::string RunConfig::get_string(const std::string& key) const { return at(key).get<std::string>(); }
std::filesystem::path RunConfig::get_path(const std::string& key) const { return at(key).get<std::string>(); }

std::optional<std::string> RunConfig::find_string(const std::string& key) const {
  if (!has(key)) return std::nullopt;
  return get_string(key);
}

std::optional<std::filesystem::path> RunConfig::find_path(const std::string& key) const {
  if (!has(key)) return std::nullopt;
  return get_path(key);
}

}  // namespace dmvton::config
