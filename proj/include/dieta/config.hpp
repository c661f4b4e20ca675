#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dieta/common.hpp"

namespace dieta {

// Flat UTF-8 key=value lines; '#' starts a comment; blank lines ignored.
inline std::map<std::string, std::string> parse_kv_file(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    line = trim_trailing_newline(line);
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string stripped = trim_ws(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected key=value");
    out[trim_ws(stripped.substr(0, eq))] = trim_ws(stripped.substr(eq + 1));
  }
  return out;
}

// Layered run configuration: flags override the config file, the file
// overrides built-in defaults. The resolved view is logged by every command.
class RunConfig {
 public:
  static RunConfig resolve(std::map<std::string, std::string> defaults,
                           const std::map<std::string, std::string>& file_kv,
                           const std::map<std::string, std::string>& flag_kv) {
    RunConfig rc;
    rc.values_ = std::move(defaults);
    for (const auto& [k, v] : file_kv) rc.values_[k] = v;
    for (const auto& [k, v] : flag_kv) rc.values_[k] = v;
    return rc;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key " + key);
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fb) const {
    auto it = values_.find(key);
    return it == values_.end() ? fb : it->second;
  }

  uint64_t get_u64(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not an integer: " +
                        get(key));
    }
  }

  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not a number: " + get(key));
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("config key " + key + " is not a boolean: " + v);
  }

  std::vector<std::string> resolved_lines() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k + "=" + v);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dieta
