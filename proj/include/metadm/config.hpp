#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace metadm {

// INI-style config: "[section]" headers, "key = value" lines, '#' comments.
// Serialization is canonical (sections and keys sorted), so
// parse(serialize(c)) == c and serialize(parse(s)) is a fixpoint.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);
  std::string serialize() const;
  void save(const std::string& path) const;

  bool has(const std::string& section, const std::string& key) const;
  // Dotted form "section.key". Throws ConfigError on a malformed path.
  void set(const std::string& dotted_key, const std::string& value);
  void set(const std::string& section, const std::string& key, const std::string& value);

  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  double get_f64(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const;

  // Required variants throw ConfigError when the key is absent.
  std::string require_str(const std::string& section, const std::string& key) const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

  bool operator==(const Config& other) const { return sections_ == other.sections_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// Canonical float formatting used everywhere a value lands in a config, CSV
// or JSON file: shortest representation that round-trips (printf %.9g for
// f32-derived values, %.17g for f64).
std::string format_f64(double v);
std::string format_f32(float v);

}  // namespace metadm
