#pragma once

#include <string>
#include <vector>

namespace natstream {

// Flat configuration: dotted keys mapped to string values, one `key=value`
// per line. `#` starts a comment; blank lines are ignored. Insertion order is
// preserved so serialization is deterministic.
class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, long long value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);

  bool has(const std::string& key) const;
  // Required lookups throw std::runtime_error naming the key when it is
  // missing or fails to parse as the requested type.
  const std::string& get_string(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;  // accepts true/false/1/0
  // Defaulted lookups fall back when the key is absent but still throw on a
  // malformed present value.
  std::string get_string_or(const std::string& key, const std::string& fallback) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::vector<std::string> keys() const;

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Parses `key=value` lines; throws on lines without `=`, empty keys, or
// duplicate keys, naming the offending line.
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);
std::string config_to_text(const ConfigMap& config);

}  // namespace natstream
