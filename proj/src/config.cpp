#include "natstream/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace natstream {

namespace {

std::string trim(const std::string& s) {
  size_t begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  size_t end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

[[noreturn]] void key_error(const std::string& key, const std::string& what) {
  throw std::runtime_error("config key '" + key + "' " + what);
}

}  // namespace

void ConfigMap::set(const std::string& key, const std::string& value) {
  for (auto& entry : entries_) {
    if (entry.first == key) {
      entry.second = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

void ConfigMap::set_int(const std::string& key, long long value) {
  set(key, std::to_string(value));
}

void ConfigMap::set_double(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  set(key, os.str());
}

void ConfigMap::set_bool(const std::string& key, bool value) {
  set(key, value ? "true" : "false");
}

const std::string* ConfigMap::find(const std::string& key) const {
  for (const auto& entry : entries_) {
    if (entry.first == key) return &entry.second;
  }
  return nullptr;
}

bool ConfigMap::has(const std::string& key) const { return find(key) != nullptr; }

const std::string& ConfigMap::get_string(const std::string& key) const {
  const std::string* v = find(key);
  if (v == nullptr) key_error(key, "is missing");
  return *v;
}

long long ConfigMap::get_int(const std::string& key) const {
  const std::string& v = get_string(key);
  errno = 0;
  char* end = nullptr;
  long long out = std::strtoll(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0') {
    key_error(key, "has value '" + v + "', expected an integer");
  }
  return out;
}

double ConfigMap::get_double(const std::string& key) const {
  const std::string& v = get_string(key);
  errno = 0;
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0') {
    key_error(key, "has value '" + v + "', expected a number");
  }
  return out;
}

bool ConfigMap::get_bool(const std::string& key) const {
  const std::string& v = get_string(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  key_error(key, "has value '" + v + "', expected true/false/1/0");
}

std::string ConfigMap::get_string_or(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

long long ConfigMap::get_int_or(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double ConfigMap::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool ConfigMap::get_bool_or(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<std::string> ConfigMap::keys() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& entry : entries_) out.push_back(entry.first);
  return out;
}

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap config;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) + " has no '=': " +
                               stripped);
    }
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error("config line " + std::to_string(line_no) + " has an empty key");
    }
    if (config.has(key)) {
      throw std::runtime_error("config line " + std::to_string(line_no) + " repeats key '" + key +
                               "'");
    }
    config.set(key, value);
  }
  return config;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

std::string config_to_text(const ConfigMap& config) {
  std::string out;
  for (const auto& entry : config.entries()) {
    out += entry.first;
    out += '=';
    out += entry.second;
    out += '\n';
  }
  return out;
}

}  // namespace natstream
