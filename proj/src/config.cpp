#include "diger/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace diger {

namespace {
std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}
}  // namespace

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected `key = value` at line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config: empty key at line " + std::to_string(lineno));
    cfg.entries_[key] = value;
  }
  return cfg;
}

void KvConfig::set(const std::string& key, const std::string& value) { entries_[key] = value; }

bool KvConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) {
  return static_cast<int>(get_i64(key, fallback));
}

long long KvConfig::get_i64(const std::string& key, long long fallback) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::runtime_error("config: key '" + key + "' expects an integer, got '" + it->second + "'");
  }
}

double KvConfig::get_double(const std::string& key, double fallback) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw std::runtime_error("config: key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<int> KvConfig::get_int_list(const std::string& key, std::vector<int> fallback) {
  consumed_[key] = true;
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<int> out;
  std::istringstream in(it->second);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    try {
      out.push_back(std::stoi(cell));
    } catch (...) {
      throw std::runtime_error("config: key '" + key + "' expects a comma-separated integer list");
    }
  }
  return out;
}

std::vector<std::string> KvConfig::unconsumed() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (!consumed_.count(k)) out.push_back(k);
  return out;
}

}  // namespace diger
