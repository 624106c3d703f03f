#pragma once

#include <map>
#include <string>
#include <vector>

namespace diger {

// Flat key/value config file: one `key = value` per line, `#` comments,
// blank lines ignored. Typed getters consume keys; unknown leftovers are
// reported so typos fail loudly.
class KvConfig {
 public:
  KvConfig() = default;
  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_text(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key, int fallback);
  long long get_i64(const std::string& key, long long fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);

  // Keys never read by any getter; call after all getters ran.
  std::vector<std::string> unconsumed() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
  std::map<std::string, bool> consumed_;
};

}  // namespace diger
