#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace capsdefl {

// Line-oriented `key = value` text with `[section]` headers and `#` comments.
// Readers must consume every key they accept; check_all_consumed() then
// reports any leftover (misspelled or unsupported) key as a ConfigError.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValueConfig load(const std::string& path);

  bool has_section(const std::string& section) const;
  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  std::string require_string(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  const std::vector<double>& fallback) const;
  std::vector<long long> get_ints(const std::string& section, const std::string& key,
                                  const std::vector<long long>& fallback) const;

  // Throws ConfigError naming the first key nobody read.
  void check_all_consumed() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  const Entry* find(const std::string& section, const std::string& key) const;

  std::string origin_;
  std::map<std::string, std::map<std::string, Entry>> sections_;
  mutable std::set<std::pair<std::string, std::string>> consumed_;
};

// Writer matching the parser's syntax; keeps insertion order.
class KeyValueWriter {
 public:
  void section(const std::string& name);
  void put(const std::string& key, const std::string& value);
  void put(const std::string& key, double value);
  void put(const std::string& key, long long value);
  void put(const std::string& key, std::size_t value) { put(key, static_cast<long long>(value)); }
  void put(const std::string& key, int value) { put(key, static_cast<long long>(value)); }
  void put(const std::string& key, const std::vector<std::size_t>& values);
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace capsdefl
