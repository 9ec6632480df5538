#include "capsdefl/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "capsdefl/error.hpp"

namespace capsdefl {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      cfg.sections_[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected `key = value`");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    auto& sec = cfg.sections_[section];
    if (sec.count(key)) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key `" + key + "`");
    }
    sec[key] = Entry{trim(line.substr(eq + 1)), line_no};
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

bool KeyValueConfig::has_section(const std::string& section) const {
  return sections_.count(section) > 0;
}

bool KeyValueConfig::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

const KeyValueConfig::Entry* KeyValueConfig::find(const std::string& section,
                                                  const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  consumed_.insert({section, key});
  return &k->second;
}

std::string KeyValueConfig::get_string(const std::string& section, const std::string& key,
                                       const std::string& fallback) const {
  const Entry* e = find(section, key);
  return e ? e->value : fallback;
}

std::string KeyValueConfig::require_string(const std::string& section,
                                           const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) throw ConfigError(origin_ + ": missing key `" + key + "` in [" + section + "]");
  return e->value;
}

double KeyValueConfig::get_double(const std::string& section, const std::string& key,
                                  double fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(e->value, &pos);
    if (pos != e->value.size()) throw std::invalid_argument(e->value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": `" + key +
                      "` expects a number, got `" + e->value + "`");
  }
}

long long KeyValueConfig::get_int(const std::string& section, const std::string& key,
                                  long long fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  long long v = 0;
  const auto* end = e->value.data() + e->value.size();
  auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": `" + key +
                      "` expects an integer, got `" + e->value + "`");
  }
  return v;
}

bool KeyValueConfig::get_bool(const std::string& section, const std::string& key,
                              bool fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": `" + key +
                    "` expects true/false, got `" + e->value + "`");
}

std::vector<double> KeyValueConfig::get_doubles(const std::string& section, const std::string& key,
                                                const std::vector<double>& fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(e->value)) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": bad number `" + item + "`");
    }
  }
  return out;
}

std::vector<long long> KeyValueConfig::get_ints(const std::string& section, const std::string& key,
                                                const std::vector<long long>& fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  std::vector<long long> out;
  for (const auto& item : split_list(e->value)) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError(origin_ + ":" + std::to_string(e->line) + ": bad integer `" + item + "`");
    }
    out.push_back(v);
  }
  return out;
}

void KeyValueConfig::check_all_consumed() const {
  for (const auto& [section, keys] : sections_) {
    for (const auto& [key, entry] : keys) {
      if (!consumed_.count({section, key})) {
        throw ConfigError(origin_ + ":" + std::to_string(entry.line) + ": unknown key `" + key +
                          "` in [" + section + "]");
      }
    }
  }
}

void KeyValueWriter::section(const std::string& name) {
  if (!text_.empty()) text_ += '\n';
  text_ += "[" + name + "]\n";
}

void KeyValueWriter::put(const std::string& key, const std::string& value) {
  text_ += key + " = " + value + "\n";
}

void KeyValueWriter::put(const std::string& key, double value) { put(key, format_double(value)); }

void KeyValueWriter::put(const std::string& key, long long value) {
  put(key, std::to_string(value));
}

void KeyValueWriter::put(const std::string& key, const std::vector<std::size_t>& values) {
  std::string joined;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) joined += ", ";
    joined += std::to_string(values[i]);
  }
  put(key, joined);
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace capsdefl
