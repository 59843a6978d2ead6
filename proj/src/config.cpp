#include "dotfan/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <vector>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"

namespace dotfan {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
bool parse_number(const std::string& text, T& out) {
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream is{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string content = trim(line);
    if (content.empty() || content.front() == '#') continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(content).substr(0, eq));
    const std::string value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    if (!kv.entries_.emplace(key, Entry{value, line_no}).second) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  return parse(text, path.string());
}

void KeyValues::set(const std::string& key, std::string value) {
  entries_[key] = Entry{std::move(value), 0};
}

const KeyValues::Entry* KeyValues::find(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  it->second.used = true;
  return &it->second;
}

std::string KeyValues::where(const Entry& e, const std::string& key) const {
  return source_ + (e.line > 0 ? ":" + std::to_string(e.line) : std::string()) + ": key '" + key + "'";
}

int KeyValues::get_int(const std::string& key, int fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  int v = 0;
  if (!parse_number(e->value, v)) throw ConfigError(where(*e, key) + " expects an integer");
  return v;
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  if (!parse_number(e->value, v)) throw ConfigError(where(*e, key) + " expects an unsigned integer");
  return v;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  double v = 0.0;
  if (!parse_number(e->value, v) || !std::isfinite(v)) {
    throw ConfigError(where(*e, key) + " expects a finite number");
  }
  return v;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  throw ConfigError(where(*e, key) + " expects true or false");
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

void KeyValues::require_all_used() const {
  std::string unknown;
  for (const auto& [key, e] : entries_) {
    if (!e.used) unknown += (unknown.empty() ? "" : ", ") + key;
  }
  if (!unknown.empty()) throw ConfigError(source_ + ": unknown keys: " + unknown);
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [key, e] : entries_) out += key + " = " + e.value + "\n";
  return out;
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

}  // namespace dotfan
