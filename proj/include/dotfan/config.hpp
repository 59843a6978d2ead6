#pragma once

// Flat `key = value` configuration text. Blank lines and lines starting
// with '#' are ignored; a key may appear once. Consumers read typed values
// and then call require_all_used() so misspelt keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace dotfan {

class KeyValues {
 public:
  // Throws ConfigError naming `source` and the line on malformed input.
  static KeyValues parse(std::string_view text, const std::string& source = "config");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, std::string value);

  // Typed reads mark the key as used; a missing key yields `fallback`.
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;

  // Throws ConfigError listing every key no reader consumed.
  void require_all_used() const;
  // Sorted by key; values keep their text form.
  std::string to_text() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool used = false;
  };
  const Entry* find(const std::string& key) const;
  std::string where(const Entry& e, const std::string& key) const;

  std::string source_ = "config";
  std::map<std::string, Entry> entries_;
};

// Shortest text that parses back to the same double.
std::string format_double(double value);

}  // namespace dotfan
