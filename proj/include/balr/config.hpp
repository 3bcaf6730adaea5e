#pragma once

// Flat "key = value" text with [section] headers. '#' and ';' start comments.
// Errors carry the 1-based line and column of the offending token.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace balr {

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
  int key_column = 0;
  int value_column = 0;
};

struct ConfigSection {
  std::string name;  // "" for entries before the first header
  int line = 0;
  std::vector<ConfigEntry> entries;
};

struct ConfigDocument {
  std::vector<ConfigSection> sections;

  const ConfigSection* find(const std::string& name) const;
};

/// Throws FormatError on malformed lines or duplicate keys within a section.
ConfigDocument parse_config_text(const std::string& text);
ConfigDocument parse_config_file(const std::string& path);

/// Typed access to one section. Every key must be consumed before finish(),
/// which throws FormatError naming the first unknown key.
class SectionReader {
 public:
  explicit SectionReader(const ConfigSection* section) : section_(section) {
    if (section_) used_.assign(section_->entries.size(), false);
  }

  void read(const std::string& key, std::int64_t& out);
  void read(const std::string& key, std::uint64_t& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::vector<std::int64_t>& out);
  template <std::size_t N>
  void read(const std::string& key, std::array<std::int64_t, N>& out) {
    std::vector<std::int64_t> v(out.begin(), out.end());
    if (const auto* e = find(key)) {
      read(key, v);
      if (v.size() != N) fail(*e, "expected " + std::to_string(N) + " comma-separated integers");
      std::copy(v.begin(), v.end(), out.begin());
    }
  }
  void finish() const;

 private:
  const ConfigEntry* find(const std::string& key);
  [[noreturn]] static void fail(const ConfigEntry& e, const std::string& what);

  const ConfigSection* section_;
  std::vector<bool> used_;
};

}  // namespace balr
