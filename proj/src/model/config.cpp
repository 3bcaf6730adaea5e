#include "balr/config.hpp"

#include <array>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "balr/errors.hpp"

namespace balr {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }

std::size_t skip_space(const std::string& s, std::size_t i) {
  while (i < s.size() && is_space(s[i])) ++i;
  return i;
}

std::size_t trim_end(const std::string& s, std::size_t end) {
  while (end > 0 && is_space(s[end - 1])) --end;
  return end;
}

bool key_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' ||
         c == '.';
}

int col(std::size_t i) { return static_cast<int>(i) + 1; }

}  // namespace

const ConfigSection* ConfigDocument::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

ConfigDocument parse_config_text(const std::string& text) {
  ConfigDocument doc;
  doc.sections.push_back({"", 0, {}});
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Strip comments; values never contain '#' or ';'.
    auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    std::size_t i = skip_space(line, 0);
    const std::size_t end = trim_end(line, line.size());
    if (i >= end) continue;
    if (line[i] == '[') {
      const auto close = line.find(']', i);
      if (close == std::string::npos || close + 1 != end)
        throw FormatError("malformed section header", lineno, col(close == std::string::npos ? end : close + 1));
      const auto name_begin = skip_space(line, i + 1);
      const auto name_end = trim_end(line, close);
      if (name_begin >= name_end) throw FormatError("empty section name", lineno, col(i + 1));
      for (auto k = name_begin; k < name_end; ++k)
        if (!key_char(line[k])) throw FormatError("invalid character in section name", lineno, col(k));
      const std::string name = line.substr(name_begin, name_end - name_begin);
      if (doc.find(name)) throw FormatError("duplicate section [" + name + "]", lineno, col(name_begin));
      doc.sections.push_back({name, lineno, {}});
      continue;
    }
    const auto key_begin = i;
    while (i < end && key_char(line[i])) ++i;
    if (i == key_begin) throw FormatError("expected a key", lineno, col(i));
    const auto key_end = i;
    i = skip_space(line, i);
    if (i >= end || line[i] != '=') throw FormatError("expected '=' after key", lineno, col(i));
    const auto value_begin = skip_space(line, i + 1);
    if (value_begin >= end) throw FormatError("missing value", lineno, col(value_begin));
    ConfigEntry e{line.substr(key_begin, key_end - key_begin), line.substr(value_begin, end - value_begin), lineno,
                  col(key_begin), col(value_begin)};
    auto& section = doc.sections.back();
    for (const auto& prev : section.entries)
      if (prev.key == e.key) throw FormatError("duplicate key '" + e.key + "'", lineno, e.key_column);
    section.entries.push_back(std::move(e));
  }
  return doc;
}

ConfigDocument parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

const ConfigEntry* SectionReader::find(const std::string& key) {
  if (!section_) return nullptr;
  for (std::size_t i = 0; i < section_->entries.size(); ++i)
    if (section_->entries[i].key == key) {
      used_[i] = true;
      return &section_->entries[i];
    }
  return nullptr;
}

void SectionReader::fail(const ConfigEntry& e, const std::string& what) {
  throw FormatError("bad value for '" + e.key + "': " + what, e.line, e.value_column);
}

void SectionReader::read(const std::string& key, std::int64_t& out) {
  const auto* e = find(key);
  if (!e) return;
  errno = 0;
  char* endp = nullptr;
  const long long v = std::strtoll(e->value.c_str(), &endp, 10);
  if (errno != 0 || endp == e->value.c_str() || *endp != '\0') fail(*e, "expected an integer");
  out = v;
}

void SectionReader::read(const std::string& key, std::uint64_t& out) {
  const auto* e = find(key);
  if (!e) return;
  errno = 0;
  char* endp = nullptr;
  if (!e->value.empty() && e->value[0] == '-') fail(*e, "expected a non-negative integer");
  const unsigned long long v = std::strtoull(e->value.c_str(), &endp, 10);
  if (errno != 0 || endp == e->value.c_str() || *endp != '\0') fail(*e, "expected a non-negative integer");
  out = v;
}

void SectionReader::read(const std::string& key, double& out) {
  const auto* e = find(key);
  if (!e) return;
  errno = 0;
  char* endp = nullptr;
  const double v = std::strtod(e->value.c_str(), &endp);
  if (errno != 0 || endp == e->value.c_str() || *endp != '\0') fail(*e, "expected a number");
  out = v;
}

void SectionReader::read(const std::string& key, bool& out) {
  const auto* e = find(key);
  if (!e) return;
  if (e->value == "true" || e->value == "1" || e->value == "yes" || e->value == "on")
    out = true;
  else if (e->value == "false" || e->value == "0" || e->value == "no" || e->value == "off")
    out = false;
  else
    fail(*e, "expected true or false");
}

void SectionReader::read(const std::string& key, std::string& out) {
  if (const auto* e = find(key)) out = e->value;
}

void SectionReader::read(const std::string& key, std::vector<std::int64_t>& out) {
  const auto* e = find(key);
  if (!e) return;
  std::vector<std::int64_t> values;
  std::size_t start = 0;
  while (start <= e->value.size()) {
    auto comma = e->value.find(',', start);
    if (comma == std::string::npos) comma = e->value.size();
    const std::string item = e->value.substr(start, comma - start);
    const auto b = skip_space(item, 0), en = trim_end(item, item.size());
    if (b >= en) fail(*e, "empty list element");
    const std::string token = item.substr(b, en - b);
    errno = 0;
    char* endp = nullptr;
    const long long v = std::strtoll(token.c_str(), &endp, 10);
    if (errno != 0 || *endp != '\0') fail(*e, "expected comma-separated integers");
    values.push_back(v);
    start = comma + 1;
  }
  out = std::move(values);
}

void SectionReader::finish() const {
  if (!section_) return;
  for (std::size_t i = 0; i < used_.size(); ++i)
    if (!used_[i]) {
      const auto& e = section_->entries[i];
      const std::string where = section_->name.empty() ? "" : " in [" + section_->name + "]";
      throw FormatError("unknown key '" + e.key + "'" + where, e.line, e.key_column);
    }
}

}  // namespace balr
