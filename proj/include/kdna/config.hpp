/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Plain-text configuration: "[section]" headers followed by "key = value"
// lines. Sections may repeat ([stage] does); order is preserved. '#' and
// ';' start comments.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kdna/error.hpp"

namespace kdna {

struct IniSection {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }

  std::string get(std::string_view key, std::string_view fallback) const {
    const std::string* v = find(key);
    return v ? *v : std::string(fallback);
  }

  std::string require(std::string_view key) const {
    const std::string* v = find(key);
    if (!v) throw ConfigError("[" + name + "] is missing key '" + std::string(key) + "'");
    return *v;
  }

  template <typename N>
  N number(std::string_view key, N fallback) const {
    const std::string* v = find(key);
    return v ? parse_number<N>(*v, key) : fallback;
  }

  template <typename N>
  N require_number(std::string_view key) const {
    return parse_number<N>(require(key), key);
  }

  void set(std::string key, std::string value) { entries.emplace_back(std::move(key), std::move(value)); }

 private:
  template <typename N>
  N parse_number(const std::string& text, std::string_view key) const {
    N out{};
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last)
      throw ConfigError("[" + name + "] " + std::string(key) + " = '" + text + "' is not a valid number");
    return out;
  }
};

struct IniDocument {
  std::vector<IniSection> sections;

  const IniSection* first(std::string_view name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }

  std::vector<const IniSection*> all(std::string_view name) const {
    std::vector<const IniSection*> out;
    for (const auto& s : sections)
      if (s.name == name) out.push_back(&s);
    return out;
  }
};

namespace detail {
inline std::string_view trim(std::string_view s) {
  const auto space = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return s;
}
}  // namespace detail

inline IniDocument parse_ini(std::string_view text) {
  IniDocument doc;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (const auto c = line.find_first_of("#;"); c != std::string_view::npos) line = line.substr(0, c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      doc.sections.push_back({std::string(detail::trim(line.substr(1, line.size() - 2))), {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    if (doc.sections.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": key outside of any section");
    std::string key(detail::trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    doc.sections.back().set(std::move(key), std::string(detail::trim(line.substr(eq + 1))));
  }
  return doc;
}

inline std::string to_ini(const IniDocument& doc) {
  std::ostringstream out;
  for (std::size_t i = 0; i < doc.sections.size(); ++i) {
    if (i) out << '\n';
    out << '[' << doc.sections[i].name << "]\n";
    for (const auto& [k, v] : doc.sections[i].entries) out << k << " = " << v << '\n';
  }
  return out.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a; stable across platforms, used for config fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace kdna
