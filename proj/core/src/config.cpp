// SPDX-License-Identifier: Apache-2.0

#include "dgod/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dgod/types.hpp"

namespace dgod {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

KeyValues parse_key_values(const std::string& text, const std::string& what) {
  KeyValues out;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const auto where = what + " line " + std::to_string(line);
    if (eq == std::string::npos) throw ValidationError(where + ": expected 'key = value', got '" + body + "'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ValidationError(where + ": empty key");
    if (value.empty()) throw ValidationError(where + ": empty value for '" + key + "'");
    if (const auto it = out.find(key); it != out.end()) {
      throw ValidationError(where + ": duplicate key '" + key + "' (first on line " +
                            std::to_string(it->second.line) + ")");
    }
    out.emplace(key, KeyValue{value, line});
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

template <typename T>
T parse_number(const std::string& value, const std::string& key, int line, const char* kind) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ValidationError("line " + std::to_string(line) + ": '" + key + "' expects " + kind + ", got '" + value +
                          "'");
  }
  return out;
}

}  // namespace

int parse_int(const std::string& value, const std::string& key, int line) {
  return parse_number<int>(value, key, line, "an integer");
}

std::uint64_t parse_u64(const std::string& value, const std::string& key, int line) {
  return parse_number<std::uint64_t>(value, key, line, "a non-negative integer");
}

double parse_double(const std::string& value, const std::string& key, int line) {
  return parse_number<double>(value, key, line, "a number");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string apply_overrides(const std::string& text, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> pending = overrides;
  std::istringstream in(text);
  std::ostringstream out;
  std::string raw;
  while (std::getline(in, raw)) {
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      const auto it = pending.find(trim(body.substr(0, eq)));
      if (it != pending.end()) {
        out << it->first << " = " << it->second << "\n";
        pending.erase(it);
        continue;
      }
    }
    out << raw << "\n";
  }
  for (const auto& [k, v] : pending) out << k << " = " << v << "\n";
  return out.str();
}

std::string render_key_values(const std::map<std::string, std::string>& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

}  // namespace dgod
