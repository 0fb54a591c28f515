// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` documents. '#' starts a comment; blank lines are
// ignored. Errors carry the 1-based line number.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dgod {

struct KeyValue {
  std::string value;
  int line = 0;
};
using KeyValues = std::map<std::string, KeyValue>;

/// `what` prefixes error messages ("train config line 3: ...").
KeyValues parse_key_values(const std::string& text, const std::string& what);
std::string read_text_file(const std::string& path);

int parse_int(const std::string& value, const std::string& key, int line);
std::uint64_t parse_u64(const std::string& value, const std::string& key, int line);
double parse_double(const std::string& value, const std::string& key, int line);
/// Comma-separated, whitespace-trimmed, empty items dropped.
std::vector<std::string> split_list(const std::string& value);
std::string trim(const std::string& s);

/// Rewrites `text` so each key in `overrides` takes the given value: existing
/// lines are replaced in place (line numbers stay stable), new keys appended.
std::string apply_overrides(const std::string& text, const std::map<std::string, std::string>& overrides);
/// Renders a map as `key = value` lines.
std::string render_key_values(const std::map<std::string, std::string>& kv);

}  // namespace dgod
