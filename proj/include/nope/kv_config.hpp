#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace nope {

using KeyValues = std::map<std::string, std::string>;

/// Parses `key=value` lines. Blank lines and lines starting with '#' are
/// skipped; whitespace around keys and values is trimmed.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

int get_int(const KeyValues& kv, const std::string& key, int fallback);
double get_double(const KeyValues& kv, const std::string& key, double fallback);
std::string get_string(const KeyValues& kv, const std::string& key, const std::string& fallback);
bool get_bool(const KeyValues& kv, const std::string& key, bool fallback);

}  // namespace nope
