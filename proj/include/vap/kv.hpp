#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace vap {

/// Flat `key=value` configuration, as stored in config sidecars, spec files
/// and run echoes. Keys are kept sorted so output is deterministic.
using KeyValues = std::map<std::string, std::string>;

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// ignored; whitespace around keys and values is trimmed. Throws ConfigError
/// on a line without `=`.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<memory>");
std::string format_key_values(const KeyValues& kv);
KeyValues read_key_values(const std::filesystem::path& path);
void write_key_values(const std::filesystem::path& path, const KeyValues& kv);

/// Lookups with a fallback for missing keys; malformed values raise ConfigError.
int kv_int(const KeyValues& kv, const std::string& key, int fallback);
std::uint64_t kv_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback);
double kv_double(const KeyValues& kv, const std::string& key, double fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

/// Shortest decimal text that reads back to exactly `v`.
std::string format_exact(double v);

/// Sub-map of the entries whose key starts with `prefix`, with the prefix removed.
KeyValues kv_section(const KeyValues& kv, const std::string& prefix);

}  // namespace vap
