#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>

namespace partforge {

using KeyValues = std::map<std::string, std::string>;

inline constexpr const char* kEnvPrefix = "PARTFORGE_";

// "key = value" lines; '#' starts a comment; blank lines ignored.
KeyValues parse_key_values(std::string_view text, const std::string& source = "<config>");
KeyValues read_key_values(const std::filesystem::path& path);

// For each known key, reads PARTFORGE_<KEY> (upper-cased, '.' -> '_').
KeyValues env_overrides(std::span<const std::string> known_keys);
std::string env_name_for(const std::string& key);

// flags > env > file
KeyValues merge_config(const KeyValues& file, const KeyValues& env, const KeyValues& flags);

// Typed accessors that name the key on parse failure.
bool parse_bool(const std::string& key, const std::string& value);
std::int64_t parse_int(const std::string& key, const std::string& value);
std::uint64_t parse_uint(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);

}  // namespace partforge
