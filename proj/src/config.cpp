#include "partforge/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace partforge {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

template <class T>
T parse_number(const std::string& key, const std::string& value, const char* what) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || value.empty()) {
    throw std::invalid_argument("config key '" + key + "': expected " + what + ", got '" + value + "'");
  }
  return out;
}

}  // namespace

KeyValues parse_key_values(std::string_view text, const std::string& source) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": empty key");
    if (kv.count(key)) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

std::string env_name_for(const std::string& key) {
  std::string name = kEnvPrefix;
  for (char c : key) {
    name.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return name;
}

KeyValues env_overrides(std::span<const std::string> known_keys) {
  KeyValues kv;
  for (const auto& key : known_keys) {
    if (const char* v = std::getenv(env_name_for(key).c_str())) kv[key] = v;
  }
  return kv;
}

KeyValues merge_config(const KeyValues& file, const KeyValues& env, const KeyValues& flags) {
  KeyValues out = file;
  for (const auto& [k, v] : env) out[k] = v;
  for (const auto& [k, v] : flags) out[k] = v;
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + value + "'");
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  return parse_number<std::int64_t>(key, value, "an integer");
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  return parse_number<std::uint64_t>(key, value, "a non-negative integer");
}

double parse_double(const std::string& key, const std::string& value) {
  return parse_number<double>(key, value, "a number");
}

}  // namespace partforge
