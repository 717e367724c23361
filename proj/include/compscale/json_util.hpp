#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include "compscale/errors.hpp"
#include "json.hpp"

namespace compscale {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                                std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError(std::string(context) + ": unknown key '" + item.key() + "'");
    }
  }
}

// Reads j[key] into out when present; type errors become ConfigError.
template <typename V>
void read_optional(const nlohmann::json& j, const char* key, V& out, std::string_view context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(context) + "." + key + ": " + e.what());
  }
}

}  // namespace compscale
