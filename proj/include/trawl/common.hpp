#pragma once

#include <stdexcept>
#include <string>

namespace trawl {

enum class Target { user, item };

inline const char* target_name(Target t) { return t == Target::user ? "user" : "item"; }

inline Target target_from_name(const std::string& s) {
  if (s == "user") return Target::user;
  if (s == "item") return Target::item;
  throw std::invalid_argument("unknown target: " + s);
}

}  // namespace trawl
