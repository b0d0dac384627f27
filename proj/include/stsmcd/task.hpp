#pragma once

#include <string>

#include "stsmcd/errors.hpp"

namespace stsmcd {

/// Binary change detection, semantic change detection, building damage
/// assessment.
enum class Task { bcd, scd, bda };

inline Task parse_task(const std::string& name) {
  if (name == "bcd") return Task::bcd;
  if (name == "scd") return Task::scd;
  if (name == "bda") return Task::bda;
  throw DomainError("unknown task '" + name + "' (expected bcd, scd or bda)");
}

inline std::string task_name(Task t) {
  switch (t) {
    case Task::bcd: return "bcd";
    case Task::scd: return "scd";
    case Task::bda: return "bda";
  }
  return "?";
}

}  // namespace stsmcd
