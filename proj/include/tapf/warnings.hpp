#pragma once

#include <string>
#include <utility>
#include <vector>

namespace tapf {

// Non-fatal conditions (for example zero-norm vectors in cosine terms) are
// recorded here instead of raising; callers drain the log when they report.
inline std::vector<std::string>& warning_log() {
  thread_local std::vector<std::string> log;
  return log;
}

inline void warn(std::string msg) { warning_log().push_back(std::move(msg)); }

inline std::vector<std::string> take_warnings() {
  std::vector<std::string> out;
  out.swap(warning_log());
  return out;
}

}  // namespace tapf
