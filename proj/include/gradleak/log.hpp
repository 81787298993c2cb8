#pragma once

// Stderr logging gated by GRADLEAK_LOG = error | warn | info | debug (or 0-3).
// Default level: warn.

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace gradleak::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline Level parse_level(std::string_view s) {
  if (s == "error" || s == "0") return Level::Error;
  if (s == "info" || s == "2") return Level::Info;
  if (s == "debug" || s == "3") return Level::Debug;
  return Level::Warn;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("GRADLEAK_LOG");
    return env ? parse_level(env) : Level::Warn;
  }();
  return level;
}

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(threshold()); }

template <typename... Args>
void write(Level l, const Args&... args) {
  if (!enabled(l)) return;
  static std::mutex mu;
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::ostringstream os;
  os << "[gradleak " << names[static_cast<int>(l)] << "] ";
  (os << ... << args);
  os << "\n";
  std::lock_guard lock(mu);
  std::cerr << os.str();
}

template <typename... Args>
void error(const Args&... args) { write(Level::Error, args...); }
template <typename... Args>
void warn(const Args&... args) { write(Level::Warn, args...); }
template <typename... Args>
void info(const Args&... args) { write(Level::Info, args...); }
template <typename... Args>
void debug(const Args&... args) { write(Level::Debug, args...); }

}  // namespace gradleak::log
