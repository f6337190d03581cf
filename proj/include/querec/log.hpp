// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace querec::log {

inline std::atomic<bool>& quiet_flag() {
  static std::atomic<bool> quiet{false};
  return quiet;
}

inline void set_quiet(bool quiet) { quiet_flag() = quiet; }

inline void write(std::string_view level, std::string_view msg) {
  if (quiet_flag()) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::clog << "[querec] " << level << ": " << msg << '\n';
}

inline void info(std::string_view msg) { write("info", msg); }
inline void warn(std::string_view msg) { write("warning", msg); }

}  // namespace querec::log
