#include "ebaret/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace ebaret::log {
namespace {

std::atomic<Level> g_level{Level::kWarning};
std::mutex g_mutex;

void emit(Level at, std::string_view tag, std::string_view message) {
  if (at < g_level.load()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::clog << "[" << tag << "] " << message << '\n';
}

}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void info(std::string_view message) { emit(Level::kInfo, "info", message); }
void warning(std::string_view message) { emit(Level::kWarning, "warn", message); }

}  // namespace ebaret::log
