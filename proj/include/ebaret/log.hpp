#pragma once

#include <string_view>

namespace ebaret::log {

enum class Level { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3, kOff = 4 };

void set_level(Level level);
Level level();

void info(std::string_view message);
void warning(std::string_view message);

}  // namespace ebaret::log
