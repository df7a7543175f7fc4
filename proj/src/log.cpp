#include "datasim/log.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace datasim::log {
namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

Sink& current_sink() {
  static Sink sink = [](Level level, std::string_view message) {
    if (level == Level::warning) std::cerr << "warning: " << message << '\n';
  };
  return sink;
}

void emit(Level level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (current_sink()) current_sink()(level, message);
}

}  // namespace

Sink set_sink(Sink sink) {
  std::lock_guard lock(sink_mutex());
  return std::exchange(current_sink(), std::move(sink));
}

void info(std::string_view message) { emit(Level::info, message); }
void warn(std::string_view message) { emit(Level::warning, message); }

}  // namespace datasim::log
