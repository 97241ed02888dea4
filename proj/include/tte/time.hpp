#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>

namespace tte {

// UTC instant at second resolution.
using Instant = std::chrono::sys_seconds;
using Seconds = std::chrono::seconds;

constexpr Seconds hours(long long h) { return Seconds{h * 3600}; }
constexpr Seconds minutes(long long m) { return Seconds{m * 60}; }

// Accepts YYYY-MM-DDTHH:MM:SS with an optional 'Z' or +HH:MM/-HH:MM suffix.
// A space may replace the 'T'. Returns nullopt on anything else.
std::optional<Instant> parse_iso8601(std::string_view text);

// Always emits the canonical YYYY-MM-DDTHH:MM:SSZ form.
std::string format_iso8601(Instant t);

inline double to_hours(Seconds d) { return static_cast<double>(d.count()) / 3600.0; }

}  // namespace tte
