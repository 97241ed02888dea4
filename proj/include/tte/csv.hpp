#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace tte::csv {

// Splits one record on commas. Double-quoted fields may contain commas and
// doubled quotes. Trailing carriage returns are dropped.
std::vector<std::string> split_line(std::string_view line);

// Quotes a field only when it needs it.
std::string escape(std::string_view field);

void write_row(std::ostream& out, const std::vector<std::string>& fields);

// Fixed-precision number formatting used by every exporter so that outputs are
// byte-identical across runs.
std::string format_number(double value, int precision = 6);

// Empty string and surrounding whitespace are rejected; "nan"/"inf" parse but are
// reported through the finite flag.
struct ParsedNumber {
    bool ok = false;
    bool finite = false;
    double value = 0.0;
};
ParsedNumber parse_number(std::string_view text);

std::string_view trim(std::string_view s);

}  // namespace tte::csv
