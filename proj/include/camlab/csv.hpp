#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace camlab {

/// Splits one unquoted CSV line on commas. Fields may not contain commas.
std::vector<std::string> split_csv_line(std::string_view line);

/// Parses a finite double occupying the whole field; throws ParseError naming `where`.
double parse_double(std::string_view field, std::string_view where);

}  // namespace camlab
