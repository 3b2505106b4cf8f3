#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace grecall {

// Shortest round-trip decimal form of a double; identical input bits give
// identical text, which is what keeps regenerated artifacts byte-stable.
std::string fmt_double(double v);

std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, char sep);

// Strict numeric parsers; `where` goes into the error message.
int64_t parse_int(std::string_view s, const std::string& where);
double parse_double(std::string_view s, const std::string& where);

// Whole-file helpers. read_lines throws NotFoundError when missing.
std::vector<std::string> read_lines(const std::string& path);
void write_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);

// FNV-1a over bytes, hex-encoded; used for config hashes in manifests.
std::string content_hash(std::string_view content);

}  // namespace grecall
