#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ums {

// Malformed input file (bad TSV/JSONL line, bad vocab, bad config).
// Messages carry the file and line where that makes sense.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (missing file, unwritable path).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string normalize_whitespace(std::string_view text);
std::vector<std::string> split_whitespace(std::string_view text);

std::vector<std::string> read_lines(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

// FNV-1a over raw bytes; used for input/checkpoint hashes in run manifests.
std::uint64_t fnv1a64(std::string_view bytes);
std::string fnv1a64_hex(std::string_view bytes);
std::string hash_file_hex(const std::filesystem::path& path);

}  // namespace ums
