#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace cellsearch {

std::string read_text_file(const std::filesystem::path& path);
/// Write to a sibling temporary file and rename it over `path`.
void write_text_file_atomic(const std::filesystem::path& path, const std::string& content);
/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Independent stream seed derived from a global seed and a label, so each
/// consumer (init, split, shuffle, augment, ...) gets a stable stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

}  // namespace cellsearch
