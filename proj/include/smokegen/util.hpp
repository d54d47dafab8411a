#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace smokegen {

using Rng = std::mt19937_64;

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Independent stream seed for a named sub-task (pair id, sample index, ...),
/// so results do not depend on scheduling order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view key);

template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(items[i - 1], items[pick(rng)]);
    }
}

std::string read_text(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);
/// Write to a sibling temp file, fsync, then rename over `path`.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
/// Append one line and fsync before returning.
void append_line_durable(const std::filesystem::path& path, std::string_view line);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Diagnostics go to stderr; SMOKEGEN_QUIET=1 silences warnings.
void log_warn(std::string_view message);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split_words(std::string_view s);

}  // namespace smokegen
