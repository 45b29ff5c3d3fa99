#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace fgl::text {

bool valid_utf8(std::string_view s);

/// Splits UTF-8 text into code points, each returned as its own string.
std::vector<std::string> code_points(std::string_view s);

/// Splits on Unicode whitespace; empty fields are dropped.
std::vector<std::string> split_words(std::string_view s);

/// Words joined by single spaces.
std::string normalize_whitespace(std::string_view s);

std::string join(const std::vector<std::string>& words, std::string_view sep = " ");

std::string rstrip(std::string_view s);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

}  // namespace fgl::text
