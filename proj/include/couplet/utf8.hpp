#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace couplet::utf8 {

// Decodes UTF-8, rejecting overlong forms, surrogates and truncated sequences.
std::optional<std::u32string> decode(std::string_view bytes);

std::string encode(std::u32string_view text);
std::string encode(char32_t ch);

// Decodes or throws DataError mentioning `where` (e.g. "in.txt:12").
std::u32string decode_or_throw(std::string_view bytes, const std::string& where);

bool is_space(char32_t ch);

// Drops all whitespace code points.
std::u32string strip_spaces(std::u32string_view text);

}  // namespace couplet::utf8
