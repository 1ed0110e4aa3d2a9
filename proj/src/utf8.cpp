#include "couplet/utf8.hpp"

#include "couplet/error.hpp"

namespace couplet::utf8 {

std::optional<std::u32string> decode(std::string_view bytes) {
    std::u32string out;
    out.reserve(bytes.size());
    std::size_t i = 0;
    while (i < bytes.size()) {
        const auto lead = static_cast<unsigned char>(bytes[i]);
        int extra = 0;
        char32_t cp = 0;
        char32_t min_cp = 0;
        if (lead < 0x80) {
            cp = lead;
        } else if ((lead & 0xE0) == 0xC0) {
            extra = 1;
            cp = lead & 0x1F;
            min_cp = 0x80;
        } else if ((lead & 0xF0) == 0xE0) {
            extra = 2;
            cp = lead & 0x0F;
            min_cp = 0x800;
        } else if ((lead & 0xF8) == 0xF0) {
            extra = 3;
            cp = lead & 0x07;
            min_cp = 0x10000;
        } else {
            return std::nullopt;
        }
        if (i + extra >= bytes.size() && extra > 0) {
            return std::nullopt;
        }
        for (int k = 1; k <= extra; ++k) {
            const auto cont = static_cast<unsigned char>(bytes[i + k]);
            if ((cont & 0xC0) != 0x80) {
                return std::nullopt;
            }
            cp = (cp << 6) | (cont & 0x3F);
        }
        if (extra > 0 && cp < min_cp) {
            return std::nullopt;
        }
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
            return std::nullopt;
        }
        out.push_back(cp);
        i += extra + 1;
    }
    return out;
}

std::string encode(char32_t ch) {
    std::string out;
    if (ch < 0x80) {
        out.push_back(static_cast<char>(ch));
    } else if (ch < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (ch >> 6)));
        out.push_back(static_cast<char>(0x80 | (ch & 0x3F)));
    } else if (ch < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (ch >> 12)));
        out.push_back(static_cast<char>(0x80 | ((ch >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (ch & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (ch >> 18)));
        out.push_back(static_cast<char>(0x80 | ((ch >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((ch >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (ch & 0x3F)));
    }
    return out;
}

std::string encode(std::u32string_view text) {
    std::string out;
    out.reserve(text.size() * 3);
    for (char32_t ch : text) {
        out += encode(ch);
    }
    return out;
}

std::u32string decode_or_throw(std::string_view bytes, const std::string& where) {
    auto decoded = decode(bytes);
    if (!decoded) {
        throw DataError("invalid UTF-8 at " + where);
    }
    return std::move(*decoded);
}

bool is_space(char32_t ch) {
    switch (ch) {
        case U' ':
        case U'\t':
        case U'\r':
        case U'\n':
        case U'\v':
        case U'\f':
        case 0x00A0:
        case 0x3000:  // ideographic space
        case 0xFEFF:  // BOM
            return true;
        default:
            return ch >= 0x2000 && ch <= 0x200B;
    }
}

std::u32string strip_spaces(std::u32string_view text) {
    std::u32string out;
    out.reserve(text.size());
    for (char32_t ch : text) {
        if (!is_space(ch)) {
            out.push_back(ch);
        }
    }
    return out;
}

}  // namespace couplet::utf8
