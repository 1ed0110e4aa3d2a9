#include "couplet/detail/keyvalue.hpp"

#include <charconv>
#include <sstream>

#include "couplet/error.hpp"

namespace couplet::detail {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw Error("config: " + key + " = '" + text + "' is not a valid number");
    }
    return value;
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, const std::string& where) {
    KeyValues kv;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        bool in_quote = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') {
                in_quote = !in_quote;
            } else if (!in_quote && (line[i] == '#' || line[i] == ';')) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty() || line.front() == '#' || line.front() == ';') {
            continue;
        }
        const auto where_line = where + ":" + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw Error(where_line + ": malformed section header");
            }
            section = std::string(trim(line.substr(1, line.size() - 2)));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw Error(where_line + ": expected key = value");
        }
        const auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw Error(where_line + ": empty key");
        }
        if (!value.empty() && value.front() == '"') {
            const auto close = value.find('"', 1);
            if (close == std::string_view::npos) {
                throw Error(where_line + ": unterminated string");
            }
            value = value.substr(1, close - 1);
        }
        kv.set(section.empty() ? std::string(key) : section + "." + std::string(key), std::string(value));
    }
    return kv;
}

void KeyValues::set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries_.emplace_back(key, std::move(value));
}

bool KeyValues::has(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) {
            return true;
        }
    }
    return false;
}

const std::string& KeyValues::get(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) {
            return v;
        }
    }
    throw Error("config: missing key " + key);
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
}

int KeyValues::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }

std::int64_t KeyValues::get_int64(const std::string& key) const { return parse_number<std::int64_t>(key, get(key)); }

std::uint64_t KeyValues::get_uint64(const std::string& key) const {
    return parse_number<std::uint64_t>(key, get(key));
}

double KeyValues::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }

bool KeyValues::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw Error("config: " + key + " = '" + v + "' is not a boolean");
}

std::string KeyValues::serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
        out += k;
        out += '=';
        if (v.find('"') != std::string::npos) {
            throw Error("config: value of " + k + " contains a double quote");
        }
        const bool quote = v.empty() || v.find_first_of("#;") != std::string::npos || trim(v) != v;
        out += quote ? '"' + v + '"' : v;
        out += '\n';
    }
    return out;
}

}  // namespace couplet::detail
