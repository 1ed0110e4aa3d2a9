#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace couplet::detail {

// Flat key/value store read from INI/TOML-style text. A "[section]" header
// prefixes the following keys with "section."; '#' and ';' start comments and
// values may be wrapped in double quotes. Insertion order is preserved.
class KeyValues {
public:
    static KeyValues parse(std::string_view text, const std::string& where = "config");

    void set(const std::string& key, std::string value);
    bool has(const std::string& key) const;
    // Throws Error when the key is missing.
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;

    int get_int(const std::string& key) const;
    std::int64_t get_int64(const std::string& key) const;
    std::uint64_t get_uint64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
    // One "key=value" line per entry.
    std::string serialize() const;

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace couplet::detail
