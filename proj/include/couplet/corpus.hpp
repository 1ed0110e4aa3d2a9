#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace couplet {

inline constexpr int kDefaultMaxLen = 32;

struct CoupletPair {
    std::u32string upper;
    std::u32string lower;

    bool operator==(const CoupletPair&) const = default;
};

struct LoadResult {
    std::vector<CoupletPair> pairs;
    std::size_t dropped = 0;
};

// Two parallel files, one line per sentence. Whitespace inside a line is
// ignored. Pairs with unequal sides, empty sides, or sides longer than
// `max_len` are dropped and counted.
LoadResult load_couplets(const std::filesystem::path& upper_path,
                         const std::filesystem::path& lower_path,
                         int max_len = kDefaultMaxLen);

// Single-file variant: `upper<TAB>lower` per line.
LoadResult load_couplets_tsv(const std::filesystem::path& path, int max_len = kDefaultMaxLen);

// Character vocabulary. Ids 0-4 are the specials; content characters follow
// in frequency-descending, code-point-ascending order.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kSep = 4;
    static constexpr int kNumSpecials = 5;

    static Vocab build(std::span<const CoupletPair> pairs, int min_freq = 1);
    static Vocab from_tokens(std::vector<char32_t> content);
    static Vocab parse(const std::string& text);
    static Vocab load(const std::filesystem::path& path);

    // One token per line, line number = id.
    std::string serialize() const;
    void save(const std::filesystem::path& path) const;
    std::uint64_t hash() const;

    int size() const { return kNumSpecials + static_cast<int>(chars_.size()); }
    int id_of(char32_t ch) const;
    bool contains(char32_t ch) const { return index_.count(ch) != 0; }
    // Content character for `id`; specials have no character.
    char32_t char_of(int id) const;
    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

    std::vector<int> encode(std::u32string_view text, bool add_bos_eos = false) const;
    // Specials are skipped.
    std::u32string decode(std::span<const int> ids) const;

    bool operator==(const Vocab& other) const { return chars_ == other.chars_; }

private:
    std::vector<char32_t> chars_;
    std::unordered_map<char32_t, int> index_;
};

struct EncodedPair {
    std::vector<int> upper;
    std::vector<int> lower;
};

std::vector<EncodedPair> encode_pairs(const Vocab& vocab, std::span<const CoupletPair> pairs);

// A padded B×L block for each side. Masks hold 1 for real tokens.
struct Batch {
    int size = 0;
    int upper_len = 0;
    int lower_len = 0;
    std::vector<int> upper;
    std::vector<std::uint8_t> upper_mask;
    std::vector<int> lower;
    std::vector<std::uint8_t> lower_mask;
    // Index of each row in the source pair list.
    std::vector<std::size_t> source_index;

    std::span<const int> upper_row(int b) const;
    std::span<const int> lower_row(int b) const;
    int upper_length(int b) const;
    int lower_length(int b) const;
};

// Batches in the given order (identity when `order` is empty); the last batch
// may be smaller.
std::vector<Batch> batchify(std::span<const EncodedPair> pairs, int batch_size, int pad_id = Vocab::kPad,
                            std::span<const std::size_t> order = {});

// Seeded permutation of [0, n).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

struct CorpusSplit {
    std::vector<CoupletPair> train;
    std::vector<CoupletPair> validation;
};

// Seeded shuffle, then the last `validation_fraction` (at least one pair when
// the corpus has two or more) goes to validation.
CorpusSplit split_corpus(std::span<const CoupletPair> pairs, double validation_fraction, std::uint64_t seed);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace couplet
