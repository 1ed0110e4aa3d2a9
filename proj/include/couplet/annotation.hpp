#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "couplet/corpus.hpp"
#include "couplet/tensor.hpp"

namespace couplet {

inline constexpr int kGlyphSide = 24;
inline constexpr int kGlyphCells = kGlyphSide * kGlyphSide;
inline constexpr int kContextDim = 768;

// 24×24 grayscale, row-major; 0 is ink, 255 is background.
struct GlyphBitmap {
    std::array<std::uint8_t, kGlyphCells> pixels{};

    static GlyphBitmap background();
    // Fallback for characters missing from the atlas: a centered 12×12 ink square.
    static GlyphBitmap unknown();

    bool is_blank() const;
    std::uint8_t at(int row, int col) const { return pixels[row * kGlyphSide + col]; }
    bool operator==(const GlyphBitmap&) const = default;
};

// In-memory GLY1 atlas: "GLY1", u32 count, then count × (u32 code point, 576 pixel bytes).
class GlyphAtlas {
public:
    static GlyphAtlas load(const std::filesystem::path& path);
    static GlyphAtlas parse(std::span<const std::uint8_t> bytes);

    std::vector<std::uint8_t> serialize() const;
    void save(const std::filesystem::path& path) const;

    void add(char32_t ch, const GlyphBitmap& bitmap);
    const GlyphBitmap* find(char32_t ch) const;
    std::size_t size() const { return glyphs_.size(); }
    const std::map<char32_t, GlyphBitmap>& entries() const { return glyphs_; }

private:
    std::map<char32_t, GlyphBitmap> glyphs_;
};

// Atlas lookup; whitespace renders blank and misses render GlyphBitmap::unknown().
GlyphBitmap render_glyph(char32_t ch, const GlyphAtlas& atlas);

// out[i] = 1 - pixels[i] / 255, row-major.
RowVec glyph_to_weight(const GlyphBitmap& bitmap);

// Character → tone-numbered syllable (e.g. "ren2"). Syllable ids are dense,
// 0 is the unknown reading, the rest follow sorted syllable order.
class PinyinLexicon {
public:
    static PinyinLexicon load(const std::filesystem::path& path);
    static PinyinLexicon from_entries(std::map<char32_t, std::string> readings);

    // Keeps only characters in `vocab` and renumbers the syllables they use.
    PinyinLexicon restricted_to(const Vocab& vocab) const;

    int id_of(char32_t ch) const;
    int id_of_syllable(const std::string& syllable) const;
    const std::string* syllable_of(char32_t ch) const;
    // Including the unknown id.
    int size() const { return static_cast<int>(syllables_.size()) + 1; }
    const std::vector<std::string>& syllables() const { return syllables_; }

    static bool valid_syllable(const std::string& syllable);

private:
    std::map<char32_t, std::string> readings_;
    std::vector<std::string> syllables_;
    std::unordered_map<std::string, int> syllable_ids_;
};

inline constexpr int kMaxPosTags = 28;

class PosLexicon {
public:
    static PosLexicon load(const std::filesystem::path& lexicon_path, const std::filesystem::path& tagset_path);
    static PosLexicon from_entries(std::vector<std::string> tagset, const std::map<char32_t, std::string>& tags);

    int id_of(char32_t ch) const;
    int id_of_tag(const std::string& tag) const;
    // Including the unknown id.
    int size() const { return static_cast<int>(tagset_.size()) + 1; }
    const std::vector<std::string>& tagset() const { return tagset_; }

private:
    std::vector<std::string> tagset_;
    std::unordered_map<char32_t, int> tag_of_;
};

struct AnnotatedSequence {
    std::vector<int> char_ids;
    std::vector<int> pinyin_ids;
    std::vector<int> pos_ids;

    std::size_t size() const { return char_ids.size(); }
};

AnnotatedSequence annotate(std::u32string_view text, const Vocab& vocab, const PinyinLexicon& pinyin,
                           const PosLexicon& pos);

// Per-token-id pinyin/POS ids so the model can annotate id streams directly.
// Specials and punctuation map to 0.
struct TokenAnnotations {
    std::vector<int> pinyin_of_token;
    std::vector<int> pos_of_token;
};

TokenAnnotations annotate_vocab(const Vocab& vocab, const PinyinLexicon& pinyin, const PosLexicon& pos);

// CTX1 file: "CTX1", u32 dim, u32 record count, then per record
// u64 key, u32 rows, rows×dim f32 (little-endian).
class PrecomputedContext {
public:
    explicit PrecomputedContext(int dim = kContextDim) : dim_(dim) {}

    static PrecomputedContext load(const std::filesystem::path& path);
    static PrecomputedContext parse(std::span<const std::uint8_t> bytes);
    std::vector<std::uint8_t> serialize() const;
    void save(const std::filesystem::path& path) const;

    int dim() const { return dim_; }
    // Values are stored as f32; `add` rounds them.
    void add(std::uint64_t key, const Mat& rows);
    const Mat* find(std::uint64_t key) const;
    std::size_t size() const { return records_.size(); }

private:
    int dim_;
    std::map<std::uint64_t, Mat> records_;
};

// Record key for a character-id sequence: FNV-1a 64 over the ids as u32 LE.
std::uint64_t sequence_hash(std::span<const int> char_ids);

enum class ContextMode { TrainableTable, PrecomputedFile };

// Stand-in for a pretrained contextual encoder: either a per-character table or
// vectors exported to a CTX1 file.
struct ContextualProvider {
    ContextMode mode = ContextMode::TrainableTable;
    int dim = kContextDim;
    const Mat* table = nullptr;
    const PrecomputedContext* file = nullptr;

    static ContextualProvider trainable(const Mat& table);
    static ContextualProvider precomputed(const PrecomputedContext& file);
};

// L × dim. Precomputed mode throws DataError when the sequence has no record.
Mat contextual_embed(std::span<const int> char_ids, const ContextualProvider& provider);

}  // namespace couplet
