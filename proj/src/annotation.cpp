#include "couplet/annotation.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "couplet/detail/binary.hpp"
#include "couplet/error.hpp"
#include "couplet/utf8.hpp"

namespace couplet {

namespace {

constexpr std::string_view kGlyphMagic = "GLY1";
constexpr std::string_view kContextMagic = "CTX1";

// Reads `key<TAB>value` lines; blank lines are skipped.
std::vector<std::pair<char32_t, std::string>> read_tsv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<std::pair<char32_t, std::string>> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto where = path.filename().string() + ":" + std::to_string(line_no);
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError(where + ": expected char<TAB>value");
        }
        const auto key = utf8::decode_or_throw(line.substr(0, tab), where);
        if (key.size() != 1) {
            throw DataError(where + ": key must be a single character");
        }
        rows.emplace_back(key[0], line.substr(tab + 1));
    }
    return rows;
}

}  // namespace

GlyphBitmap GlyphBitmap::background() {
    GlyphBitmap bitmap;
    bitmap.pixels.fill(255);
    return bitmap;
}

GlyphBitmap GlyphBitmap::unknown() {
    auto bitmap = background();
    constexpr int lo = (kGlyphSide - 12) / 2;
    for (int r = lo; r < lo + 12; ++r) {
        for (int c = lo; c < lo + 12; ++c) {
            bitmap.pixels[r * kGlyphSide + c] = 0;
        }
    }
    return bitmap;
}

bool GlyphBitmap::is_blank() const {
    return std::all_of(pixels.begin(), pixels.end(), [](std::uint8_t p) { return p == 255; });
}

GlyphAtlas GlyphAtlas::load(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return parse(bytes);
}

GlyphAtlas GlyphAtlas::parse(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes, "glyph atlas");
    if (in.get_string(4) != kGlyphMagic) {
        throw DataError("glyph atlas: bad magic (expected GLY1)");
    }
    const auto count = in.get<std::uint32_t>();
    if (in.remaining() != static_cast<std::size_t>(count) * (4 + kGlyphCells)) {
        throw DataError("glyph atlas: size does not match entry count " + std::to_string(count));
    }
    GlyphAtlas atlas;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto cp = static_cast<char32_t>(in.get<std::uint32_t>());
        GlyphBitmap bitmap;
        const auto raw = in.get_bytes(kGlyphCells);
        std::copy(raw.begin(), raw.end(), bitmap.pixels.begin());
        if (!atlas.glyphs_.emplace(cp, bitmap).second) {
            throw DataError("glyph atlas: duplicate code point U+" + std::to_string(static_cast<unsigned>(cp)));
        }
    }
    return atlas;
}

std::vector<std::uint8_t> GlyphAtlas::serialize() const {
    detail::ByteWriter out;
    out.put_string(kGlyphMagic);
    out.put(static_cast<std::uint32_t>(glyphs_.size()));
    for (const auto& [cp, bitmap] : glyphs_) {
        out.put(static_cast<std::uint32_t>(cp));
        out.put_bytes(bitmap.pixels);
    }
    return std::move(out.bytes());
}

void GlyphAtlas::save(const std::filesystem::path& path) const { detail::write_file(path, serialize()); }

void GlyphAtlas::add(char32_t ch, const GlyphBitmap& bitmap) { glyphs_[ch] = bitmap; }

const GlyphBitmap* GlyphAtlas::find(char32_t ch) const {
    const auto it = glyphs_.find(ch);
    return it == glyphs_.end() ? nullptr : &it->second;
}

GlyphBitmap render_glyph(char32_t ch, const GlyphAtlas& atlas) {
    if (utf8::is_space(ch)) {
        return GlyphBitmap::background();
    }
    if (const auto* bitmap = atlas.find(ch)) {
        return *bitmap;
    }
    return GlyphBitmap::unknown();
}

RowVec glyph_to_weight(const GlyphBitmap& bitmap) {
    RowVec out(kGlyphCells);
    for (int i = 0; i < kGlyphCells; ++i) {
        out[i] = 1.0 - static_cast<double>(bitmap.pixels[i]) / 255.0;
    }
    return out;
}

bool PinyinLexicon::valid_syllable(const std::string& syllable) {
    if (syllable.size() < 2) {
        return false;
    }
    const char tone = syllable.back();
    if (tone < '1' || tone > '5') {
        return false;
    }
    return std::all_of(syllable.begin(), syllable.end() - 1, [](char c) { return c >= 'a' && c <= 'z'; });
}

PinyinLexicon PinyinLexicon::load(const std::filesystem::path& path) {
    std::map<char32_t, std::string> readings;
    for (auto& [ch, syllable] : read_tsv(path)) {
        if (!valid_syllable(syllable)) {
            throw DataError(path.filename().string() + ": invalid syllable '" + syllable + "' for " +
                            utf8::encode(ch));
        }
        readings.emplace(ch, std::move(syllable));
    }
    return from_entries(std::move(readings));
}

PinyinLexicon PinyinLexicon::from_entries(std::map<char32_t, std::string> readings) {
    PinyinLexicon lex;
    std::set<std::string> unique;
    for (const auto& [ch, syllable] : readings) {
        if (!valid_syllable(syllable)) {
            throw DataError("invalid syllable '" + syllable + "'");
        }
        unique.insert(syllable);
    }
    lex.readings_ = std::move(readings);
    lex.syllables_.assign(unique.begin(), unique.end());
    for (std::size_t i = 0; i < lex.syllables_.size(); ++i) {
        lex.syllable_ids_.emplace(lex.syllables_[i], static_cast<int>(i) + 1);
    }
    return lex;
}

PinyinLexicon PinyinLexicon::restricted_to(const Vocab& vocab) const {
    std::map<char32_t, std::string> kept;
    for (const auto& [ch, syllable] : readings_) {
        if (vocab.contains(ch)) {
            kept.emplace(ch, syllable);
        }
    }
    return from_entries(std::move(kept));
}

int PinyinLexicon::id_of(char32_t ch) const {
    const auto it = readings_.find(ch);
    return it == readings_.end() ? 0 : id_of_syllable(it->second);
}

int PinyinLexicon::id_of_syllable(const std::string& syllable) const {
    const auto it = syllable_ids_.find(syllable);
    return it == syllable_ids_.end() ? 0 : it->second;
}

const std::string* PinyinLexicon::syllable_of(char32_t ch) const {
    const auto it = readings_.find(ch);
    return it == readings_.end() ? nullptr : &it->second;
}

PosLexicon PosLexicon::load(const std::filesystem::path& lexicon_path, const std::filesystem::path& tagset_path) {
    std::ifstream in(tagset_path);
    if (!in) {
        throw DataError("cannot open " + tagset_path.string());
    }
    std::vector<std::string> tagset;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            tagset.push_back(line);
        }
    }
    std::map<char32_t, std::string> tags;
    for (auto& [ch, tag] : read_tsv(lexicon_path)) {
        tags.emplace(ch, std::move(tag));
    }
    return from_entries(std::move(tagset), tags);
}

PosLexicon PosLexicon::from_entries(std::vector<std::string> tagset, const std::map<char32_t, std::string>& tags) {
    if (tagset.empty() || tagset.size() > kMaxPosTags) {
        throw DataError("tagset must list between 1 and " + std::to_string(kMaxPosTags) + " tags, got " +
                        std::to_string(tagset.size()));
    }
    PosLexicon lex;
    lex.tagset_ = std::move(tagset);
    if (std::set<std::string>(lex.tagset_.begin(), lex.tagset_.end()).size() != lex.tagset_.size()) {
        throw DataError("tagset has duplicate names");
    }
    for (const auto& [ch, tag] : tags) {
        const int id = lex.id_of_tag(tag);
        if (id == 0) {
            throw DataError("POS lexicon: tag '" + tag + "' for " + utf8::encode(ch) + " is not in the tagset");
        }
        lex.tag_of_.emplace(ch, id);
    }
    return lex;
}

int PosLexicon::id_of(char32_t ch) const {
    const auto it = tag_of_.find(ch);
    return it == tag_of_.end() ? 0 : it->second;
}

int PosLexicon::id_of_tag(const std::string& tag) const {
    const auto it = std::find(tagset_.begin(), tagset_.end(), tag);
    return it == tagset_.end() ? 0 : static_cast<int>(it - tagset_.begin()) + 1;
}

AnnotatedSequence annotate(std::u32string_view text, const Vocab& vocab, const PinyinLexicon& pinyin,
                           const PosLexicon& pos) {
    AnnotatedSequence out;
    out.char_ids.reserve(text.size());
    out.pinyin_ids.reserve(text.size());
    out.pos_ids.reserve(text.size());
    for (char32_t ch : text) {
        out.char_ids.push_back(vocab.id_of(ch));
        out.pinyin_ids.push_back(pinyin.id_of(ch));
        out.pos_ids.push_back(pos.id_of(ch));
    }
    return out;
}

TokenAnnotations annotate_vocab(const Vocab& vocab, const PinyinLexicon& pinyin, const PosLexicon& pos) {
    TokenAnnotations out;
    out.pinyin_of_token.assign(vocab.size(), 0);
    out.pos_of_token.assign(vocab.size(), 0);
    for (int id = Vocab::kNumSpecials; id < vocab.size(); ++id) {
        out.pinyin_of_token[id] = pinyin.id_of(vocab.char_of(id));
        out.pos_of_token[id] = pos.id_of(vocab.char_of(id));
    }
    return out;
}

PrecomputedContext PrecomputedContext::load(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return parse(bytes);
}

PrecomputedContext PrecomputedContext::parse(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes, "context file");
    if (in.get_string(4) != kContextMagic) {
        throw DataError("context file: bad magic (expected CTX1)");
    }
    const auto dim = static_cast<int>(in.get<std::uint32_t>());
    if (dim <= 0) {
        throw DataError("context file: dimension must be positive");
    }
    PrecomputedContext ctx(dim);
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto key = in.get<std::uint64_t>();
        const auto rows = in.get<std::uint32_t>();
        in.require(static_cast<std::size_t>(rows) * dim * sizeof(float));
        Mat m(rows, dim);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<double>(in.get<float>());
        }
        ctx.records_.emplace(key, std::move(m));
    }
    if (!in.done()) {
        throw DataError("context file: trailing bytes");
    }
    return ctx;
}

std::vector<std::uint8_t> PrecomputedContext::serialize() const {
    detail::ByteWriter out;
    out.put_string(kContextMagic);
    out.put(static_cast<std::uint32_t>(dim_));
    out.put(static_cast<std::uint32_t>(records_.size()));
    for (const auto& [key, m] : records_) {
        out.put(key);
        out.put(static_cast<std::uint32_t>(m.rows()));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            out.put(static_cast<float>(m.data()[i]));
        }
    }
    return std::move(out.bytes());
}

void PrecomputedContext::save(const std::filesystem::path& path) const { detail::write_file(path, serialize()); }

void PrecomputedContext::add(std::uint64_t key, const Mat& rows) {
    if (rows.cols() != dim_) {
        throw Error("context record has " + std::to_string(rows.cols()) + " columns, expected " +
                    std::to_string(dim_));
    }
    records_[key] = rows.cast<float>().cast<double>();
}

const Mat* PrecomputedContext::find(std::uint64_t key) const {
    const auto it = records_.find(key);
    return it == records_.end() ? nullptr : &it->second;
}

std::uint64_t sequence_hash(std::span<const int> char_ids) {
    std::vector<std::uint32_t> raw(char_ids.begin(), char_ids.end());
    return fnv1a64(raw.data(), raw.size() * sizeof(std::uint32_t));
}

ContextualProvider ContextualProvider::trainable(const Mat& table) {
    return {ContextMode::TrainableTable, static_cast<int>(table.cols()), &table, nullptr};
}

ContextualProvider ContextualProvider::precomputed(const PrecomputedContext& file) {
    return {ContextMode::PrecomputedFile, file.dim(), nullptr, &file};
}

Mat contextual_embed(std::span<const int> char_ids, const ContextualProvider& provider) {
    const auto n = static_cast<Eigen::Index>(char_ids.size());
    if (provider.mode == ContextMode::TrainableTable) {
        if (provider.table == nullptr) {
            throw Error("contextual provider has no table");
        }
        Mat out(n, provider.table->cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            const int id = char_ids[i];
            if (id < 0 || id >= provider.table->rows()) {
                throw Error("contextual_embed: id " + std::to_string(id) + " out of range");
            }
            out.row(i) = provider.table->row(id);
        }
        return out;
    }
    if (provider.file == nullptr) {
        throw Error("contextual provider has no file");
    }
    const auto key = sequence_hash(char_ids);
    const auto* record = provider.file->find(key);
    if (record == nullptr || record->rows() != n) {
        std::ostringstream msg;
        msg << "no precomputed context for sequence [";
        for (std::size_t i = 0; i < char_ids.size(); ++i) {
            msg << (i ? " " : "") << char_ids[i];
        }
        msg << "] (key " << std::hex << key << ")";
        if (record != nullptr) {
            msg << ": record has " << std::dec << record->rows() << " rows";
        }
        throw DataError(msg.str());
    }
    return *record;
}

}  // namespace couplet
