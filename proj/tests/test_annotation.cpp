#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "couplet/annotation.hpp"
#include "couplet/error.hpp"
#include "couplet/utf8.hpp"
#include "support.hpp"

using namespace couplet;
using couplet::testing::TempDir;

namespace {

GlyphBitmap filled(std::uint8_t value) {
    GlyphBitmap b;
    b.pixels.fill(value);
    return b;
}

// Independent reading of a two-column TSV.
std::vector<std::pair<std::string, std::string>> read_columns(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab != std::string::npos) {
            rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
        }
    }
    return rows;
}

}  // namespace

TEST_CASE("glyph bitmaps") {
    const auto unk = GlyphBitmap::unknown();
    for (int r = 0; r < kGlyphSide; ++r) {
        for (int c = 0; c < kGlyphSide; ++c) {
            const bool inside = r >= 6 && r < 18 && c >= 6 && c < 18;
            CHECK(unk.at(r, c) == (inside ? 0 : 255));
        }
    }
    CHECK(GlyphBitmap::background().is_blank());
    CHECK_FALSE(unk.is_blank());
}

TEST_CASE("render_glyph") {
    GlyphAtlas atlas;
    GlyphBitmap stored = GlyphBitmap::background();
    for (int i = 0; i < kGlyphCells; i += 7) {
        stored.pixels[i] = static_cast<std::uint8_t>(i % 256);
    }
    atlas.add(U'人', stored);
    CHECK(render_glyph(U'人', atlas) == stored);
    CHECK(render_glyph(U'口', atlas) == GlyphBitmap::unknown());
    CHECK(render_glyph(U' ', atlas).is_blank());
    CHECK(render_glyph(U'　', atlas).is_blank());
}

TEST_CASE("glyph atlas file") {
    TempDir dir;
    GlyphAtlas atlas;
    atlas.add(U'人', GlyphBitmap::unknown());
    atlas.add(U'口', filled(17));
    atlas.save(dir / "a.gly");
    const auto loaded = GlyphAtlas::load(dir / "a.gly");
    CHECK(loaded.size() == 2);
    CHECK(*loaded.find(U'口') == filled(17));
    CHECK(loaded.serialize() == atlas.serialize());

    auto bytes = atlas.serialize();
    SUBCASE("truncated") {
        bytes.pop_back();
        CHECK_THROWS_AS(GlyphAtlas::parse(bytes), DataError);
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(GlyphAtlas::parse(bytes), DataError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(GlyphAtlas::load(dir / "missing.gly"), DataError);
    }
}

TEST_CASE("bundled synthetic atlas covers the sample corpus") {
    const auto atlas = GlyphAtlas::load(testing::data_dir() / "sample/glyphs_synthetic.gly");
    const auto corpus =
        load_couplets(testing::data_dir() / "sample/in.txt", testing::data_dir() / "sample/out.txt");
    for (const auto& p : corpus.pairs) {
        for (char32_t ch : p.upper + p.lower) {
            const auto* g = atlas.find(ch);
            REQUIRE(g != nullptr);
            CHECK_FALSE(g->is_blank());
        }
    }
}

TEST_CASE("glyph_to_weight") {
    CHECK(glyph_to_weight(filled(255)).isZero(0.0));
    CHECK((glyph_to_weight(filled(0)).array() == 1.0).all());
    const RowVec w = glyph_to_weight(filled(51));
    CHECK(w.size() == kGlyphCells);
    CHECK(w[0] == doctest::Approx(0.8).epsilon(1e-15));
    GlyphBitmap b = GlyphBitmap::background();
    b.pixels[25] = 0;
    const RowVec one = glyph_to_weight(b);
    CHECK(one[25] == 1.0);
    CHECK(one.sum() == 1.0);
    double prev = 2.0;
    for (int p = 0; p <= 255; ++p) {
        const double v = glyph_to_weight(filled(static_cast<std::uint8_t>(p)))[0];
        CHECK(v < prev);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        prev = v;
    }
}

TEST_CASE("pinyin lexicon") {
    CHECK(PinyinLexicon::valid_syllable("ren2"));
    CHECK(PinyinLexicon::valid_syllable("lv5"));
    CHECK_FALSE(PinyinLexicon::valid_syllable("ren"));
    CHECK_FALSE(PinyinLexicon::valid_syllable("Ren2"));
    CHECK_FALSE(PinyinLexicon::valid_syllable("ren6"));
    CHECK_FALSE(PinyinLexicon::valid_syllable("2"));

    const auto lex = PinyinLexicon::from_entries({{U'人', "ren2"}, {U'山', "shan1"}, {U'仁', "ren2"}, {U'水', "shui3"}});
    CHECK(lex.size() == 4);
    CHECK(lex.id_of(U'人') == 1);
    CHECK(lex.id_of(U'仁') == 1);
    CHECK(lex.id_of(U'山') == 2);
    CHECK(lex.id_of(U'水') == 3);
    CHECK(lex.id_of(U'口') == 0);

    const auto restricted = lex.restricted_to(Vocab::from_tokens({U'水', U'仁'}));
    CHECK(restricted.size() == 3);
    CHECK(restricted.id_of(U'仁') == 1);
    CHECK(restricted.id_of(U'水') == 2);
    CHECK(restricted.id_of(U'山') == 0);

    TempDir dir;
    CHECK_THROWS_AS(PinyinLexicon::load(dir.file("bad.tsv", "人\tren\n")), DataError);
}

TEST_CASE("shipped lexicons") {
    const auto pinyin_path = testing::data_dir() / "pinyin.tsv";
    const auto pos_path = testing::data_dir() / "pos.tsv";
    const auto tagset_path = testing::data_dir() / "tagset.txt";
    const auto pinyin = PinyinLexicon::load(pinyin_path);
    const auto pos = PosLexicon::load(pos_path, tagset_path);
    CHECK(pos.size() == kMaxPosTags + 1);
    CHECK(static_cast<int>(pinyin.syllables().size()) <= 1295);
    for (const auto& s : pinyin.syllables()) {
        CHECK(PinyinLexicon::valid_syllable(s));
    }

    // Oracle: ids are 1 + the rank of the syllable among all distinct syllables,
    // and 1 + the tag's line number in the tagset.
    std::set<std::string> syllables;
    std::string ren_syllable;
    for (const auto& [ch, syl] : read_columns(pinyin_path)) {
        syllables.insert(syl);
        if (ch == "人") {
            ren_syllable = syl;
        }
    }
    CHECK(ren_syllable == "ren2");
    const int ren_id = 1 + static_cast<int>(std::distance(syllables.begin(), syllables.find("ren2")));
    std::string ren_tag;
    for (const auto& [ch, tag] : read_columns(pos_path)) {
        if (ch == "人") {
            ren_tag = tag;
        }
    }
    CHECK(ren_tag == "n");
    std::ifstream tags(tagset_path);
    std::string line;
    int noun_id = 0;
    for (int i = 1; std::getline(tags, line); ++i) {
        if (line == "n") {
            noun_id = i;
        }
    }
    const auto vocab = Vocab::from_tokens({U'人'});
    const auto a = annotate(U"人", vocab, pinyin, pos);
    CHECK(a.char_ids == std::vector<int>{5});
    CHECK(a.pinyin_ids == std::vector<int>{ren_id});
    CHECK(a.pos_ids == std::vector<int>{noun_id});

    // A sample-corpus subset stays within the syllable budget.
    const auto corpus =
        load_couplets(testing::data_dir() / "sample/in.txt", testing::data_dir() / "sample/out.txt");
    CHECK(pinyin.restricted_to(Vocab::build(corpus.pairs)).size() <= 1296);
}

TEST_CASE("pos lexicon") {
    const auto lex = PosLexicon::from_entries({"n", "v"}, {{U'人', "n"}, {U'走', "v"}});
    CHECK(lex.size() == 3);
    CHECK(lex.id_of(U'人') == 1);
    CHECK(lex.id_of(U'走') == 2);
    CHECK(lex.id_of(U'口') == 0);
    CHECK_THROWS_AS(PosLexicon::from_entries({"n"}, {{U'走', "v"}}), DataError);
    std::vector<std::string> too_many;
    for (int i = 0; i < kMaxPosTags + 1; ++i) {
        too_many.push_back("t" + std::string(1, static_cast<char>('a' + i % 26)) + std::to_string(i));
    }
    CHECK_THROWS_AS(PosLexicon::from_entries(too_many, {}), DataError);
}

TEST_CASE("annotate") {
    const auto vocab = Vocab::from_tokens({U'人', U'山'});
    const auto pinyin = PinyinLexicon::from_entries({{U'人', "ren2"}});
    const auto pos = PosLexicon::from_entries({"n"}, {{U'人', "n"}});
    const auto a = annotate(U"人山，", vocab, pinyin, pos);
    CHECK(a.size() == 3);
    CHECK(a.pinyin_ids.size() == 3);
    CHECK(a.pos_ids.size() == 3);
    CHECK(a.char_ids == std::vector<int>{5, 6, Vocab::kUnk});
    CHECK(a.pinyin_ids == std::vector<int>{1, 0, 0});
    CHECK(a.pos_ids == std::vector<int>{1, 0, 0});
    const auto empty = annotate(U"", vocab, pinyin, pos);
    CHECK(empty.char_ids.empty());
    CHECK(empty.pinyin_ids.empty());
    CHECK(empty.pos_ids.empty());

    const auto per_token = annotate_vocab(vocab, pinyin, pos);
    CHECK(per_token.pinyin_of_token == std::vector<int>{0, 0, 0, 0, 0, 1, 0});
    CHECK(per_token.pos_of_token == std::vector<int>{0, 0, 0, 0, 0, 1, 0});
}

TEST_CASE("contextual_embed") {
    Mat table = Mat::Zero(10, 768);
    for (int r = 0; r < 10; ++r) {
        table.row(r).setConstant(r + 0.5);
    }
    const auto provider = ContextualProvider::trainable(table);
    const std::vector<int> ids = {7, 2, 7};
    const Mat out = contextual_embed(ids, provider);
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 768);
    CHECK(out.row(0) == table.row(7));
    CHECK(out.row(1) == table.row(2));
    CHECK(out.row(0) == out.row(2));

    SUBCASE("precomputed file") {
        PrecomputedContext file(4);
        Mat rows(3, 4);
        rows << 0.1, 0.2, 0.3, 0.4, 1, 2, 3, 4, -1, -2, -3, -4.5;
        file.add(sequence_hash(ids), rows);
        TempDir dir;
        file.save(dir / "c.ctx");
        const auto loaded = PrecomputedContext::load(dir / "c.ctx");
        CHECK(loaded.serialize() == file.serialize());
        const Mat got = contextual_embed(ids, ContextualProvider::precomputed(loaded));
        CHECK(got == *file.find(sequence_hash(ids)));
        CHECK(got(0, 0) == static_cast<double>(0.1f));
        const std::vector<int> other = {1, 2};
        try {
            contextual_embed(other, ContextualProvider::precomputed(loaded));
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("1 2") != std::string::npos);
        }
    }
}
