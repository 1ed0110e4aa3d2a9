#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "couplet/annotation.hpp"
#include "couplet/corpus.hpp"
#include "couplet/fusion.hpp"
#include "couplet/transformer.hpp"

#include <unistd.h>

namespace couplet::testing {

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("couplet-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path file(const std::string& name, const std::string& contents) const {
        const auto p = path_ / name;
        std::ofstream(p, std::ios::binary) << contents;
        return p;
    }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::filesystem::path data_dir() { return COUPLET_DATA_DIR; }

// Characters from the CJK block, offset so they never collide with specials.
inline char32_t synthetic_char(int k) { return static_cast<char32_t>(0x4E00 + k); }

// Random upper lines over an `alphabet`-sized character set; the lower line is
// a fixed character-wise mapping of the upper one, so the task is learnable.
inline std::vector<CoupletPair> synthetic_couplets(int n, int min_len, int max_len, int alphabet, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> len_dist(min_len, max_len);
    std::uniform_int_distribution<int> char_dist(0, alphabet - 1);
    std::vector<CoupletPair> pairs;
    for (int i = 0; i < n; ++i) {
        CoupletPair p;
        const int len = len_dist(gen);
        for (int j = 0; j < len; ++j) {
            const int k = char_dist(gen);
            p.upper.push_back(synthetic_char(k));
            p.lower.push_back(synthetic_char((k * 7 + 3) % alphabet));
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// Deterministic stroke-like bitmaps for every content character in `vocab`.
inline GlyphAtlas synthetic_atlas(const Vocab& vocab) {
    GlyphAtlas atlas;
    for (int id = Vocab::kNumSpecials; id < vocab.size(); ++id) {
        const char32_t ch = vocab.char_of(id);
        std::mt19937_64 gen(static_cast<std::uint64_t>(ch));
        GlyphBitmap bmp = GlyphBitmap::background();
        for (int stroke = 0; stroke < 4; ++stroke) {
            const int r = static_cast<int>(gen() % kGlyphSide);
            const int c0 = static_cast<int>(gen() % (kGlyphSide / 2));
            for (int c = c0; c < c0 + kGlyphSide / 2; ++c) {
                bmp.pixels[r * kGlyphSide + c] = static_cast<std::uint8_t>(gen() % 64);
            }
        }
        atlas.add(ch, bmp);
    }
    return atlas;
}

inline PinyinLexicon synthetic_pinyin(const Vocab& vocab) {
    static const char* syllables[] = {"ba1", "chun1", "feng1", "hua1", "jiang1", "ren2", "shan1", "shui3", "yue4"};
    std::map<char32_t, std::string> readings;
    for (int id = Vocab::kNumSpecials; id < vocab.size(); ++id) {
        readings[vocab.char_of(id)] = syllables[id % 9];
    }
    return PinyinLexicon::from_entries(std::move(readings));
}

inline PosLexicon synthetic_pos(const Vocab& vocab) {
    std::vector<std::string> tagset = {"n", "v", "a", "d", "m"};
    std::map<char32_t, std::string> tags;
    for (int id = Vocab::kNumSpecials; id < vocab.size(); ++id) {
        tags[vocab.char_of(id)] = tagset[id % tagset.size()];
    }
    return PosLexicon::from_entries(tagset, tags);
}

struct TinySetup {
    Vocab vocab;
    GlyphAtlas atlas;
    Model model;
};

// A small model of the requested shape; `fusion` switches on all four channels.
inline TinySetup tiny_model(const std::vector<CoupletPair>& pairs, Variant variant, bool fusion, int d_model = 16,
                            int layers = 1, int heads = 2, int d_ff = 24, std::uint64_t seed = 1,
                            int context_dim = 8) {
    TinySetup s;
    s.vocab = Vocab::build(pairs);
    s.atlas = synthetic_atlas(s.vocab);
    const auto pinyin = synthetic_pinyin(s.vocab).restricted_to(s.vocab);
    const auto pos = synthetic_pos(s.vocab);
    ModelConfig mc;
    mc.variant = variant;
    mc.enc_layers = layers;
    mc.dec_layers = layers;
    mc.n_heads = heads;
    mc.d_model = d_model;
    mc.d_ff = d_ff;
    mc.vocab_size = s.vocab.size();
    mc.max_len = 8;
    FusionSpec fs = fusion ? FusionSpec::fusion(d_model, pinyin.size(), pos.size()) : FusionSpec::anchi(d_model);
    fs.context_dim = context_dim;
    s.model = Model(mc, fs, annotate_vocab(s.vocab, pinyin, pos));
    s.model.initialize(s.vocab, fusion ? &s.atlas : nullptr, seed);
    return s;
}

}  // namespace couplet::testing
