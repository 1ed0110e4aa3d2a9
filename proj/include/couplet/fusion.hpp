#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "couplet/annotation.hpp"
#include "couplet/corpus.hpp"
#include "couplet/layers.hpp"
#include "couplet/tensor.hpp"

namespace couplet {

inline constexpr int kPinyinDim = 30;
inline constexpr int kPosDim = 5;

enum class InitScheme { Glyph, UniformSqrt3, StandardNormal };

struct EmbeddingTable {
    InitScheme scheme = InitScheme::StandardNormal;
    Param weights;

    int rows() const { return static_cast<int>(weights.value.rows()); }
    int dim() const { return static_cast<int>(weights.value.cols()); }
};

// √(3 / dim): the half-width of the uniform initialization.
double uniform_bound(int dim);

// Row r = glyph_to_weight(render_glyph(char r)). PAD is blank, the other
// specials use the unknown glyph.
EmbeddingTable init_glyph_table(const Vocab& vocab, const GlyphAtlas& atlas);
EmbeddingTable init_uniform_table(int rows, int dim, std::uint64_t seed);
EmbeddingTable init_normal_table(int rows, int dim, std::uint64_t seed);

struct FusionSpec {
    bool use_glyph = true;
    bool use_pinyin = true;
    bool use_pos = true;
    bool use_context = true;
    int glyph_dim = kGlyphCells;
    int pinyin_dim = kPinyinDim;
    int pos_dim = kPosDim;
    int context_dim = kContextDim;
    int d_model = 512;
    // Table heights; id 0 of each is the unknown entry.
    int pinyin_rows = 1;
    int pos_rows = kMaxPosTags + 1;

    // Contextual channel only.
    static FusionSpec anchi(int d_model);
    // Glyph, pinyin, POS and contextual channels.
    static FusionSpec fusion(int d_model, int pinyin_rows, int pos_rows);

    int input_width() const;
    void validate() const;
    bool operator==(const FusionSpec&) const = default;
};

// Per-position channel inputs for a run of packed sequences.
struct ChannelInputs {
    std::vector<int> char_ids;
    std::vector<int> pinyin_ids;
    std::vector<int> pos_ids;
    std::vector<int> positions;
    // Rows supplied from outside the contextual table (precomputed vectors).
    // Empty means every row comes from the table.
    Mat context;
    std::vector<std::uint8_t> context_external;

    std::size_t size() const { return char_ids.size(); }
};

// The four channel tables plus the projection to d_model.
class FusionEmbedding {
public:
    FusionEmbedding() = default;
    FusionEmbedding(FusionSpec spec, int vocab_size);

    // Glyph table from the atlas (blank-initialized when `atlas` is null),
    // uniform pinyin/POS tables, normal contextual table, scaled-normal projection.
    void initialize(const Vocab& vocab, const GlyphAtlas* atlas, std::uint64_t seed);

    const FusionSpec& spec() const { return spec_; }
    int vocab_size() const { return vocab_size_; }

    // One sequence: concatenate active channels (glyph, pinyin, POS, context),
    // project, add the positional encoding for positions 0..L-1. `ctx` is
    // L × context_dim and ignored when the contextual channel is off.
    Mat fuse(const AnnotatedSequence& annotated, const Mat& ctx) const;

    struct Cache {
        ChannelInputs inputs;
        Mat concat;
    };

    Mat forward(const ChannelInputs& inputs, Cache* cache) const;
    void backward(const Mat& dy, const Cache& cache);

    void visit(const std::function<void(const std::string&, Param&)>& fn);

    EmbeddingTable glyph;
    EmbeddingTable pinyin;
    EmbeddingTable pos;
    EmbeddingTable context;
    Linear projection;

private:
    Mat concat_channels(const ChannelInputs& inputs) const;

    FusionSpec spec_;
    int vocab_size_ = 0;
};

}  // namespace couplet
