#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "couplet/annotation.hpp"
#include "couplet/corpus.hpp"
#include "couplet/fusion.hpp"
#include "couplet/layers.hpp"

namespace couplet {

enum class Variant { DecoderOnly, EncoderDecoder };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

struct ModelConfig {
    Variant variant = Variant::DecoderOnly;
    int enc_layers = 2;  // unused by the decoder-only variant
    int dec_layers = 2;
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    double dropout = 0.1;
    int vocab_size = 0;
    // Longest couplet line the model accepts.
    int max_len = kDefaultMaxLen;

    // 2 layers, 4 heads, d_model 128.
    static ModelConfig desk(Variant variant, int vocab_size);
    // 6 + 6 layers, 12 heads, d_model 768.
    static ModelConfig full(Variant variant, int vocab_size);

    // Longest decoder input: BOS + upper + SEP + lower for decoder-only,
    // BOS + lower for encoder-decoder.
    int max_positions() const;
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Padded B × L token ids with a 1/0 mask; real tokens form a prefix of each row.
struct TokenBlock {
    int batch = 0;
    int length = 0;
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask;

    static TokenBlock from_rows(const std::vector<std::vector<int>>& rows, int pad_id = Vocab::kPad);
    int row_length(int b) const;
    std::span<const int> row(int b) const;
};

// `source` is empty for the decoder-only variant.
struct ModelInput {
    TokenBlock source;
    TokenBlock target;
};

// Teacher-forced inputs with next-token targets aligned to input.target.
struct TeacherForcedBatch {
    ModelInput input;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
};

// Decoder-only: input BOS+upper+SEP+lower, targets shifted by one, loss on
// lower+EOS only. Encoder-decoder: source upper, input BOS+lower, target lower+EOS.
TeacherForcedBatch make_teacher_forced(const Batch& batch, Variant variant);

// Inputs for scoring the next token after `prefix` (lower-line tokens so far).
ModelInput make_generation_input(std::span<const int> upper, const std::vector<std::vector<int>>& prefixes,
                                 Variant variant);

enum class Mode { Eval, Train };

struct TransformerBlock {
    LayerNorm ln_self;
    MultiHeadAttention self_attn;
    bool has_cross = false;
    LayerNorm ln_cross;
    MultiHeadAttention cross_attn;
    LayerNorm ln_ff;
    Linear ff1;
    Linear ff2;

    TransformerBlock() = default;
    TransformerBlock(int d_model, int n_heads, int d_ff, bool cross);
    void initialize(std::mt19937_64& gen);
    void visit(const std::string& prefix, const std::function<void(const std::string&, Param&)>& fn);
};

class Model {
public:
    struct BlockCache {
        LayerNorm::Cache ln_self;
        LayerNorm::Cache ln_cross;
        LayerNorm::Cache ln_ff;
        MultiHeadAttention::Cache self_attn;
        MultiHeadAttention::Cache cross_attn;
        Dropout drop_self;
        Dropout drop_cross;
        Dropout drop_ff;
        Mat ff_in;
        Mat ff_pre;
        Mat ff_act;
    };

    struct Cache {
        Segments src_seg;
        Segments tgt_seg;
        FusionEmbedding::Cache src_embed;
        FusionEmbedding::Cache tgt_embed;
        Dropout src_drop;
        Dropout tgt_drop;
        std::vector<BlockCache> enc;
        std::vector<BlockCache> dec;
        LayerNorm::Cache enc_norm;
        LayerNorm::Cache dec_norm;
        Mat memory;
        Mat hidden;
        std::vector<Eigen::Index> padded_row;  // packed row → padded row
        int batch = 0;
        int length = 0;
    };

    Model() = default;
    Model(ModelConfig config, FusionSpec fusion, TokenAnnotations annotations);

    void initialize(const Vocab& vocab, const GlyphAtlas* atlas, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const FusionSpec& fusion_spec() const { return embed_.spec(); }
    const TokenAnnotations& annotations() const { return annotations_; }
    FusionEmbedding& embedding() { return embed_; }
    const FusionEmbedding& embedding() const { return embed_; }

    // Precomputed contextual vectors for the upper line. Positions without a
    // record source (specials, lower-line tokens) keep using the table.
    void set_context_file(std::shared_ptr<const PrecomputedContext> file) { context_file_ = std::move(file); }
    const std::shared_ptr<const PrecomputedContext>& context_file() const { return context_file_; }

    // Logits for every target position: (B·L) × V, rows of padding are zero.
    // Train mode samples dropout masks from `gen`.
    Mat forward(const ModelInput& input, Mode mode, std::mt19937_64* gen, Cache* cache) const;
    // Accumulates gradients of every parameter given dL/dlogits.
    void backward(const Mat& dlogits, Cache& cache);

    // Eval-mode logits at the last real target position of each row: B × V.
    Mat next_logits(const ModelInput& input) const;

    Mat encoder_forward(const TokenBlock& source, Mode mode, std::mt19937_64* gen, Cache* cache) const;

    void zero_grad();
    void visit(const std::function<void(const std::string&, Param&)>& fn);
    void visit(const std::function<void(const std::string&, const Param&)>& fn) const;
    // Number of stored parameter elements, by walking the store.
    std::size_t parameter_count() const;

    std::vector<TransformerBlock>& encoder_blocks() { return encoder_; }
    std::vector<TransformerBlock>& decoder_blocks() { return decoder_; }
    Linear& output_projection() { return output_; }

private:
    Mat hidden_forward(const ModelInput& input, Mode mode, std::mt19937_64* gen, Cache& cache) const;
    ChannelInputs channel_inputs(const TokenBlock& block, const Segments& seg, bool is_source) const;
    Mat block_forward(const TransformerBlock& block, const Mat& x, const Mat* memory, const Segments& seg,
                      const Segments* mem_seg, bool causal, Mode mode, std::mt19937_64* gen,
                      BlockCache& cache) const;
    Mat block_backward(TransformerBlock& block, const Mat& dout, const Segments& seg, const Segments* mem_seg,
                       bool causal, BlockCache& cache, Mat* dmemory);

    ModelConfig config_;
    TokenAnnotations annotations_;
    FusionEmbedding embed_;
    std::vector<TransformerBlock> encoder_;
    std::vector<TransformerBlock> decoder_;
    LayerNorm enc_norm_;
    LayerNorm dec_norm_;
    Linear output_;
    std::shared_ptr<const PrecomputedContext> context_file_;
};

// Closed-form parameter count for a configuration.
std::size_t count_params(const ModelConfig& config, const FusionSpec& fusion);

}  // namespace couplet
