#include "couplet/transformer.hpp"

#include <algorithm>

#include "couplet/error.hpp"

namespace couplet {

namespace {

Segments segments_of(const TokenBlock& block) {
    std::vector<int> lengths(block.batch);
    for (int b = 0; b < block.batch; ++b) {
        lengths[b] = block.row_length(b);
        if (lengths[b] == 0) {
            throw Error("model input row " + std::to_string(b) + " is empty");
        }
    }
    return Segments::from_lengths(lengths);
}

void visit_linear(const std::string& name, Linear& linear, const std::function<void(const std::string&, Param&)>& fn) {
    fn(name + ".w", linear.w);
    fn(name + ".b", linear.b);
}

void visit_norm(const std::string& name, LayerNorm& norm, const std::function<void(const std::string&, Param&)>& fn) {
    fn(name + ".gamma", norm.gamma);
    fn(name + ".beta", norm.beta);
}

void visit_attention(const std::string& name, MultiHeadAttention& attn,
                     const std::function<void(const std::string&, Param&)>& fn) {
    visit_linear(name + ".q", attn.q, fn);
    visit_linear(name + ".k", attn.k, fn);
    visit_linear(name + ".v", attn.v, fn);
    visit_linear(name + ".o", attn.o, fn);
}

Dropout maybe_dropout(const Mat& like, Mode mode, double rate, std::mt19937_64* gen) {
    if (mode != Mode::Train || rate <= 0.0) {
        return {};
    }
    if (gen == nullptr) {
        throw Error("train-mode forward needs a generator for dropout");
    }
    return Dropout::sample(like.rows(), like.cols(), rate, *gen);
}

}  // namespace

std::string to_string(Variant variant) {
    return variant == Variant::DecoderOnly ? "decoder-only" : "encoder-decoder";
}

Variant parse_variant(const std::string& name) {
    if (name == "decoder-only") {
        return Variant::DecoderOnly;
    }
    if (name == "encoder-decoder") {
        return Variant::EncoderDecoder;
    }
    throw Error("unknown model variant '" + name + "'");
}

ModelConfig ModelConfig::desk(Variant variant, int vocab_size) {
    ModelConfig config;
    config.variant = variant;
    config.enc_layers = variant == Variant::EncoderDecoder ? 2 : 0;
    config.dec_layers = 2;
    config.n_heads = 4;
    config.d_model = 128;
    config.d_ff = 4 * config.d_model;
    config.vocab_size = vocab_size;
    return config;
}

ModelConfig ModelConfig::full(Variant variant, int vocab_size) {
    ModelConfig config;
    config.variant = variant;
    config.enc_layers = variant == Variant::EncoderDecoder ? 6 : 0;
    config.dec_layers = 6;
    config.n_heads = 12;
    config.d_model = 768;
    config.d_ff = 4 * config.d_model;
    config.vocab_size = vocab_size;
    return config;
}

int ModelConfig::max_positions() const { return variant == Variant::DecoderOnly ? 2 * max_len + 2 : max_len + 1; }

void ModelConfig::validate() const {
    if (n_heads <= 0 || d_model <= 0 || d_model % n_heads != 0) {
        throw Error("model config: d_model " + std::to_string(d_model) + " must be divisible by n_heads " +
                    std::to_string(n_heads));
    }
    if (d_model % 2 != 0) {
        throw Error("model config: d_model must be even");
    }
    if (enc_layers < 0 || dec_layers < 0 || d_ff <= 0 || max_len < 1) {
        throw Error("model config: layer counts, d_ff and max_len must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw Error("model config: dropout must be in [0, 1)");
    }
    if (vocab_size <= Vocab::kNumSpecials) {
        throw Error("model config: vocab_size must exceed the special tokens");
    }
}

TokenBlock TokenBlock::from_rows(const std::vector<std::vector<int>>& rows, int pad_id) {
    TokenBlock block;
    block.batch = static_cast<int>(rows.size());
    for (const auto& row : rows) {
        block.length = std::max(block.length, static_cast<int>(row.size()));
    }
    block.tokens.assign(static_cast<std::size_t>(block.batch) * block.length, pad_id);
    block.mask.assign(block.tokens.size(), 0);
    for (int b = 0; b < block.batch; ++b) {
        for (std::size_t t = 0; t < rows[b].size(); ++t) {
            block.tokens[static_cast<std::size_t>(b) * block.length + t] = rows[b][t];
            block.mask[static_cast<std::size_t>(b) * block.length + t] = 1;
        }
    }
    return block;
}

int TokenBlock::row_length(int b) const {
    int n = 0;
    bool ended = false;
    for (int t = 0; t < length; ++t) {
        const bool real = mask[static_cast<std::size_t>(b) * length + t] != 0;
        if (real && ended) {
            throw Error("token block row " + std::to_string(b) + ": mask is not a prefix");
        }
        ended = ended || !real;
        n += real ? 1 : 0;
    }
    return n;
}

std::span<const int> TokenBlock::row(int b) const {
    return std::span<const int>(tokens).subspan(static_cast<std::size_t>(b) * length, row_length(b));
}

TeacherForcedBatch make_teacher_forced(const Batch& batch, Variant variant) {
    std::vector<std::vector<int>> sources;
    std::vector<std::vector<int>> inputs;
    std::vector<std::vector<int>> targets;
    std::vector<std::vector<std::uint8_t>> losses;
    for (int b = 0; b < batch.size; ++b) {
        const auto upper = batch.upper_row(b);
        const auto lower = batch.lower_row(b);
        std::vector<int> in;
        std::vector<int> tgt;
        std::vector<std::uint8_t> loss;
        if (variant == Variant::DecoderOnly) {
            in.push_back(Vocab::kBos);
            in.insert(in.end(), upper.begin(), upper.end());
            in.push_back(Vocab::kSep);
            in.insert(in.end(), lower.begin(), lower.end());
            tgt.insert(tgt.end(), upper.begin(), upper.end());
            tgt.push_back(Vocab::kSep);
            tgt.insert(tgt.end(), lower.begin(), lower.end());
            tgt.push_back(Vocab::kEos);
            loss.assign(in.size(), 0);
            std::fill(loss.begin() + static_cast<std::ptrdiff_t>(upper.size()) + 1, loss.end(), 1);
        } else {
            sources.emplace_back(upper.begin(), upper.end());
            in.push_back(Vocab::kBos);
            in.insert(in.end(), lower.begin(), lower.end());
            tgt.assign(lower.begin(), lower.end());
            tgt.push_back(Vocab::kEos);
            loss.assign(in.size(), 1);
        }
        inputs.push_back(std::move(in));
        targets.push_back(std::move(tgt));
        losses.push_back(std::move(loss));
    }
    TeacherForcedBatch out;
    if (variant == Variant::EncoderDecoder) {
        out.input.source = TokenBlock::from_rows(sources);
    }
    out.input.target = TokenBlock::from_rows(inputs);
    const auto length = static_cast<std::size_t>(out.input.target.length);
    out.targets.assign(static_cast<std::size_t>(batch.size) * length, Vocab::kPad);
    out.loss_mask.assign(out.targets.size(), 0);
    for (std::size_t b = 0; b < targets.size(); ++b) {
        std::copy(targets[b].begin(), targets[b].end(), out.targets.begin() + static_cast<std::ptrdiff_t>(b * length));
        std::copy(losses[b].begin(), losses[b].end(), out.loss_mask.begin() + static_cast<std::ptrdiff_t>(b * length));
    }
    return out;
}

ModelInput make_generation_input(std::span<const int> upper, const std::vector<std::vector<int>>& prefixes,
                                 Variant variant) {
    std::vector<std::vector<int>> sources;
    std::vector<std::vector<int>> inputs;
    for (const auto& prefix : prefixes) {
        std::vector<int> in{Vocab::kBos};
        if (variant == Variant::DecoderOnly) {
            in.insert(in.end(), upper.begin(), upper.end());
            in.push_back(Vocab::kSep);
        } else {
            sources.emplace_back(upper.begin(), upper.end());
        }
        in.insert(in.end(), prefix.begin(), prefix.end());
        inputs.push_back(std::move(in));
    }
    ModelInput input;
    if (variant == Variant::EncoderDecoder) {
        input.source = TokenBlock::from_rows(sources);
    }
    input.target = TokenBlock::from_rows(inputs);
    return input;
}

TransformerBlock::TransformerBlock(int d_model, int n_heads, int d_ff, bool cross)
    : ln_self(d_model),
      self_attn(d_model, n_heads),
      has_cross(cross),
      ln_ff(d_model),
      ff1(d_model, d_ff),
      ff2(d_ff, d_model) {
    if (cross) {
        ln_cross = LayerNorm(d_model);
        cross_attn = MultiHeadAttention(d_model, n_heads);
    }
}

void TransformerBlock::initialize(std::mt19937_64& gen) {
    self_attn.initialize(gen);
    if (has_cross) {
        cross_attn.initialize(gen);
    }
    ff1.initialize(gen);
    ff2.initialize(gen);
}

void TransformerBlock::visit(const std::string& prefix, const std::function<void(const std::string&, Param&)>& fn) {
    visit_norm(prefix + ".ln_self", ln_self, fn);
    visit_attention(prefix + ".self", self_attn, fn);
    if (has_cross) {
        visit_norm(prefix + ".ln_cross", ln_cross, fn);
        visit_attention(prefix + ".cross", cross_attn, fn);
    }
    visit_norm(prefix + ".ln_ff", ln_ff, fn);
    visit_linear(prefix + ".ff1", ff1, fn);
    visit_linear(prefix + ".ff2", ff2, fn);
}

Model::Model(ModelConfig config, FusionSpec fusion, TokenAnnotations annotations)
    : config_(config), annotations_(std::move(annotations)) {
    config_.validate();
    if (fusion.d_model != config_.d_model) {
        throw Error("fusion d_model " + std::to_string(fusion.d_model) + " differs from model d_model " +
                    std::to_string(config_.d_model));
    }
    if (static_cast<int>(annotations_.pinyin_of_token.size()) != config_.vocab_size ||
        static_cast<int>(annotations_.pos_of_token.size()) != config_.vocab_size) {
        throw Error("token annotations must cover the vocabulary");
    }
    for (int id = 0; id < config_.vocab_size; ++id) {
        if ((fusion.use_pinyin && annotations_.pinyin_of_token[id] >= fusion.pinyin_rows) ||
            (fusion.use_pos && annotations_.pos_of_token[id] >= fusion.pos_rows)) {
            throw Error("token annotations exceed the pinyin/POS table sizes");
        }
    }
    embed_ = FusionEmbedding(fusion, config_.vocab_size);
    const bool enc_dec = config_.variant == Variant::EncoderDecoder;
    if (enc_dec) {
        for (int i = 0; i < config_.enc_layers; ++i) {
            encoder_.emplace_back(config_.d_model, config_.n_heads, config_.d_ff, false);
        }
        enc_norm_ = LayerNorm(config_.d_model);
    }
    for (int i = 0; i < config_.dec_layers; ++i) {
        decoder_.emplace_back(config_.d_model, config_.n_heads, config_.d_ff, enc_dec);
    }
    dec_norm_ = LayerNorm(config_.d_model);
    output_ = Linear(config_.d_model, config_.vocab_size);
}

void Model::initialize(const Vocab& vocab, const GlyphAtlas* atlas, std::uint64_t seed) {
    if (vocab.size() != config_.vocab_size) {
        throw Error("model vocab_size " + std::to_string(config_.vocab_size) + " does not match vocab of " +
                    std::to_string(vocab.size()));
    }
    std::mt19937_64 seeds(seed);
    embed_.initialize(vocab, atlas, seeds());
    std::mt19937_64 gen(seeds());
    for (auto& block : encoder_) {
        block.initialize(gen);
    }
    for (auto& block : decoder_) {
        block.initialize(gen);
    }
    output_.initialize(gen);
}

ChannelInputs Model::channel_inputs(const TokenBlock& block, const Segments& seg, bool is_source) const {
    ChannelInputs in;
    in.char_ids.reserve(seg.total);
    for (int b = 0; b < block.batch; ++b) {
        for (int t = 0; t < seg.length[b]; ++t) {
            const int id = block.tokens[static_cast<std::size_t>(b) * block.length + t];
            if (id < 0 || id >= config_.vocab_size) {
                throw Error("token id " + std::to_string(id) + " outside the vocabulary");
            }
            in.char_ids.push_back(id);
            in.pinyin_ids.push_back(annotations_.pinyin_of_token[id]);
            in.pos_ids.push_back(annotations_.pos_of_token[id]);
            in.positions.push_back(t);
        }
    }
    if (!context_file_ || !embed_.spec().use_context) {
        return in;
    }
    const bool dec_only = config_.variant == Variant::DecoderOnly;
    if (!is_source && !dec_only) {
        return in;
    }
    in.context = Mat::Zero(seg.total, embed_.spec().context_dim);
    in.context_external.assign(seg.total, 0);
    const auto provider = ContextualProvider::precomputed(*context_file_);
    for (int b = 0; b < block.batch; ++b) {
        const auto row = std::span<const int>(in.char_ids).subspan(seg.offset[b], seg.length[b]);
        std::size_t begin = 0;
        std::size_t end = row.size();
        if (!is_source) {
            // BOS + upper + SEP + ...
            begin = 1;
            const auto sep = std::find(row.begin(), row.end(), Vocab::kSep);
            end = static_cast<std::size_t>(sep - row.begin());
        }
        if (end <= begin) {
            continue;
        }
        const Mat rows = contextual_embed(row.subspan(begin, end - begin), provider);
        in.context.block(seg.offset[b] + static_cast<Eigen::Index>(begin), 0, rows.rows(), rows.cols()) = rows;
        std::fill_n(in.context_external.begin() + seg.offset[b] + static_cast<std::ptrdiff_t>(begin), end - begin, 1);
    }
    return in;
}

Mat Model::block_forward(const TransformerBlock& block, const Mat& x, const Mat* memory, const Segments& seg,
                         const Segments* mem_seg, bool causal, Mode mode, std::mt19937_64* gen,
                         BlockCache& c) const {
    const double rate = config_.dropout;
    const Mat a = block.ln_self.forward(x, &c.ln_self);
    const Mat s = block.self_attn.forward(a, nullptr, seg, seg, causal, &c.self_attn);
    c.drop_self = maybe_dropout(s, mode, rate, gen);
    Mat h = x + c.drop_self.apply(s);
    if (block.has_cross) {
        const Mat ci = block.ln_cross.forward(h, &c.ln_cross);
        const Mat cr = block.cross_attn.forward(ci, memory, seg, *mem_seg, false, &c.cross_attn);
        c.drop_cross = maybe_dropout(cr, mode, rate, gen);
        h += c.drop_cross.apply(cr);
    }
    c.ff_in = block.ln_ff.forward(h, &c.ln_ff);
    c.ff_pre = block.ff1.forward(c.ff_in);
    c.ff_act = gelu(c.ff_pre);
    const Mat y = block.ff2.forward(c.ff_act);
    c.drop_ff = maybe_dropout(y, mode, rate, gen);
    h += c.drop_ff.apply(y);
    return h;
}

Mat Model::block_backward(TransformerBlock& block, const Mat& dout, const Segments& seg, const Segments* mem_seg,
                          bool causal, BlockCache& c, Mat* dmemory) {
    const Mat dy = c.drop_ff.backward(dout);
    const Mat dact = block.ff2.backward(c.ff_act, dy);
    const Mat dpre = gelu_backward(c.ff_pre, dact);
    const Mat dff_in = block.ff1.backward(c.ff_in, dpre);
    Mat dh = dout + block.ln_ff.backward(dff_in, c.ln_ff);
    if (block.has_cross) {
        const Mat dcr = c.drop_cross.backward(dh);
        auto grads = block.cross_attn.backward(dcr, seg, *mem_seg, false, c.cross_attn);
        dh += block.ln_cross.backward(grads.dx, c.ln_cross);
        *dmemory += grads.dmemory;
    }
    const Mat ds = c.drop_self.backward(dh);
    auto grads = block.self_attn.backward(ds, seg, seg, causal, c.self_attn);
    return dh + block.ln_self.backward(grads.dx, c.ln_self);
}

Mat Model::encoder_forward(const TokenBlock& source, Mode mode, std::mt19937_64* gen, Cache* cache) const {
    if (config_.variant != Variant::EncoderDecoder) {
        throw Error("encoder_forward: decoder-only model has no encoder");
    }
    Cache local;
    Cache& c = cache != nullptr ? *cache : local;
    c.src_seg = segments_of(source);
    for (int n : c.src_seg.length) {
        if (n > config_.max_len) {
            throw Error("source length " + std::to_string(n) + " exceeds max_len " + std::to_string(config_.max_len));
        }
    }
    Mat x = embed_.forward(channel_inputs(source, c.src_seg, true), &c.src_embed);
    c.src_drop = maybe_dropout(x, mode, config_.dropout, gen);
    x = c.src_drop.apply(x);
    c.enc.assign(encoder_.size(), BlockCache{});
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        x = block_forward(encoder_[i], x, nullptr, c.src_seg, nullptr, false, mode, gen, c.enc[i]);
    }
    c.memory = enc_norm_.forward(x, &c.enc_norm);
    return c.memory;
}

Mat Model::hidden_forward(const ModelInput& input, Mode mode, std::mt19937_64* gen, Cache& c) const {
    const bool enc_dec = config_.variant == Variant::EncoderDecoder;
    c.batch = input.target.batch;
    c.length = input.target.length;
    c.tgt_seg = segments_of(input.target);
    for (int n : c.tgt_seg.length) {
        if (n > config_.max_positions()) {
            throw Error("sequence length " + std::to_string(n) + " exceeds the model limit " +
                        std::to_string(config_.max_positions()));
        }
    }
    if (enc_dec) {
        if (input.source.batch != input.target.batch) {
            throw Error("encoder-decoder input: source and target batch sizes differ");
        }
        encoder_forward(input.source, mode, gen, &c);
    }
    Mat x = embed_.forward(channel_inputs(input.target, c.tgt_seg, false), &c.tgt_embed);
    c.tgt_drop = maybe_dropout(x, mode, config_.dropout, gen);
    x = c.tgt_drop.apply(x);
    c.dec.assign(decoder_.size(), BlockCache{});
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        x = block_forward(decoder_[i], x, enc_dec ? &c.memory : nullptr, c.tgt_seg, enc_dec ? &c.src_seg : nullptr,
                          true, mode, gen, c.dec[i]);
    }
    c.padded_row.clear();
    c.padded_row.reserve(c.tgt_seg.total);
    for (int b = 0; b < c.batch; ++b) {
        for (int t = 0; t < c.tgt_seg.length[b]; ++t) {
            c.padded_row.push_back(static_cast<Eigen::Index>(b) * c.length + t);
        }
    }
    return dec_norm_.forward(x, &c.dec_norm);
}

Mat Model::forward(const ModelInput& input, Mode mode, std::mt19937_64* gen, Cache* cache) const {
    Cache local;
    Cache& c = cache != nullptr ? *cache : local;
    c.hidden = hidden_forward(input, mode, gen, c);
    const Mat packed = output_.forward(c.hidden);
    Mat logits = Mat::Zero(static_cast<Eigen::Index>(c.batch) * c.length, config_.vocab_size);
    for (Eigen::Index i = 0; i < packed.rows(); ++i) {
        logits.row(c.padded_row[i]) = packed.row(i);
    }
    return logits;
}

Mat Model::next_logits(const ModelInput& input) const {
    Cache c;
    const Mat hidden = hidden_forward(input, Mode::Eval, nullptr, c);
    Mat last(c.batch, hidden.cols());
    for (int b = 0; b < c.batch; ++b) {
        last.row(b) = hidden.row(c.tgt_seg.offset[b] + c.tgt_seg.length[b] - 1);
    }
    return output_.forward(last);
}

void Model::backward(const Mat& dlogits, Cache& c) {
    if (dlogits.rows() != static_cast<Eigen::Index>(c.batch) * c.length || dlogits.cols() != config_.vocab_size) {
        throw Error("backward: gradient shape does not match the forward pass");
    }
    const bool enc_dec = config_.variant == Variant::EncoderDecoder;
    Mat dpacked(static_cast<Eigen::Index>(c.padded_row.size()), dlogits.cols());
    for (Eigen::Index i = 0; i < dpacked.rows(); ++i) {
        dpacked.row(i) = dlogits.row(c.padded_row[i]);
    }
    Mat dx = dec_norm_.backward(output_.backward(c.hidden, dpacked), c.dec_norm);
    Mat dmemory;
    if (enc_dec) {
        dmemory = Mat::Zero(c.memory.rows(), c.memory.cols());
    }
    for (std::size_t i = decoder_.size(); i-- > 0;) {
        dx = block_backward(decoder_[i], dx, c.tgt_seg, enc_dec ? &c.src_seg : nullptr, true, c.dec[i], &dmemory);
    }
    embed_.backward(c.tgt_drop.backward(dx), c.tgt_embed);
    if (enc_dec) {
        Mat ds = enc_norm_.backward(dmemory, c.enc_norm);
        for (std::size_t i = encoder_.size(); i-- > 0;) {
            ds = block_backward(encoder_[i], ds, c.src_seg, nullptr, false, c.enc[i], nullptr);
        }
        embed_.backward(c.src_drop.backward(ds), c.src_embed);
    }
}

void Model::zero_grad() {
    visit([](const std::string&, Param& p) { p.zero_grad(); });
}

void Model::visit(const std::function<void(const std::string&, Param&)>& fn) {
    embed_.visit(fn);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        encoder_[i].visit("encoder." + std::to_string(i), fn);
    }
    if (config_.variant == Variant::EncoderDecoder) {
        visit_norm("encoder.norm", enc_norm_, fn);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        decoder_[i].visit("decoder." + std::to_string(i), fn);
    }
    visit_norm("decoder.norm", dec_norm_, fn);
    visit_linear("out", output_, fn);
}

void Model::visit(const std::function<void(const std::string&, const Param&)>& fn) const {
    const_cast<Model*>(this)->visit([&fn](const std::string& name, Param& p) { fn(name, p); });
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const Param& p) { n += p.size(); });
    return n;
}

std::size_t count_params(const ModelConfig& config, const FusionSpec& fusion) {
    using std::size_t;
    const auto d = static_cast<size_t>(config.d_model);
    const auto ff = static_cast<size_t>(config.d_ff);
    const auto v = static_cast<size_t>(config.vocab_size);
    const auto linear = [](size_t in, size_t out) { return in * out + out; };
    const size_t norm = 2 * d;
    const size_t attention = 4 * linear(d, d);

    size_t n = 0;
    if (fusion.use_glyph) {
        n += v * static_cast<size_t>(fusion.glyph_dim);
    }
    if (fusion.use_pinyin) {
        n += static_cast<size_t>(fusion.pinyin_rows) * fusion.pinyin_dim;
    }
    if (fusion.use_pos) {
        n += static_cast<size_t>(fusion.pos_rows) * fusion.pos_dim;
    }
    if (fusion.use_context) {
        n += v * static_cast<size_t>(fusion.context_dim);
    }
    n += linear(static_cast<size_t>(fusion.input_width()), d);

    const size_t block = 2 * norm + attention + linear(d, ff) + linear(ff, d);
    if (config.variant == Variant::EncoderDecoder) {
        n += static_cast<size_t>(config.enc_layers) * block + norm;
        n += static_cast<size_t>(config.dec_layers) * (block + norm + attention);
    } else {
        n += static_cast<size_t>(config.dec_layers) * block;
    }
    n += norm;
    n += linear(d, v);
    return n;
}

}  // namespace couplet
