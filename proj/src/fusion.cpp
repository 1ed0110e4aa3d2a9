#include "couplet/fusion.hpp"

#include <cmath>
#include <random>

#include "couplet/error.hpp"

namespace couplet {

namespace {

void check_id(int id, int rows, const char* channel) {
    if (id < 0 || id >= rows) {
        throw Error(std::string("fusion: ") + channel + " id " + std::to_string(id) + " out of range [0, " +
                    std::to_string(rows) + ")");
    }
}

}  // namespace

double uniform_bound(int dim) { return std::sqrt(3.0 / static_cast<double>(dim)); }

EmbeddingTable init_glyph_table(const Vocab& vocab, const GlyphAtlas& atlas) {
    EmbeddingTable table{InitScheme::Glyph, Param(vocab.size(), kGlyphCells)};
    const RowVec unknown = glyph_to_weight(GlyphBitmap::unknown());
    for (int id = 0; id < vocab.size(); ++id) {
        if (id == Vocab::kPad) {
            table.weights.value.row(id).setZero();
        } else if (Vocab::is_special(id)) {
            table.weights.value.row(id) = unknown;
        } else {
            table.weights.value.row(id) = glyph_to_weight(render_glyph(vocab.char_of(id), atlas));
        }
    }
    return table;
}

EmbeddingTable init_uniform_table(int rows, int dim, std::uint64_t seed) {
    if (rows < 1 || dim < 1) {
        throw Error("init_uniform_table: rows and dim must be >= 1");
    }
    const double bound = uniform_bound(dim);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> uniform(-bound, bound);
    EmbeddingTable table{InitScheme::UniformSqrt3, Param(rows, dim)};
    for (Eigen::Index i = 0; i < table.weights.value.size(); ++i) {
        table.weights.value.data()[i] = uniform(gen);
    }
    return table;
}

EmbeddingTable init_normal_table(int rows, int dim, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    EmbeddingTable table{InitScheme::StandardNormal, Param(rows, dim)};
    for (Eigen::Index i = 0; i < table.weights.value.size(); ++i) {
        table.weights.value.data()[i] = normal(gen);
    }
    return table;
}

FusionSpec FusionSpec::anchi(int d_model) {
    FusionSpec spec;
    spec.use_glyph = false;
    spec.use_pinyin = false;
    spec.use_pos = false;
    spec.use_context = true;
    spec.d_model = d_model;
    return spec;
}

FusionSpec FusionSpec::fusion(int d_model, int pinyin_rows, int pos_rows) {
    FusionSpec spec;
    spec.d_model = d_model;
    spec.pinyin_rows = pinyin_rows;
    spec.pos_rows = pos_rows;
    return spec;
}

int FusionSpec::input_width() const {
    return (use_glyph ? glyph_dim : 0) + (use_pinyin ? pinyin_dim : 0) + (use_pos ? pos_dim : 0) +
           (use_context ? context_dim : 0);
}

void FusionSpec::validate() const {
    if (!use_glyph && !use_pinyin && !use_pos && !use_context) {
        throw Error("fusion spec: at least one channel must be active");
    }
    if (d_model <= 0 || d_model % 2 != 0) {
        throw Error("fusion spec: d_model must be even and positive");
    }
    if ((use_pinyin && pinyin_rows < 1) || (use_pos && pos_rows < 1)) {
        throw Error("fusion spec: table rows must be >= 1");
    }
}

FusionEmbedding::FusionEmbedding(FusionSpec spec, int vocab_size) : spec_(spec), vocab_size_(vocab_size) {
    spec_.validate();
    if (spec_.use_glyph) {
        glyph = EmbeddingTable{InitScheme::Glyph, Param(vocab_size, spec_.glyph_dim)};
    }
    if (spec_.use_pinyin) {
        pinyin = EmbeddingTable{InitScheme::UniformSqrt3, Param(spec_.pinyin_rows, spec_.pinyin_dim)};
    }
    if (spec_.use_pos) {
        pos = EmbeddingTable{InitScheme::UniformSqrt3, Param(spec_.pos_rows, spec_.pos_dim)};
    }
    if (spec_.use_context) {
        context = EmbeddingTable{InitScheme::StandardNormal, Param(vocab_size, spec_.context_dim)};
    }
    projection = Linear(spec_.input_width(), spec_.d_model);
}

void FusionEmbedding::initialize(const Vocab& vocab, const GlyphAtlas* atlas, std::uint64_t seed) {
    if (vocab.size() != vocab_size_) {
        throw Error("fusion embedding: vocab size mismatch");
    }
    std::mt19937_64 seeds(seed);
    const auto pinyin_seed = seeds();
    const auto pos_seed = seeds();
    const auto context_seed = seeds();
    std::mt19937_64 proj_gen(seeds());
    if (spec_.use_glyph) {
        glyph = init_glyph_table(vocab, atlas != nullptr ? *atlas : GlyphAtlas());
        if (spec_.glyph_dim != kGlyphCells) {
            throw Error("fusion embedding: glyph channel must be 576 wide");
        }
    }
    if (spec_.use_pinyin) {
        pinyin = init_uniform_table(spec_.pinyin_rows, spec_.pinyin_dim, pinyin_seed);
    }
    if (spec_.use_pos) {
        pos = init_uniform_table(spec_.pos_rows, spec_.pos_dim, pos_seed);
    }
    if (spec_.use_context) {
        context = init_normal_table(vocab_size_, spec_.context_dim, context_seed);
    }
    projection.initialize(proj_gen);
}

Mat FusionEmbedding::concat_channels(const ChannelInputs& in) const {
    const auto n = static_cast<Eigen::Index>(in.size());
    if (in.pinyin_ids.size() != in.size() || in.pos_ids.size() != in.size() || in.positions.size() != in.size()) {
        throw Error("fuse: channel length mismatch");
    }
    const bool external = in.context.size() > 0;
    if (spec_.use_context && external &&
        (in.context.rows() != n || in.context.cols() != spec_.context_dim ||
         (!in.context_external.empty() && in.context_external.size() != in.size()))) {
        throw Error("fuse: context matrix shape does not match the sequence");
    }
    Mat x(n, spec_.input_width());
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index col = 0;
        if (spec_.use_glyph) {
            check_id(in.char_ids[i], glyph.rows(), "glyph");
            x.row(i).segment(col, spec_.glyph_dim) = glyph.weights.value.row(in.char_ids[i]);
            col += spec_.glyph_dim;
        }
        if (spec_.use_pinyin) {
            check_id(in.pinyin_ids[i], pinyin.rows(), "pinyin");
            x.row(i).segment(col, spec_.pinyin_dim) = pinyin.weights.value.row(in.pinyin_ids[i]);
            col += spec_.pinyin_dim;
        }
        if (spec_.use_pos) {
            check_id(in.pos_ids[i], pos.rows(), "pos");
            x.row(i).segment(col, spec_.pos_dim) = pos.weights.value.row(in.pos_ids[i]);
            col += spec_.pos_dim;
        }
        if (spec_.use_context) {
            const bool row_external = external && (in.context_external.empty() || in.context_external[i] != 0);
            if (row_external) {
                x.row(i).segment(col, spec_.context_dim) = in.context.row(i);
            } else {
                check_id(in.char_ids[i], context.rows(), "context");
                x.row(i).segment(col, spec_.context_dim) = context.weights.value.row(in.char_ids[i]);
            }
        }
    }
    return x;
}

Mat FusionEmbedding::forward(const ChannelInputs& inputs, Cache* cache) const {
    Mat x = concat_channels(inputs);
    Mat y = projection.forward(x);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        y.row(i) += positional_row(inputs.positions[i], spec_.d_model);
    }
    if (cache != nullptr) {
        cache->inputs = inputs;
        cache->concat = std::move(x);
    }
    return y;
}

void FusionEmbedding::backward(const Mat& dy, const Cache& cache) {
    const Mat dx = projection.backward(cache.concat, dy);
    const auto& in = cache.inputs;
    const bool external = in.context.size() > 0;
    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        Eigen::Index col = 0;
        if (spec_.use_glyph) {
            glyph.weights.grad.row(in.char_ids[i]) += dx.row(i).segment(col, spec_.glyph_dim);
            col += spec_.glyph_dim;
        }
        if (spec_.use_pinyin) {
            pinyin.weights.grad.row(in.pinyin_ids[i]) += dx.row(i).segment(col, spec_.pinyin_dim);
            col += spec_.pinyin_dim;
        }
        if (spec_.use_pos) {
            pos.weights.grad.row(in.pos_ids[i]) += dx.row(i).segment(col, spec_.pos_dim);
            col += spec_.pos_dim;
        }
        if (spec_.use_context) {
            const bool row_external = external && (in.context_external.empty() || in.context_external[i] != 0);
            if (!row_external) {
                context.weights.grad.row(in.char_ids[i]) += dx.row(i).segment(col, spec_.context_dim);
            }
        }
    }
}

Mat FusionEmbedding::fuse(const AnnotatedSequence& annotated, const Mat& ctx) const {
    ChannelInputs in;
    in.char_ids = annotated.char_ids;
    in.pinyin_ids = annotated.pinyin_ids;
    in.pos_ids = annotated.pos_ids;
    in.positions.resize(annotated.size());
    for (std::size_t i = 0; i < in.positions.size(); ++i) {
        in.positions[i] = static_cast<int>(i);
    }
    if (spec_.use_context) {
        if (ctx.rows() != static_cast<Eigen::Index>(annotated.size()) || ctx.cols() != spec_.context_dim) {
            throw Error("fuse: context matrix must be L × " + std::to_string(spec_.context_dim));
        }
        in.context = ctx;
    }
    return forward(in, nullptr);
}

void FusionEmbedding::visit(const std::function<void(const std::string&, Param&)>& fn) {
    if (spec_.use_glyph) {
        fn("embed.glyph", glyph.weights);
    }
    if (spec_.use_pinyin) {
        fn("embed.pinyin", pinyin.weights);
    }
    if (spec_.use_pos) {
        fn("embed.pos", pos.weights);
    }
    if (spec_.use_context) {
        fn("embed.context", context.weights);
    }
    fn("embed.proj.w", projection.w);
    fn("embed.proj.b", projection.b);
}

}  // namespace couplet
