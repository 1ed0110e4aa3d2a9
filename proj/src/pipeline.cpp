#include "couplet/pipeline.hpp"

#include <fstream>
#include <memory>

#include "couplet/error.hpp"

namespace couplet {

namespace {

std::filesystem::path resolve(const std::string& value, const std::filesystem::path& base_dir) {
    if (value.empty()) {
        return {};
    }
    std::filesystem::path p(value);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

void require_file(const std::filesystem::path& p, const std::string& key) {
    if (p.empty()) {
        throw UsageError("missing setting " + key);
    }
}

std::uint64_t dropout_seed(std::uint64_t seed) { return seed ^ 0xD1B54A32D192ED03ULL; }

}  // namespace

const std::vector<SystemSpec>& all_systems() {
    static const std::vector<SystemSpec> systems = {
        {"anchi-decoder", Variant::DecoderOnly, false},
        {"anchi-transformer", Variant::EncoderDecoder, false},
        {"fusion-decoder", Variant::DecoderOnly, true},
        {"fusion-transformer", Variant::EncoderDecoder, true},
    };
    return systems;
}

const SystemSpec& system_by_name(const std::string& name) {
    for (const auto& s : all_systems()) {
        if (s.name == name) {
            return s;
        }
    }
    throw UsageError("unknown system '" + name +
                     "' (expected anchi-decoder, anchi-transformer, fusion-decoder or fusion-transformer)");
}

void RunConfig::apply(const detail::KeyValues& kv, const std::filesystem::path& base_dir) {
    if (kv.has("model.preset")) {
        preset = kv.get("model.preset");
        if (preset == "desk") {
            model = ModelConfig::desk(model.variant, model.vocab_size);
            train.batch_size = TrainConfig::desk().batch_size;
        } else if (preset == "full") {
            model = ModelConfig::full(model.variant, model.vocab_size);
            train.batch_size = TrainConfig().batch_size;
        } else {
            throw UsageError("model.preset must be desk or full");
        }
    }
    const std::pair<const char*, std::filesystem::path RunPaths::*> path_keys[] = {
        {"paths.corpus_upper", &RunPaths::corpus_upper}, {"paths.corpus_lower", &RunPaths::corpus_lower},
        {"paths.corpus_tsv", &RunPaths::corpus_tsv},     {"paths.vocab", &RunPaths::vocab},
        {"paths.atlas", &RunPaths::atlas},               {"paths.pinyin", &RunPaths::pinyin},
        {"paths.pos", &RunPaths::pos},                   {"paths.tagset", &RunPaths::tagset},
        {"paths.context_file", &RunPaths::context_file}, {"paths.checkpoint", &RunPaths::checkpoint},
        {"paths.log", &RunPaths::log},                   {"paths.report", &RunPaths::report},
        {"paths.test_tsv", &RunPaths::test_tsv},         {"paths.test_upper", &RunPaths::test_upper},
        {"paths.test_lower", &RunPaths::test_lower},
    };
    try {
        for (const auto& [key, value] : kv.entries()) {
            bool known = key == "model.preset";
            for (const auto& [name, member] : path_keys) {
                if (key == name) {
                    paths.*member = resolve(value, base_dir);
                    known = true;
                }
            }
            if (known) {
                continue;
            }
            if (key == "model.system") {
                system = value;
                model.variant = system_by_name(system).variant;
            } else if (key == "model.enc_layers") {
                model.enc_layers = kv.get_int(key);
            } else if (key == "model.dec_layers") {
                model.dec_layers = kv.get_int(key);
            } else if (key == "model.n_heads") {
                model.n_heads = kv.get_int(key);
            } else if (key == "model.d_model") {
                model.d_model = kv.get_int(key);
            } else if (key == "model.d_ff") {
                model.d_ff = kv.get_int(key);
            } else if (key == "model.dropout") {
                model.dropout = kv.get_double(key);
            } else if (key == "model.max_len") {
                model.max_len = kv.get_int(key);
            } else if (key == "model.context_dim") {
                context_dim = kv.get_int(key);
            } else if (key == "train.learning_rate") {
                train.learning_rate = kv.get_double(key);
            } else if (key == "train.batch_size") {
                train.batch_size = kv.get_int(key);
            } else if (key == "train.epochs") {
                train.epochs = kv.get_int(key);
            } else if (key == "train.max_steps") {
                train.max_steps = kv.get_int64(key);
            } else if (key == "train.seed") {
                train.seed = kv.get_uint64(key);
            } else if (key == "train.checkpoint_every") {
                train.checkpoint_every = kv.get_int64(key);
            } else if (key == "train.clip_grad_norm") {
                train.clip_grad_norm = kv.get_bool(key);
            } else if (key == "train.validation_fraction") {
                train.validation_fraction = kv.get_double(key);
            } else if (key == "train.min_freq") {
                min_freq = kv.get_int(key);
            } else if (key == "decode.beam_width") {
                decode.beam_width = kv.get_int(key);
            } else if (key == "decode.enforce_length") {
                decode.enforce_length = kv.get_bool(key);
            } else {
                throw UsageError("unknown config key " + key);
            }
        }
    } catch (const UsageError&) {
        throw;
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (decode.beam_width < 1) {
        throw UsageError("decode.beam_width must be >= 1");
    }
    if (min_freq < 1) {
        throw UsageError("train.min_freq must be >= 1");
    }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open config " + path.string());
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    RunConfig cfg;
    try {
        cfg.apply(detail::KeyValues::parse(text, path.string()), path.parent_path());
    } catch (const UsageError&) {
        throw;
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

LoadResult load_corpus(const RunConfig& cfg) {
    if (!cfg.paths.corpus_tsv.empty()) {
        return load_couplets_tsv(cfg.paths.corpus_tsv, cfg.model.max_len);
    }
    require_file(cfg.paths.corpus_upper, "paths.corpus_upper (or paths.corpus_tsv)");
    require_file(cfg.paths.corpus_lower, "paths.corpus_lower");
    return load_couplets(cfg.paths.corpus_upper, cfg.paths.corpus_lower, cfg.model.max_len);
}

LoadResult load_test_set(const RunConfig& cfg) {
    if (!cfg.paths.test_tsv.empty()) {
        return load_couplets_tsv(cfg.paths.test_tsv, cfg.model.max_len);
    }
    require_file(cfg.paths.test_upper, "paths.test_upper (or paths.test_tsv)");
    require_file(cfg.paths.test_lower, "paths.test_lower");
    return load_couplets(cfg.paths.test_upper, cfg.paths.test_lower, cfg.model.max_len);
}

Lexicons load_lexicons(const RunConfig& cfg) {
    require_file(cfg.paths.pinyin, "paths.pinyin");
    require_file(cfg.paths.pos, "paths.pos");
    require_file(cfg.paths.tagset, "paths.tagset");
    return {PinyinLexicon::load(cfg.paths.pinyin), PosLexicon::load(cfg.paths.pos, cfg.paths.tagset)};
}

TrainingState new_training_state(const RunConfig& cfg, const Vocab& vocab, const Lexicons* lexicons,
                                 const GlyphAtlas* atlas) {
    const auto& system = system_by_name(cfg.system);
    ModelConfig mc = cfg.model;
    mc.variant = system.variant;
    mc.vocab_size = vocab.size();
    FusionSpec fs;
    TokenAnnotations ann;
    if (system.fusion) {
        if (lexicons == nullptr || atlas == nullptr) {
            throw UsageError("system " + system.name + " needs pinyin/POS lexicons and a glyph atlas");
        }
        const auto pinyin = lexicons->pinyin.restricted_to(vocab);
        fs = FusionSpec::fusion(mc.d_model, pinyin.size(), lexicons->pos.size());
        ann = annotate_vocab(vocab, pinyin, lexicons->pos);
    } else {
        fs = FusionSpec::anchi(mc.d_model);
        ann.pinyin_of_token.assign(static_cast<std::size_t>(vocab.size()), 0);
        ann.pos_of_token.assign(static_cast<std::size_t>(vocab.size()), 0);
    }
    fs.context_dim = cfg.context_dim;
    TrainingState state;
    state.system = system.name;
    state.vocab = vocab;
    state.train = cfg.train;
    state.model = Model(mc, fs, std::move(ann));
    state.model.initialize(vocab, system.fusion ? atlas : nullptr, cfg.train.seed);
    state.rng.seed(dropout_seed(cfg.train.seed));
    if (!cfg.paths.context_file.empty()) {
        state.context_file = std::filesystem::absolute(cfg.paths.context_file).string();
        state.model.set_context_file(
            std::make_shared<const PrecomputedContext>(PrecomputedContext::load(cfg.paths.context_file)));
    }
    return state;
}

TrainRunSummary run_training(const RunConfig& cfg, bool resume, std::ostream* log) {
    const auto corpus = load_corpus(cfg);
    if (corpus.pairs.empty()) {
        throw DataError("training corpus has no usable couplets");
    }
    const auto split = split_corpus(corpus.pairs, cfg.train.validation_fraction, cfg.train.seed);
    TrainRunSummary summary;
    summary.dropped = corpus.dropped;
    summary.train_pairs = split.train.size();
    summary.validation_pairs = split.validation.size();

    if (resume && !cfg.paths.checkpoint.empty() && std::filesystem::exists(cfg.paths.checkpoint)) {
        summary.state = load_checkpoint(cfg.paths.checkpoint);
        summary.resumed = true;
        if (summary.state.system != cfg.system) {
            throw DataError("checkpoint was trained as " + summary.state.system + ", config asks for " + cfg.system);
        }
        // The step budget may grow on resume; everything else stays as trained.
        summary.state.train.epochs = cfg.train.epochs;
        summary.state.train.max_steps = cfg.train.max_steps;
        summary.state.train.checkpoint_every = cfg.train.checkpoint_every;
    } else {
        const Vocab vocab =
            cfg.paths.vocab.empty() ? Vocab::build(split.train, cfg.min_freq) : Vocab::load(cfg.paths.vocab);
        const auto& system = system_by_name(cfg.system);
        std::optional<Lexicons> lexicons;
        std::optional<GlyphAtlas> atlas;
        if (system.fusion) {
            lexicons = load_lexicons(cfg);
            require_file(cfg.paths.atlas, "paths.atlas");
            atlas = GlyphAtlas::load(cfg.paths.atlas);
        }
        summary.state = new_training_state(cfg, vocab, lexicons ? &*lexicons : nullptr, atlas ? &*atlas : nullptr);
    }
    const auto train_set = encode_pairs(summary.state.vocab, split.train);
    const auto validation_set = encode_pairs(summary.state.vocab, split.validation);
    TrainOptions options;
    options.checkpoint_path = cfg.paths.checkpoint;
    options.log = log;
    summary.log = train(summary.state, train_set, validation_set, options);
    return summary;
}

}  // namespace couplet
