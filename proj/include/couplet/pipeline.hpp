#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "couplet/annotation.hpp"
#include "couplet/corpus.hpp"
#include "couplet/decoding.hpp"
#include "couplet/detail/keyvalue.hpp"
#include "couplet/fusion.hpp"
#include "couplet/training.hpp"
#include "couplet/transformer.hpp"

namespace couplet {

// The four compared systems: contextual-only ("anchi") or fused embeddings,
// on a decoder-only or encoder-decoder transformer.
struct SystemSpec {
    std::string name;
    Variant variant = Variant::DecoderOnly;
    bool fusion = false;
};

const std::vector<SystemSpec>& all_systems();
// Accepts "anchi-decoder", "anchi-transformer", "fusion-decoder", "fusion-transformer".
const SystemSpec& system_by_name(const std::string& name);

struct RunPaths {
    std::filesystem::path corpus_upper;
    std::filesystem::path corpus_lower;
    std::filesystem::path corpus_tsv;
    std::filesystem::path vocab;
    std::filesystem::path atlas;
    std::filesystem::path pinyin;
    std::filesystem::path pos;
    std::filesystem::path tagset;
    std::filesystem::path context_file;
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    std::filesystem::path report;
    std::filesystem::path test_tsv;
    std::filesystem::path test_upper;
    std::filesystem::path test_lower;
};

struct RunConfig {
    RunPaths paths;
    std::string system = "fusion-decoder";
    std::string preset = "desk";
    ModelConfig model = ModelConfig::desk(Variant::DecoderOnly, 0);
    int context_dim = kContextDim;
    TrainConfig train = TrainConfig::desk();
    int min_freq = 1;
    DecodeOptions decode;

    // Sets every key present in `kv`; relative paths resolve against `base_dir`.
    // Unknown keys are a usage error. Choosing a preset resets the model shape
    // before the other [model] keys apply.
    void apply(const detail::KeyValues& kv, const std::filesystem::path& base_dir);

    // Reads a config file (sections [paths], [model], [train], [decode]).
    static RunConfig load(const std::filesystem::path& path);
};

LoadResult load_corpus(const RunConfig& cfg);
LoadResult load_test_set(const RunConfig& cfg);

struct Lexicons {
    PinyinLexicon pinyin;
    PosLexicon pos;
};

Lexicons load_lexicons(const RunConfig& cfg);

// A freshly initialized training state for `cfg.system`. Fusion systems need
// lexicons and an atlas.
TrainingState new_training_state(const RunConfig& cfg, const Vocab& vocab, const Lexicons* lexicons,
                                 const GlyphAtlas* atlas);

struct TrainRunSummary {
    TrainingLog log;
    std::size_t train_pairs = 0;
    std::size_t validation_pairs = 0;
    std::size_t dropped = 0;
    bool resumed = false;
    TrainingState state;
};

// Loads data per `cfg`, trains (resuming from cfg.paths.checkpoint when
// `resume` is set and the file exists) and writes the final checkpoint.
TrainRunSummary run_training(const RunConfig& cfg, bool resume, std::ostream* log);

}  // namespace couplet
