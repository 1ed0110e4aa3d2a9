#include "couplet/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "couplet/error.hpp"
#include "couplet/metrics.hpp"
#include "couplet/pipeline.hpp"
#include "couplet/utf8.hpp"

namespace couplet {

namespace {

struct CommonFlags {
    std::string config;
    std::vector<std::string> set;
    std::optional<std::uint64_t> seed;
    std::string system;
    std::string checkpoint;
    std::string output;
};

void add_common(CLI::App& cmd, CommonFlags& flags) {
    cmd.add_option("--config", flags.config, "Config file ([paths], [model], [train], [decode] sections)");
    cmd.add_option("--set", flags.set, "Override a config key: section.key=value (repeatable)");
    cmd.add_option("--seed", flags.seed, "Random seed (train.seed)");
    cmd.add_option("--system", flags.system,
                   "anchi-decoder | anchi-transformer | fusion-decoder | fusion-transformer");
    cmd.add_option("--checkpoint", flags.checkpoint, "Checkpoint file");
    cmd.add_option("--output", flags.output, "Output file");
}

RunConfig resolve_config(const CommonFlags& flags, const detail::KeyValues& extra = {}) {
    RunConfig cfg = flags.config.empty() ? RunConfig{} : RunConfig::load(flags.config);
    detail::KeyValues kv;
    for (const auto& item : flags.set) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("--set expects section.key=value, got '" + item + "'");
        }
        kv.set(item.substr(0, eq), item.substr(eq + 1));
    }
    if (flags.seed) {
        kv.set("train.seed", std::to_string(*flags.seed));
    }
    if (!flags.system.empty()) {
        kv.set("model.system", flags.system);
    }
    if (!flags.checkpoint.empty()) {
        kv.set("paths.checkpoint", flags.checkpoint);
    }
    for (const auto& [k, v] : extra.entries()) {
        kv.set(k, v);
    }
    cfg.apply(kv, {});
    return cfg;
}

std::vector<std::u32string> read_lines(std::istream& in, const std::string& where) {
    std::vector<std::u32string> lines;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        lines.push_back(utf8::strip_spaces(utf8::decode_or_throw(line, where + ":" + std::to_string(n))));
    }
    return lines;
}

// Writes to `path`, or to `fallback` when the path is empty.
void emit(const std::string& path, std::ostream& fallback, const std::string& text) {
    if (path.empty()) {
        fallback << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path);
    }
    out << text;
}

Vocab vocab_for(const RunConfig& cfg) {
    if (!cfg.paths.vocab.empty()) {
        return Vocab::load(cfg.paths.vocab);
    }
    if (!cfg.paths.checkpoint.empty()) {
        return load_checkpoint(cfg.paths.checkpoint).vocab;
    }
    return Vocab::build(load_corpus(cfg).pairs, cfg.min_freq);
}

int cmd_build_vocab(const CommonFlags& flags, const std::string& upper, const std::string& lower,
                    const std::string& tsv, std::optional<int> min_freq, std::ostream& out) {
    detail::KeyValues extra;
    if (!upper.empty()) {
        extra.set("paths.corpus_upper", upper);
    }
    if (!lower.empty()) {
        extra.set("paths.corpus_lower", lower);
    }
    if (!tsv.empty()) {
        extra.set("paths.corpus_tsv", tsv);
    }
    if (min_freq) {
        extra.set("train.min_freq", std::to_string(*min_freq));
    }
    const auto cfg = resolve_config(flags, extra);
    const auto corpus = load_corpus(cfg);
    const auto vocab = Vocab::build(corpus.pairs, cfg.min_freq);
    const std::string target = !flags.output.empty() ? flags.output : cfg.paths.vocab.string();
    if (target.empty()) {
        throw UsageError("build-vocab needs --output or paths.vocab");
    }
    vocab.save(target);
    out << "pairs " << corpus.pairs.size() << " dropped " << corpus.dropped << " vocab " << vocab.size() << " -> "
        << target << '\n';
    return 0;
}

void write_pgm(const std::filesystem::path& path, const GlyphBitmap& bmp) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << "P5\n" << kGlyphSide << ' ' << kGlyphSide << "\n255\n";
    out.write(reinterpret_cast<const char*>(bmp.pixels.data()), kGlyphCells);
}

int cmd_render_glyphs(const CommonFlags& flags, const std::string& atlas_path, const std::string& vocab_path,
                      const std::string& pgm_dir, std::ostream& out) {
    detail::KeyValues extra;
    if (!atlas_path.empty()) {
        extra.set("paths.atlas", atlas_path);
    }
    if (!vocab_path.empty()) {
        extra.set("paths.vocab", vocab_path);
    }
    const auto cfg = resolve_config(flags, extra);
    if (cfg.paths.atlas.empty()) {
        throw UsageError("render-glyphs needs --atlas or paths.atlas");
    }
    if (flags.output.empty()) {
        throw UsageError("render-glyphs needs --output");
    }
    const auto source = GlyphAtlas::load(cfg.paths.atlas);
    const auto vocab = vocab_for(cfg);
    GlyphAtlas rendered;
    std::size_t found = 0;
    std::size_t fallback = 0;
    if (!pgm_dir.empty()) {
        std::filesystem::create_directories(pgm_dir);
    }
    for (int id = Vocab::kNumSpecials; id < vocab.size(); ++id) {
        const char32_t ch = vocab.char_of(id);
        const auto bmp = render_glyph(ch, source);
        (source.find(ch) != nullptr ? found : fallback) += 1;
        rendered.add(ch, bmp);
        if (!pgm_dir.empty()) {
            write_pgm(std::filesystem::path(pgm_dir) / (std::to_string(id) + ".pgm"), bmp);
        }
    }
    rendered.save(flags.output);
    out << "glyphs " << rendered.size() << " found " << found << " fallback " << fallback << " -> " << flags.output
        << '\n';
    return 0;
}

int cmd_annotate(const CommonFlags& flags, const std::vector<std::string>& inputs, std::istream& in,
                 std::ostream& out) {
    const auto cfg = resolve_config(flags);
    const auto lex = load_lexicons(cfg);
    const auto vocab = vocab_for(cfg);
    std::vector<std::u32string> lines;
    if (!inputs.empty()) {
        for (const auto& s : inputs) {
            lines.push_back(utf8::strip_spaces(utf8::decode_or_throw(s, "--input")));
        }
    } else {
        lines = read_lines(in, "stdin");
    }
    std::ostringstream text;
    for (const auto& line : lines) {
        const auto a = annotate(line, vocab, lex.pinyin, lex.pos);
        nlohmann::json syllables = nlohmann::json::array();
        nlohmann::json tags = nlohmann::json::array();
        for (std::size_t i = 0; i < line.size(); ++i) {
            const auto* syl = lex.pinyin.syllable_of(line[i]);
            syllables.push_back(syl != nullptr ? *syl : "");
            const int tag = a.pos_ids[i];
            tags.push_back(tag > 0 ? lex.pos.tagset()[tag - 1] : "");
        }
        nlohmann::json j{{"text", utf8::encode(line)}, {"char_ids", a.char_ids},   {"pinyin_ids", a.pinyin_ids},
                         {"pos_ids", a.pos_ids},      {"pinyin", syllables},      {"pos", tags}};
        text << j.dump() << '\n';
    }
    emit(flags.output, out, text.str());
    return 0;
}

int cmd_train(const CommonFlags& flags, bool resume, std::optional<std::int64_t> max_steps, const std::string& log_path,
              std::ostream& out) {
    detail::KeyValues extra;
    if (max_steps) {
        extra.set("train.max_steps", std::to_string(*max_steps));
    }
    if (!log_path.empty()) {
        extra.set("paths.log", log_path);
    }
    auto cfg = resolve_config(flags, extra);
    if (!flags.output.empty()) {
        cfg.paths.checkpoint = flags.output;
    }
    if (cfg.paths.checkpoint.empty()) {
        throw UsageError("train needs --checkpoint (or paths.checkpoint)");
    }
    std::ofstream log_file;
    if (!cfg.paths.log.empty()) {
        if (cfg.paths.log.has_parent_path()) {
            std::filesystem::create_directories(cfg.paths.log.parent_path());
        }
        log_file.open(cfg.paths.log, resume ? std::ios::app : std::ios::trunc);
        if (!log_file) {
            throw DataError("cannot write " + cfg.paths.log.string());
        }
    }
    const auto summary = run_training(cfg, resume, log_file.is_open() ? &log_file : nullptr);
    out << "system " << summary.state.system << " train " << summary.train_pairs << " validation "
        << summary.validation_pairs << " dropped " << summary.dropped << " params "
        << summary.state.model.parameter_count() << '\n';
    if (!summary.log.steps.empty()) {
        out << "step " << summary.state.step << " loss " << summary.log.steps.back().loss << '\n';
    }
    if (!summary.log.epochs.empty()) {
        out << "validation perplexity " << summary.log.epochs.back().validation_perplexity << '\n';
    }
    out << "checkpoint " << cfg.paths.checkpoint.string() << '\n';
    return 0;
}

DecodeOptions decode_options(const RunConfig& cfg, std::optional<int> beam_width, bool no_enforce) {
    DecodeOptions opt = cfg.decode;
    if (beam_width) {
        if (*beam_width < 1) {
            throw UsageError("--beam-width must be >= 1");
        }
        opt.beam_width = *beam_width;
    }
    if (no_enforce) {
        opt.enforce_length = false;
    }
    return opt;
}

int cmd_generate(const CommonFlags& flags, const std::vector<std::string>& inputs, std::optional<int> beam_width,
                 bool no_enforce, int n_best, std::istream& in, std::ostream& out) {
    const auto cfg = resolve_config(flags);
    if (cfg.paths.checkpoint.empty()) {
        throw UsageError("generate needs --checkpoint");
    }
    const auto opt = decode_options(cfg, beam_width, no_enforce);
    if (n_best < 1) {
        throw UsageError("--n-best must be >= 1");
    }
    const auto state = load_checkpoint(cfg.paths.checkpoint);
    std::vector<std::u32string> lines;
    if (!inputs.empty()) {
        for (const auto& s : inputs) {
            lines.push_back(utf8::strip_spaces(utf8::decode_or_throw(s, "--input")));
        }
    } else {
        lines = read_lines(in, "stdin");
    }
    std::ostringstream text;
    for (const auto& line : lines) {
        if (line.empty()) {
            text << '\n';
            continue;
        }
        if (static_cast<int>(line.size()) > state.model.config().max_len) {
            throw DataError("upper line longer than " + std::to_string(state.model.config().max_len) + " characters");
        }
        if (n_best == 1) {
            text << utf8::encode(generate(state.model, state.vocab, line, opt)) << '\n';
            continue;
        }
        const auto ids = state.vocab.encode(line);
        const auto hyps = beam_search(state.model, ids, std::max(opt.beam_width, n_best), opt.enforce_length);
        for (std::size_t i = 0; i < hyps.size() && static_cast<int>(i) < n_best; ++i) {
            text << utf8::encode(state.vocab.decode(hyps[i].content())) << '\t' << hyps[i].log_prob << '\n';
        }
    }
    emit(flags.output, out, text.str());
    return 0;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) {
                parts.push_back(cur);
            }
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) {
        parts.push_back(cur);
    }
    return parts;
}

int cmd_eval(const CommonFlags& flags, const std::vector<std::string>& systems_arg, const std::string& test,
             const std::string& test_upper, const std::string& test_lower, std::optional<int> beam_width,
             bool no_enforce, std::ostream& out) {
    detail::KeyValues extra;
    if (!test.empty()) {
        extra.set("paths.test_tsv", test);
    }
    if (!test_upper.empty()) {
        extra.set("paths.test_upper", test_upper);
    }
    if (!test_lower.empty()) {
        extra.set("paths.test_lower", test_lower);
    }
    const auto cfg = resolve_config(flags, extra);
    const auto opt = decode_options(cfg, beam_width, no_enforce);
    std::vector<std::string> paths;
    for (const auto& s : systems_arg) {
        for (auto& p : split_commas(s)) {
            paths.push_back(std::move(p));
        }
    }
    if (paths.empty()) {
        if (cfg.paths.checkpoint.empty()) {
            throw UsageError("eval needs --systems a.ckpt,b.ckpt");
        }
        paths.push_back(cfg.paths.checkpoint.string());
    }
    const auto test_set = load_test_set(cfg);
    if (test_set.pairs.empty()) {
        throw DataError("test set has no usable couplets");
    }
    std::vector<TrainingState> states;
    states.reserve(paths.size());
    std::vector<NamedSystem> systems;
    for (const auto& p : paths) {
        states.push_back(load_checkpoint(p));
    }
    for (std::size_t i = 0; i < states.size(); ++i) {
        const auto name = std::filesystem::path(paths[i]).stem().string() + " (" + states[i].system + ")";
        systems.push_back({name, &states[i].model, &states[i].vocab});
    }
    const auto report = evaluate_systems(systems, test_set.pairs, opt);
    out << report.to_table();
    const std::string json_path = !flags.output.empty() ? flags.output : cfg.paths.report.string();
    if (!json_path.empty()) {
        emit(json_path, out, report.to_json() + "\n");
    }
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
    CLI::App app{"Chinese couplet generation with fused character embeddings"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string corpus_upper, corpus_lower, corpus_tsv;
    std::optional<int> min_freq;
    auto* build_vocab = app.add_subcommand("build-vocab", "Build the character vocabulary from a corpus");
    add_common(*build_vocab, flags);
    build_vocab->add_option("--corpus-upper", corpus_upper, "Upper lines, one per line");
    build_vocab->add_option("--corpus-lower", corpus_lower, "Lower lines, one per line");
    build_vocab->add_option("--corpus-tsv", corpus_tsv, "upper<TAB>lower per line");
    build_vocab->add_option("--min-freq", min_freq, "Minimum character frequency");

    std::string atlas, vocab_path, pgm_dir;
    auto* render = app.add_subcommand("render-glyphs", "Render 24x24 glyphs for every vocabulary character");
    add_common(*render, flags);
    render->add_option("--atlas", atlas, "Source GLY1 glyph atlas");
    render->add_option("--vocab", vocab_path, "Vocabulary file");
    render->add_option("--pgm-dir", pgm_dir, "Also write one PGM image per glyph here");

    std::vector<std::string> inputs;
    auto* annotate_cmd = app.add_subcommand("annotate", "Print pinyin and POS annotations as JSON lines");
    add_common(*annotate_cmd, flags);
    annotate_cmd->add_option("--input", inputs, "Text to annotate (default: stdin, one line per line)");
    annotate_cmd->add_option("--vocab", vocab_path, "Vocabulary file");

    bool resume = false;
    std::optional<std::int64_t> max_steps;
    std::string log_path;
    auto* train_cmd = app.add_subcommand("train", "Train one system");
    add_common(*train_cmd, flags);
    train_cmd->add_flag("--resume", resume, "Continue from the checkpoint if it exists");
    train_cmd->add_option("--max-steps", max_steps, "Total optimizer steps");
    train_cmd->add_option("--log", log_path, "JSON-lines training log");

    std::optional<int> beam_width;
    bool no_enforce = false;
    int n_best = 1;
    auto* generate_cmd = app.add_subcommand("generate", "Generate lower lines");
    add_common(*generate_cmd, flags);
    generate_cmd->add_option("--input", inputs, "Upper line (default: stdin, one per line)");
    generate_cmd->add_option("--beam-width", beam_width, "Beam width (1 = greedy)");
    generate_cmd->add_flag("--no-length-enforce", no_enforce, "Allow the lower line to differ in length");
    generate_cmd->add_option("--n-best", n_best, "Print the top hypotheses with log-probabilities");

    std::vector<std::string> systems;
    std::string test, test_upper, test_lower;
    auto* eval_cmd = app.add_subcommand("eval", "Compare systems by BLEU and model perplexity");
    add_common(*eval_cmd, flags);
    eval_cmd->add_option("--systems", systems, "Comma-separated checkpoints");
    eval_cmd->add_option("--test", test, "Test set, upper<TAB>lower per line");
    eval_cmd->add_option("--test-upper", test_upper, "Test upper lines");
    eval_cmd->add_option("--test-lower", test_lower, "Test lower lines");
    eval_cmd->add_option("--beam-width", beam_width, "Beam width (1 = greedy)");
    eval_cmd->add_flag("--no-length-enforce", no_enforce, "Allow the lower line to differ in length");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return 1;
    }

    try {
        if (build_vocab->parsed()) {
            return cmd_build_vocab(flags, corpus_upper, corpus_lower, corpus_tsv, min_freq, out);
        }
        if (render->parsed()) {
            return cmd_render_glyphs(flags, atlas, vocab_path, pgm_dir, out);
        }
        if (annotate_cmd->parsed()) {
            CommonFlags f = flags;
            if (!vocab_path.empty()) {
                f.set.push_back("paths.vocab=" + vocab_path);
            }
            return cmd_annotate(f, inputs, in, out);
        }
        if (train_cmd->parsed()) {
            return cmd_train(flags, resume, max_steps, log_path, out);
        }
        if (generate_cmd->parsed()) {
            return cmd_generate(flags, inputs, beam_width, no_enforce, n_best, in, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(flags, systems, test, test_upper, test_lower, beam_width, no_enforce, out);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace couplet
