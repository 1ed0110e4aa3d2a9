// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "couplet/decoding.hpp"
#include "couplet/detail/binary.hpp"
#include "couplet/metrics.hpp"
#include "couplet/pipeline.hpp"
#include "couplet/training.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace couplet;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEpsilon = 1e-3;
constexpr double kZeroGroupFd = 1e-8;
constexpr int kDeskVocabLimit = 200;
constexpr int kCausalityTrials = 100;
constexpr int kMemorizeCouplets = 100;
constexpr int kMemorizeMaxSteps = 2000;
constexpr double kMemorizeLoss = 0.1;
constexpr int kMemorizeExact = 90;
constexpr double kMemorizeBleu = 0.9;
constexpr double kMemorizeSeconds = 30 * 60;
constexpr int kLengthSamples = 1000;
constexpr int kBeamSeeds = 20;
constexpr int kBeamWidth = 64;
constexpr double kBeamTolerance = 1e-9;
constexpr double kBleuTolerance = 1e-12;
constexpr double kUniformPplTolerance = 1e-6;
constexpr double kPplLossTolerance = 1e-9;
constexpr int kResumeSteps = 50;
constexpr int kMatrixSteps = 200;
constexpr double kGradSeconds = 5 * 60;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

RunConfig desk_config() { return RunConfig::load(testing::data_dir() / "desk.toml"); }

std::vector<CoupletPair> sample_pairs() { return load_corpus(desk_config()).pairs; }

TrainingState desk_state(const std::string& system, const std::vector<CoupletPair>& pairs, std::uint64_t seed) {
    RunConfig cfg = desk_config();
    cfg.system = system;
    cfg.train.seed = seed;
    static const auto lex = load_lexicons(cfg);
    static const auto atlas = GlyphAtlas::load(cfg.paths.atlas);
    return new_training_state(cfg, Vocab::build(pairs), &lex, &atlas);
}

Outcome gradient_correctness() {
    const auto start = std::chrono::steady_clock::now();
    const auto all = sample_pairs();
    const std::vector<CoupletPair> batch_pairs(all.begin(), all.begin() + 4);
    double worst = 0.0;
    double worst_zero = 0.0;
    std::string worst_name;
    std::size_t groups = 0;
    int vocab_size = 0;
    for (const auto* system : {"fusion-decoder", "fusion-transformer"}) {
        auto state = desk_state(system, batch_pairs, 11);
        vocab_size = state.vocab.size();
        const auto& mc = state.model.config();
        if (mc.d_model != 128 || mc.n_heads != 4 || mc.dec_layers != 2 || vocab_size > kDeskVocabLimit) {
            return {false, "model is not the desk preset"};
        }
        const auto tf = make_teacher_forced(batchify(encode_pairs(state.vocab, batch_pairs), 4).front(), mc.variant);
        for (const auto& g : testing::gradient_check(state.model, tf, kGradEpsilon, 6, 6, 3)) {
            ++groups;
            if (g.zero_group) {
                worst_zero = std::max(worst_zero, g.max_fd);
            } else if (g.rel_error > worst) {
                worst = g.rel_error;
                worst_name = std::string(system) + "/" + g.name;
            }
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = worst <= kGradTolerance && worst_zero < kZeroGroupFd && secs <= kGradSeconds;
    return {pass, std::to_string(groups) + " groups, vocab " + std::to_string(vocab_size) + ", max rel error " +
                      fmt("%.2e", worst) + " (" + worst_name + "), zero-gradient groups max |fd| " +
                      fmt("%.1e", worst_zero) + ", " + fmt("%.0f s", secs)};
}

Outcome causality() {
    const auto all = sample_pairs();
    const std::vector<CoupletPair> pairs(all.begin(), all.begin() + 20);
    std::mt19937_64 gen(2024);
    int failures = 0;
    for (int trial = 0; trial < kCausalityTrials; ++trial) {
        const auto* system = trial % 2 == 0 ? "fusion-decoder" : "fusion-transformer";
        auto state = desk_state(system, pairs, 100 + trial);
        const auto& p = pairs[gen() % pairs.size()];
        const auto enc = encode_pairs(state.vocab, std::span(&p, 1));
        auto input = make_teacher_forced(batchify(enc, 1).front(), state.model.config().variant).input;
        const Mat base = state.model.forward(input, Mode::Eval, nullptr, nullptr);
        const int len = input.target.length;
        const int t = static_cast<int>(gen() % static_cast<std::uint64_t>(len));
        const int content = state.vocab.size() - Vocab::kNumSpecials;
        int replacement = input.target.tokens[t];
        while (replacement == input.target.tokens[t]) {
            replacement = Vocab::kNumSpecials + static_cast<int>(gen() % static_cast<std::uint64_t>(content));
        }
        input.target.tokens[t] = replacement;
        const Mat moved = state.model.forward(input, Mode::Eval, nullptr, nullptr);
        if (!(moved.topRows(t) == base.topRows(t)) || moved.row(t) == base.row(t)) {
            ++failures;
        }
    }
    return {failures == 0, std::to_string(kCausalityTrials) + " trials, " + std::to_string(failures) +
                               " with changed earlier logits or unchanged perturbed row"};
}

Outcome embedding_initialization() {
    const auto pairs = sample_pairs();
    auto state = desk_state("fusion-decoder", pairs, 5);
    const auto atlas = GlyphAtlas::load(desk_config().paths.atlas);
    const auto& embed = state.model.embedding();
    int glyph_mismatch = 0;
    for (int id = Vocab::kNumSpecials; id < state.vocab.size(); ++id) {
        const RowVec expect = glyph_to_weight(render_glyph(state.vocab.char_of(id), atlas));
        if (!(embed.glyph.weights.value.row(id) == expect)) {
            ++glyph_mismatch;
        }
    }
    std::size_t violations = 0;
    std::size_t checked = 0;
    for (const auto* table : {&embed.pinyin, &embed.pos}) {
        const double bound = std::sqrt(3.0 / table->dim());
        violations += static_cast<std::size_t>((table->weights.value.array().abs() > bound).count());
        checked += static_cast<std::size_t>(table->weights.value.size());
    }
    const bool dims = embed.pinyin.dim() == 30 && embed.pos.dim() == 5;
    const bool bounds = std::abs(uniform_bound(30) - 0.31623) < 1e-5 && std::abs(uniform_bound(5) - 0.77460) < 1e-5;
    return {glyph_mismatch == 0 && violations == 0 && dims && bounds,
            std::to_string(state.vocab.size() - Vocab::kNumSpecials) + " glyph rows, " +
                std::to_string(glyph_mismatch) + " mismatches; " + std::to_string(checked) +
                " uniform weights, " + std::to_string(violations) + " bound violations"};
}

// Shared between the memorization and length checks.
TrainingState memorized;

Outcome memorization() {
    const auto start = std::chrono::steady_clock::now();
    const auto all = sample_pairs();
    const std::vector<CoupletPair> pairs(all.begin(), all.begin() + kMemorizeCouplets);
    memorized = desk_state("fusion-decoder", pairs, 7);
    memorized.train.max_steps = kMemorizeMaxSteps;
    const auto enc = encode_pairs(memorized.vocab, pairs);
    std::vector<std::u32string> refs;
    for (const auto& p : pairs) {
        refs.push_back(p.lower);
    }
    double loss = 0.0;
    int exact = 0;
    double score = 0.0;
    for (std::int64_t stop = 250; stop <= kMemorizeMaxSteps; stop += 250) {
        TrainOptions opt;
        opt.stop_at_step = stop;
        train(memorized, enc, {}, opt);
        loss = std::log(perplexity(memorized.model, enc));
        std::vector<std::u32string> cands;
        exact = 0;
        for (const auto& p : pairs) {
            cands.push_back(generate(memorized.model, memorized.vocab, p.upper));
            exact += cands.back() == p.lower ? 1 : 0;
        }
        score = bleu(cands, refs).score;
        if (loss < kMemorizeLoss && exact >= kMemorizeExact && score >= kMemorizeBleu) {
            break;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = loss < kMemorizeLoss && exact >= kMemorizeExact && score >= kMemorizeBleu &&
                      memorized.step <= kMemorizeMaxSteps && secs <= kMemorizeSeconds;
    return {pass, std::to_string(memorized.step) + " steps, training loss " + fmt("%.4f", loss) + ", exact " +
                      std::to_string(exact) + "/" + std::to_string(kMemorizeCouplets) + ", BLEU " +
                      fmt("%.4f", score) + ", " + fmt("%.0f s", secs)};
}

Outcome length_constraint() {
    if (memorized.vocab.size() == 0) {
        return {false, "no checkpoint from the memorization check"};
    }
    std::mt19937_64 gen(99);
    const int content = memorized.vocab.size() - Vocab::kNumSpecials;
    const int max_len = memorized.model.config().max_len;
    int ok = 0;
    for (int i = 0; i < kLengthSamples; ++i) {
        std::u32string upper;
        const int n = 1 + static_cast<int>(gen() % 12);
        for (int j = 0; j < n; ++j) {
            upper.push_back(memorized.vocab.char_of(Vocab::kNumSpecials + static_cast<int>(gen() % content)));
        }
        const int width = i % 4 == 0 ? 3 : 1;
        const auto lower = generate(memorized.model, memorized.vocab, upper, {.beam_width = width});
        ok += lower.size() == upper.size() ? 1 : 0;
    }
    return {ok == kLengthSamples, std::to_string(ok) + "/" + std::to_string(kLengthSamples) +
                                      " generations match the upper length (lengths 1-12, max_len " +
                                      std::to_string(max_len) + ", greedy and beam 3)"};
}

// Masked log-probability of `lower` from one teacher-forced forward pass.
double brute_force_score(const Model& model, const std::vector<int>& upper, const std::vector<int>& lower) {
    const std::vector<EncodedPair> one = {{upper, lower}};
    const auto tf = make_teacher_forced(batchify(one, 1).front(), model.config().variant);
    const Mat logits = model.forward(tf.input, Mode::Eval, nullptr, nullptr);
    double total = 0.0;
    std::size_t k = 0;
    for (std::size_t r = 0; r < tf.loss_mask.size() && k < lower.size(); ++r) {
        if (tf.loss_mask[r] == 0) {
            continue;
        }
        const auto row = logits.row(static_cast<Eigen::Index>(r));
        const auto content = row.tail(row.size() - Vocab::kNumSpecials);
        const double m = content.maxCoeff();
        const double lse = m + std::log((content.array() - m).exp().sum());
        total += row(lower[k]) - lse;
        ++k;
    }
    return total;
}

Outcome beam_oracle() {
    const std::vector<CoupletPair> toy = {{U"甲乙丙", U"丁甲乙"}, {U"丙丁", U"乙甲"}};
    int mismatched_argmax = 0;
    double worst = 0.0;
    int seeds_run = 0;
    for (int seed = 1; seed <= kBeamSeeds; ++seed) {
        const auto variant = seed % 2 == 0 ? Variant::EncoderDecoder : Variant::DecoderOnly;
        const auto s = testing::tiny_model(toy, variant, seed % 3 != 0, 16, 2, 2, 32, static_cast<std::uint64_t>(seed));
        if (s.vocab.size() - Vocab::kNumSpecials != 4) {
            return {false, "toy vocabulary does not have 4 content tokens"};
        }
        std::mt19937_64 gen(static_cast<std::uint64_t>(seed));
        std::vector<int> upper;
        for (int j = 0; j < 3; ++j) {
            upper.push_back(Vocab::kNumSpecials + static_cast<int>(gen() % 4));
        }
        double best = -std::numeric_limits<double>::infinity();
        std::vector<int> best_seq;
        std::vector<std::pair<std::vector<int>, double>> scored;
        for (int code = 0; code < 64; ++code) {
            const std::vector<int> seq = {Vocab::kNumSpecials + code % 4, Vocab::kNumSpecials + code / 4 % 4,
                                          Vocab::kNumSpecials + code / 16};
            const double score = brute_force_score(s.model, upper, seq);
            scored.emplace_back(seq, score);
            if (score > best) {
                best = score;
                best_seq = seq;
            }
        }
        const auto beams = beam_search(s.model, upper, kBeamWidth);
        if (beams.empty() || beams.front().content() != best_seq) {
            ++mismatched_argmax;
        }
        for (const auto& h : beams) {
            for (const auto& [seq, score] : scored) {
                if (seq == h.content()) {
                    worst = std::max(worst, std::abs(score - h.log_prob));
                }
            }
        }
        if (beams.size() != 64) {
            ++mismatched_argmax;
        }
        ++seeds_run;
    }
    return {mismatched_argmax == 0 && worst <= kBeamTolerance,
            std::to_string(seeds_run) + " seeds, " + std::to_string(mismatched_argmax) +
                " argmax mismatches, max |log-prob difference| " + fmt("%.2e", worst)};
}

Outcome metric_oracles() {
    std::vector<std::string> failed;
    const auto all = sample_pairs();
    std::vector<std::u32string> lines;
    for (const auto& p : all) {
        lines.push_back(p.lower);
    }
    const double identical = bleu(lines, lines).score;
    if (std::abs(identical - 1.0) > kBleuTolerance) {
        failed.push_back("identical BLEU " + fmt("%.17g", identical));
    }
    const std::vector<std::u32string> cand = {U"abce"};
    const std::vector<std::u32string> ref = {U"abcd"};
    // p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1), BP = 1.
    const double hand = std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
    const double example = bleu(cand, ref).score;
    if (std::abs(example - hand) > kBleuTolerance) {
        failed.push_back("abcd/abce BLEU " + fmt("%.17g", example));
    }

    const std::vector<CoupletPair> pairs(all.begin(), all.begin() + 30);
    auto state = desk_state("fusion-decoder", pairs, 3);
    const auto enc = encode_pairs(state.vocab, pairs);

    // Perplexity against an independently accumulated token NLL.
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& b : batchify(enc, 7)) {
        const auto tf = make_teacher_forced(b, state.model.config().variant);
        const Mat logits = state.model.forward(tf.input, Mode::Eval, nullptr, nullptr);
        for (std::size_t r = 0; r < tf.loss_mask.size(); ++r) {
            if (tf.loss_mask[r] == 0) {
                continue;
            }
            const auto row = logits.row(static_cast<Eigen::Index>(r));
            const double m = row.maxCoeff();
            nll -= row(tf.targets[r]) - m - std::log((row.array() - m).exp().sum());
            ++tokens;
        }
    }
    const double ppl = perplexity(state.model, enc);
    const double expected = std::exp(nll / static_cast<double>(tokens));
    const double rel = std::abs(ppl - expected) / expected;
    if (rel > kPplLossTolerance) {
        failed.push_back("perplexity vs exp(loss) rel " + fmt("%.2e", rel));
    }

    state.model.output_projection().w.value.setZero();
    state.model.output_projection().b.value.setZero();
    const double uniform = perplexity(state.model, enc);
    const double v = state.vocab.size();
    if (std::abs(uniform - v) > kUniformPplTolerance) {
        failed.push_back("uniform perplexity " + fmt("%.17g", uniform));
    }
    std::string detail = "identical BLEU " + fmt("%.15f", identical) + ", abcd/abce " + fmt("%.12f", example) +
                         ", ppl/exp(loss) rel " + fmt("%.1e", rel) + ", uniform ppl " + fmt("%.9f", uniform) +
                         " (V=" + std::to_string(state.vocab.size()) + ")";
    for (const auto& f : failed) {
        detail += "; FAILED " + f;
    }
    return {failed.empty(), detail};
}

Outcome determinism_and_resume() {
    const auto split = split_corpus(sample_pairs(), 0.01, 7);
    testing::TempDir dir;
    const auto run = [&](std::int64_t stop, const std::filesystem::path& out) {
        auto state = desk_state("fusion-decoder", split.train, 7);
        state.train.max_steps = 2 * kResumeSteps;
        const auto enc = encode_pairs(state.vocab, split.train);
        const auto val = encode_pairs(state.vocab, split.validation);
        TrainOptions opt;
        opt.stop_at_step = stop;
        opt.checkpoint_path = out;
        train(state, enc, val, opt);
        return state;
    };
    run(2 * kResumeSteps, dir / "a.ckpt");
    run(2 * kResumeSteps, dir / "b.ckpt");
    const bool identical = detail::read_file(dir / "a.ckpt") == detail::read_file(dir / "b.ckpt");

    run(kResumeSteps, dir / "half.ckpt");
    auto resumed = load_checkpoint(dir / "half.ckpt");
    const auto enc = encode_pairs(resumed.vocab, split.train);
    const auto val = encode_pairs(resumed.vocab, split.validation);
    const auto log = train(resumed, enc, val);
    save_checkpoint(dir / "resumed.ckpt", resumed);
    const bool resume_exact = detail::read_file(dir / "a.ckpt") == detail::read_file(dir / "resumed.ckpt");
    return {identical && resume_exact && log.steps.size() == kResumeSteps,
            std::string("seeded runs ") + (identical ? "byte-identical" : "DIFFER") + "; resume at step " +
                std::to_string(kResumeSteps) + " then " + std::to_string(log.steps.size()) + " steps " +
                (resume_exact ? "bit-exact" : "DIFFERS") + " vs uninterrupted"};
}

Outcome four_system_matrix() {
    testing::TempDir dir;
    const auto base = desk_config();
    std::vector<TrainingState> states;
    std::vector<std::string> trained;
    for (const auto& sys : all_systems()) {
        RunConfig cfg = base;
        cfg.system = sys.name;
        cfg.train.max_steps = kMatrixSteps;
        cfg.paths.checkpoint = dir / (sys.name + ".ckpt");
        cfg.paths.log = dir / (sys.name + ".jsonl");
        auto summary = run_training(cfg, false, nullptr);
        if (summary.state.step != kMatrixSteps) {
            return {false, sys.name + " stopped at step " + std::to_string(summary.state.step)};
        }
        states.push_back(load_checkpoint(cfg.paths.checkpoint));
        trained.push_back(sys.name);
    }
    const auto split = split_corpus(load_corpus(base).pairs, base.train.validation_fraction, base.train.seed);
    std::vector<CoupletPair> test(split.train.begin(), split.train.begin() + 20);
    test.insert(test.end(), split.validation.begin(), split.validation.end());
    std::vector<NamedSystem> systems;
    for (std::size_t i = 0; i < states.size(); ++i) {
        systems.push_back({trained[i], &states[i].model, &states[i].vocab});
    }
    const auto report = evaluate_systems(systems, test);
    bool finite = report.rows.size() == 4;
    std::string detail;
    for (const auto& row : report.rows) {
        finite = finite && std::isfinite(row.bleu) && std::isfinite(row.perplexity);
        detail += (detail.empty() ? "" : ", ") + row.name + " BLEU " + fmt("%.4f", row.bleu) + " ppl " +
                  fmt("%.1f", row.perplexity);
    }
    return {finite, std::to_string(report.rows.size()) + " rows after " + std::to_string(kMatrixSteps) +
                        " steps each: " + detail};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"causality", causality},
        {"embedding initialization", embedding_initialization},
        {"memorization", memorization},
        {"length constraint", length_constraint},
        {"beam oracle", beam_oracle},
        {"metric oracles", metric_oracles},
        {"determinism and checkpointing", determinism_and_resume},
        {"four-system matrix", four_system_matrix},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        failures += out.pass ? 0 : 1;
        std::printf("%s %zu %s: %s\n", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    out.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
