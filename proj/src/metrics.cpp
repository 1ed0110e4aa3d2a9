#include "couplet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <map>

#include "couplet/error.hpp"
#include "couplet/training.hpp"
#include "couplet/utf8.hpp"

namespace couplet {

namespace {

std::map<std::u32string_view, std::size_t> ngram_counts(std::u32string_view s, int n) {
    std::map<std::u32string_view, std::size_t> counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
        ++counts[s.substr(i, n)];
    }
    return counts;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

BleuResult bleu(std::span<const std::u32string> candidates, std::span<const std::u32string> references, int max_n) {
    if (candidates.empty()) {
        throw Error("bleu: empty candidate list");
    }
    if (candidates.size() != references.size()) {
        throw Error("bleu: candidate and reference counts differ");
    }
    if (max_n < 1) {
        throw Error("bleu: max_n must be >= 1");
    }
    std::vector<std::size_t> matched(max_n, 0);
    std::vector<std::size_t> total(max_n, 0);
    BleuResult result;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        result.candidate_length += candidates[i].size();
        result.reference_length += references[i].size();
        for (int n = 1; n <= max_n; ++n) {
            const auto cand = ngram_counts(candidates[i], n);
            const auto ref = ngram_counts(references[i], n);
            for (const auto& [gram, count] : cand) {
                const auto it = ref.find(gram);
                matched[n - 1] += std::min(count, it == ref.end() ? 0 : it->second);
                total[n - 1] += count;
            }
        }
    }
    double log_sum = 0.0;
    bool zero = false;
    for (int n = 1; n <= max_n; ++n) {
        double p;
        if (n == 1) {
            p = total[0] == 0 ? 0.0 : static_cast<double>(matched[0]) / static_cast<double>(total[0]);
        } else {
            p = static_cast<double>(matched[n - 1] + 1) / static_cast<double>(total[n - 1] + 1);
        }
        result.precisions.push_back(p);
        if (p == 0.0) {
            zero = true;
        } else {
            log_sum += std::log(p);
        }
    }
    const auto c = static_cast<double>(result.candidate_length);
    const auto r = static_cast<double>(result.reference_length);
    result.brevity_penalty = c == 0.0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
    result.score = zero ? 0.0 : result.brevity_penalty * std::exp(log_sum / max_n);
    return result;
}

double perplexity(const Model& model, std::span<const EncodedPair> pairs, int batch_size) {
    if (pairs.empty()) {
        throw Error("perplexity: empty test set");
    }
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& batch : batchify(pairs, batch_size)) {
        const auto tf = make_teacher_forced(batch, model.config().variant);
        const Mat logits = model.forward(tf.input, Mode::Eval, nullptr, nullptr);
        const auto loss = cross_entropy_loss(logits, tf.targets, tf.loss_mask);
        nll += loss.loss * static_cast<double>(loss.count);
        tokens += loss.count;
    }
    return std::exp(nll / static_cast<double>(tokens));
}

std::string EvalReport::to_table() const {
    std::string out = "decode: beam_width=" + std::to_string(decode.beam_width) +
                      " enforce_length=" + (decode.enforce_length ? "true" : "false") + "\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-24s %8s %18s %8s %8s %8s %8s %8s\n", "system", "BLEU", "model perplexity",
                  "p1", "p2", "p3", "p4", "n");
    out += line;
    for (const auto& row : rows) {
        std::snprintf(line, sizeof line, "%-24s %8s %18s", row.name.c_str(), fixed(row.bleu, 4).c_str(),
                      fixed(row.perplexity, 2).c_str());
        out += line;
        for (std::size_t n = 0; n < 4; ++n) {
            out += ' ';
            std::snprintf(line, sizeof line, "%8s", n < row.precisions.size() ? fixed(row.precisions[n], 4).c_str() : "-");
            out += line;
        }
        std::snprintf(line, sizeof line, " %8zu\n", row.examples);
        out += line;
    }
    return out;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
    for (const auto& row : rows) {
        rows_json.push_back(nlohmann::ordered_json{{"system", row.name},
                             {"bleu", row.bleu},
                             {"model_perplexity", row.perplexity},
                             {"precisions", row.precisions},
                             {"examples", row.examples},
                             {"decode", {{"beam_width", decode.beam_width}, {"enforce_length", decode.enforce_length}}}});
    }
    return rows_json.dump(2);
}

EvalReport evaluate_systems(std::span<const NamedSystem> systems, std::span<const CoupletPair> test_set,
                            const DecodeOptions& decode) {
    if (test_set.empty()) {
        throw Error("evaluate_systems: empty test set");
    }
    EvalReport report;
    report.decode = decode;
    std::vector<std::u32string> references;
    for (const auto& pair : test_set) {
        references.push_back(pair.lower);
    }
    for (const auto& system : systems) {
        if (system.model == nullptr || system.vocab == nullptr) {
            throw Error("evaluate_systems: system " + system.name + " has no model");
        }
        std::vector<std::u32string> candidates;
        for (const auto& pair : test_set) {
            candidates.push_back(generate(*system.model, *system.vocab, pair.upper, decode));
        }
        const auto b = bleu(candidates, references);
        const auto encoded = encode_pairs(*system.vocab, test_set);
        report.rows.push_back({system.name, b.score, perplexity(*system.model, encoded), b.precisions, test_set.size()});
    }
    return report;
}

}  // namespace couplet
