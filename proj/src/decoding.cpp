#include "couplet/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "couplet/error.hpp"

namespace couplet {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_upper(const Model& model, std::span<const int> upper) {
    if (upper.empty()) {
        throw Error("decode: empty upper line");
    }
    if (static_cast<int>(upper.size()) > model.config().max_len) {
        throw Error("decode: upper line longer than the model's max_len");
    }
}

RowVec step_log_probs(const Model& model, std::span<const int> upper, const std::vector<int>& prefix, int step,
                      bool enforce_length) {
    const Mat logits = model.next_logits(make_generation_input(upper, {prefix}, model.config().variant));
    return masked_log_softmax(logits.row(0), step, static_cast<int>(upper.size()), enforce_length,
                              model.config().max_len);
}

}  // namespace

std::vector<int> DecodeHypothesis::content() const {
    std::vector<int> out = tokens;
    if (!out.empty() && out.back() == Vocab::kEos) {
        out.pop_back();
    }
    return out;
}

RowVec masked_log_softmax(const RowVec& logits, int step, int target_len, bool enforce_length, int max_len) {
    const auto v = logits.size();
    std::vector<bool> allowed(static_cast<std::size_t>(v), true);
    for (int special : {Vocab::kPad, Vocab::kBos, Vocab::kUnk, Vocab::kSep}) {
        if (special < v) {
            allowed[special] = false;
        }
    }
    const bool must_end = enforce_length ? step >= target_len : step >= max_len;
    const bool may_end = enforce_length ? step >= target_len : step >= 1;
    if (must_end) {
        std::fill(allowed.begin(), allowed.end(), false);
    }
    allowed[Vocab::kEos] = may_end;

    double max = kNegInf;
    for (Eigen::Index i = 0; i < v; ++i) {
        if (allowed[i]) {
            max = std::max(max, logits[i]);
        }
    }
    if (max == kNegInf) {
        throw Error("decode: no token is allowed at this step");
    }
    double sum = 0.0;
    for (Eigen::Index i = 0; i < v; ++i) {
        if (allowed[i]) {
            sum += std::exp(logits[i] - max);
        }
    }
    const double lse = max + std::log(sum);
    RowVec out(v);
    for (Eigen::Index i = 0; i < v; ++i) {
        out[i] = allowed[i] ? logits[i] - lse : kNegInf;
    }
    return out;
}

NextLogitsFn model_scorer(const Model& model, std::span<const int> upper) {
    return [&model, upper](const std::vector<std::vector<int>>& prefixes) {
        return model.next_logits(make_generation_input(upper, prefixes, model.config().variant));
    };
}

std::vector<int> greedy_decode(const NextLogitsFn& next, int target_len, int max_len, bool enforce_length) {
    std::vector<int> prefix;
    for (int step = 0;; ++step) {
        const Mat logits = next({prefix});
        const RowVec lp = masked_log_softmax(logits.row(0), step, target_len, enforce_length, max_len);
        Eigen::Index best = 0;
        lp.maxCoeff(&best);
        if (best == Vocab::kEos) {
            return prefix;
        }
        prefix.push_back(static_cast<int>(best));
    }
}

std::vector<DecodeHypothesis> beam_search(const NextLogitsFn& next, int target_len, int max_len, int beam_width,
                                          bool enforce_length) {
    if (beam_width < 1) {
        throw Error("beam_search: beam width must be >= 1");
    }
    struct Candidate {
        std::size_t parent;
        int token;
        double score;
    };
    std::vector<DecodeHypothesis> live{DecodeHypothesis{}};
    std::vector<DecodeHypothesis> finished;
    for (int step = 0; !live.empty() && static_cast<int>(finished.size()) < beam_width; ++step) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(live.size());
        for (const auto& h : live) {
            prefixes.push_back(h.tokens);
        }
        const Mat logits = next(prefixes);
        std::vector<Candidate> candidates;
        for (std::size_t i = 0; i < live.size(); ++i) {
            const RowVec lp = masked_log_softmax(logits.row(static_cast<Eigen::Index>(i)), step, target_len,
                                                 enforce_length, max_len);
            for (Eigen::Index t = 0; t < lp.size(); ++t) {
                if (lp[t] != kNegInf) {
                    candidates.push_back({i, static_cast<int>(t), live[i].log_prob + lp[t]});
                }
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        const std::size_t room = static_cast<std::size_t>(beam_width) - finished.size();
        std::vector<DecodeHypothesis> survivors;
        for (std::size_t c = 0; c < candidates.size() && c < room; ++c) {
            DecodeHypothesis h;
            h.tokens = live[candidates[c].parent].tokens;
            h.tokens.push_back(candidates[c].token);
            h.log_prob = candidates[c].score;
            h.finished = candidates[c].token == Vocab::kEos;
            (h.finished ? finished : survivors).push_back(std::move(h));
        }
        live = std::move(survivors);
    }
    std::stable_sort(finished.begin(), finished.end(),
                     [](const DecodeHypothesis& a, const DecodeHypothesis& b) { return a.log_prob > b.log_prob; });
    return finished;
}

std::vector<int> greedy_decode(const Model& model, std::span<const int> upper, bool enforce_length) {
    check_upper(model, upper);
    return greedy_decode(model_scorer(model, upper), static_cast<int>(upper.size()), model.config().max_len,
                         enforce_length);
}

std::vector<DecodeHypothesis> beam_search(const Model& model, std::span<const int> upper, int beam_width,
                                          bool enforce_length) {
    check_upper(model, upper);
    return beam_search(model_scorer(model, upper), static_cast<int>(upper.size()), model.config().max_len, beam_width,
                       enforce_length);
}

double sequence_log_prob(const Model& model, std::span<const int> upper, std::span<const int> lower,
                         bool enforce_length) {
    check_upper(model, upper);
    std::vector<int> prefix;
    double total = 0.0;
    for (std::size_t step = 0; step <= lower.size(); ++step) {
        const int token = step < lower.size() ? lower[step] : Vocab::kEos;
        const RowVec lp = step_log_probs(model, upper, prefix, static_cast<int>(step), enforce_length);
        if (token < 0 || token >= lp.size()) {
            throw Error("sequence_log_prob: token id out of range");
        }
        total += lp[token];
        prefix.push_back(token);
    }
    return total;
}

std::size_t rescore(const Model& model, std::span<const int> upper, const std::vector<std::vector<int>>& candidates,
                    bool enforce_length) {
    if (candidates.empty()) {
        throw Error("rescore: no candidates");
    }
    std::size_t best = 0;
    double best_score = kNegInf;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double s = sequence_log_prob(model, upper, candidates[i], enforce_length);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return best;
}

std::u32string generate(const Model& model, const Vocab& vocab, std::u32string_view upper,
                        const DecodeOptions& options) {
    const auto ids = vocab.encode(upper, false);
    std::vector<int> lower;
    if (options.beam_width <= 1) {
        lower = greedy_decode(model, ids, options.enforce_length);
    } else {
        const auto hyps = beam_search(model, ids, options.beam_width, options.enforce_length);
        lower = hyps.front().content();
    }
    return vocab.decode(lower);
}

}  // namespace couplet
