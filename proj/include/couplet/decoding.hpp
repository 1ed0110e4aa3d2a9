#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "couplet/corpus.hpp"
#include "couplet/transformer.hpp"

namespace couplet {

struct DecodeOptions {
    int beam_width = 1;
    // Force exactly as many characters as the upper line has.
    bool enforce_length = true;
};

struct DecodeHypothesis {
    // Lower-line ids, ending with EOS when finished.
    std::vector<int> tokens;
    // Sum of per-step log-probabilities under the masked distribution.
    double log_prob = 0.0;
    bool finished = false;

    // Lower-line ids without the trailing EOS.
    std::vector<int> content() const;
};

// Log-softmax of `logits` restricted to the tokens allowed at `step`
// (disallowed entries are -inf). PAD, BOS, UNK and SEP are never allowed;
// with length enforcement EOS is allowed only at step == target_len, where it
// is the only choice. Without it EOS is allowed from step 1 and forced at max_len.
RowVec masked_log_softmax(const RowVec& logits, int step, int target_len, bool enforce_length, int max_len);

// Next-token logits (one row per prefix) for a batch of lower-line prefixes.
using NextLogitsFn = std::function<Mat(const std::vector<std::vector<int>>& prefixes)>;

// Decoders over an arbitrary scorer; `target_len` is the upper-line length.
std::vector<int> greedy_decode(const NextLogitsFn& next, int target_len, int max_len, bool enforce_length = true);
std::vector<DecodeHypothesis> beam_search(const NextLogitsFn& next, int target_len, int max_len, int beam_width,
                                          bool enforce_length = true);

NextLogitsFn model_scorer(const Model& model, std::span<const int> upper);

std::vector<int> greedy_decode(const Model& model, std::span<const int> upper, bool enforce_length = true);

// Hypotheses sorted by descending log-probability.
std::vector<DecodeHypothesis> beam_search(const Model& model, std::span<const int> upper, int beam_width,
                                          bool enforce_length = true);

// Log-probability of `lower` followed by EOS under the same masking the decoders use.
double sequence_log_prob(const Model& model, std::span<const int> upper, std::span<const int> lower,
                         bool enforce_length = true);

// Picks the best of `candidates` by sequence_log_prob; returns its index.
std::size_t rescore(const Model& model, std::span<const int> upper, const std::vector<std::vector<int>>& candidates,
                    bool enforce_length = true);

// Character-level convenience wrapper: encodes the upper line, decodes with
// greedy search (beam_width 1) or beam search, and returns the best lower line.
std::u32string generate(const Model& model, const Vocab& vocab, std::u32string_view upper,
                        const DecodeOptions& options = {});

}  // namespace couplet
