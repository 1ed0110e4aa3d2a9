#pragma once

#include <span>
#include <string>
#include <vector>

#include "couplet/corpus.hpp"
#include "couplet/decoding.hpp"
#include "couplet/transformer.hpp"

namespace couplet {

struct BleuResult {
    double score = 0.0;
    // Clipped modified precisions for n = 1..max_n (smoothed for n >= 2).
    std::vector<double> precisions;
    double brevity_penalty = 0.0;
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;
};

// Character-level corpus BLEU. Orders n >= 2 use add-1 smoothing on both
// numerator and denominator; a zero unigram precision gives a score of 0.
BleuResult bleu(std::span<const std::u32string> candidates, std::span<const std::u32string> references,
                int max_n = 4);

// exp of the mean negative log-likelihood over lower-line tokens and the EOS.
double perplexity(const Model& model, std::span<const EncodedPair> pairs, int batch_size = 32);

struct NamedSystem {
    std::string name;
    const Model* model = nullptr;
    const Vocab* vocab = nullptr;
};

struct SystemRow {
    std::string name;
    double bleu = 0.0;
    double perplexity = 0.0;
    std::vector<double> precisions;
    std::size_t examples = 0;
    bool operator==(const SystemRow&) const = default;
};

struct EvalReport {
    std::vector<SystemRow> rows;
    DecodeOptions decode;

    std::string to_table() const;
    // A JSON array with one object per system row.
    std::string to_json() const;
};

EvalReport evaluate_systems(std::span<const NamedSystem> systems, std::span<const CoupletPair> test_set,
                            const DecodeOptions& decode = {});

}  // namespace couplet
