#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "couplet/corpus.hpp"
#include "couplet/transformer.hpp"

namespace couplet {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 128;
    int epochs = 1;
    // When positive, overrides `epochs` as the total step budget.
    std::int64_t max_steps = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    // 0 disables periodic checkpoints; the final one is always written.
    std::int64_t checkpoint_every = 0;
    bool clip_grad_norm = false;
    double validation_fraction = 0.01;

    static TrainConfig desk();
    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct LossResult {
    double loss = 0.0;
    // dL/dlogits, same shape as the logits.
    Mat grad;
    std::size_t count = 0;
};

// Mean over rows with mask != 0 of -log softmax(logits)[target].
LossResult cross_entropy_loss(const Mat& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

struct NamedParam {
    std::string name;
    Param* param;
};

std::vector<NamedParam> collect_params(Model& model);

struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    std::int64_t t = 0;

    bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update from each parameter's accumulated grad.
// Throws on a non-finite gradient, naming the parameter.
void adam_step(std::span<const NamedParam> params, AdamState& state, const TrainConfig& cfg);

// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_gradients(std::span<const NamedParam> params, double max_norm);

// Everything needed to continue training bit-exactly.
struct TrainingState {
    std::string system;
    Model model;
    Vocab vocab;
    TrainConfig train;
    AdamState adam;
    std::int64_t step = 0;
    std::mt19937_64 rng;
    std::string context_file;
};

// CKP1: magic, u32 version, u32 section count, then named sections
// (u32 name length, name, u8 dtype, u32 rank, u64 dims, little-endian payload).
std::vector<std::uint8_t> serialize_checkpoint(const TrainingState& state);
TrainingState parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const TrainingState& state);
TrainingState load_checkpoint(const std::filesystem::path& path);

struct StepLog {
    std::int64_t step = 0;
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct EpochLog {
    int epoch = 0;
    double validation_perplexity = 0.0;
};

struct TrainingLog {
    std::vector<StepLog> steps;
    std::vector<EpochLog> epochs;
};

struct TrainOptions {
    // Stop once state.step reaches this value (0: the config's full budget).
    std::int64_t stop_at_step = 0;
    std::filesystem::path checkpoint_path;
    // One JSON object per line: {step, epoch, loss, lr, wall_ms}; epoch ends add
    // {epoch, val_perplexity}.
    std::ostream* log = nullptr;
};

std::int64_t total_steps(const TrainConfig& cfg, std::size_t train_pairs);

// Batch order for an epoch depends only on (seed, epoch), so a run resumed
// from a checkpoint consumes the same batches as an uninterrupted one.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// Teacher-forced training from state.step onwards.
TrainingLog train(TrainingState& state, std::span<const EncodedPair> train_set,
                  std::span<const EncodedPair> validation_set, const TrainOptions& options = {});

// One forward/backward/Adam step on a batch; returns the loss.
double train_step(TrainingState& state, const Batch& batch);

// Eval-mode masked loss for a batch (no parameter update).
double batch_loss(const Model& model, const Batch& batch);

}  // namespace couplet
