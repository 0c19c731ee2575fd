#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pesqdnn/features.hpp"
#include "pesqdnn/losses.hpp"
#include "pesqdnn/model.hpp"

namespace pesqdnn {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Plateau LR schedule: decay after `decay_patience` consecutive non-improving
// epochs, stop after `stop_patience`. "Improvement" is strictly lower dev loss
// than the best seen; the decay counter resets on improvement and on decay,
// the stop counter only on improvement.
struct ScheduleConfig {
    double initial_lr = 1e-4;
    double decay_factor = 0.6;
    std::size_t decay_patience = 2;
    std::size_t stop_patience = 6;
    std::size_t max_epochs = 10000;
};

struct ScheduleEvent {
    bool improved = false;
    bool decayed = false;
    bool stop = false;
};

struct ScheduleState {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t epochs_since_improvement = 0; // stop counter
    std::size_t epochs_since_decay_reset = 0; // decay counter
    std::size_t decay_count = 0;
    double current_lr = 0.0;
    std::size_t epoch = 0;

    ScheduleEvent update(double dev_loss, const ScheduleConfig& cfg);
};

struct TrainState {
    ModelConfig config;
    ModelWeights weights;
    std::vector<std::vector<double>> adam_m; // per parameter, weights order
    std::vector<std::vector<double>> adam_v;
    std::size_t step = 0;
    AdamConfig adam;
    ScheduleState schedule;
    std::uint64_t rng_state = 0;

    static TrainState init(const ModelConfig& cfg, const ScheduleConfig& sched,
                           const AdamConfig& adam = {});
};

// One Adam update from the gradients currently held in the weights' grad
// slots; clears them afterwards. Aborts on non-finite gradients.
void adam_step(TrainState& state, double lr);

// Full-utterance BPTT: one forward over all blocks, one backward, one step.
double train_utterance(TrainState& state, const FeatureBlockSequence& blocks, double pesq_u,
                       const LossConfig& loss_cfg, double lr);

// Forward-only loss for dev evaluation.
double eval_loss(const ModelWeights& w, const ModelConfig& cfg,
                 const FeatureBlockSequence& blocks, double pesq_u,
                 const LossConfig& loss_cfg);

struct TrainingExample {
    const FeatureBlockSequence* blocks;
    double pesq_u;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev_loss = 0.0;
    double lr = 0.0;
    bool decayed = false;
    bool stopped = false;
    bool improved = false;
};

struct TrainingResult {
    ModelWeights best_weights;
    double best_dev_loss = 0.0;
    std::size_t best_epoch = 0;
    std::vector<EpochLog> log;
};

struct RunTrainingOptions {
    ScheduleConfig schedule;
    AdamConfig adam;
    LossConfig loss;
    std::uint64_t shuffle_seed = 1;
    // optional early exit once training loss drops below a floor (overfit runs)
    std::optional<double> train_loss_floor;
    std::function<void(const EpochLog&)> on_epoch; // optional log sink
};

TrainingResult run_training(const ModelConfig& cfg,
                            const std::vector<TrainingExample>& train,
                            const std::vector<TrainingExample>& dev,
                            const RunTrainingOptions& opts);

// --- checkpoints -------------------------------------------------------------

// Binary container: magic+version, model config JSON, NormStats JSON (may be
// empty), named f32 parameter arrays, FNV-1a64 content hash.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelWeights& weights, const std::string& norm_stats_json);

struct Checkpoint {
    ModelConfig config;
    ModelWeights weights; // values exactly representable in f32
    std::string norm_stats_json;
};

Checkpoint load_checkpoint(const std::string& path);

} // namespace pesqdnn
