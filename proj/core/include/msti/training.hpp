#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msti/backbone.hpp"
#include "msti/data.hpp"
#include "msti/memory.hpp"

namespace msti::train {

struct TrainConfig {
    double lambda_intensity = 0.8;
    double lambda_separate = 3e-4;
    double lambda_compact = 0.001;
    double delta = 0.1;
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 8;
    int epochs = 30;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;   ///< steps between checkpoints; 0 writes only the final one
    int max_steps = -1;         ///< stop after this many total steps when >= 0
    bool intensity_sum = false; ///< raw squared-error sum instead of the pixel mean
    bool compact_inverted = false;

    void validate() const;
};

struct LossBreakdown {
    double intensity = 0;
    double separateness = 0;
    double compactness = 0;
    double total = 0;
};

template <typename T>
Var<T> intensity_loss(const Var<T>& pred, const Var<T>& target, bool sum = false) {
    return ops::squared_error(pred, target, !sum);
}

/// lambda_i * intensity + lambda_s * separateness + lambda_c * compactness.
template <typename T>
Var<T> total_loss(const Var<T>& intensity, const Var<T>& separateness, const Var<T>& compactness,
                  const TrainConfig& cfg) {
    return ops::weighted_sum<T>({intensity, separateness, compactness},
                                {static_cast<T>(cfg.lambda_intensity), static_cast<T>(cfg.lambda_separate),
                                 static_cast<T>(cfg.lambda_compact)});
}
double total_loss(const LossBreakdown& parts, const TrainConfig& cfg);

template <typename T>
struct LossTerms {
    Var<T> intensity, separateness, compactness, total;
    LossBreakdown breakdown() const;
};

/// All loss terms for one forward pass. Without memory the two memory terms are constant zero.
template <typename T>
LossTerms<T> compute_losses(const ForwardOutput<T>& out, const Var<T>& target, const TrainConfig& cfg);

/// Adaptive-moment optimizer over a parameter set.
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(const ParameterSet<T>& params, double lr, double beta1, double beta2, double eps);

    void step(ParameterSet<T>& params);
    long long steps() const { return steps_; }
    void set_steps(long long s) { steps_ = s; }
    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }

private:
    double lr_ = 0, beta1_ = 0, beta2_ = 0, eps_ = 0;
    long long steps_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

struct Progress {
    int epoch = 0;            ///< epoch in progress
    int batch_in_epoch = 0;   ///< next batch to run within the epoch
    long long step = 0;       ///< completed optimization steps
};

/// Model, memory bank, optimizer and progress: everything a checkpoint captures.
class TrainingState {
public:
    TrainingState(NetworkConfig net, ModelVariant variant, TrainConfig cfg);

    MstiNet<float>& model() { return model_; }
    const MstiNet<float>& model() const { return model_; }
    memory::MemoryBank<float>& bank() { return bank_; }
    const memory::MemoryBank<float>& bank() const { return bank_; }
    Adam<float>& optimizer() { return adam_; }
    Progress& progress() { return progress_; }
    const Progress& progress() const { return progress_; }
    const TrainConfig& config() const { return cfg_; }
    void set_config(const TrainConfig& cfg);

    /// forward -> losses -> backward -> Adam -> memory update. Throws on a non-finite loss.
    LossBreakdown step(const data::Batch& batch);
    /// Losses of a batch without updating anything (training-mode normalization statistics are
    /// not committed either).
    LossBreakdown evaluate_losses(const data::Batch& batch);

private:
    TrainConfig cfg_;
    MstiNet<float> model_;
    memory::MemoryBank<float> bank_;
    Adam<float> adam_;
    Progress progress_;
};

/// Batch order for one epoch, a pure function of (seed, epoch).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t clips, int batch_size, std::uint64_t seed, int epoch);

struct TrainRunOptions {
    std::filesystem::path out_dir;
    std::string log_name = "train_log.jsonl";
    std::string checkpoint_name = "checkpoint.msti";
    bool quiet = false;
    std::function<void(const Progress&, const LossBreakdown&)> on_step;
};

struct TrainRunResult {
    std::vector<LossBreakdown> losses;
    std::filesystem::path checkpoint;
};

/// Runs (or continues) training on the clips until cfg.epochs (or cfg.max_steps) and writes
/// the log and checkpoints. Throws on an empty clip set.
TrainRunResult train(TrainingState& state, const data::ClipSet& clips, const TrainRunOptions& options);

inline constexpr const char* kCheckpointFormat = "msti-checkpoint";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state);
TrainingState load_checkpoint(const std::filesystem::path& path);

}  // namespace msti::train
