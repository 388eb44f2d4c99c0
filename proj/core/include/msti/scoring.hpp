#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msti/data.hpp"
#include "msti/training.hpp"

namespace msti::scoring {

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kDefaultTau = 0.7;

/// PSNR in dB of frames in [-1,1], measured after rescaling both to [0,1] (peak 1).
/// A zero error returns `cap`.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double cap = kPsnrCap);

/// PSNR from a mean squared error on the [0,1] scale.
double psnr_from_mse(double mse, double cap = kPsnrCap);

/// Min-max normalization to [0,1]; a constant series maps to all zeros.
std::vector<double> min_max_normalize(const std::vector<double>& v);

/// R = 1 - tau (1 - f(P)) - (1 - tau) f(D), clamped to [0,1], per video.
std::vector<double> regularity_score(const std::vector<double>& psnr, const std::vector<double>& distance,
                                     double tau = kDefaultTau);

/// Trapezoidal ROC AUC of anomaly scores (higher = more anomalous). Ties count 1/2.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ScoreSeries {
    std::string video_id;
    std::vector<int> frame_index;
    std::vector<double> psnr;
    std::vector<double> memory_distance;
    std::vector<double> regularity;
    std::vector<int> labels;  ///< empty when unlabeled

    void check() const;
};

/// Recomputes the regularity column of every series.
void rescore(std::vector<ScoreSeries>& series, double tau = kDefaultTau);

/// AUC over all frames of all series (scores 1 - R). Nullopt when any series is unlabeled
/// or a class is absent.
std::optional<double> overall_auc(const std::vector<ScoreSeries>& series);

struct RegularitySummary {
    double normal_mean = 0;
    double anomalous_mean = 0;
    std::size_t normal_frames = 0;
    std::size_t anomalous_frames = 0;
};
RegularitySummary summarize(const std::vector<ScoreSeries>& series);

void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreSeries>& series);
std::vector<ScoreSeries> read_scores_csv(const std::filesystem::path& path);

struct EvalOptions {
    double tau = kDefaultTau;
    bool max_distance = false;  ///< max over queries instead of the mean
    int batch_size = 8;
    std::optional<std::filesystem::path> error_map_dir;
    std::optional<int> max_videos;
};

struct EvalResult {
    std::vector<ScoreSeries> series;
    std::optional<double> auc;
};

/// Forward pass with frozen memory and inference-mode normalization over every test clip.
EvalResult evaluate(train::TrainingState& state, const data::ClipSet& clips, const EvalOptions& options = {});

struct AttentionLocality {
    double moving_mean = 0;
    double background_mean = 0;
    double relative_gain = 0;  ///< moving / background - 1
    std::size_t moving_pixels = 0;
    std::size_t background_pixels = 0;
};

/// Mean level-1 fusion weight over pixels with nonzero flow in any clip slot versus all
/// other pixels. Requires a variant with ASTFM.
AttentionLocality attention_locality(train::TrainingState& state, const data::ClipSet& clips, int batch_size = 8);

}  // namespace msti::scoring
