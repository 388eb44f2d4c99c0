#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msti/data.hpp"

// Desk-scale moving-sprite scenes with exact forward flow and scripted anomalies.
namespace msti::synthetic {

enum class SpriteShape { square, circle, triangle, cross };
enum class AnomalyKind { appearance_only, motion_only, joint };

std::string to_string(AnomalyKind kind);
AnomalyKind parse_anomaly_kind(const std::string& s);

struct SpriteStyle {
    SpriteShape shape = SpriteShape::square;
    std::array<std::uint8_t, 3> rgb{200, 60, 60};
};

/// Frames [first_frame, last_frame] (inclusive) of test video `video` are anomalous.
struct AnomalyScript {
    int video = 0;
    int first_frame = 0;
    int last_frame = 0;
    AnomalyKind kind = AnomalyKind::appearance_only;
};

/// Normal sprites bounce inside the walkway (rows >= walkway_top) with integer velocity
/// whose largest component is at most max_speed. Rows above the walkway are never
/// entered in normal footage.
struct SyntheticSceneConfig {
    int canvas = 64;
    int train_videos = 20;
    int test_videos = 10;
    int train_frames = 24;
    int test_frames = 32;
    int sprites_per_video = 2;
    int sprite_size = 7;
    int max_speed = 2;
    int anomaly_speed = 5;
    int walkway_top = 24;
    std::vector<SpriteStyle> normal_styles{{SpriteShape::square, {220, 60, 60}}, {SpriteShape::circle, {60, 90, 220}}};
    std::vector<SpriteStyle> anomaly_styles{{SpriteShape::triangle, {240, 220, 40}}, {SpriteShape::cross, {200, 60, 220}}};
    std::vector<AnomalyScript> anomalies;
    std::uint64_t seed = 7;

    /// Throws Error for out-of-range or overlapping scripts and inconsistent speeds.
    void validate() const;
};

/// Cycles appearance, motion and joint anomalies over the test videos, one window each.
std::vector<AnomalyScript> default_anomaly_script(const SyntheticSceneConfig& config, int clip_length = 4);

/// One bounce step inside [lo, hi]: position and velocity after adding the velocity once.
struct Axis {
    int pos = 0;
    int vel = 0;
};
Axis advance(Axis a, int lo, int hi);

struct SpriteTrack {
    SpriteStyle style;
    std::vector<int> x, y;          ///< top-left corner per frame
    std::vector<bool> present;      ///< drawn in this frame
};

struct SceneVideo {
    std::string id;
    int size = 0;
    std::vector<std::vector<std::uint8_t>> frames;  ///< RGB interleaved, size*size*3 each
    std::vector<data::FlowImage> flows;             ///< forward flow frame k -> k+1 (k < n-1)
    std::vector<int> labels;
    std::vector<SpriteTrack> sprites;               ///< in draw order
};

/// Deterministic simulation of one video; `index` is the video index within its split.
SceneVideo simulate_video(const SyntheticSceneConfig& config, data::Split split, int index);

/// Static background shared by every video of a configuration.
std::vector<std::uint8_t> render_background(const SyntheticSceneConfig& config);

/// Pixel mask of a sprite shape inside its size x size box.
bool shape_covers(SpriteShape shape, int size, int dx, int dy);

struct GeneratedDataset {
    data::VideoDataset train;
    data::VideoDataset test;
};

/// Writes <root>/{train,test}/<video_id>/%06d.png, flow/%06d.flo, and labels.txt (test only).
GeneratedDataset generate_synthetic_scene(const SyntheticSceneConfig& config, const std::filesystem::path& root,
                                          int clip_length = 4);

}  // namespace msti::synthetic
