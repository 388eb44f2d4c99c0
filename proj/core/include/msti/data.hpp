#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "msti/tensor.hpp"

namespace msti::data {

enum class Split { train, test };
std::string to_string(Split split);
Split parse_split(const std::string& s);

/// T consecutive frames and the frame that follows them, all in [-1,1].
struct FrameClip {
    Tensor<float> frames;  ///< [T,3,H,W]
    Tensor<float> target;  ///< [1,3,H,W]
    std::string video_id;
    int frame_index = 0;   ///< index of the target within its video
    int label = -1;        ///< label of the target frame, -1 when unlabeled
};

/// Per-pixel displacement in pixels per frame step, one slot per clip frame.
/// Slot i holds the motion that carried frame (s+i-1) into frame (s+i), expressed on
/// the grid of frame s+i-1; it is zero for the first frame of a video.
struct FlowField {
    Tensor<float> flow;  ///< [T,2,H,W]
};

struct VideoEntry {
    std::string id;
    std::filesystem::path frame_dir;
    std::optional<std::filesystem::path> label_file;
};

/// On-disk layout: <root>/<split>/<video_id>/%06d.png, flow/%06d.flo, labels.txt.
struct VideoDataset {
    std::filesystem::path root;
    Split split = Split::train;
    std::vector<VideoEntry> videos;
    int clip_length = 4;
    int stride = 1;

    /// Scans <root>/<split>; videos are sorted by id.
    static VideoDataset open(const std::filesystem::path& root, Split split, int clip_length = 4, int stride = 1);
};

/// Maps an 8-bit (or float, 0..255) 3-channel raster to [-1,1] via v/127.5 - 1 after a
/// bilinear resize to `out_size` (height, width). Returns [1,3,H,W] in RGB order when
/// `bgr` is set (OpenCV decoding order), else channel order is kept.
Tensor<float> normalize_frame(const cv::Mat& image, int out_height, int out_width, bool bgr = true);

/// Standard 2-channel .flo file: "PIEH", int32 width, int32 height, interleaved (u, v) floats.
struct FlowImage {
    int width = 0;
    int height = 0;
    std::vector<float> uv;  ///< row-major, interleaved
};
FlowImage read_flo(const std::filesystem::path& path);
void write_flo(const std::filesystem::path& path, const FlowImage& flow);
/// Bilinear resize of a flow image with displacement rescaling, as [1,2,H,W].
Tensor<float> flow_to_tensor(const FlowImage& flow, int out_height, int out_width);

/// Every frame of one video, normalized and resized, with the forward flow of each frame.
struct LoadedVideo {
    std::string id;
    std::vector<std::string> frame_stems;
    std::vector<Tensor<float>> frames;  ///< [1,3,H,W] each
    std::vector<Tensor<float>> flows;   ///< [1,2,H,W]: motion frame k -> k+1 (zeros where unused)
    std::vector<int> labels;            ///< empty when unlabeled
};

struct ClipRef {
    int video = 0;
    int start = 0;  ///< first input frame
};

/// Assembled mini-batch. Flow is divided by the flow scale and clamped to [-1,1].
struct Batch {
    Tensor<float> frames;  ///< [B,3T,H,W]
    Tensor<float> flow;    ///< [B,2T,H,W]
    Tensor<float> target;  ///< [B,3,H,W]
    std::vector<ClipRef> refs;
};

struct ClipOptions {
    int resolution = 256;
    float flow_scale = 20.0f;
};

/// Sliding-window clips over a dataset held in memory.
class ClipSet {
public:
    /// Loads every video. Videos shorter than T+1 frames are skipped and counted.
    static ClipSet build(const VideoDataset& dataset, const ClipOptions& options);

    std::size_t size() const { return refs_.size(); }
    const std::vector<ClipRef>& refs() const { return refs_; }
    const std::vector<LoadedVideo>& videos() const { return videos_; }
    int skipped_videos() const { return skipped_; }
    int clip_length() const { return clip_length_; }
    const ClipOptions& options() const { return options_; }

    std::pair<FrameClip, FlowField> clip(std::size_t i) const;
    Batch batch(const std::vector<std::size_t>& indices) const;
    /// Clip indices belonging to one video, in frame order.
    std::vector<std::size_t> clips_of_video(int video) const;

private:
    std::vector<LoadedVideo> videos_;
    std::vector<ClipRef> refs_;
    int clip_length_ = 4;
    int skipped_ = 0;
    ClipOptions options_;
};

/// Number of clips a video of `frames` frames yields.
int clip_count(int frames, int clip_length, int stride);

/// Reads labels.txt (one 0/1 per line).
std::vector<int> read_labels(const std::filesystem::path& path);

}  // namespace msti::data
