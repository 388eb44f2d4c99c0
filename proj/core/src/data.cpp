#include "msti/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace msti::data {

namespace fs = std::filesystem;

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw Error("unknown split '" + s + "', expected train or test");
}

namespace {

bool is_frame_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff" || ext == ".bmp";
}

std::vector<fs::path> list_frames(const fs::path& dir) {
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_frame_file(e.path())) frames.push_back(e.path());
    std::sort(frames.begin(), frames.end());
    return frames;
}

constexpr char kFloMagic[4] = {'P', 'I', 'E', 'H'};

}  // namespace

VideoDataset VideoDataset::open(const fs::path& root, Split split, int clip_length, int stride) {
    if (clip_length <= 0) throw Error("clip_length must be positive");
    if (stride <= 0) throw Error("stride must be positive");
    const fs::path split_dir = root / to_string(split);
    if (!fs::is_directory(split_dir)) throw Error("dataset split directory not found: " + split_dir.string());
    VideoDataset ds;
    ds.root = root;
    ds.split = split;
    ds.clip_length = clip_length;
    ds.stride = stride;
    for (const auto& e : fs::directory_iterator(split_dir)) {
        if (!e.is_directory()) continue;
        VideoEntry v;
        v.id = e.path().filename().string();
        v.frame_dir = e.path();
        if (fs::exists(e.path() / "labels.txt")) v.label_file = e.path() / "labels.txt";
        ds.videos.push_back(std::move(v));
    }
    std::sort(ds.videos.begin(), ds.videos.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return ds;
}

Tensor<float> normalize_frame(const cv::Mat& image, int out_height, int out_width, bool bgr) {
    if (image.empty() || image.rows <= 0 || image.cols <= 0) throw Error("normalize_frame: empty image");
    if (image.channels() != 3) {
        throw Error("normalize_frame: expected a 3-channel image, got " + std::to_string(image.channels()) +
                    " channels");
    }
    if (out_height <= 0 || out_width <= 0) throw Error("normalize_frame: output size must be positive");
    cv::Mat f;
    image.convertTo(f, CV_32FC3);
    if (f.rows != out_height || f.cols != out_width) {
        cv::Mat resized;
        cv::resize(f, resized, cv::Size(out_width, out_height), 0, 0, cv::INTER_LINEAR);
        f = resized;
    }
    Tensor<float> out(Shape{1, 3, out_height, out_width});
    for (int y = 0; y < out_height; ++y) {
        const auto* row = f.ptr<cv::Vec3f>(y);
        for (int x = 0; x < out_width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const int src = bgr ? 2 - c : c;
                const float v = row[x][src] / 127.5f - 1.0f;
                out.at(0, c, y, x) = std::clamp(v, -1.0f, 1.0f);
            }
        }
    }
    return out;
}

FlowImage read_flo(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open flow file: " + path.string());
    char magic[4];
    std::int32_t w = 0, h = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    if (!in || std::memcmp(magic, kFloMagic, 4) != 0) throw Error("not a .flo file (bad magic): " + path.string());
    if (w <= 0 || h <= 0 || w > (1 << 15) || h > (1 << 15)) {
        throw Error("invalid .flo dimensions in " + path.string());
    }
    FlowImage flow;
    flow.width = w;
    flow.height = h;
    flow.uv.resize(static_cast<std::size_t>(w) * h * 2);
    in.read(reinterpret_cast<char*>(flow.uv.data()), static_cast<std::streamsize>(flow.uv.size() * sizeof(float)));
    if (!in) throw Error("truncated .flo file: " + path.string());
    return flow;
}

void write_flo(const fs::path& path, const FlowImage& flow) {
    if (flow.uv.size() != static_cast<std::size_t>(flow.width) * flow.height * 2) {
        throw Error("write_flo: data size does not match dimensions");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write flow file: " + path.string());
    const std::int32_t w = flow.width, h = flow.height;
    out.write(kFloMagic, 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(flow.uv.data()), static_cast<std::streamsize>(flow.uv.size() * sizeof(float)));
}

Tensor<float> flow_to_tensor(const FlowImage& flow, int out_height, int out_width) {
    cv::Mat m(flow.height, flow.width, CV_32FC2, const_cast<float*>(flow.uv.data()));
    cv::Mat resized = m;
    float sx = 1.0f, sy = 1.0f;
    if (flow.height != out_height || flow.width != out_width) {
        cv::resize(m, resized, cv::Size(out_width, out_height), 0, 0, cv::INTER_LINEAR);
        sx = static_cast<float>(out_width) / flow.width;
        sy = static_cast<float>(out_height) / flow.height;
    }
    Tensor<float> out(Shape{1, 2, out_height, out_width});
    for (int y = 0; y < out_height; ++y) {
        const auto* row = resized.ptr<cv::Vec2f>(y);
        for (int x = 0; x < out_width; ++x) {
            out.at(0, 0, y, x) = row[x][0] * sx;
            out.at(0, 1, y, x) = row[x][1] * sy;
        }
    }
    return out;
}

std::vector<int> read_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open label file: " + path.string());
    std::vector<int> labels;
    std::string line;
    while (std::getline(in, line)) {
        line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }), line.end());
        if (line.empty()) continue;
        if (line != "0" && line != "1") throw Error("label file " + path.string() + " has non-binary entry '" + line + "'");
        labels.push_back(line == "1" ? 1 : 0);
    }
    return labels;
}

int clip_count(int frames, int clip_length, int stride) {
    if (frames < clip_length + 1) return 0;
    return (frames - clip_length - 1) / stride + 1;
}

ClipSet ClipSet::build(const VideoDataset& dataset, const ClipOptions& options) {
    if (options.resolution <= 0) throw Error("clip resolution must be positive");
    if (!(options.flow_scale > 0.0f)) throw Error("flow scale must be positive");
    ClipSet set;
    set.clip_length_ = dataset.clip_length;
    set.options_ = options;
    const int t_len = dataset.clip_length;
    const int res = options.resolution;
    for (const auto& entry : dataset.videos) {
        const auto frame_paths = list_frames(entry.frame_dir);
        const int n = static_cast<int>(frame_paths.size());
        std::vector<int> labels;
        if (entry.label_file) {
            labels = read_labels(*entry.label_file);
            if (dataset.split == Split::train) {
                if (std::find(labels.begin(), labels.end(), 1) != labels.end()) {
                    throw Error("training split contains anomaly labels: " + entry.label_file->string());
                }
                labels.clear();
            } else if (static_cast<int>(labels.size()) != n) {
                throw Error("video " + entry.id + " has " + std::to_string(n) + " frames but " +
                            std::to_string(labels.size()) + " labels");
            }
        }
        const int count = clip_count(n, t_len, dataset.stride);
        if (count == 0) {
            ++set.skipped_;
            spdlog::warn("skipping video {}: {} frames, need at least {}", entry.id, n, t_len + 1);
            continue;
        }
        LoadedVideo video;
        video.id = entry.id;
        video.labels = std::move(labels);
        for (const auto& p : frame_paths) {
            video.frame_stems.push_back(p.stem().string());
            const cv::Mat img = cv::imread(p.string(), cv::IMREAD_COLOR);
            if (img.empty()) throw Error("cannot decode frame: " + p.string());
            video.frames.push_back(normalize_frame(img, res, res));
        }
        // Clip at start s reads the forward flow of frames s-1 .. s+T-2.
        std::set<int> needed;
        const int video_index = static_cast<int>(set.videos_.size());
        for (int c = 0; c < count; ++c) {
            const int s = c * dataset.stride;
            for (int k = s - 1; k <= s + t_len - 2; ++k)
                if (k >= 0) needed.insert(k);
            set.refs_.push_back(ClipRef{video_index, s});
        }
        video.flows.assign(n, Tensor<float>());
        for (int k : needed) {
            const fs::path flo = entry.frame_dir / "flow" / (video.frame_stems[k] + ".flo");
            if (!fs::exists(flo)) {
                throw Error("missing flow sidecar for video " + entry.id + ": expected " + flo.string());
            }
            video.flows[k] = flow_to_tensor(read_flo(flo), res, res);
        }
        set.videos_.push_back(std::move(video));
    }
    return set;
}

std::pair<FrameClip, FlowField> ClipSet::clip(std::size_t i) const {
    const ClipRef r = refs_.at(i);
    const LoadedVideo& v = videos_[r.video];
    const int res = options_.resolution;
    const std::size_t plane = static_cast<std::size_t>(res) * res;
    FrameClip clip;
    FlowField flow;
    clip.frames = Tensor<float>(Shape{clip_length_, 3, res, res});
    flow.flow = Tensor<float>(Shape{clip_length_, 2, res, res});
    for (int t = 0; t < clip_length_; ++t) {
        std::copy_n(v.frames[r.start + t].data(), 3 * plane, clip.frames.data() + t * 3 * plane);
        const int k = r.start + t - 1;
        if (k >= 0) std::copy_n(v.flows[k].data(), 2 * plane, flow.flow.data() + t * 2 * plane);
    }
    const int target = r.start + clip_length_;
    clip.target = v.frames[target];
    clip.video_id = v.id;
    clip.frame_index = target;
    clip.label = v.labels.empty() ? -1 : v.labels[target];
    return {std::move(clip), std::move(flow)};
}

Batch ClipSet::batch(const std::vector<std::size_t>& indices) const {
    const int b = static_cast<int>(indices.size());
    const int res = options_.resolution;
    const std::size_t plane = static_cast<std::size_t>(res) * res;
    const int t_len = clip_length_;
    Batch batch;
    batch.frames = Tensor<float>(Shape{b, 3 * t_len, res, res});
    batch.flow = Tensor<float>(Shape{b, 2 * t_len, res, res});
    batch.target = Tensor<float>(Shape{b, 3, res, res});
    const float inv_scale = 1.0f / options_.flow_scale;
    for (int n = 0; n < b; ++n) {
        const ClipRef r = refs_.at(indices[n]);
        batch.refs.push_back(r);
        const LoadedVideo& v = videos_[r.video];
        for (int t = 0; t < t_len; ++t) {
            std::copy_n(v.frames[r.start + t].data(), 3 * plane, batch.frames.data() + batch.frames.index(n, 3 * t, 0, 0));
            const int k = r.start + t - 1;
            if (k < 0) continue;
            float* dst = batch.flow.data() + batch.flow.index(n, 2 * t, 0, 0);
            const float* src = v.flows[k].data();
            for (std::size_t i = 0; i < 2 * plane; ++i) dst[i] = std::clamp(src[i] * inv_scale, -1.0f, 1.0f);
        }
        std::copy_n(v.frames[r.start + t_len].data(), 3 * plane, batch.target.data() + batch.target.index(n, 0, 0, 0));
    }
    return batch;
}

std::vector<std::size_t> ClipSet::clips_of_video(int video) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < refs_.size(); ++i)
        if (refs_[i].video == video) out.push_back(i);
    return out;
}

}  // namespace msti::data
