#include "msti/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace msti::synthetic {

namespace fs = std::filesystem;

std::string to_string(AnomalyKind kind) {
    switch (kind) {
        case AnomalyKind::appearance_only: return "appearance_only";
        case AnomalyKind::motion_only: return "motion_only";
        case AnomalyKind::joint: return "joint";
    }
    return "?";
}

AnomalyKind parse_anomaly_kind(const std::string& s) {
    if (s == "appearance_only") return AnomalyKind::appearance_only;
    if (s == "motion_only") return AnomalyKind::motion_only;
    if (s == "joint") return AnomalyKind::joint;
    throw Error("unknown anomaly kind '" + s + "'");
}

void SyntheticSceneConfig::validate() const {
    if (canvas < 16) throw Error("synthetic scene: canvas must be at least 16 pixels");
    if (sprite_size < 3 || sprite_size >= canvas) throw Error("synthetic scene: sprite_size out of range");
    if (walkway_top < sprite_size || walkway_top + sprite_size > canvas) {
        throw Error("synthetic scene: walkway_top must leave room for a sprite above and below it");
    }
    if (max_speed < 1) throw Error("synthetic scene: max_speed must be at least 1");
    if (anomaly_speed <= max_speed) {
        throw Error("synthetic scene: anomaly_speed " + std::to_string(anomaly_speed) +
                    " must exceed the normal bound " + std::to_string(max_speed));
    }
    if (normal_styles.empty() || anomaly_styles.empty()) throw Error("synthetic scene: sprite styles must be non-empty");
    if (train_videos < 0 || test_videos < 0 || train_frames < 1 || test_frames < 1 || sprites_per_video < 1) {
        throw Error("synthetic scene: video counts and lengths must be positive");
    }
    for (std::size_t i = 0; i < anomalies.size(); ++i) {
        const auto& a = anomalies[i];
        if (a.video < 0 || a.video >= test_videos) {
            throw Error("anomaly script " + std::to_string(i) + ": video " + std::to_string(a.video) + " out of range");
        }
        if (a.first_frame < 0 || a.last_frame < a.first_frame || a.last_frame >= test_frames) {
            throw Error("anomaly script " + std::to_string(i) + ": frame range [" + std::to_string(a.first_frame) +
                        ", " + std::to_string(a.last_frame) + "] outside video length " + std::to_string(test_frames));
        }
        for (std::size_t j = 0; j < i; ++j) {
            const auto& b = anomalies[j];
            if (a.video == b.video && a.first_frame <= b.last_frame && b.first_frame <= a.last_frame) {
                throw Error("anomaly scripts " + std::to_string(j) + " and " + std::to_string(i) +
                            " overlap on video " + std::to_string(a.video));
            }
        }
    }
}

std::vector<AnomalyScript> default_anomaly_script(const SyntheticSceneConfig& config, int clip_length) {
    std::vector<AnomalyScript> out;
    const AnomalyKind kinds[3] = {AnomalyKind::appearance_only, AnomalyKind::motion_only, AnomalyKind::joint};
    for (int v = 0; v < config.test_videos; ++v) {
        const int length = 8 + v % 3;
        int first = clip_length + 6 + (v * 5) % 8;
        int last = first + length - 1;
        if (last >= config.test_frames) {
            last = config.test_frames - 1;
            first = std::max(clip_length + 1, last - length + 1);
        }
        if (first > last) continue;
        out.push_back(AnomalyScript{v, first, last, kinds[v % 3]});
    }
    return out;
}

Axis advance(Axis a, int lo, int hi) {
    int p = a.pos + a.vel;
    int v = a.vel;
    if (p < lo) {
        p = 2 * lo - p;
        v = -v;
    } else if (p > hi) {
        p = 2 * hi - p;
        v = -v;
    }
    a.pos = std::clamp(p, lo, hi);
    a.vel = v;
    return a;
}

bool shape_covers(SpriteShape shape, int size, int dx, int dy) {
    if (dx < 0 || dy < 0 || dx >= size || dy >= size) return false;
    const int mid = size / 2;
    switch (shape) {
        case SpriteShape::square: return true;
        case SpriteShape::circle: {
            const double cx = (size - 1) / 2.0;
            const double r = size / 2.0;
            return (dx - cx) * (dx - cx) + (dy - cx) * (dy - cx) <= r * r * 0.9;
        }
        case SpriteShape::triangle: return std::abs(dx - mid) * 2 <= dy + 1;
        case SpriteShape::cross: return std::abs(dx - mid) <= size / 6 || std::abs(dy - mid) <= size / 6;
    }
    return false;
}

std::vector<std::uint8_t> render_background(const SyntheticSceneConfig& config) {
    const int s = config.canvas;
    std::vector<std::uint8_t> bg(static_cast<std::size_t>(s) * s * 3);
    std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ull + 1);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            std::uint8_t* px = &bg[(static_cast<std::size_t>(y) * s + x) * 3];
            if (y < config.walkway_top) {
                const bool stripe = ((x + y) / 4) % 2 == 0;
                px[0] = 40;
                px[1] = static_cast<std::uint8_t>(stripe ? 120 : 100);
                px[2] = 50;
            } else {
                const bool tile = ((x / 8) + (y / 8)) % 2 == 0;
                const int base = 120 + (x * 30) / s;
                px[0] = px[1] = px[2] = static_cast<std::uint8_t>(base + (tile ? 10 : 0));
            }
        }
    }
    // A few static fixtures in the walkway.
    std::uniform_int_distribution<int> px(0, s - 4);
    std::uniform_int_distribution<int> py(config.walkway_top, s - 4);
    for (int i = 0; i < 3; ++i) {
        const int x0 = px(rng), y0 = py(rng);
        for (int y = y0; y < y0 + 3; ++y)
            for (int x = x0; x < x0 + 3; ++x) {
                std::uint8_t* p = &bg[(static_cast<std::size_t>(y) * s + x) * 3];
                p[0] = 90;
                p[1] = 70;
                p[2] = 50;
            }
    }
    return bg;
}

namespace {

struct Region {
    int x_lo, x_hi, y_lo, y_hi;
};

int random_velocity(std::mt19937_64& rng, int max_speed) {
    std::uniform_int_distribution<int> d(1, max_speed);
    std::uniform_int_distribution<int> sign(0, 1);
    return d(rng) * (sign(rng) ? 1 : -1);
}

// Simulates from `start` to the end of the video; frames before `start` mirror the start
// position and are marked absent. `fast(t)` selects the anomalous horizontal speed for
// the step that lands on frame t.
template <typename Fast>
SpriteTrack simulate_track(const SpriteStyle& style, int n, int start, Axis ax, Axis ay, const Region& r,
                           int last_present, int anomaly_speed, Fast fast) {
    SpriteTrack t;
    t.style = style;
    t.x.assign(n, ax.pos);
    t.y.assign(n, ay.pos);
    t.present.assign(n, false);
    const int base_speed = std::abs(ax.vel);
    for (int f = start; f < n; ++f) {
        if (f > start) {
            Axis step = ax;
            step.vel = (ax.vel >= 0 ? 1 : -1) * (fast(f) ? anomaly_speed : base_speed);
            step = advance(step, r.x_lo, r.x_hi);
            ax.pos = step.pos;
            ax.vel = (step.vel >= 0 ? 1 : -1) * base_speed;
            ay = advance(ay, r.y_lo, r.y_hi);
        }
        t.x[f] = ax.pos;
        t.y[f] = ay.pos;
        t.present[f] = f <= last_present;
    }
    return t;
}

std::string video_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "video_%03d", index);
    return buf;
}

std::string frame_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

SceneVideo simulate_video(const SyntheticSceneConfig& config, data::Split split, int index) {
    const int s = config.canvas;
    const int sz = config.sprite_size;
    const int n = split == data::Split::train ? config.train_frames : config.test_frames;
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(split == data::Split::train ? 1 : 2),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);

    SceneVideo video;
    video.id = video_name(index);
    video.size = s;
    video.labels.assign(n, 0);

    const Region walkway{0, s - sz, config.walkway_top, s - sz};
    const Region forbidden{0, s - sz, 0, config.walkway_top - sz};
    const int vy_max = std::max(1, config.max_speed / 2);
    auto place = [&](const Region& r) {
        std::uniform_int_distribution<int> dx(r.x_lo, r.x_hi);
        std::uniform_int_distribution<int> dy(r.y_lo, r.y_hi);
        std::uniform_int_distribution<int> dvy(-vy_max, vy_max);
        Axis ax{dx(rng), random_velocity(rng, config.max_speed)};
        Axis ay{dy(rng), r.y_hi > r.y_lo ? dvy(rng) : 0};
        return std::pair{ax, ay};
    };

    std::vector<AnomalyScript> scripts;
    if (split == data::Split::test) {
        for (const auto& a : config.anomalies)
            if (a.video == index) scripts.push_back(a);
    }
    auto motion_anomalous = [&](int f) {
        for (const auto& a : scripts)
            if (a.kind == AnomalyKind::motion_only && f >= a.first_frame && f <= a.last_frame) return true;
        return false;
    };
    auto never = [](int) { return false; };

    std::uniform_int_distribution<std::size_t> normal_pick(0, config.normal_styles.size() - 1);
    std::uniform_int_distribution<std::size_t> anomaly_pick(0, config.anomaly_styles.size() - 1);
    for (int j = 0; j < config.sprites_per_video; ++j) {
        const SpriteStyle style = config.normal_styles[normal_pick(rng)];
        auto [ax, ay] = place(walkway);
        if (j == 0) {
            video.sprites.push_back(simulate_track(style, n, 0, ax, ay, walkway, n - 1, config.anomaly_speed,
                                                   motion_anomalous));
        } else {
            video.sprites.push_back(simulate_track(style, n, 0, ax, ay, walkway, n - 1, config.anomaly_speed, never));
        }
    }
    for (const auto& a : scripts) {
        for (int f = a.first_frame; f <= a.last_frame; ++f) video.labels[f] = 1;
        if (a.kind == AnomalyKind::motion_only) continue;
        const bool appearance = a.kind == AnomalyKind::appearance_only;
        const Region& r = appearance ? walkway : forbidden;
        const SpriteStyle style = appearance ? config.anomaly_styles[anomaly_pick(rng)] : config.normal_styles[normal_pick(rng)];
        auto [ax, ay] = place(r);
        video.sprites.push_back(
            simulate_track(style, n, a.first_frame, ax, ay, r, a.last_frame, config.anomaly_speed, never));
    }

    const auto bg = render_background(config);
    std::vector<std::vector<bool>> masks;
    for (const auto& sp : video.sprites) {
        std::vector<bool> m(static_cast<std::size_t>(sz) * sz);
        for (int dy = 0; dy < sz; ++dy)
            for (int dx = 0; dx < sz; ++dx) m[dy * sz + dx] = shape_covers(sp.style.shape, sz, dx, dy);
        masks.push_back(std::move(m));
    }
    for (int f = 0; f < n; ++f) {
        auto frame = bg;
        data::FlowImage flow;
        const bool has_flow = f + 1 < n;
        if (has_flow) {
            flow.width = s;
            flow.height = s;
            flow.uv.assign(static_cast<std::size_t>(s) * s * 2, 0.0f);
        }
        for (std::size_t k = 0; k < video.sprites.size(); ++k) {
            const auto& sp = video.sprites[k];
            if (!sp.present[f]) continue;
            const float u = has_flow ? static_cast<float>(sp.x[f + 1] - sp.x[f]) : 0.0f;
            const float v = has_flow ? static_cast<float>(sp.y[f + 1] - sp.y[f]) : 0.0f;
            for (int dy = 0; dy < sz; ++dy) {
                for (int dx = 0; dx < sz; ++dx) {
                    if (!masks[k][dy * sz + dx]) continue;
                    const int x = sp.x[f] + dx, y = sp.y[f] + dy;
                    const std::size_t p = static_cast<std::size_t>(y) * s + x;
                    std::copy(sp.style.rgb.begin(), sp.style.rgb.end(), frame.begin() + p * 3);
                    if (has_flow) {
                        flow.uv[p * 2] = u;
                        flow.uv[p * 2 + 1] = v;
                    }
                }
            }
        }
        video.frames.push_back(std::move(frame));
        if (has_flow) video.flows.push_back(std::move(flow));
    }
    return video;
}

GeneratedDataset generate_synthetic_scene(const SyntheticSceneConfig& config, const fs::path& root, int clip_length) {
    config.validate();
    const fs::path marker = root / ".msti_synthetic";
    for (const char* split : {"train", "test"}) {
        const fs::path dir = root / split;
        if (fs::exists(dir) && !fs::is_empty(dir) && !fs::exists(marker)) {
            throw Error("refusing to overwrite non-synthetic dataset directory " + dir.string());
        }
        fs::remove_all(dir);
    }
    fs::create_directories(root);
    std::ofstream(marker) << "generated\n";

    for (const data::Split split : {data::Split::train, data::Split::test}) {
        const int count = split == data::Split::train ? config.train_videos : config.test_videos;
        for (int v = 0; v < count; ++v) {
            const SceneVideo video = simulate_video(config, split, v);
            const fs::path dir = root / data::to_string(split) / video.id;
            fs::create_directories(dir / "flow");
            for (std::size_t f = 0; f < video.frames.size(); ++f) {
                cv::Mat rgb(video.size, video.size, CV_8UC3, const_cast<std::uint8_t*>(video.frames[f].data()));
                cv::Mat bgr;
                cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
                const fs::path png = dir / (frame_name(static_cast<int>(f)) + ".png");
                if (!cv::imwrite(png.string(), bgr)) throw Error("failed to write " + png.string());
            }
            for (std::size_t f = 0; f < video.flows.size(); ++f) {
                data::write_flo(dir / "flow" / (frame_name(static_cast<int>(f)) + ".flo"), video.flows[f]);
            }
            if (split == data::Split::test) {
                std::ofstream labels(dir / "labels.txt");
                for (int l : video.labels) labels << l << '\n';
            }
        }
    }
    return GeneratedDataset{data::VideoDataset::open(root, data::Split::train, clip_length),
                            data::VideoDataset::open(root, data::Split::test, clip_length)};
}

}  // namespace msti::synthetic
