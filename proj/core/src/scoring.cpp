#include "msti/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <spdlog/spdlog.h>

namespace msti::scoring {

namespace fs = std::filesystem;

double psnr_from_mse(double mse, double cap) {
    if (mse <= 0) return cap;
    return std::min(cap, 10.0 * std::log10(1.0 / mse));
}

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double cap) {
    if (!(pred.shape() == target.shape())) {
        throw Error("psnr: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
    }
    if (pred.size() == 0) throw Error("psnr: empty frames");
    double sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        // (p+1)/2 - (t+1)/2
        const double d = 0.5 * (static_cast<double>(pred[i]) - static_cast<double>(target[i]));
        sum += d * d;
    }
    return psnr_from_mse(sum / static_cast<double>(pred.size()), cap);
}

template double psnr(const Tensor<float>&, const Tensor<float>&, double);
template double psnr(const Tensor<double>&, const Tensor<double>&, double);

std::vector<double> min_max_normalize(const std::vector<double>& v) {
    std::vector<double> out(v.size(), 0.0);
    if (v.empty()) return out;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double range = *hi - *lo;
    if (!(range > 0)) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
    return out;
}

std::vector<double> regularity_score(const std::vector<double>& psnr, const std::vector<double>& distance, double tau) {
    if (psnr.size() != distance.size()) {
        throw Error("regularity_score: psnr series has " + std::to_string(psnr.size()) + " frames, distance series " +
                    std::to_string(distance.size()));
    }
    const auto fp = min_max_normalize(psnr);
    const auto fd = min_max_normalize(distance);
    std::vector<double> r(psnr.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        r[i] = std::clamp(1.0 - tau * (1.0 - fp[i]) - (1.0 - tau) * fd[i], 0.0, 1.0);
    }
    return r;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw Error("roc_auc: scores and labels differ in length");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg)++;
    if (pos == 0) throw Error("roc_auc: labels contain no positive (anomalous) frames");
    if (neg == 0) throw Error("roc_auc: labels contain no negative (normal) frames");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double area = 0, tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        double dtp = 0, dfp = 0;
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? dtp : dfp) += 1;
            ++j;
        }
        area += dfp * (tp + 0.5 * dtp);
        tp += dtp;
        fp += dfp;
        i = j;
    }
    return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

void ScoreSeries::check() const {
    const std::size_t n = psnr.size();
    if (frame_index.size() != n || memory_distance.size() != n || regularity.size() != n ||
        (!labels.empty() && labels.size() != n)) {
        throw Error("score series for " + video_id + " has columns of different lengths");
    }
}

void rescore(std::vector<ScoreSeries>& series, double tau) {
    for (auto& s : series) {
        s.regularity = regularity_score(s.psnr, s.memory_distance, tau);
        s.check();
    }
}

std::optional<double> overall_auc(const std::vector<ScoreSeries>& series) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : series) {
        if (s.labels.empty()) return std::nullopt;
        for (std::size_t i = 0; i < s.regularity.size(); ++i) {
            scores.push_back(1.0 - s.regularity[i]);
            labels.push_back(s.labels[i]);
        }
    }
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0 || pos == static_cast<long>(labels.size())) return std::nullopt;
    return roc_auc(scores, labels);
}

RegularitySummary summarize(const std::vector<ScoreSeries>& series) {
    RegularitySummary r;
    double sn = 0, sa = 0;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            if (s.labels[i]) {
                sa += s.regularity[i];
                ++r.anomalous_frames;
            } else {
                sn += s.regularity[i];
                ++r.normal_frames;
            }
        }
    }
    if (r.normal_frames) r.normal_mean = sn / static_cast<double>(r.normal_frames);
    if (r.anomalous_frames) r.anomalous_mean = sa / static_cast<double>(r.anomalous_frames);
    return r;
}

void write_scores_csv(const fs::path& path, const std::vector<ScoreSeries>& series) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "video_id,frame_index,psnr,mem_distance,regularity,label\n";
    out.precision(17);
    for (const auto& s : series) {
        s.check();
        for (std::size_t i = 0; i < s.psnr.size(); ++i) {
            out << s.video_id << ',' << s.frame_index[i] << ',' << s.psnr[i] << ',' << s.memory_distance[i] << ','
                << s.regularity[i] << ',';
            if (!s.labels.empty()) out << s.labels[i];
            out << '\n';
        }
    }
}

std::vector<ScoreSeries> read_scores_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "video_id,frame_index,psnr,mem_distance,regularity,label") {
        throw Error(path.string() + ": unexpected score CSV header '" + line + "'");
    }
    std::vector<ScoreSeries> series;
    std::map<std::string, std::size_t> index;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cols.push_back(cell);
        if (cols.size() == 5) cols.emplace_back();
        if (cols.size() != 6) throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 6 columns");
        auto [it, fresh] = index.emplace(cols[0], series.size());
        if (fresh) {
            series.emplace_back();
            series.back().video_id = cols[0];
        }
        auto& s = series[it->second];
        try {
            s.frame_index.push_back(std::stoi(cols[1]));
            s.psnr.push_back(std::stod(cols[2]));
            s.memory_distance.push_back(std::stod(cols[3]));
            s.regularity.push_back(std::stod(cols[4]));
            if (!cols[5].empty()) s.labels.push_back(std::stoi(cols[5]));
        } catch (const std::logic_error&) {
            throw Error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    for (const auto& s : series) s.check();
    return series;
}

namespace {

Tensor<float> sample(const Tensor<float>& t, int n) {
    const Shape s = t.shape();
    const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
    return Tensor<float>(Shape{1, s.c, s.h, s.w},
                         std::vector<float>(t.data() + n * per, t.data() + (n + 1) * per));
}

Tensor<float> query_rows(const Tensor<float>& q, int n, int rows) {
    const int dim = q.shape().w;
    const std::size_t off = static_cast<std::size_t>(n) * rows * dim;
    return Tensor<float>(Shape{1, 1, rows, dim},
                         std::vector<float>(q.data() + off, q.data() + off + static_cast<std::size_t>(rows) * dim));
}

void write_error_map(const fs::path& path, const Tensor<float>& pred, const Tensor<float>& target) {
    const Shape s = pred.shape();
    cv::Mat img(s.h, s.w, CV_8UC1);
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
            double e = 0;
            for (int c = 0; c < s.c; ++c) e += std::abs(pred.at(0, c, y, x) - target.at(0, c, y, x));
            // Mean absolute error on the [0,1] scale.
            e = 0.5 * e / s.c;
            img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(e, 0.0, 1.0) * 255.0));
        }
    }
    if (!cv::imwrite(path.string(), img)) throw Error("cannot write error map " + path.string());
}

}  // namespace

EvalResult evaluate(train::TrainingState& state, const data::ClipSet& clips, const EvalOptions& options) {
    auto& net = state.model();
    const Var<float> items = state.bank().as_constant();
    const int videos = static_cast<int>(clips.videos().size());
    const int limit = options.max_videos ? std::min(*options.max_videos, videos) : videos;
    EvalResult result;
    for (int v = 0; v < limit; ++v) {
        const auto& video = clips.videos()[v];
        ScoreSeries s;
        s.video_id = video.id;
        const auto idx = clips.clips_of_video(v);
        fs::path map_dir;
        if (options.error_map_dir) {
            map_dir = *options.error_map_dir / video.id;
            fs::create_directories(map_dir);
        }
        for (std::size_t b = 0; b < idx.size(); b += options.batch_size) {
            const std::vector<std::size_t> chunk(idx.begin() + b,
                                                 idx.begin() + std::min(idx.size(), b + options.batch_size));
            const auto batch = clips.batch(chunk);
            const auto out = net.forward(Var<float>::constant(batch.frames), Var<float>::constant(batch.flow), items,
                                         false);
            const Shape bs = out.encoder.bottleneck.shape();
            const int rows = bs.h * bs.w;
            for (std::size_t k = 0; k < chunk.size(); ++k) {
                const int n = static_cast<int>(k);
                const auto pred = sample(out.prediction.value(), n);
                const auto target = sample(batch.target, n);
                const int frame = batch.refs[k].start + clips.clip_length();
                s.frame_index.push_back(frame);
                s.psnr.push_back(psnr(pred, target));
                double dist = 0;
                if (net.variant().use_memory) {
                    const auto q = query_rows(out.queries.value(), n, rows);
                    dist = options.max_distance ? memory::memory_distance_max(q, items.value())
                                                : memory::memory_distance(q, items.value());
                }
                s.memory_distance.push_back(dist);
                if (!video.labels.empty()) s.labels.push_back(video.labels[frame]);
                if (options.error_map_dir) {
                    char name[32];
                    std::snprintf(name, sizeof(name), "err_%06d.png", frame);
                    write_error_map(map_dir / name, pred, target);
                }
            }
        }
        s.regularity = regularity_score(s.psnr, s.memory_distance, options.tau);
        result.series.push_back(std::move(s));
    }
    result.auc = overall_auc(result.series);
    if (!result.auc) spdlog::info("labels missing or single-class: scores written, AUC skipped");
    return result;
}

AttentionLocality attention_locality(train::TrainingState& state, const data::ClipSet& clips, int batch_size) {
    auto& net = state.model();
    if (!(net.variant().use_interaction && net.variant().use_astfm)) {
        throw Error("attention locality needs a variant with attention-based fusion");
    }
    const Var<float> items = state.bank().as_constant();
    double moving = 0, background = 0;
    AttentionLocality r;
    for (std::size_t b = 0; b < clips.size(); b += batch_size) {
        std::vector<std::size_t> chunk;
        for (std::size_t i = b; i < std::min(clips.size(), b + batch_size); ++i) chunk.push_back(i);
        const auto batch = clips.batch(chunk);
        const auto out =
            net.forward(Var<float>::constant(batch.frames), Var<float>::constant(batch.flow), items, false);
        const Tensor<float>& att = out.encoder.attention.at(0).value();
        const Shape as = att.shape();
        const Shape fs = batch.flow.shape();
        for (int n = 0; n < as.n; ++n) {
            for (int y = 0; y < as.h; ++y) {
                for (int x = 0; x < as.w; ++x) {
                    bool moves = false;
                    for (int c = 0; c < fs.c && !moves; ++c) moves = batch.flow.at(n, c, y, x) != 0.0f;
                    double mean = 0;
                    for (int c = 0; c < as.c; ++c) mean += att.at(n, c, y, x);
                    mean /= as.c;
                    if (moves) {
                        moving += mean;
                        ++r.moving_pixels;
                    } else {
                        background += mean;
                        ++r.background_pixels;
                    }
                }
            }
        }
    }
    if (r.moving_pixels == 0 || r.background_pixels == 0) {
        throw Error("attention locality: clips have no moving or no static pixels");
    }
    r.moving_mean = moving / static_cast<double>(r.moving_pixels);
    r.background_mean = background / static_cast<double>(r.background_pixels);
    r.relative_gain = r.moving_mean / r.background_mean - 1.0;
    return r;
}

}  // namespace msti::scoring
