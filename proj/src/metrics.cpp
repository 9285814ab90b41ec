#include "maskvid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "maskvid/error.hpp"

namespace maskvid {

IouResult mean_iou(const MaskTrajectory& pred, const MaskTrajectory& gt) {
    if (pred.dims() != gt.dims()) throw ShapeError("mean_iou: trajectories differ in dimensions");
    std::map<int32_t, std::pair<std::size_t, std::size_t>> counts;  // label -> (intersection, union)
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        const int32_t p = pred.labels[i];
        const int32_t g = gt.labels[i];
        if (p == g) {
            if (g != 0) {
                ++counts[g].first;
                ++counts[g].second;
            }
            continue;
        }
        if (p != 0) ++counts[p].second;
        if (g != 0) ++counts[g].second;
    }
    IouResult r;
    if (counts.empty()) return r;
    double sum = 0.0;
    for (const auto& [label, c] : counts) {
        const double iou = static_cast<double>(c.first) / static_cast<double>(c.second);
        r.per_object[label] = iou;
        sum += iou;
    }
    r.mean = sum / static_cast<double>(counts.size());
    return r;
}

std::optional<std::array<double, 2>> label_centroid(const MaskTrajectory& m, int frame, int32_t label) {
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (m.at(frame, y, x) != label) continue;
            sx += x;
            sy += y;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return std::array<double, 2>{sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

namespace {

/// Centroids of every nonzero label in one frame.
std::map<int32_t, std::array<double, 2>> frame_centroids(const MaskTrajectory& m, int frame) {
    std::map<int32_t, std::array<double, 3>> acc;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            const int32_t l = m.at(frame, y, x);
            if (l == 0) continue;
            auto& a = acc[l];
            a[0] += x;
            a[1] += y;
            a[2] += 1.0;
        }
    }
    std::map<int32_t, std::array<double, 2>> out;
    for (const auto& [l, a] : acc) out[l] = {a[0] / a[2], a[1] / a[2]};
    return out;
}

double distance(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return std::hypot(a[0] - b[0], a[1] - b[1]);
}

}  // namespace

double avg_displacement(const MaskTrajectory& m, std::string* warning) {
    if (m.frames < 2) throw ShapeError("average displacement needs at least two frames");
    double sum = 0.0;
    std::size_t n = 0;
    auto prev = frame_centroids(m, 0);
    for (int f = 1; f < m.frames; ++f) {
        auto cur = frame_centroids(m, f);
        for (const auto& [l, c] : cur) {
            const auto it = prev.find(l);
            if (it == prev.end()) continue;
            sum += distance(c, it->second);
            ++n;
        }
        prev = std::move(cur);
    }
    if (n == 0) {
        if (warning != nullptr) *warning = "no foreground object in consecutive frames; displacement defined as 0";
        return 0.0;
    }
    return sum / static_cast<double>(n);
}

double frame_consistency_proxy(const VideoClip& v, std::string* warning) {
    if (v.frames < 2) throw ShapeError("frame consistency needs at least two frames");
    constexpr int kGrid = 8;
    const auto pooled = [&](int f) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(v.channels * kGrid * kGrid);
        Eigen::VectorXd count = Eigen::VectorXd::Zero(v.channels * kGrid * kGrid);
        for (int c = 0; c < v.channels; ++c)
            for (int y = 0; y < v.height; ++y)
                for (int x = 0; x < v.width; ++x) {
                    const int idx = (c * kGrid + y * kGrid / v.height) * kGrid + x * kGrid / v.width;
                    out(idx) += v.at(f, c, y, x);
                    count(idx) += 1.0;
                }
        for (Eigen::Index i = 0; i < out.size(); ++i) {
            if (count(i) > 0) out(i) /= count(i);
        }
        return out;
    };
    double sum = 0.0;
    int n = 0;
    int skipped = 0;
    Eigen::VectorXd prev = pooled(0);
    for (int f = 1; f < v.frames; ++f) {
        Eigen::VectorXd cur = pooled(f);
        const double denom = prev.norm() * cur.norm();
        if (denom == 0.0) {
            ++skipped;
        } else {
            sum += prev.dot(cur) / denom;
            ++n;
        }
        prev = std::move(cur);
    }
    if (skipped > 0 && warning != nullptr) {
        *warning = std::to_string(skipped) + " frame pair(s) skipped: zero-norm pooled frame";
    }
    return n == 0 ? 0.0 : sum / n;
}

double centroid_trajectory_error(const MaskTrajectory& pred, const SceneSpec& scene) {
    if (pred.height != scene.height || pred.width != scene.width) {
        throw ShapeError("prediction and scene differ in canvas size");
    }
    SceneSpec spec = scene;
    spec.frames = pred.frames;
    const MaskTrajectory gt = render_scene(spec).mask;
    const double penalty = std::hypot(static_cast<double>(scene.height), static_cast<double>(scene.width));
    double sum = 0.0;
    std::size_t n = 0;
    for (int f = 0; f < pred.frames; ++f) {
        const auto want = frame_centroids(gt, f);
        const auto got = frame_centroids(pred, f);
        for (const auto& o : scene.objects) {
            const auto w = want.find(o.object_id);
            if (w == want.end()) continue;  // fully occluded in the ground truth
            const auto g = got.find(o.object_id);
            sum += g == got.end() ? penalty : distance(g->second, w->second);
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

MaskTrajectory extract_masks_by_color(const VideoClip& video, const SceneSpec& scene) {
    if (video.channels != 3) throw ShapeError("color extraction needs RGB video");
    std::vector<std::pair<int32_t, Rgb>> entries{{0, color_table().at(scene.background).rgb}};
    for (const auto& o : scene.objects) entries.emplace_back(o.object_id, color_table().at(o.color).rgb);
    MaskTrajectory out(video.frames, video.height, video.width);
    for (int f = 0; f < video.frames; ++f)
        for (int y = 0; y < video.height; ++y)
            for (int x = 0; x < video.width; ++x) {
                double best = std::numeric_limits<double>::infinity();
                int32_t label = 0;
                for (const auto& [id, rgb] : entries) {
                    double d = 0.0;
                    for (int c = 0; c < 3; ++c) {
                        const double diff = video.at(f, c, y, x) - rgb[c];
                        d += diff * diff;
                    }
                    if (d < best) {
                        best = d;
                        label = id;
                    }
                }
                out.at(f, y, x) = label;
            }
    return out;
}

void MetricReport::aggregate() {
    mean_iou = ad = fc = cte = 0.0;
    if (samples.empty()) return;
    // Sort a copy by name so the floating-point sums do not depend on sample order.
    std::vector<SampleMetrics> sorted = samples;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (const auto& s : sorted) {
        mean_iou += s.iou;
        ad += s.ad;
        fc += s.fc;
        cte += s.cte;
    }
    const double n = static_cast<double>(sorted.size());
    mean_iou /= n;
    ad /= n;
    fc /= n;
    cte /= n;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : r.samples) {
        samples.push_back({{"name", s.name}, {"mean_iou", s.iou}, {"ad", s.ad}, {"fc_proxy", s.fc}, {"cte", s.cte}});
    }
    j = nlohmann::json{{"sample_count", r.samples.size()},
                       {"mean_iou", r.mean_iou},
                       {"ad", r.ad},
                       {"fc_proxy", r.fc},
                       {"cte", r.cte},
                       {"config_hash", r.config_hash},
                       {"warnings", r.warnings},
                       {"fvd", "not computed: requires pretrained network"},
                       {"viclip", "not computed: requires pretrained network"},
                       {"samples", samples}};
}

}  // namespace maskvid
