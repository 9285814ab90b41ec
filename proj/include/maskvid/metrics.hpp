#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskvid/synthset.hpp"
#include "maskvid/types.hpp"

namespace maskvid {

struct IouResult {
    std::map<int32_t, double> per_object;
    double mean = 1.0;  ///< 1 when neither map has any object
};

/// Intersection over union per label, pooled over all frames.
IouResult mean_iou(const MaskTrajectory& pred, const MaskTrajectory& gt);

/// Pixel centroid (x, y) of a label in one frame; nullopt when absent.
std::optional<std::array<double, 2>> label_centroid(const MaskTrajectory& m, int frame, int32_t label);

/// Mean centroid displacement per frame pair, in pixels. Returns 0 and sets
/// `warning` when no object appears in two consecutive frames.
double avg_displacement(const MaskTrajectory& m, std::string* warning = nullptr);

/// Mean cosine similarity between 8x8 average-pooled adjacent frames.
/// Pairs with a zero-norm pooled frame are skipped with a warning.
double frame_consistency_proxy(const VideoClip& v, std::string* warning = nullptr);

/// Mean over objects and frames of the distance between the predicted centroid
/// and the ground-truth centroid of the scene. An object missing from a
/// prediction frame costs the canvas diagonal.
double centroid_trajectory_error(const MaskTrajectory& pred, const SceneSpec& scene);

/// Labels a rendered video by nearest scene color (background and object colors).
MaskTrajectory extract_masks_by_color(const VideoClip& video, const SceneSpec& scene);

struct SampleMetrics {
    std::string name;
    double iou = 0.0;
    double ad = 0.0;
    double fc = 0.0;
    double cte = 0.0;
};

struct MetricReport {
    std::vector<SampleMetrics> samples;
    double mean_iou = 0.0;
    double ad = 0.0;
    double fc = 0.0;
    double cte = 0.0;
    std::string config_hash;
    std::vector<std::string> warnings;

    /// Means over the samples; order independent.
    void aggregate();
};

/// Stable key names: samples[], sample_count, mean_iou, ad, fc_proxy, cte,
/// config_hash, warnings, fvd, viclip.
void to_json(nlohmann::json& j, const MetricReport& r);

}  // namespace maskvid
