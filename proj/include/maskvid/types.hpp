#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace maskvid {

/// Row-major dense matrix used for token features (rows = tokens).
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Temporal and spatial extent of a frame stack or token grid.
struct GridDims {
    int frames = 0;
    int height = 0;
    int width = 0;

    std::size_t cells() const { return static_cast<std::size_t>(frames) * height * width; }
    bool operator==(const GridDims&) const = default;
};

/// F x C x H x W frame sequence with values in [-1, 1].
struct VideoClip {
    int frames = 0;
    int channels = 3;
    int height = 0;
    int width = 0;
    int fps = 8;
    std::vector<double> data;

    VideoClip() = default;
    VideoClip(int f, int c, int h, int w, double fill = 0.0)
        : frames(f), channels(c), height(h), width(w),
          data(static_cast<std::size_t>(f) * c * h * w, fill) {}

    std::size_t index(int f, int c, int y, int x) const {
        return ((static_cast<std::size_t>(f) * channels + c) * height + y) * width + x;
    }
    double& at(int f, int c, int y, int x) { return data[index(f, c, y, x)]; }
    double at(int f, int c, int y, int x) const { return data[index(f, c, y, x)]; }

    GridDims dims() const { return {frames, height, width}; }

    /// Copy of a single frame as a one-frame clip.
    VideoClip frame(int f) const;
    /// True when every sample is finite.
    bool finite() const;
};

/// F x H x W integer label maps; 0 is background, object ids start at 1.
struct MaskTrajectory {
    int frames = 0;
    int height = 0;
    int width = 0;
    std::vector<int32_t> labels;

    MaskTrajectory() = default;
    MaskTrajectory(int f, int h, int w, int32_t fill = 0)
        : frames(f), height(h), width(w), labels(static_cast<std::size_t>(f) * h * w, fill) {}

    std::size_t index(int f, int y, int x) const {
        return (static_cast<std::size_t>(f) * height + y) * width + x;
    }
    int32_t& at(int f, int y, int x) { return labels[index(f, y, x)]; }
    int32_t at(int f, int y, int x) const { return labels[index(f, y, x)]; }

    GridDims dims() const { return {frames, height, width}; }

    MaskTrajectory frame(int f) const;
    /// Sorted nonzero labels present in frame f.
    std::vector<int32_t> labels_in_frame(int f) const;
    int32_t max_label() const;

    bool operator==(const MaskTrajectory&) const = default;
};

/// Token-resolution label map (N' x H' x W').
struct LatentGrid {
    int frames = 0;
    int height = 0;
    int width = 0;
    std::vector<int32_t> labels;

    LatentGrid() = default;
    LatentGrid(int f, int h, int w, int32_t fill = 0)
        : frames(f), height(h), width(w), labels(static_cast<std::size_t>(f) * h * w, fill) {}

    std::size_t index(int f, int y, int x) const {
        return (static_cast<std::size_t>(f) * height + y) * width + x;
    }
    int32_t& at(int f, int y, int x) { return labels[index(f, y, x)]; }
    int32_t at(int f, int y, int x) const { return labels[index(f, y, x)]; }

    GridDims dims() const { return {frames, height, width}; }
    std::size_t token_count() const { return labels.size(); }

    bool operator==(const LatentGrid&) const = default;
};

}  // namespace maskvid
