#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <vector>

#include "maskvid/types.hpp"

namespace maskvid {

using Rgb = std::array<double, 3>;

/// Colors used to paint label maps; entry 0 is background.
struct Palette {
    std::vector<Rgb> colors;

    std::size_t size() const { return colors.size(); }
    /// Smallest pairwise L2 distance between entries.
    double min_separation() const;
    /// Throws if two entries are closer than the decodability margin (0.5).
    void validate() const;
    /// First n entries (background plus n - 1 objects).
    Palette truncated(std::size_t n) const;

    bool operator==(const Palette&) const = default;
};

/// Background black followed by saturated, well separated object colors.
Palette default_mask_palette();

VideoClip palette_encode(const MaskTrajectory& mask, const Palette& palette);
/// Nearest palette entry per pixel; ties resolve to the lower index.
MaskTrajectory palette_decode(const VideoClip& clip, const Palette& palette);

enum class TemporalPooling { first_frame, majority };

/// Majority label per pixel block. Ties go to the lowest label.
LatentGrid downsample_labels(const MaskTrajectory& mask, GridDims dims,
                             TemporalPooling pooling = TemporalPooling::first_frame);

/// Inclusive tight box.
struct Box {
    int ymin = 0;
    int xmin = 0;
    int ymax = 0;
    int xmax = 0;

    bool contains(int y, int x) const { return y >= ymin && y <= ymax && x >= xmin && x <= xmax; }
    bool operator==(const Box&) const = default;
};

/// Per-frame map from object id to its box; absent objects have no entry.
struct BoxSet {
    GridDims dims;
    std::vector<std::map<int32_t, Box>> frames;
};

BoxSet boxes_from_labels(const LatentGrid& grid);
BoxSet boxes_from_labels(const MaskTrajectory& mask);

/// Dense 0/1 matrix, row-major.
struct BinaryMask {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(int r, int c, uint8_t fill = 0)
        : rows(r), cols(c), bits(static_cast<std::size_t>(r) * c, fill) {}

    uint8_t operator()(int r, int c) const { return bits[static_cast<std::size_t>(r) * cols + c]; }
    uint8_t& operator()(int r, int c) { return bits[static_cast<std::size_t>(r) * cols + c]; }
    bool row_empty(int r) const;

    bool operator==(const BinaryMask&) const = default;
};

/// What background tokens may attend to in the masked self-attention.
enum class BackgroundPolicy {
    own_group,  ///< background attends to background
    excluded,   ///< background rows are empty
};

/// Row = token (f, y, x) in raster order; column block l covers prompt l's n_txt tokens.
/// Overlapping boxes set bits in every block whose box covers the cell.
BinaryMask build_cross_mask(const BoxSet& boxes, GridDims dims, int num_objects, int n_txt);

BinaryMask build_self_mask(const LatentGrid& grid,
                           BackgroundPolicy policy = BackgroundPolicy::own_group);

struct AttentionMaskPair {
    BinaryMask cross;
    BinaryMask self;
    BoxSet boxes;
};

AttentionMaskPair build_mask_pair(const LatentGrid& grid, int num_objects, int n_txt,
                                  BackgroundPolicy policy = BackgroundPolicy::own_group);

}  // namespace maskvid
