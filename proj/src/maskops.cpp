#include "maskvid/maskops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "maskvid/error.hpp"

namespace maskvid {

namespace {

constexpr double kPaletteMargin = 0.5;

double squared_distance(const Rgb& a, const Rgb& b) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
}

std::size_t token_index(GridDims d, int f, int y, int x) {
    return (static_cast<std::size_t>(f) * d.height + y) * d.width + x;
}

template <typename Grid>
BoxSet boxes_impl(const Grid& g) {
    BoxSet out;
    out.dims = {g.frames, g.height, g.width};
    out.frames.resize(g.frames);
    for (int f = 0; f < g.frames; ++f) {
        auto& boxes = out.frames[f];
        for (int y = 0; y < g.height; ++y) {
            for (int x = 0; x < g.width; ++x) {
                const int32_t l = g.at(f, y, x);
                if (l == 0) continue;
                auto [it, inserted] = boxes.try_emplace(l, Box{y, x, y, x});
                if (!inserted) {
                    Box& b = it->second;
                    b.ymin = std::min(b.ymin, y);
                    b.xmin = std::min(b.xmin, x);
                    b.ymax = std::max(b.ymax, y);
                    b.xmax = std::max(b.xmax, x);
                }
            }
        }
    }
    return out;
}

}  // namespace

double Palette::min_separation() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < colors.size(); ++i) {
        for (std::size_t j = i + 1; j < colors.size(); ++j) {
            best = std::min(best, std::sqrt(squared_distance(colors[i], colors[j])));
        }
    }
    return best;
}

void Palette::validate() const {
    if (colors.size() < 2) throw Error("palette needs a background and at least one object color");
    if (min_separation() < kPaletteMargin) {
        throw Error("palette entries closer than the 0.5 decodability margin");
    }
}

Palette Palette::truncated(std::size_t n) const {
    Palette out;
    out.colors.assign(colors.begin(), colors.begin() + static_cast<std::ptrdiff_t>(std::min(n, colors.size())));
    return out;
}

Palette default_mask_palette() {
    return Palette{{
        {-1.0, -1.0, -1.0},
        {1.0, -1.0, -1.0},
        {-1.0, 1.0, -1.0},
        {-1.0, -1.0, 1.0},
        {1.0, 1.0, -1.0},
        {1.0, -1.0, 1.0},
        {-1.0, 1.0, 1.0},
        {1.0, 1.0, 1.0},
        {0.0, 0.0, 0.0},
    }};
}

VideoClip palette_encode(const MaskTrajectory& mask, const Palette& palette) {
    VideoClip out(mask.frames, 3, mask.height, mask.width);
    for (int f = 0; f < mask.frames; ++f) {
        for (int y = 0; y < mask.height; ++y) {
            for (int x = 0; x < mask.width; ++x) {
                const int32_t l = mask.at(f, y, x);
                if (l < 0 || static_cast<std::size_t>(l) >= palette.size()) {
                    throw Error("label " + std::to_string(l) + " outside palette of size " +
                                std::to_string(palette.size()));
                }
                for (int c = 0; c < 3; ++c) out.at(f, c, y, x) = palette.colors[l][c];
            }
        }
    }
    return out;
}

MaskTrajectory palette_decode(const VideoClip& clip, const Palette& palette) {
    if (clip.channels != 3) throw ShapeError("palette_decode expects 3 channels");
    MaskTrajectory out(clip.frames, clip.height, clip.width);
    for (int f = 0; f < clip.frames; ++f) {
        for (int y = 0; y < clip.height; ++y) {
            for (int x = 0; x < clip.width; ++x) {
                const Rgb px{clip.at(f, 0, y, x), clip.at(f, 1, y, x), clip.at(f, 2, y, x)};
                int32_t best = 0;
                double best_d = squared_distance(px, palette.colors[0]);
                for (std::size_t i = 1; i < palette.size(); ++i) {
                    const double d = squared_distance(px, palette.colors[i]);
                    if (d < best_d) {
                        best_d = d;
                        best = static_cast<int32_t>(i);
                    }
                }
                out.at(f, y, x) = best;
            }
        }
    }
    return out;
}

LatentGrid downsample_labels(const MaskTrajectory& mask, GridDims dims, TemporalPooling pooling) {
    if (dims.frames <= 0 || dims.height <= 0 || dims.width <= 0 || mask.frames % dims.frames != 0 ||
        mask.height % dims.height != 0 || mask.width % dims.width != 0) {
        throw ShapeError("downsample_labels: mask " + std::to_string(mask.frames) + "x" +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " not divisible by grid " + std::to_string(dims.frames) + "x" +
                         std::to_string(dims.height) + "x" + std::to_string(dims.width));
    }
    const int tf = mask.frames / dims.frames;
    const int sy = mask.height / dims.height;
    const int sx = mask.width / dims.width;
    const int32_t max_label = std::max<int32_t>(mask.max_label(), 0);

    LatentGrid out(dims.frames, dims.height, dims.width);
    std::vector<int> counts(static_cast<std::size_t>(max_label) + 1);
    for (int f = 0; f < dims.frames; ++f) {
        const int f0 = f * tf;
        const int f1 = pooling == TemporalPooling::first_frame ? f0 + 1 : f0 + tf;
        for (int y = 0; y < dims.height; ++y) {
            for (int x = 0; x < dims.width; ++x) {
                std::fill(counts.begin(), counts.end(), 0);
                for (int ff = f0; ff < f1; ++ff) {
                    for (int yy = y * sy; yy < (y + 1) * sy; ++yy) {
                        for (int xx = x * sx; xx < (x + 1) * sx; ++xx) ++counts[mask.at(ff, yy, xx)];
                    }
                }
                // max_element returns the first maximum, i.e. the lowest label on ties
                out.at(f, y, x) = static_cast<int32_t>(
                    std::max_element(counts.begin(), counts.end()) - counts.begin());
            }
        }
    }
    return out;
}

BoxSet boxes_from_labels(const LatentGrid& grid) { return boxes_impl(grid); }
BoxSet boxes_from_labels(const MaskTrajectory& mask) { return boxes_impl(mask); }

bool BinaryMask::row_empty(int r) const {
    const auto begin = bits.begin() + static_cast<std::ptrdiff_t>(r) * cols;
    return std::none_of(begin, begin + cols, [](uint8_t b) { return b != 0; });
}

BinaryMask build_cross_mask(const BoxSet& boxes, GridDims dims, int num_objects, int n_txt) {
    if (boxes.dims != dims || static_cast<int>(boxes.frames.size()) != dims.frames) {
        throw ShapeError("build_cross_mask: boxes were computed on a different grid");
    }
    if (num_objects < 0 || n_txt <= 0) throw ShapeError("build_cross_mask: invalid prompt layout");
    for (const auto& frame : boxes.frames) {
        for (const auto& [id, box] : frame) {
            if (id < 1 || id > num_objects) {
                throw ShapeError("build_cross_mask: box for object " + std::to_string(id) +
                                 " but only " + std::to_string(num_objects) + " prompts");
            }
        }
    }
    BinaryMask m(static_cast<int>(dims.cells()), num_objects * n_txt);
    for (int f = 0; f < dims.frames; ++f) {
        for (const auto& [id, box] : boxes.frames[f]) {
            const int col0 = (id - 1) * n_txt;
            for (int y = box.ymin; y <= box.ymax; ++y) {
                for (int x = box.xmin; x <= box.xmax; ++x) {
                    const auto row = static_cast<int>(token_index(dims, f, y, x));
                    std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(row) * m.cols + col0, n_txt,
                                uint8_t{1});
                }
            }
        }
    }
    return m;
}

BinaryMask build_self_mask(const LatentGrid& grid, BackgroundPolicy policy) {
    const int n = static_cast<int>(grid.token_count());
    BinaryMask m(n, n);
    for (int i = 0; i < n; ++i) {
        const int32_t li = grid.labels[i];
        if (li == 0 && policy == BackgroundPolicy::excluded) continue;
        uint8_t* row = m.bits.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) row[j] = grid.labels[j] == li ? 1 : 0;
    }
    return m;
}

AttentionMaskPair build_mask_pair(const LatentGrid& grid, int num_objects, int n_txt,
                                  BackgroundPolicy policy) {
    AttentionMaskPair pair;
    pair.boxes = boxes_from_labels(grid);
    pair.cross = build_cross_mask(pair.boxes, grid.dims(), num_objects, n_txt);
    pair.self = build_self_mask(grid, policy);
    return pair;
}

}  // namespace maskvid
