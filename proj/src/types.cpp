#include "maskvid/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace maskvid {

VideoClip VideoClip::frame(int f) const {
    VideoClip out(1, channels, height, width);
    out.fps = fps;
    const std::size_t n = static_cast<std::size_t>(channels) * height * width;
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(n * f), n, out.data.begin());
    return out;
}

bool VideoClip::finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

MaskTrajectory MaskTrajectory::frame(int f) const {
    MaskTrajectory out(1, height, width);
    const std::size_t n = static_cast<std::size_t>(height) * width;
    std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(n * f), n, out.labels.begin());
    return out;
}

std::vector<int32_t> MaskTrajectory::labels_in_frame(int f) const {
    std::set<int32_t> seen;
    const std::size_t n = static_cast<std::size_t>(height) * width;
    for (std::size_t i = n * f; i < n * (f + 1); ++i) {
        if (labels[i] != 0) seen.insert(labels[i]);
    }
    return {seen.begin(), seen.end()};
}

int32_t MaskTrajectory::max_label() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

}  // namespace maskvid
