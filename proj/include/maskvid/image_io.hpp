#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskvid/types.hpp"

namespace maskvid {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;
};

/// Maps [-1, 1] to [0, 255] with rounding and clamping.
Image frame_image(const VideoClip& clip, int frame);
/// All frames side by side, left to right.
Image frame_strip(const VideoClip& clip);
/// Single-frame clip from an image, values mapped back to [-1, 1].
VideoClip image_to_frame(const Image& image);

void write_png(const std::string& path, const Image& image);
/// Animated PNG; every frame has the same size. Plain viewers show the first frame.
void write_apng(const std::string& path, const std::vector<Image>& frames, int fps);
/// Reads any PNG (gray, palette or alpha inputs are converted to RGB).
Image read_png(const std::string& path);

}  // namespace maskvid
