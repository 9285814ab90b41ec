#include "maskvid/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <png.h>
#include <zlib.h>

#include "maskvid/error.hpp"

namespace maskvid {

Image frame_image(const VideoClip& clip, int frame) {
    if (clip.channels != 3) throw ShapeError("rendering needs RGB clips");
    if (frame < 0 || frame >= clip.frames) throw ShapeError("frame index out of range");
    Image img{clip.width, clip.height, std::vector<uint8_t>(static_cast<std::size_t>(clip.width) * clip.height * 3)};
    for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp((clip.at(frame, c, y, x) + 1.0) * 127.5, 0.0, 255.0);
                img.rgb[(static_cast<std::size_t>(y) * clip.width + x) * 3 + c] = static_cast<uint8_t>(std::lround(v));
            }
    return img;
}

Image frame_strip(const VideoClip& clip) {
    Image strip{clip.width * clip.frames, clip.height, {}};
    strip.rgb.resize(static_cast<std::size_t>(strip.width) * strip.height * 3);
    for (int f = 0; f < clip.frames; ++f) {
        const Image one = frame_image(clip, f);
        for (int y = 0; y < clip.height; ++y) {
            std::copy_n(one.rgb.begin() + static_cast<std::ptrdiff_t>(y) * clip.width * 3, clip.width * 3,
                        strip.rgb.begin() + (static_cast<std::ptrdiff_t>(y) * strip.width + f * clip.width) * 3);
        }
    }
    return strip;
}

VideoClip image_to_frame(const Image& image) {
    VideoClip clip(1, 3, image.height, image.width);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                clip.at(0, c, y, x) = image.rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] / 127.5 - 1.0;
            }
    return clip;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void chunk(std::string& out, const char* type, const std::string& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    put_u32(out, static_cast<uint32_t>(
                     crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string header(const Image& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
        throw ShapeError("image buffer does not match its dimensions");
    }
    std::string ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.width));
    put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr += std::string{8, 2, 0, 0, 0};  // 8-bit RGB, deflate, no filter method, no interlace
    return ihdr;
}

std::string compressed_rows(const Image& img) {
    std::string raw;
    raw.reserve(static_cast<std::size_t>(img.width * 3 + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.append(reinterpret_cast<const char*>(img.rgb.data()) + static_cast<std::size_t>(y) * img.width * 3,
                   static_cast<std::size_t>(img.width) * 3);
    }
    uLongf len = compressBound(static_cast<uLong>(raw.size()));
    std::string out(len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(out.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw Error("zlib compression failed");
    }
    out.resize(len);
    return out;
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path);
}

const std::string kSignature("\x89PNG\r\n\x1a\n", 8);

}  // namespace

void write_png(const std::string& path, const Image& image) {
    std::string out = kSignature;
    chunk(out, "IHDR", header(image));
    chunk(out, "IDAT", compressed_rows(image));
    chunk(out, "IEND", "");
    write_bytes(path, out);
}

void write_apng(const std::string& path, const std::vector<Image>& frames, int fps) {
    if (frames.empty()) throw ShapeError("animation needs at least one frame");
    if (fps <= 0 || fps > 65535) throw Error("frame rate out of range");
    for (const auto& f : frames) {
        if (f.width != frames.front().width || f.height != frames.front().height) {
            throw ShapeError("animation frames differ in size");
        }
    }
    std::string out = kSignature;
    chunk(out, "IHDR", header(frames.front()));
    std::string actl;
    put_u32(actl, static_cast<uint32_t>(frames.size()));
    put_u32(actl, 0);  // loop forever
    chunk(out, "acTL", actl);
    uint32_t seq = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        std::string fctl;
        put_u32(fctl, seq++);
        put_u32(fctl, static_cast<uint32_t>(frames[i].width));
        put_u32(fctl, static_cast<uint32_t>(frames[i].height));
        put_u32(fctl, 0);
        put_u32(fctl, 0);
        put_u16(fctl, 1);
        put_u16(fctl, static_cast<uint16_t>(fps));
        fctl.push_back(0);  // dispose: none
        fctl.push_back(0);  // blend: source
        chunk(out, "fcTL", fctl);
        const std::string data = compressed_rows(frames[i]);
        if (i == 0) {
            chunk(out, "IDAT", data);
        } else {
            std::string fdat;
            put_u32(fdat, seq++);
            fdat += data;
            chunk(out, "fdAT", fdat);
        }
    }
    chunk(out, "IEND", "");
    write_bytes(path, out);
}

Image read_png(const std::string& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
        throw FormatError(path + ": " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    Image img{static_cast<int>(png.width), static_cast<int>(png.height), {}};
    img.rgb.resize(PNG_IMAGE_SIZE(png));
    if (png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr) == 0) {
        const std::string msg = png.message;
        png_image_free(&png);
        throw FormatError(path + ": " + msg);
    }
    return img;
}

}  // namespace maskvid
