#include "maskvid/container.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "maskvid/error.hpp"

namespace maskvid {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t& pos, const std::string& path) {
    if (pos + sizeof(T) > buf.size()) throw FormatError(path + ": truncated file");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_sample(const std::string& path, const SampleFile& s) {
    if (!s.video && !s.mask) throw FormatError("sample has neither video nor mask");
    GridDims dims = s.video ? s.video->dims() : s.mask->dims();
    if (s.video && s.mask && s.video->dims() != s.mask->dims()) {
        throw ShapeError("video and mask dimensions differ");
    }
    if (s.video && s.video->channels != 3) throw ShapeError("video must have 3 channels");

    nlohmann::json header;
    header["format"] = "maskvid-sample";
    header["frames"] = dims.frames;
    header["height"] = dims.height;
    header["width"] = dims.width;
    header["channels"] = 3;
    header["fps"] = s.video ? s.video->fps : 8;
    header["video"] = s.video.has_value();
    header["mask"] = s.mask.has_value();
    header["video_dtype"] = "f32le";
    header["mask_dtype"] = "u16le";
    nlohmann::json palette = nlohmann::json::array();
    for (const auto& c : s.palette.colors) palette.push_back({c[0], c[1], c[2]});
    header["palette"] = palette;
    header["scene"] = s.scene ? nlohmann::json(*s.scene) : nlohmann::json(nullptr);
    header["config_hash"] = s.config_hash;
    const std::string text = header.dump();

    std::string buf(kSampleMagic, sizeof(kSampleMagic));
    put<uint8_t>(buf, kSampleVersion);
    put<uint32_t>(buf, static_cast<uint32_t>(text.size()));
    buf += text;
    if (s.video) {
        for (double v : s.video->data) put<float>(buf, static_cast<float>(v));
    }
    if (s.mask) {
        for (int32_t l : s.mask->labels) {
            if (l < 0 || l > 0xFFFF) throw FormatError("label out of uint16 range");
            put<uint16_t>(buf, static_cast<uint16_t>(l));
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

SampleFile load_sample(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < sizeof(kSampleMagic) || std::memcmp(buf.data(), kSampleMagic, sizeof(kSampleMagic)) != 0) {
        throw FormatError(path + ": not a sample container (bad magic)");
    }
    std::size_t pos = sizeof(kSampleMagic);
    const auto version = get<uint8_t>(buf, pos, path);
    if (version != kSampleVersion) {
        throw FormatError(path + ": unsupported container version " + std::to_string(version));
    }
    const auto header_len = get<uint32_t>(buf, pos, path);
    if (pos + header_len > buf.size()) throw FormatError(path + ": truncated file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(pos, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad header: " + e.what());
    }
    pos += header_len;

    SampleFile s;
    const int frames = header.at("frames").get<int>();
    const int height = header.at("height").get<int>();
    const int width = header.at("width").get<int>();
    s.palette.colors.clear();
    for (const auto& c : header.at("palette")) s.palette.colors.push_back({c[0], c[1], c[2]});
    if (!header.at("scene").is_null()) s.scene = header.at("scene").get<SceneSpec>();
    s.config_hash = header.value("config_hash", std::string());

    const std::size_t cells = static_cast<std::size_t>(frames) * height * width;
    std::size_t expected = pos;
    if (header.at("video").get<bool>()) expected += cells * 3 * sizeof(float);
    if (header.at("mask").get<bool>()) expected += cells * sizeof(uint16_t);
    if (buf.size() < expected) throw FormatError(path + ": truncated file");
    if (buf.size() > expected) throw FormatError(path + ": trailing bytes after payload");

    if (header.at("video").get<bool>()) {
        VideoClip v(frames, 3, height, width);
        v.fps = header.value("fps", 8);
        for (auto& x : v.data) x = get<float>(buf, pos, path);
        if (!v.finite()) throw FormatError(path + ": non-finite video sample");
        s.video = std::move(v);
    }
    if (header.at("mask").get<bool>()) {
        MaskTrajectory m(frames, height, width);
        for (auto& l : m.labels) l = get<uint16_t>(buf, pos, path);
        s.mask = std::move(m);
    }
    return s;
}

DatasetManifest write_dataset(const std::string& dir, int count, uint64_t base_seed,
                              const GeneratorConfig& config, double test_fraction) {
    namespace fs = std::filesystem;
    if (count < 1) throw Error("dataset count must be positive");
    fs::create_directories(dir);
    DatasetManifest manifest;
    manifest.generator = config;
    const int n_test = static_cast<int>(std::lround(test_fraction * count));
    for (int i = 0; i < count; ++i) {
        const uint64_t seed = base_seed + static_cast<uint64_t>(i);
        auto g = generate_scene(seed, config);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%06d", i);
        SampleFile f;
        f.video = std::move(g.video);
        f.mask = std::move(g.mask);
        f.scene = g.scene;
        save_sample((fs::path(dir) / (std::string(name) + ".mvs")).string(), f);
        save_prompt_bundle((fs::path(dir) / (std::string(name) + ".prompts.json")).string(),
                           render_prompts(g.scene));
        manifest.samples.push_back({name, seed, i >= count - n_test ? "test" : "train"});
    }
    nlohmann::json j;
    j["version"] = 1;
    j["generator"] = manifest.generator;
    j["samples"] = nlohmann::json::array();
    for (const auto& e : manifest.samples) {
        j["samples"].push_back({{"name", e.name}, {"seed", e.seed}, {"split", e.split}});
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << j.dump(2) << "\n";
    return manifest;
}

DatasetManifest read_manifest(const std::string& dir) {
    const auto path = (std::filesystem::path(dir) / "manifest.json").string();
    std::ifstream in(path);
    if (!in) throw FormatError("missing manifest: " + path);
    DatasetManifest m;
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.value("version", 0) != 1) throw FormatError(path + ": unsupported manifest version");
        m.generator = j.value("generator", nlohmann::json::object()).get<GeneratorConfig>();
        for (const auto& e : j.at("samples")) {
            m.samples.push_back(
                {e.at("name").get<std::string>(), e.value("seed", uint64_t{0}), e.value("split", std::string("train"))});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return m;
}

std::vector<DatasetSample> load_dataset(const std::string& dir, const std::string& split) {
    namespace fs = std::filesystem;
    const auto manifest = read_manifest(dir);
    std::vector<DatasetSample> out;
    for (const auto& e : manifest.samples) {
        if (!split.empty() && e.split != split) continue;
        DatasetSample s;
        s.name = e.name;
        s.file = load_sample((fs::path(dir) / (e.name + ".mvs")).string());
        const auto prompt_path = fs::path(dir) / (e.name + ".prompts.json");
        if (fs::exists(prompt_path)) s.prompts = load_prompt_bundle(prompt_path.string());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace maskvid
