#include "maskvid/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "maskvid/error.hpp"

namespace maskvid {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

void put_matrix(std::string& buf, const Mat& m) {
    buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
}

void get_matrix(const std::string& buf, std::size_t& pos, Mat& m, const std::string& path) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(double);
    if (pos + bytes > buf.size()) throw FormatError(path + ": truncated checkpoint");
    std::memcpy(m.data(), buf.data() + pos, bytes);
    pos += bytes;
}

}  // namespace

void save_checkpoint(const std::string& path, const StageCheckpoint& ckpt) {
    if (ckpt.config.stage != ckpt.stage) throw Error("checkpoint stage tag disagrees with its config");
    nlohmann::json header;
    header["format"] = "maskvid-checkpoint";
    header["stage"] = stage_name(ckpt.stage);
    header["config"] = ckpt.config;
    header["training"] = ckpt.training;
    header["solver"] = ckpt.solver;
    header["vocab_hash"] = std::to_string(ckpt.vocab_hash);
    header["step"] = ckpt.step;
    header["encoder"] = {ckpt.encoder_spatial, ckpt.encoder_temporal};
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& [name, p] : ckpt.params) shapes.push_back({name, p.value.rows(), p.value.cols()});
    header["parameters"] = shapes;
    const bool has_adam = ckpt.adam.updates > 0;
    header["adam_updates"] = ckpt.adam.updates;

    std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
    buf.push_back(static_cast<char>(kCheckpointVersion));
    const std::string text = header.dump();
    const auto len = static_cast<uint32_t>(text.size());
    buf.append(reinterpret_cast<const char*>(&len), sizeof(len));
    buf += text;
    for (const auto& [name, p] : ckpt.params) put_matrix(buf, p.value);
    if (has_adam) {
        for (const auto& [name, p] : ckpt.params) {
            const auto mi = ckpt.adam.m.find(name);
            const auto vi = ckpt.adam.v.find(name);
            if (mi == ckpt.adam.m.end() || vi == ckpt.adam.v.end()) {
                throw Error("optimizer state is missing parameter '" + name + "'");
            }
            put_matrix(buf, mi->second);
            put_matrix(buf, vi->second);
        }
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw FormatError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

StageCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path);
    const std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (buf.size() < 13 || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw FormatError(path + ": not a checkpoint (bad magic)");
    }
    const auto version = static_cast<uint8_t>(buf[8]);
    if (version != kCheckpointVersion) {
        throw FormatError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
    }
    uint32_t len = 0;
    std::memcpy(&len, buf.data() + 9, sizeof(len));
    std::size_t pos = 13;
    if (pos + len > buf.size()) throw FormatError(path + ": truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(pos, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad checkpoint header: " + e.what());
    }
    pos += len;

    StageCheckpoint ck;
    try {
        ck.stage = stage_from_name(header.at("stage").get<std::string>());
        ck.config = header.at("config").get<DenoiserConfig>();
        ck.training = header.at("training").get<TrainingConfig>();
        ck.solver = header.at("solver").get<SolverSpec>();
        ck.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>());
        ck.step = header.at("step").get<int64_t>();
        ck.encoder_spatial = header.at("encoder").at(0).get<int>();
        ck.encoder_temporal = header.at("encoder").at(1).get<int>();
        ck.adam.updates = header.at("adam_updates").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": incomplete checkpoint header: " + e.what());
    }
    if (ck.config.stage != ck.stage) throw FormatError(path + ": stage tag disagrees with the stored config");

    std::vector<std::string> order;
    for (const auto& entry : header.at("parameters")) {
        const auto name = entry.at(0).get<std::string>();
        Parameter& p = ck.params.add(name, entry.at(1).get<int>(), entry.at(2).get<int>());
        get_matrix(buf, pos, p.value, path);
        order.push_back(name);
    }
    if (ck.adam.updates > 0) {
        for (const auto& name : order) {
            const Parameter& p = ck.params.at(name);
            Mat m(p.value.rows(), p.value.cols());
            Mat v(p.value.rows(), p.value.cols());
            get_matrix(buf, pos, m, path);
            get_matrix(buf, pos, v, path);
            ck.adam.m.emplace(name, std::move(m));
            ck.adam.v.emplace(name, std::move(v));
        }
    }
    if (pos != buf.size()) throw FormatError(path + ": trailing bytes after checkpoint payload");
    return ck;
}

StageCheckpoint load_checkpoint(const std::string& path, StageTag expected) {
    StageCheckpoint ck = load_checkpoint(path);
    if (ck.stage != expected) {
        throw Error(path + " holds a " + std::string(stage_name(ck.stage)) + " checkpoint but a " +
                    stage_name(expected) + " checkpoint is required");
    }
    return ck;
}

}  // namespace maskvid
