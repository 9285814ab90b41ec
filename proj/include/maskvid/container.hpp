#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maskvid/maskops.hpp"
#include "maskvid/prompts.hpp"
#include "maskvid/synthset.hpp"

namespace maskvid {

/// Sample container layout (all integers little-endian):
///
///   bytes 0-7   magic "MVSAMPLE"
///   byte  8     format version (kSampleVersion)
///   bytes 9-12  header length N (uint32)
///   N bytes     header, JSON text: dims, fps, palette, scene, config_hash, payload flags
///   payload     video as float32 [F][3][H][W] (if present), then labels as uint16 [F][H][W] (if present)
struct SampleFile {
    std::optional<VideoClip> video;
    std::optional<MaskTrajectory> mask;
    std::optional<SceneSpec> scene;
    Palette palette = default_mask_palette();
    std::string config_hash;  ///< identifies the run that produced a prediction; empty for ground truth
};

inline constexpr char kSampleMagic[8] = {'M', 'V', 'S', 'A', 'M', 'P', 'L', 'E'};
inline constexpr uint8_t kSampleVersion = 1;

void save_sample(const std::string& path, const SampleFile& sample);
SampleFile load_sample(const std::string& path);

/// Directory-of-samples layout: manifest.json plus <name>.mvs and <name>.prompts.json per sample.
struct DatasetEntry {
    std::string name;
    uint64_t seed = 0;
    std::string split;  ///< "train" or "test"
};

struct DatasetManifest {
    GeneratorConfig generator;
    std::vector<DatasetEntry> samples;
};

/// Generates `count` scenes with seeds base_seed, base_seed + 1, ...; the last
/// round(test_fraction * count) samples form the test split.
DatasetManifest write_dataset(const std::string& dir, int count, uint64_t base_seed,
                              const GeneratorConfig& config, double test_fraction = 0.0);
DatasetManifest read_manifest(const std::string& dir);

/// One loaded dataset sample with its prompt sidecar (if present).
struct DatasetSample {
    std::string name;
    SampleFile file;
    std::optional<PromptBundle> prompts;
};

std::vector<DatasetSample> load_dataset(const std::string& dir, const std::string& split = "");

}  // namespace maskvid
