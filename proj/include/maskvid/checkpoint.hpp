#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "maskvid/backbone.hpp"
#include "maskvid/diffusion.hpp"
#include "maskvid/parameters.hpp"

namespace maskvid {

/// Trained parameters of one stage plus everything needed to resume or sample.
struct StageCheckpoint {
    StageTag stage = StageTag::stage1;
    DenoiserConfig config;
    ParameterSet params;
    AdamState adam;
    TrainingConfig training;
    SolverSpec solver;
    uint64_t vocab_hash = 0;
    int64_t step = 0;
    int encoder_spatial = 4;
    int encoder_temporal = 1;
};

/// Checkpoint layout (little-endian):
///
///   bytes 0-7   magic "MVCKPT01"
///   byte  8     format version (kCheckpointVersion)
///   bytes 9-12  header length N (uint32)
///   N bytes     JSON header: stage, config, training, solver, vocab hash, step,
///               encoder factors, ordered parameter shapes, optimizer flag
///   payload     float64 parameter values in header order, then Adam m and v
inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr uint8_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const StageCheckpoint& ckpt);
StageCheckpoint load_checkpoint(const std::string& path);
/// Loads and checks that the stage tag matches the slot it is loaded into.
StageCheckpoint load_checkpoint(const std::string& path, StageTag expected);

}  // namespace maskvid
