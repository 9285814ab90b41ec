#pragma once

// Fixed smoke-run setup shared by the training criteria.

#include <vector>

#include "maskvid/container.hpp"
#include "maskvid/pipeline.hpp"
#include "maskvid/prompts.hpp"
#include "maskvid/synthset.hpp"

namespace smoke {

inline constexpr uint64_t kTrainSeed = 100000;
inline constexpr int kTrainCount = 512;
inline constexpr uint64_t kHeldOutSeed = 900000;
inline constexpr int kHeldOutCount = 32;
inline constexpr uint64_t kSampleSeed = 4242;

/// 32x32, 8 frames, objects drawn on a 4-pixel grid so one token covers one grid cell.
inline maskvid::GeneratorConfig generator() {
    maskvid::GeneratorConfig g;
    g.height = g.width = 32;
    g.frames = 8;
    g.cell = 4;
    g.margin = 0;
    g.min_objects = 1;
    g.max_objects = 2;
    g.min_radius = g.max_radius = 1;
    g.max_speed = 1;
    g.motion = {0.1, 0.3, 0.6};
    return g;
}

inline std::vector<maskvid::DatasetSample> dataset(uint64_t base_seed, int count) {
    std::vector<maskvid::DatasetSample> out;
    const maskvid::GeneratorConfig g = generator();
    for (int i = 0; i < count; ++i) {
        maskvid::GeneratedSample s = maskvid::generate_scene(base_seed + static_cast<uint64_t>(i), g);
        maskvid::DatasetSample d;
        d.name = "smoke_" + std::to_string(i);
        d.prompts = maskvid::render_prompts(s.scene);
        d.file.video = std::move(s.video);
        d.file.mask = std::move(s.mask);
        d.file.scene = std::move(s.scene);
        out.push_back(std::move(d));
    }
    return out;
}

inline maskvid::PipelineConfig base_config() {
    maskvid::PipelineConfig c;
    c.model.width = 32;
    c.model.heads = 2;
    c.model.blocks = 2;
    c.model.text_len = 16;
    c.model.caption_len = 40;
    c.model.seed = 7;
    c.training.lr = 1e-3;
    c.training.warmup = 100;
    c.training.steps = 2000;
    c.training.batch = 8;
    c.training.seed = 3;
    c.solver.family = maskvid::SolverFamily::ddim_v;
    c.solver.steps = 20;
    c.solver.g_vis = 1.0;
    c.solver.g_txt = 1.0;
    c.encoder_spatial = 4;
    c.encoder_temporal = 1;
    return c;
}

inline maskvid::PipelineConfig stage1_config() {
    maskvid::PipelineConfig c = base_config();
    c.model.blocks = 4;
    c.solver.g_vis = 2.0;
    c.solver.g_txt = 2.0;
    return c;
}

inline maskvid::PipelineConfig stage2_config() {
    maskvid::PipelineConfig c = base_config();
    c.model.masked_blocks = 1;
    c.training.steps = 1500;
    return c;
}

inline maskvid::InferenceRequest request(const maskvid::DatasetSample& s, const maskvid::SolverSpec& solver) {
    maskvid::InferenceRequest r;
    r.x0 = s.file.video->frame(0);
    r.prompts = *s.prompts;
    r.s0 = s.file.mask->frame(0);
    r.scene = s.file.scene;
    r.solver = solver;
    r.seed = kSampleSeed;
    return r;
}

}  // namespace smoke
