#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "maskvid/error.hpp"
#include "maskvid/pipeline.hpp"

namespace maskvid {

DenoiserConfig PipelineConfig::model_for(StageTag stage, GridDims pixels) const {
    DenoiserConfig c = model;
    c.stage = stage;
    if (stage == StageTag::stage1) c.masked_blocks = 0;
    c.tokens = encoder().latent_dims(pixels);
    c.conditions = 2;
    c.latent_channels = 3;
    c.objective = objective_for(solver.family);
    return c;
}

namespace {

const char* pooling_name(TemporalPooling p) { return p == TemporalPooling::majority ? "majority" : "first_frame"; }

TemporalPooling pooling_from_name(const std::string& s) {
    if (s == "majority") return TemporalPooling::majority;
    if (s == "first_frame") return TemporalPooling::first_frame;
    throw Error("unknown temporal pooling '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const PipelineConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"training", c.training},
                       {"solver", c.solver},
                       {"encoder", {c.encoder_spatial, c.encoder_temporal}},
                       {"pooling", pooling_name(c.pooling)},
                       {"mask_jitter", c.mask_jitter}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
    const PipelineConfig d;
    c.model = j.contains("model") ? j.at("model").get<DenoiserConfig>() : d.model;
    c.training = j.contains("training") ? j.at("training").get<TrainingConfig>() : d.training;
    c.solver = j.contains("solver") ? j.at("solver").get<SolverSpec>() : d.solver;
    if (j.contains("encoder")) {
        c.encoder_spatial = j.at("encoder").at(0).get<int>();
        c.encoder_temporal = j.at("encoder").at(1).get<int>();
    }
    c.pooling = pooling_from_name(j.value("pooling", std::string(pooling_name(d.pooling))));
    c.mask_jitter = j.value("mask_jitter", d.mask_jitter);
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read config " + path);
    try {
        return nlohmann::json::parse(in).get<PipelineConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad config " + path + ": " + e.what());
    }
}

std::string config_hash(const nlohmann::json& j) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

AttentionMaskPair stage2_masks(const MaskTrajectory& s, int num_objects, const DenoiserConfig& model,
                               TemporalPooling pooling) {
    const LatentGrid grid = downsample_labels(s, model.tokens, pooling);
    return build_mask_pair(grid, num_objects, model.text_len, model.background);
}

namespace {

/// Shifts every box by up to one cell in each direction, clamped to the grid.
BoxSet jitter_boxes(const BoxSet& boxes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> shift(-1, 1);
    BoxSet out = boxes;
    for (auto& frame : out.frames) {
        for (auto& [id, b] : frame) {
            const int dy = shift(rng);
            const int dx = shift(rng);
            const int ny0 = std::clamp(b.ymin + dy, 0, boxes.dims.height - 1);
            const int nx0 = std::clamp(b.xmin + dx, 0, boxes.dims.width - 1);
            b.ymax = std::clamp(b.ymax + dy, 0, boxes.dims.height - 1);
            b.xmax = std::clamp(b.xmax + dx, 0, boxes.dims.width - 1);
            b.ymin = ny0;
            b.xmin = nx0;
        }
    }
    return out;
}

const VideoClip& require_video(const DatasetSample& s) {
    if (!s.file.video) throw Error("sample " + s.name + " has no video (field 'video')");
    return *s.file.video;
}

const MaskTrajectory& require_mask(const DatasetSample& s) {
    if (!s.file.mask) throw Error("sample " + s.name + " has no mask trajectory (field 'mask')");
    return *s.file.mask;
}

const PromptBundle& require_prompts(const DatasetSample& s) {
    if (!s.prompts) throw Error("sample " + s.name + " has no prompt bundle (field 'prompts')");
    return *s.prompts;
}

}  // namespace

std::vector<TrainingExample> build_examples(StageTag stage, const std::vector<DatasetSample>& samples,
                                            const PipelineConfig& config) {
    if (samples.empty()) throw TrainingError("empty dataset");
    const Encoder enc = config.encoder();
    const Vocabulary& vocab = template_vocabulary();
    const Palette palette = default_mask_palette();
    const GridDims pixels = require_video(samples.front()).dims();
    const DenoiserConfig model = config.model_for(stage, pixels);
    std::mt19937_64 jitter_rng(config.training.seed ^ 0x6a09e667f3bcc909ULL);

    std::vector<TrainingExample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const VideoClip& video = require_video(s);
        const MaskTrajectory& mask = require_mask(s);
        const PromptBundle& prompts = require_prompts(s);
        if (video.dims() != pixels) throw ShapeError("sample " + s.name + " has different dimensions");

        const VideoClip enc_x0 = enc.encode_frame(video.frame(0));
        const VideoClip mask_clip = palette_encode(mask, palette);
        TrainingExample ex;
        ex.visual.resize(static_cast<Eigen::Index>(model.tokens.cells()), 2 * model.latent_channels);
        ex.visual.leftCols(model.latent_channels) = broadcast_frame(enc_x0, model.tokens.frames);
        if (stage == StageTag::stage1) {
            ex.target = to_tokens(enc.encode(mask_clip));
            const VideoClip enc_s0 = enc.encode_frame(mask_clip.frame(0));
            ex.visual.rightCols(model.latent_channels) = broadcast_frame(enc_s0, model.tokens.frames);
            ex.context = tokenize(prompts.motion_prompt, vocab, model.caption_len);
        } else {
            ex.target = to_tokens(enc.encode(video));
            ex.visual.rightCols(model.latent_channels) = to_tokens(enc.encode(mask_clip));
            ex.context = tokenize(prompts.global_caption, vocab, model.caption_len);
            for (const auto& lp : prompts.local_prompts) ex.local.push_back(tokenize(lp.text, vocab, model.text_len));
            const int l = static_cast<int>(prompts.local_prompts.size());
            if (mask.max_label() > l) {
                throw Error("sample " + s.name + " has " + std::to_string(mask.max_label()) + " objects but " +
                            std::to_string(l) + " local prompts");
            }
            if (model.masked_blocks > 0) {
                auto pair = std::make_shared<AttentionMaskPair>(stage2_masks(mask, l, model, config.pooling));
                if (config.mask_jitter) {
                    pair->boxes = jitter_boxes(pair->boxes, jitter_rng);
                    pair->cross = build_cross_mask(pair->boxes, model.tokens, l, model.text_len);
                }
                ex.masks = std::move(pair);
                const LatentGrid empty(model.tokens.frames, model.tokens.height, model.tokens.width, 0);
                ex.null_masks =
                    std::make_shared<AttentionMaskPair>(build_mask_pair(empty, l, model.text_len, model.background));
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

TrainResult train_stage(StageTag stage, const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                        const TrainOptions& options, const StageCheckpoint* resume) {
    if (samples.empty()) throw TrainingError("empty dataset");
    const std::vector<TrainingExample> examples = build_examples(stage, samples, config);
    const DenoiserConfig model_config = config.model_for(stage, require_video(samples.front()).dims());

    TrainResult result;
    StageCheckpoint& ck = result.checkpoint;
    if (resume != nullptr) {
        if (resume->stage != stage) {
            throw TrainingError(std::string("cannot resume a ") + stage_name(resume->stage) + " checkpoint as " +
                                stage_name(stage));
        }
        ck = *resume;
    } else {
        ck.stage = stage;
        ck.config = model_config;
        ck.training = config.training;
        ck.solver = config.solver;
        ck.vocab_hash = template_vocabulary().hash();
        ck.encoder_spatial = config.encoder_spatial;
        ck.encoder_temporal = config.encoder_temporal;
        ck.params = Denoiser(model_config).parameters();
    }
    if (ck.vocab_hash != template_vocabulary().hash()) throw TrainingError("checkpoint vocabulary differs");

    Denoiser model(ck.config, std::move(ck.params));
    const TrainingConfig& tc = ck.training;
    const NoiseSchedule schedule = make_zero_snr_schedule(tc.diffusion_steps, tc.schedule);
    std::ofstream log;
    if (!options.log_path.empty()) {
        log.open(options.log_path, std::ios::app);
        if (!log) throw Error("cannot open training log " + options.log_path);
    }

    const int64_t end = options.stop_after >= 0 ? std::min<int64_t>(options.stop_after, tc.steps) : tc.steps;
    const int batch = std::max(1, std::min<int>(tc.batch, static_cast<int>(examples.size())));
    const auto save = [&](int64_t step) {
        if (options.checkpoint_path.empty()) return;
        StageCheckpoint snapshot = ck;
        snapshot.params = model.parameters();
        snapshot.step = step;
        save_checkpoint(options.checkpoint_path, snapshot);
    };

    for (int64_t step = ck.step; step < end; ++step) {
        std::mt19937_64 pick(step_seed(tc.seed ^ 0xbb67ae8584caa73bULL, step));
        std::uniform_int_distribution<std::size_t> index(0, examples.size() - 1);
        std::vector<const TrainingExample*> chosen;
        for (int b = 0; b < batch; ++b) chosen.push_back(&examples[index(pick)]);
        const StepReport r = train_step(model, ck.adam, chosen, tc, schedule, step);
        result.log.push_back(r);
        if (log) {
            log << nlohmann::json{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"grad_norm", r.grad_norm}}.dump()
                << '\n';
        }
        if (options.on_step) options.on_step(r);
        ck.step = step + 1;
        if (tc.checkpoint_every > 0 && ck.step % tc.checkpoint_every == 0 && ck.step < end) save(ck.step);
    }
    ck.params = model.parameters();
    save(ck.step);
    return result;
}

TrainResult train_stage1(const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                         const TrainOptions& options) {
    return train_stage(StageTag::stage1, samples, config, options);
}

TrainResult train_stage2(const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                         const TrainOptions& options) {
    return train_stage(StageTag::stage2, samples, config, options);
}

}  // namespace maskvid
