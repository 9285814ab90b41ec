#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "maskvid/error.hpp"
#include "maskvid/pipeline.hpp"

using namespace maskvid;

namespace {

GeneratorConfig gen() {
    GeneratorConfig g;
    g.height = g.width = 16;
    g.frames = 4;
    g.cell = 4;
    g.margin = 0;
    g.max_objects = 2;
    g.min_radius = g.max_radius = 0;
    g.max_speed = 1;
    return g;
}

std::vector<DatasetSample> samples(int n, uint64_t base = 10) {
    std::vector<DatasetSample> out;
    for (int i = 0; i < n; ++i) {
        GeneratedSample g = generate_scene(base + i, gen());
        DatasetSample s;
        s.name = "s" + std::to_string(i);
        s.prompts = render_prompts(g.scene);
        s.file.video = g.video;
        s.file.mask = g.mask;
        s.file.scene = g.scene;
        out.push_back(std::move(s));
    }
    return out;
}

PipelineConfig config() {
    PipelineConfig c;
    c.model.width = 8;
    c.model.heads = 2;
    c.model.blocks = 1;
    c.model.masked_blocks = 1;
    c.model.text_len = 8;
    c.model.caption_len = 16;
    c.model.ffn_mult = 2;
    c.training.steps = 6;
    c.training.batch = 2;
    c.training.warmup = 2;
    c.training.lr = 1e-3;
    c.solver.steps = 3;
    return c;
}

InferenceRequest request_for(const DatasetSample& s) {
    InferenceRequest r;
    r.x0 = s.file.video->frame(0);
    r.prompts = *s.prompts;
    r.s0 = s.file.mask->frame(0);
    r.scene = s.file.scene;
    r.seed = 5;
    return r;
}

}  // namespace

TEST(Pipeline, ModelForDerivesTokensAndStage) {
    const PipelineConfig c = config();
    const DenoiserConfig s1 = c.model_for(StageTag::stage1, {4, 16, 16});
    EXPECT_EQ(s1.masked_blocks, 0);
    EXPECT_EQ(s1.stage, StageTag::stage1);
    EXPECT_EQ(s1.tokens, (GridDims{4, 4, 4}));
    const DenoiserConfig s2 = c.model_for(StageTag::stage2, {4, 16, 16});
    EXPECT_EQ(s2.masked_blocks, 1);
    PipelineConfig fm = c;
    fm.solver.family = SolverFamily::fm_euler;
    EXPECT_EQ(fm.model_for(StageTag::stage2, {4, 16, 16}).objective, Objective::flow_velocity);
}

TEST(Pipeline, ConfigJsonAndHash) {
    const PipelineConfig c = config();
    nlohmann::json j = c;
    const PipelineConfig r = j.get<PipelineConfig>();
    EXPECT_EQ(nlohmann::json(r), j);
    EXPECT_EQ(config_hash(j).size(), 16u);
    EXPECT_EQ(config_hash(j), config_hash(nlohmann::json(r)));
    j["training"]["lr"] = 0.5;
    EXPECT_NE(config_hash(j), config_hash(nlohmann::json(c)));
}

TEST(Pipeline, BuildExamplesShapes) {
    const auto data = samples(3);
    const PipelineConfig c = config();
    const auto e1 = build_examples(StageTag::stage1, data, c);
    ASSERT_EQ(e1.size(), 3u);
    EXPECT_EQ(e1[0].target.rows(), 64);
    EXPECT_EQ(e1[0].target.cols(), 3);
    EXPECT_EQ(e1[0].visual.cols(), 6);
    EXPECT_TRUE(e1[0].local.empty());
    const auto e2 = build_examples(StageTag::stage2, data, c);
    EXPECT_EQ(e2[0].local.size(), data[0].prompts->local_prompts.size());
    ASSERT_TRUE(e2[0].masks);
    EXPECT_EQ(e2[0].masks->cross.cols, static_cast<int>(e2[0].local.size()) * c.model.text_len);
}

TEST(Pipeline, BuildExamplesNamesTheMissingField) {
    auto data = samples(2);
    data[1].file.mask.reset();
    try {
        build_examples(StageTag::stage1, data, config());
        FAIL();
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("s1"), std::string::npos);
        EXPECT_NE(msg.find("mask"), std::string::npos);
    }
}

TEST(Pipeline, ResumeIsBitIdenticalToAnUninterruptedRun) {
    const auto data = samples(4);
    const PipelineConfig c = config();
    const TrainResult full = train_stage(StageTag::stage2, data, c);
    TrainOptions stop;
    stop.stop_after = 3;
    const TrainResult half = train_stage(StageTag::stage2, data, c, stop);
    EXPECT_EQ(half.checkpoint.step, 3);
    const TrainResult rest = train_stage(StageTag::stage2, data, c, {}, &half.checkpoint);
    EXPECT_EQ(rest.checkpoint.step, 6);
    for (const auto& [name, p] : full.checkpoint.params) EXPECT_EQ(rest.checkpoint.params.at(name).value, p.value) << name;
    ASSERT_EQ(rest.log.size(), 3u);
    EXPECT_EQ(rest.log.back().loss, full.log.back().loss);
}

TEST(Pipeline, TrainingWritesJsonLinesLog) {
    testutil::TempDir dir("pipeline");
    TrainOptions o;
    o.log_path = dir.file("log.jsonl");
    o.checkpoint_path = dir.file("s1.ckpt");
    train_stage1(samples(2), config(), o);
    std::ifstream in(o.log_path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["step"].get<int>(), lines);
        EXPECT_TRUE(j.contains("loss") && j.contains("lr") && j.contains("grad_norm"));
        ++lines;
    }
    EXPECT_EQ(lines, 6);
    EXPECT_EQ(load_checkpoint(o.checkpoint_path).stage, StageTag::stage1);
}

TEST(Pipeline, InferenceChecksStageTagsAndObjectCounts) {
    const auto data = samples(3);
    const PipelineConfig c = config();
    const StageCheckpoint ck1 = train_stage1(data, c).checkpoint;
    const StageCheckpoint ck2 = train_stage2(data, c).checkpoint;
    const InferenceRequest req = request_for(data[0]);
    EXPECT_THROW(sample_stage1(req, ck2), Error);
    EXPECT_THROW(sample_stage2(req, *data[0].file.mask, ck1), Error);
    InferenceRequest extra = req;
    extra.prompts.local_prompts.push_back({9, "the ball"});
    EXPECT_THROW(sample_stage1(extra, ck1), Error);

    const InferenceResult a = infer(req, ck1, ck2);
    const InferenceResult b = infer(req, ck1, ck2);
    EXPECT_EQ(a.s_hat, b.s_hat);
    EXPECT_EQ(a.x_hat.data, b.x_hat.data);
    EXPECT_LE(a.s_hat.max_label(), static_cast<int>(req.prompts.local_prompts.size()));
    for (double v : a.x_hat.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Pipeline, BypassUsesTheGroundTruthTrajectory) {
    const auto data = samples(2);
    const PipelineConfig c = config();
    const StageCheckpoint ck1 = train_stage1(data, c).checkpoint;
    const StageCheckpoint ck2 = train_stage2(data, c).checkpoint;
    InferenceRequest req = request_for(data[1]);
    req.bypass_stage1 = true;
    EXPECT_EQ(infer(req, ck1, ck2).s_hat, *data[1].file.mask);
    req.scene.reset();
    EXPECT_THROW(infer(req, ck1, ck2), Error);
    // A scene that does not reproduce s0 is refused.
    MaskTrajectory wrong = data[1].file.mask->frame(0);
    wrong.labels[0] = 7;
    EXPECT_THROW(stage1_bypass_oracle(wrong, data[1].file.scene, 4), Error);
}

TEST(Pipeline, SolverOverrideMustMatchTheObjective) {
    const auto data = samples(2);
    const StageCheckpoint ck1 = train_stage1(data, config()).checkpoint;
    InferenceRequest req = request_for(data[0]);
    req.solver = SolverSpec{SolverFamily::fm_euler, 3, StepSchedule::uniform, 0.25, 1.0, 1.0};
    EXPECT_THROW(sample_stage1(req, ck1), Error);
}

TEST(Pipeline, MotionCaptionInfluencesTheTrainedStageOneModel) {
    const auto data = samples(3);
    const StageCheckpoint ck = train_stage1(data, config()).checkpoint;
    const Denoiser m(ck.config, ck.params);
    const Encoder e(ck.encoder_spatial, ck.encoder_temporal);
    const VideoClip x0 = e.encode_frame(data[0].file.video->frame(0));
    const VideoClip s0 = e.encode_frame(palette_encode(data[0].file.mask->frame(0), default_mask_palette()));
    const Mat noisy = Mat::Constant(64, 3, 0.1);
    const auto& v = template_vocabulary();
    const Mat a = denoise_stage1(m, noisy, 0.5, x0, s0, tokenize("the ball rolls to the right", v, 16));
    const Mat b = denoise_stage1(m, noisy, 0.5, x0, s0, tokenize("the ball rolls to the left", v, 16));
    EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-9);
}
