#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskvid/backbone.hpp"
#include "maskvid/checkpoint.hpp"
#include "maskvid/container.hpp"
#include "maskvid/diffusion.hpp"
#include "maskvid/maskops.hpp"
#include "maskvid/prompts.hpp"

namespace maskvid {

/// Everything a training run needs besides the data. The token grid of the
/// model is derived from the data dimensions and the encoder factors.
struct PipelineConfig {
    DenoiserConfig model;
    TrainingConfig training;
    SolverSpec solver;
    int encoder_spatial = 4;
    int encoder_temporal = 1;
    TemporalPooling pooling = TemporalPooling::majority;
    bool mask_jitter = false;  ///< shift stage-2 training boxes by up to one cell

    /// Model config for a stage: stage tag set, stage 1 without masked blocks.
    DenoiserConfig model_for(StageTag stage, GridDims pixels) const;
    Encoder encoder() const { return Encoder(encoder_spatial, encoder_temporal); }
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);
PipelineConfig load_pipeline_config(const std::string& path);

/// Short stable hash of a JSON document (hex), used to tag predictions.
std::string config_hash(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Training

/// Converts dataset samples into token-form training examples for a stage.
/// Throws Error naming the sample and missing field when data is incomplete.
std::vector<TrainingExample> build_examples(StageTag stage, const std::vector<DatasetSample>& samples,
                                            const PipelineConfig& config);

struct TrainOptions {
    std::string log_path;         ///< append-only JSON lines (step, loss, lr, grad_norm); empty disables
    std::string checkpoint_path;  ///< periodic and final checkpoint; empty disables
    int64_t stop_after = -1;      ///< stop once this many total steps are done (for resume tests)
    std::function<void(const StepReport&)> on_step;
};

struct TrainResult {
    StageCheckpoint checkpoint;
    std::vector<StepReport> log;
};

/// Trains from scratch, or continues `resume` until config.training.steps.
TrainResult train_stage(StageTag stage, const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                        const TrainOptions& options = {}, const StageCheckpoint* resume = nullptr);

TrainResult train_stage1(const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                         const TrainOptions& options = {});
TrainResult train_stage2(const std::vector<DatasetSample>& samples, const PipelineConfig& config,
                         const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Inference

struct InferenceRequest {
    VideoClip x0;                       ///< single reference frame
    PromptBundle prompts;
    std::optional<MaskTrajectory> s0;   ///< single-frame label map
    std::optional<SceneSpec> scene;     ///< synthetic ground truth, enables the bypass oracle
    std::optional<SolverSpec> solver;   ///< overrides the solvers stored in the checkpoints
    uint64_t seed = 0;
    bool bypass_stage1 = false;         ///< use stage1_bypass_oracle instead of sampling stage 1
};

struct InferenceResult {
    MaskTrajectory s_hat;
    VideoClip s_soft;   ///< decoded stage-1 sample before hardening (empty under bypass)
    VideoClip x_hat;
};

/// First-frame label map of a request: the provided s0, or frame 0 of the scene.
MaskTrajectory resolve_s0(const InferenceRequest& request);

/// Stage 1: samples a palette clip and hardens it into labels {0..L}.
InferenceResult sample_stage1(const InferenceRequest& request, const StageCheckpoint& ckpt1);
/// Stage 2: samples a video given a hardened trajectory.
VideoClip sample_stage2(const InferenceRequest& request, const MaskTrajectory& s_hat, const StageCheckpoint& ckpt2);

InferenceResult infer(const InferenceRequest& request, const StageCheckpoint& ckpt1, const StageCheckpoint& ckpt2);

/// Ground-truth trajectory re-rendered from the scene, checked against s0.
MaskTrajectory stage1_bypass_oracle(const MaskTrajectory& s0, const std::optional<SceneSpec>& scene, int frames);

/// Latent grid and attention masks for stage-2 conditioning on a hardened trajectory.
AttentionMaskPair stage2_masks(const MaskTrajectory& s, int num_objects, const DenoiserConfig& model,
                               TemporalPooling pooling = TemporalPooling::majority);

}  // namespace maskvid
