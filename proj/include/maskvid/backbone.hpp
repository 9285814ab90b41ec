#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskvid/attention.hpp"
#include "maskvid/maskops.hpp"
#include "maskvid/parameters.hpp"
#include "maskvid/prompts.hpp"
#include "maskvid/types.hpp"

namespace maskvid {

// ---------------------------------------------------------------------------
// Frame encoder

enum class EncoderMode { identity_downsample, external };

/// Maps pixel clips to latent clips. The default mode average-pools by the
/// spatial/temporal factors and decodes by nearest upsampling, which is exact
/// for clips that are constant on each pooling block.
class Encoder {
public:
    using Transform = std::function<VideoClip(const VideoClip&)>;

    explicit Encoder(int spatial = 4, int temporal = 1);
    /// User-provided encode/decode pair; factors describe the latent geometry.
    static Encoder external(Transform encode, Transform decode, int spatial, int temporal);

    EncoderMode mode() const { return mode_; }
    int spatial() const { return spatial_; }
    int temporal() const { return temporal_; }

    GridDims latent_dims(GridDims pixels) const;
    VideoClip encode(const VideoClip& clip) const;
    VideoClip decode(const VideoClip& latent) const;
    /// Encodes a single frame (spatial factor only).
    VideoClip encode_frame(const VideoClip& frame) const;

private:
    EncoderMode mode_ = EncoderMode::identity_downsample;
    int spatial_ = 4;
    int temporal_ = 1;
    Transform encode_fn_;
    Transform decode_fn_;
};

/// Latent clip -> (F' * H' * W') x C token matrix in raster (f, y, x) order.
Mat to_tokens(const VideoClip& latent);
VideoClip from_tokens(const Mat& tokens, GridDims dims);
/// Repeats a one-frame latent over `frames` frames, as tokens.
Mat broadcast_frame(const VideoClip& frame_latent, int frames);

// ---------------------------------------------------------------------------
// Denoiser

enum class StageTag { stage1, stage2 };
enum class Objective { v_prediction, flow_velocity };

const char* stage_name(StageTag s);
StageTag stage_from_name(const std::string& s);
const char* objective_name(Objective o);
Objective objective_from_name(const std::string& s);

enum class SublayerKind {
    spatial_attention,
    temporal_attention,
    masked_self_attention,
    cross_attention,
    masked_cross_attention,
    feed_forward,
};

struct DenoiserConfig {
    int width = 32;
    int heads = 2;
    int blocks = 2;
    int masked_blocks = 0;  ///< K: the first K blocks carry masked sublayers
    GridDims tokens{8, 8, 8};
    int latent_channels = 3;
    int conditions = 2;     ///< number of channel-concatenated latent conditions
    int text_len = 16;      ///< N_txt for object prompts
    int caption_len = 40;   ///< token length of the global / motion caption
    int vocab_size = 0;     ///< 0 selects the template vocabulary size
    int ffn_mult = 4;
    Objective objective = Objective::v_prediction;
    StageTag stage = StageTag::stage1;
    BackgroundPolicy background = BackgroundPolicy::own_group;
    uint64_t seed = 0;

    int input_channels() const { return latent_channels * (1 + conditions); }
    int resolved_vocab_size() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Sublayer order of block b: spatial/temporal self-attention, then (masked
/// blocks only) masked self-attention, cross-attention on the caption, (masked
/// blocks only) masked cross-attention on object prompts, feed-forward.
std::vector<SublayerKind> block_layout(const DenoiserConfig& c, int block);
std::vector<ParamSpec> parameter_layout(const DenoiserConfig& c);
std::size_t parameter_count(const DenoiserConfig& c);

struct DenoiserInput {
    Mat tokens;                         ///< N_tokens x input_channels, noisy latent first
    double noise_level = 0.0;           ///< 0 = clean, 1 = pure noise
    TokenizedText context;              ///< caption tokens (c_motion for stage 1, c for stage 2)
    std::vector<TokenizedText> local;   ///< object prompts, stage 2 only
    const AttentionMaskPair* masks = nullptr;  ///< required when masked_blocks > 0
};

struct SublayerCache {
    SublayerKind kind{};
    Mat normed;
    Eigen::VectorXd inv_std;
    RowVec shift, scale;
    AttentionCache attn;
    Mat ffn_pre;
    Mat ffn_hidden;
    Mat ffn_in;
};

struct ForwardCache {
    Mat input;
    RowVec time_features, time_pre1, time_act1, time_pre2, cond;
    TokenSequence context;
    std::vector<int> context_ids;
    TokenSequence local;
    std::vector<int> local_ids;  ///< concatenated token ids of object prompts
    const AttentionMaskPair* masks = nullptr;
    std::vector<std::vector<SublayerCache>> blocks;
    Mat final_normed;
    Eigen::VectorXd final_inv_std;
    RowVec final_shift, final_scale;
    Mat final_mod;
};

class Denoiser {
public:
    /// Freshly initialized parameters (deterministic in config.seed).
    explicit Denoiser(DenoiserConfig config);
    Denoiser(DenoiserConfig config, ParameterSet params);

    const DenoiserConfig& config() const { return config_; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

    /// Prediction with the latent shape (N_tokens x latent_channels).
    Mat forward(const DenoiserInput& in, ForwardCache* cache = nullptr) const;
    /// Accumulates parameter gradients for upstream gradient d_out.
    void backward(const ForwardCache& cache, const Mat& d_out);

    /// Learned lookup plus positional offsets; padding flagged invalid.
    TokenSequence text_embed(const TokenizedText& tokens) const;

private:
    DenoiserConfig config_;
    ParameterSet params_;
    std::vector<std::vector<int>> spatial_groups_;
    std::vector<std::vector<int>> temporal_groups_;

    void build_groups();
    AttentionParams attention_params(const std::string& prefix) const;
};

/// Image-to-motion prediction: channels [s_t | E(x0) | E(s0)], caption = c_motion.
Mat denoise_stage1(const Denoiser& model, const Mat& noisy, double noise_level, const VideoClip& enc_x0,
                   const VideoClip& enc_s0, const TokenizedText& motion_tokens);

/// Motion-to-video prediction: channels [x_t | E(x0) | E(s)], caption = c, object prompts through masks.
Mat denoise_stage2(const Denoiser& model, const Mat& noisy, double noise_level, const VideoClip& enc_x0,
                   const VideoClip& enc_s, const TokenizedText& caption_tokens,
                   const std::vector<TokenizedText>& local_tokens, const AttentionMaskPair& masks);

}  // namespace maskvid
