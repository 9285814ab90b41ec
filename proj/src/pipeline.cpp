#include "maskvid/pipeline.hpp"

#include <algorithm>
#include <random>

#include "maskvid/error.hpp"
#include "maskvid/synthset.hpp"

namespace maskvid {

MaskTrajectory resolve_s0(const InferenceRequest& request) {
    if (request.s0) {
        if (request.s0->frames != 1) throw ShapeError("s0 must be a single frame");
        return *request.s0;
    }
    if (request.scene) return render_scene(*request.scene).mask.frame(0);
    throw Error("no first-frame mask: provide s0 or a scene description");
}

MaskTrajectory stage1_bypass_oracle(const MaskTrajectory& s0, const std::optional<SceneSpec>& scene, int frames) {
    if (!scene) throw Error("stage-1 bypass needs the scene description of a synthetic sample");
    SceneSpec spec = *scene;
    spec.frames = frames;
    MaskTrajectory gt = render_scene(spec).mask;
    if (gt.frame(0) != s0) throw Error("scene description does not reproduce the provided s0");
    return gt;
}

namespace {

struct Prepared {
    const Denoiser* model;
    Encoder encoder;
    NoiseSchedule schedule;
    SolverSpec solver;
};

Prepared prepare(const StageCheckpoint& ck, const Denoiser& model, const InferenceRequest& request) {
    if (ck.vocab_hash != template_vocabulary().hash()) throw Error("checkpoint was trained with another vocabulary");
    Prepared p{&model, Encoder(ck.encoder_spatial, ck.encoder_temporal),
               make_zero_snr_schedule(ck.training.diffusion_steps, ck.training.schedule),
               request.solver.value_or(ck.solver)};
    p.solver.validate();
    if (objective_for(p.solver.family) != ck.config.objective) {
        throw Error("solver family does not match the checkpoint's training objective");
    }
    return p;
}

Mat initial_noise(uint64_t seed, uint64_t stream, Eigen::Index rows, Eigen::Index cols) {
    std::mt19937_64 rng(step_seed(seed, static_cast<int64_t>(stream)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Mat x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gauss(rng);
    return x;
}

/// Tokens for the three guidance branches of one stage.
struct BranchInputs {
    Mat visual;
    TokenizedText context;
    TokenizedText null_context;
    std::vector<TokenizedText> local;
    std::vector<TokenizedText> null_local;
    const AttentionMaskPair* masks = nullptr;
    const AttentionMaskPair* null_masks = nullptr;
};

GuidanceBranches make_branches(const Denoiser& model, const BranchInputs& b) {
    const auto run = [&model, &b](const Mat& x, double level, bool visual, bool text) {
        const DenoiserConfig& c = model.config();
        DenoiserInput in;
        in.tokens.resize(x.rows(), c.input_channels());
        in.tokens.leftCols(c.latent_channels) = x;
        if (visual) {
            in.tokens.rightCols(b.visual.cols()) = b.visual;
        } else {
            in.tokens.rightCols(b.visual.cols()).setZero();
        }
        in.noise_level = level;
        in.context = text ? b.context : b.null_context;
        if (c.masked_blocks > 0) {
            in.local = text ? b.local : b.null_local;
            in.masks = visual ? b.masks : b.null_masks;
        }
        return model.forward(in);
    };
    GuidanceBranches g;
    g.full = [run](const Mat& x, double level) { return run(x, level, true, true); };
    g.vis = [run](const Mat& x, double level) { return run(x, level, true, false); };
    g.uncond = [run](const Mat& x, double level) { return run(x, level, false, false); };
    return g;
}

void check_frame(const VideoClip& x0) {
    if (x0.frames != 1 || x0.channels != 3) throw ShapeError("reference image must be a single RGB frame");
}

}  // namespace

InferenceResult sample_stage1(const InferenceRequest& request, const StageCheckpoint& ck1) {
    if (ck1.stage != StageTag::stage1) throw Error("stage-1 slot received a stage2 checkpoint");
    check_frame(request.x0);
    const MaskTrajectory s0 = resolve_s0(request);
    const int l = static_cast<int>(request.prompts.local_prompts.size());
    if (s0.max_label() > l || static_cast<int>(s0.labels_in_frame(0).size()) != l) {
        throw Error("object count mismatch: s0 has labels up to " + std::to_string(s0.max_label()) + " but " +
                    std::to_string(l) + " object prompts were given");
    }
    const Denoiser model(ck1.config, ck1.params);
    const Prepared p = prepare(ck1, model, request);
    const DenoiserConfig& c = model.config();
    const Palette palette = default_mask_palette();
    if (static_cast<std::size_t>(l) + 1 > palette.size()) throw Error("too many objects for the mask palette");

    BranchInputs b;
    b.visual.resize(static_cast<Eigen::Index>(c.tokens.cells()), 2 * c.latent_channels);
    b.visual.leftCols(c.latent_channels) = broadcast_frame(p.encoder.encode_frame(request.x0), c.tokens.frames);
    b.visual.rightCols(c.latent_channels) =
        broadcast_frame(p.encoder.encode_frame(palette_encode(s0, palette)), c.tokens.frames);
    b.context = tokenize(request.prompts.motion_prompt, template_vocabulary(), c.caption_len);
    b.null_context = tokenize("", template_vocabulary(), c.caption_len);
    const GuidanceBranches branches = make_branches(model, b);

    const Mat start = initial_noise(request.seed, 1, static_cast<Eigen::Index>(c.tokens.cells()), c.latent_channels);
    const Mat latent = sample(p.solver, p.schedule, start, [&](const Mat& x, double level) {
        return guided_prediction(branches, x, level, p.solver.g_vis, p.solver.g_txt);
    });

    InferenceResult r;
    r.s_soft = p.encoder.decode(from_tokens(latent, c.tokens));
    r.s_soft.fps = request.x0.fps;
    r.s_hat = palette_decode(r.s_soft, palette.truncated(static_cast<std::size_t>(l) + 1));
    return r;
}

VideoClip sample_stage2(const InferenceRequest& request, const MaskTrajectory& s_hat, const StageCheckpoint& ck2) {
    if (ck2.stage != StageTag::stage2) throw Error("stage-2 slot received a stage1 checkpoint");
    check_frame(request.x0);
    const Denoiser model(ck2.config, ck2.params);
    const Prepared p = prepare(ck2, model, request);
    const DenoiserConfig& c = model.config();
    const Palette palette = default_mask_palette();
    const int l = static_cast<int>(request.prompts.local_prompts.size());
    if (s_hat.max_label() > l) throw Error("trajectory has more objects than object prompts");

    BranchInputs b;
    b.visual.resize(static_cast<Eigen::Index>(c.tokens.cells()), 2 * c.latent_channels);
    b.visual.leftCols(c.latent_channels) = broadcast_frame(p.encoder.encode_frame(request.x0), c.tokens.frames);
    b.visual.rightCols(c.latent_channels) = to_tokens(p.encoder.encode(palette_encode(s_hat, palette)));
    b.context = tokenize(request.prompts.global_caption, template_vocabulary(), c.caption_len);
    b.null_context = tokenize("", template_vocabulary(), c.caption_len);
    AttentionMaskPair masks;
    AttentionMaskPair null_masks;
    if (c.masked_blocks > 0) {
        for (const auto& lp : request.prompts.local_prompts) {
            b.local.push_back(tokenize(lp.text, template_vocabulary(), c.text_len));
        }
        b.null_local.assign(b.local.size(), tokenize("", template_vocabulary(), c.text_len));
        masks = stage2_masks(s_hat, l, c);
        const LatentGrid empty(c.tokens.frames, c.tokens.height, c.tokens.width, 0);
        null_masks = build_mask_pair(empty, l, c.text_len, c.background);
        b.masks = &masks;
        b.null_masks = &null_masks;
    }
    const GuidanceBranches branches = make_branches(model, b);

    const Mat start = initial_noise(request.seed, 2, static_cast<Eigen::Index>(c.tokens.cells()), c.latent_channels);
    const Mat latent = sample(p.solver, p.schedule, start, [&](const Mat& x, double level) {
        return guided_prediction(branches, x, level, p.solver.g_vis, p.solver.g_txt);
    });
    VideoClip out = p.encoder.decode(from_tokens(latent, c.tokens));
    out.fps = request.x0.fps;
    for (double& v : out.data) v = std::clamp(v, -1.0, 1.0);
    return out;
}

InferenceResult infer(const InferenceRequest& request, const StageCheckpoint& ckpt1, const StageCheckpoint& ckpt2) {
    InferenceResult r;
    if (request.bypass_stage1) {
        const MaskTrajectory s0 = resolve_s0(request);
        const int frames = ckpt2.config.tokens.frames * ckpt2.encoder_temporal;
        r.s_hat = stage1_bypass_oracle(s0, request.scene, frames);
    } else {
        r = sample_stage1(request, ckpt1);
    }
    r.x_hat = sample_stage2(request, r.s_hat, ckpt2);
    return r;
}

}  // namespace maskvid
