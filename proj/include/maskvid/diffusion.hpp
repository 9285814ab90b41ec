#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include <json.hpp>

#include "maskvid/backbone.hpp"
#include "maskvid/types.hpp"

namespace maskvid {

// ---------------------------------------------------------------------------
// Schedules

enum class ScheduleBase { cosine, linear_beta };

/// Cumulative signal fractions alpha_bar[0..T]; alpha_bar[0] = 1, alpha_bar[T] = 0.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> alpha_bar;

    double signal(int t) const;  ///< sqrt(alpha_bar_t)
    double noise(int t) const;   ///< sqrt(1 - alpha_bar_t)
};

/// Base schedule rescaled affinely in sqrt(alpha_bar) so that the terminal value is exactly zero.
NoiseSchedule make_zero_snr_schedule(int steps, ScheduleBase base = ScheduleBase::cosine);

// ---------------------------------------------------------------------------
// v-prediction

Mat q_sample(const Mat& x0, const Mat& eps, const NoiseSchedule& s, int t);
Mat v_target(const Mat& x0, const Mat& eps, const NoiseSchedule& s, int t);
Mat x0_from_v(const Mat& x_t, const Mat& v, const NoiseSchedule& s, int t);
Mat eps_from_v(const Mat& x_t, const Mat& v, const NoiseSchedule& s, int t);

/// Deterministic DDIM update from t to t_next < t given a v prediction.
Mat ddim_step(const Mat& x_t, const Mat& v, int t, int t_next, const NoiseSchedule& s);

/// Trailing timesteps T, ..., strictly decreasing, S entries; sampling ends at 0.
std::vector<int> ddim_timesteps(int total, int steps);

// ---------------------------------------------------------------------------
// Flow matching (t = 0 noise, t = 1 data)

struct FlowSample {
    Mat x_t;
    Mat velocity;
};

FlowSample fm_sample_path(const Mat& x0, const Mat& x1, double t);
double mse(const Mat& prediction, const Mat& target);

/// Step end times t_1 < ... < t_S = 1: ceil(pivot * S) uniform steps of size
/// h = 1 / (m^2 + n), then m quadratically growing steps.
std::vector<double> make_lq_schedule(int steps, double pivot = 0.25);
std::vector<double> make_uniform_times(int steps);

// ---------------------------------------------------------------------------
// Solver and guidance

enum class SolverFamily { ddim_v, fm_euler };
enum class StepSchedule { uniform, linear_quadratic };

struct SolverSpec {
    SolverFamily family = SolverFamily::ddim_v;
    int steps = 25;
    StepSchedule schedule = StepSchedule::uniform;
    double pivot = 0.25;
    double g_vis = 1.5;
    double g_txt = 5.0;

    void validate() const;
    /// Flow time knots t_1..t_S for fm_euler.
    std::vector<double> flow_times() const;
};

void to_json(nlohmann::json& j, const SolverSpec& s);
void from_json(const nlohmann::json& j, SolverSpec& s);

Objective objective_for(SolverFamily f);

/// uncond + g_vis (vis - uncond) + g_txt (full - vis), evaluated in the form
/// full g_txt + vis (g_vis - g_txt) + uncond (1 - g_vis).
Mat cfg_combine(const Mat& uncond, const Mat& vis, const Mat& full, double g_vis, double g_txt);

/// Model evaluations for the three conditioning branches at (x, network noise level).
struct GuidanceBranches {
    std::function<Mat(const Mat&, double)> uncond;
    std::function<Mat(const Mat&, double)> vis;
    std::function<Mat(const Mat&, double)> full;
};

/// cfg_combine over the branches; branches with a zero coefficient are not evaluated.
Mat guided_prediction(const GuidanceBranches& b, const Mat& x, double level, double g_vis, double g_txt);

using Predictor = std::function<Mat(const Mat& x, double noise_level)>;

/// Integrates from `start` (pure noise) to data. The predictor receives the
/// network noise level: t / T for DDIM, 1 - t for flow.
Mat sample(const SolverSpec& spec, const NoiseSchedule& schedule, const Mat& start, const Predictor& predict);

// ---------------------------------------------------------------------------
// Training

struct TrainingConfig {
    double lr = 2e-4;
    int warmup = 200;
    int steps = 2000;
    int batch = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  ///< global-norm clip; 0 disables
    double drop_both = 0.05;
    double drop_text = 0.1;
    double drop_visual = 0.1;
    int diffusion_steps = 1000;
    ScheduleBase schedule = ScheduleBase::cosine;
    uint64_t seed = 0;
    int checkpoint_every = 0;  ///< 0 saves only at the end
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

/// Linear warm-up to the constant rate: lr * min(1, step / warmup).
double learning_rate(const TrainingConfig& c, int64_t step);

/// One decoupled-weight-decay Adam update of every parameter from its gradient.
void adamw_update(ParameterSet& params, AdamState& state, const TrainingConfig& c, double lr);

/// One training example in token form.
struct TrainingExample {
    Mat target;                 ///< clean latent tokens, N x C
    Mat visual;                 ///< concatenated visual conditions, N x (conditions * C)
    TokenizedText context;      ///< caption (motion caption for stage 1)
    std::vector<TokenizedText> local;
    std::shared_ptr<const AttentionMaskPair> masks;       ///< stage 2 only
    std::shared_ptr<const AttentionMaskPair> null_masks;  ///< used when visual conditions are dropped
};

enum class DropKind { none, text, visual, both };

struct StepReport {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

/// Forward, backward and one optimizer update over the batch. Noise, timesteps
/// and condition dropout are drawn from a generator seeded by (seed, step).
/// Throws TrainingError on a non-finite loss.
StepReport train_step(Denoiser& model, AdamState& adam, const std::vector<const TrainingExample*>& batch,
                      const TrainingConfig& config, const NoiseSchedule& schedule, int64_t step);

/// Loss of a single example under a fixed noise draw, without updating anything.
/// Used for gradient checks.
double example_loss(Denoiser& model, const TrainingExample& ex, const Mat& noise, double time,
                    const NoiseSchedule& schedule, bool accumulate_grad);

uint64_t step_seed(uint64_t seed, int64_t step);

}  // namespace maskvid
