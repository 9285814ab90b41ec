#include "maskvid/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "maskvid/error.hpp"

namespace maskvid {

// ---------------------------------------------------------------------------
// Schedules

double NoiseSchedule::signal(int t) const {
    if (t < 0 || t > steps) throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    return std::sqrt(alpha_bar[t]);
}

double NoiseSchedule::noise(int t) const {
    if (t < 0 || t > steps) throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    return std::sqrt(1.0 - alpha_bar[t]);
}

NoiseSchedule make_zero_snr_schedule(int steps, ScheduleBase base) {
    if (steps < 2) throw Error("noise schedule needs at least 2 steps");
    std::vector<double> root(steps + 1);
    if (base == ScheduleBase::cosine) {
        constexpr double s = 0.008;
        const auto f = [&](int t) {
            const double c = std::cos((static_cast<double>(t) / steps + s) / (1.0 + s) * M_PI / 2.0);
            return c * c;
        };
        const double f0 = f(0);
        for (int t = 0; t <= steps; ++t) root[t] = std::sqrt(f(t) / f0);
    } else {
        double prod = 1.0;
        root[0] = 1.0;
        for (int t = 1; t <= steps; ++t) {
            const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / (steps - 1);
            prod *= 1.0 - beta;
            root[t] = std::sqrt(prod);
        }
    }
    const double first = root[0];
    const double last = root[steps];
    NoiseSchedule out;
    out.steps = steps;
    out.alpha_bar.resize(steps + 1);
    for (int t = 0; t <= steps; ++t) {
        const double r = (root[t] - last) / (first - last) * first;
        out.alpha_bar[t] = r * r;
    }
    return out;
}

// ---------------------------------------------------------------------------
// v-prediction

namespace {

void same_shape(const Mat& a, const Mat& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

Mat q_sample(const Mat& x0, const Mat& eps, const NoiseSchedule& s, int t) {
    same_shape(x0, eps, "q_sample");
    return s.signal(t) * x0 + s.noise(t) * eps;
}

Mat v_target(const Mat& x0, const Mat& eps, const NoiseSchedule& s, int t) {
    same_shape(x0, eps, "v_target");
    return s.signal(t) * eps - s.noise(t) * x0;
}

Mat x0_from_v(const Mat& x_t, const Mat& v, const NoiseSchedule& s, int t) {
    same_shape(x_t, v, "x0_from_v");
    return s.signal(t) * x_t - s.noise(t) * v;
}

Mat eps_from_v(const Mat& x_t, const Mat& v, const NoiseSchedule& s, int t) {
    same_shape(x_t, v, "eps_from_v");
    return s.noise(t) * x_t + s.signal(t) * v;
}

Mat ddim_step(const Mat& x_t, const Mat& v, int t, int t_next, const NoiseSchedule& s) {
    if (t_next >= t) throw Error("ddim_step requires t_next < t (got " + std::to_string(t_next) + " >= " +
                                 std::to_string(t) + ")");
    if (t_next < 0 || t > s.steps) throw Error("ddim_step timestep out of range");
    const Mat x0 = x0_from_v(x_t, v, s, t);
    const Mat eps = eps_from_v(x_t, v, s, t);
    return s.signal(t_next) * x0 + s.noise(t_next) * eps;
}

std::vector<int> ddim_timesteps(int total, int steps) {
    if (steps < 1 || steps > total) throw Error("DDIM step count must be in [1, T]");
    std::vector<int> out;
    for (int i = 0; i < steps; ++i) {
        out.push_back(static_cast<int>(std::lround(total - static_cast<double>(i) * total / steps)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flow matching

FlowSample fm_sample_path(const Mat& x0, const Mat& x1, double t) {
    same_shape(x0, x1, "fm_sample_path");
    if (!(t >= 0.0 && t <= 1.0)) throw Error("flow time must lie in [0, 1]");
    return {(1.0 - t) * x1 + t * x0, x0 - x1};
}

double mse(const Mat& prediction, const Mat& target) {
    same_shape(prediction, target, "mse");
    if (prediction.size() == 0) return 0.0;
    return (prediction - target).squaredNorm() / static_cast<double>(prediction.size());
}

std::vector<double> make_lq_schedule(int steps, double pivot) {
    if (steps < 2) throw Error("linear-quadratic schedule needs at least 2 steps");
    if (!(pivot > 0.0 && pivot <= 1.0)) throw Error("pivot fraction must lie in (0, 1]");
    const int n = static_cast<int>(std::ceil(pivot * steps));
    const int m = steps - n;
    if (m == 0) return make_uniform_times(steps);
    const double h = 1.0 / (static_cast<double>(m) * m + n);
    std::vector<double> out;
    for (int k = 1; k <= n; ++k) out.push_back(k * h);
    const double base = n * h;
    for (int j = 1; j < m; ++j) {
        const double r = static_cast<double>(j) / m;
        out.push_back(base + (1.0 - base) * r * r);
    }
    out.push_back(1.0);
    return out;
}

std::vector<double> make_uniform_times(int steps) {
    if (steps < 1) throw Error("step count must be positive");
    std::vector<double> out;
    for (int k = 1; k < steps; ++k) out.push_back(static_cast<double>(k) / steps);
    out.push_back(1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Solver and guidance

void SolverSpec::validate() const {
    if (steps < 1) throw Error("solver needs at least one step");
    if (schedule == StepSchedule::linear_quadratic) {
        if (family != SolverFamily::fm_euler) throw Error("the linear-quadratic schedule applies to fm-euler only");
        if (steps < 2) throw Error("linear-quadratic schedule needs at least 2 steps");
    }
    if (!std::isfinite(g_vis) || !std::isfinite(g_txt)) throw Error("guidance scales must be finite");
}

std::vector<double> SolverSpec::flow_times() const {
    return schedule == StepSchedule::linear_quadratic ? make_lq_schedule(steps, pivot) : make_uniform_times(steps);
}

namespace {

const char* family_name(SolverFamily f) { return f == SolverFamily::ddim_v ? "ddim-v" : "fm-euler"; }

SolverFamily family_from_name(const std::string& s) {
    if (s == "ddim-v") return SolverFamily::ddim_v;
    if (s == "fm-euler") return SolverFamily::fm_euler;
    throw Error("unknown solver family '" + s + "'");
}

const char* step_schedule_name(StepSchedule s) { return s == StepSchedule::uniform ? "uniform" : "linear-quadratic"; }

StepSchedule step_schedule_from_name(const std::string& s) {
    if (s == "uniform") return StepSchedule::uniform;
    if (s == "linear-quadratic") return StepSchedule::linear_quadratic;
    throw Error("unknown step schedule '" + s + "'");
}

const char* base_name(ScheduleBase b) { return b == ScheduleBase::cosine ? "cosine" : "linear-beta"; }

ScheduleBase base_from_name(const std::string& s) {
    if (s == "cosine") return ScheduleBase::cosine;
    if (s == "linear-beta") return ScheduleBase::linear_beta;
    throw Error("unknown schedule base '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const SolverSpec& s) {
    j = nlohmann::json{{"family", family_name(s.family)}, {"steps", s.steps},
                       {"schedule", step_schedule_name(s.schedule)}, {"pivot", s.pivot},
                       {"g_vis", s.g_vis}, {"g_txt", s.g_txt}};
}

void from_json(const nlohmann::json& j, SolverSpec& s) {
    const SolverSpec d;
    s.family = family_from_name(j.value("family", std::string(family_name(d.family))));
    s.steps = j.value("steps", d.steps);
    s.schedule = step_schedule_from_name(j.value("schedule", std::string(step_schedule_name(d.schedule))));
    s.pivot = j.value("pivot", d.pivot);
    s.g_vis = j.value("g_vis", d.g_vis);
    s.g_txt = j.value("g_txt", d.g_txt);
}

Objective objective_for(SolverFamily f) {
    return f == SolverFamily::ddim_v ? Objective::v_prediction : Objective::flow_velocity;
}

Mat cfg_combine(const Mat& uncond, const Mat& vis, const Mat& full, double g_vis, double g_txt) {
    same_shape(uncond, vis, "cfg_combine");
    same_shape(uncond, full, "cfg_combine");
    return full * g_txt + vis * (g_vis - g_txt) + uncond * (1.0 - g_vis);
}

Mat guided_prediction(const GuidanceBranches& b, const Mat& x, double level, double g_vis, double g_txt) {
    Mat out = b.full(x, level) * g_txt;
    if (g_vis != g_txt) out += b.vis(x, level) * (g_vis - g_txt);
    if (g_vis != 1.0) out += b.uncond(x, level) * (1.0 - g_vis);
    return out;
}

Mat sample(const SolverSpec& spec, const NoiseSchedule& schedule, const Mat& start, const Predictor& predict) {
    spec.validate();
    Mat x = start;
    if (spec.family == SolverFamily::ddim_v) {
        const auto ts = ddim_timesteps(schedule.steps, spec.steps);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int t = ts[i];
            const int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
            const Mat v = predict(x, static_cast<double>(t) / schedule.steps);
            x = ddim_step(x, v, t, t_next, schedule);
        }
    } else {
        double t = 0.0;
        for (double t_next : spec.flow_times()) {
            const Mat u = predict(x, 1.0 - t);
            x += (t_next - t) * u;
            t = t_next;
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// Training

void to_json(nlohmann::json& j, const TrainingConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"warmup", c.warmup},
                       {"steps", c.steps},
                       {"batch", c.batch},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},
                       {"grad_clip", c.grad_clip},
                       {"drop_both", c.drop_both},
                       {"drop_text", c.drop_text},
                       {"drop_visual", c.drop_visual},
                       {"diffusion_steps", c.diffusion_steps},
                       {"schedule", base_name(c.schedule)},
                       {"seed", c.seed},
                       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
    const TrainingConfig d;
    c.lr = j.value("lr", d.lr);
    c.warmup = j.value("warmup", d.warmup);
    c.steps = j.value("steps", d.steps);
    c.batch = j.value("batch", d.batch);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.drop_both = j.value("drop_both", d.drop_both);
    c.drop_text = j.value("drop_text", d.drop_text);
    c.drop_visual = j.value("drop_visual", d.drop_visual);
    c.diffusion_steps = j.value("diffusion_steps", d.diffusion_steps);
    c.schedule = base_from_name(j.value("schedule", std::string(base_name(d.schedule))));
    c.seed = j.value("seed", d.seed);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

double learning_rate(const TrainingConfig& c, int64_t step) {
    if (c.warmup <= 0) return c.lr;
    return c.lr * std::min(1.0, static_cast<double>(step) / c.warmup);
}

void adamw_update(ParameterSet& params, AdamState& state, const TrainingConfig& c, double lr) {
    ++state.updates;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.updates));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.updates));
    for (auto& [name, p] : params) {
        auto [mit, m_new] = state.m.try_emplace(name, Mat::Zero(p.value.rows(), p.value.cols()));
        auto [vit, v_new] = state.v.try_emplace(name, Mat::Zero(p.value.rows(), p.value.cols()));
        Mat& m = mit->second;
        Mat& v = vit->second;
        m = c.beta1 * m + (1.0 - c.beta1) * p.grad;
        v = c.beta2 * v + (1.0 - c.beta2) * p.grad.cwiseAbs2();
        const Mat step = (m / bc1).array() / ((v / bc2).array().sqrt() + c.adam_eps);
        p.value -= lr * (step + c.weight_decay * p.value);
    }
}

uint64_t step_seed(uint64_t seed, int64_t step) {
    uint64_t z = seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(step + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

struct Prepared {
    DenoiserInput input;
    Mat target;
    double time = 0.0;
};

/// Builds the network input for one example at a fixed noise draw.
Prepared prepare(const Denoiser& model, const TrainingExample& ex, const Mat& noise, double time,
                 const NoiseSchedule& schedule, DropKind drop) {
    const DenoiserConfig& c = model.config();
    if (ex.target.cols() != c.latent_channels || ex.visual.cols() != c.latent_channels * c.conditions ||
        ex.visual.rows() != ex.target.rows()) {
        throw ShapeError("training example does not match the model's channel layout");
    }
    Prepared p;
    p.time = time;
    Mat noisy;
    if (c.objective == Objective::v_prediction) {
        const int t = static_cast<int>(time);
        noisy = q_sample(ex.target, noise, schedule, t);
        p.target = v_target(ex.target, noise, schedule, t);
        p.input.noise_level = static_cast<double>(t) / schedule.steps;
    } else {
        FlowSample fs = fm_sample_path(ex.target, noise, time);
        noisy = std::move(fs.x_t);
        p.target = std::move(fs.velocity);
        p.input.noise_level = 1.0 - time;
    }
    const bool drop_text = drop == DropKind::text || drop == DropKind::both;
    const bool drop_visual = drop == DropKind::visual || drop == DropKind::both;

    p.input.tokens.resize(noisy.rows(), c.input_channels());
    p.input.tokens.leftCols(c.latent_channels) = noisy;
    if (drop_visual) {
        p.input.tokens.rightCols(ex.visual.cols()).setZero();
    } else {
        p.input.tokens.rightCols(ex.visual.cols()) = ex.visual;
    }
    if (drop_text) {
        const TokenizedText null_caption = tokenize("", template_vocabulary(), ex.context.length());
        p.input.context = null_caption;
        const TokenizedText null_local = tokenize("", template_vocabulary(), c.text_len);
        p.input.local.assign(ex.local.size(), null_local);
    } else {
        p.input.context = ex.context;
        p.input.local = ex.local;
    }
    if (c.masked_blocks > 0) {
        const auto& m = drop_visual ? ex.null_masks : ex.masks;
        if (!m) throw ShapeError("stage-2 training example is missing attention masks");
        p.input.masks = m.get();
    }
    return p;
}

DropKind draw_drop(std::mt19937_64& rng, const TrainingConfig& c) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (u < c.drop_both) return DropKind::both;
    if (u < c.drop_both + c.drop_text) return DropKind::text;
    if (u < c.drop_both + c.drop_text + c.drop_visual) return DropKind::visual;
    return DropKind::none;
}

}  // namespace

double example_loss(Denoiser& model, const TrainingExample& ex, const Mat& noise, double time,
                    const NoiseSchedule& schedule, bool accumulate_grad) {
    Prepared p = prepare(model, ex, noise, time, schedule, DropKind::none);
    ForwardCache cache;
    const Mat pred = model.forward(p.input, accumulate_grad ? &cache : nullptr);
    const double loss = mse(pred, p.target);
    if (accumulate_grad) model.backward(cache, (pred - p.target) * (2.0 / static_cast<double>(pred.size())));
    return loss;
}

StepReport train_step(Denoiser& model, AdamState& adam, const std::vector<const TrainingExample*>& batch,
                      const TrainingConfig& config, const NoiseSchedule& schedule, int64_t step) {
    if (batch.empty()) throw TrainingError("empty training batch");
    std::mt19937_64 rng(step_seed(config.seed, step));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const bool flow = model.config().objective == Objective::flow_velocity;

    model.parameters().zero_grad();
    double total = 0.0;
    std::vector<double> times;
    const double weight = 1.0 / static_cast<double>(batch.size());
    for (const TrainingExample* ex : batch) {
        double time;
        if (flow) {
            time = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        } else {
            time = static_cast<double>(std::uniform_int_distribution<int>(1, schedule.steps)(rng));
        }
        const DropKind drop = draw_drop(rng, config);
        Mat noise(ex->target.rows(), ex->target.cols());
        for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = gauss(rng);

        Prepared p = prepare(model, *ex, noise, time, schedule, drop);
        ForwardCache cache;
        const Mat pred = model.forward(p.input, &cache);
        const double loss = mse(pred, p.target);
        times.push_back(time);
        total += loss * weight;
        if (!std::isfinite(loss)) break;
        model.backward(cache, (pred - p.target) * (2.0 * weight / static_cast<double>(pred.size())));
    }

    StepReport r;
    r.step = step;
    r.loss = total;
    r.grad_norm = model.parameters().grad_norm();
    if (!std::isfinite(total) || !std::isfinite(r.grad_norm)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (loss " << total << ", grad norm " << r.grad_norm
            << ", times";
        for (double t : times) msg << ' ' << t;
        msg << ")";
        throw TrainingError(msg.str());
    }
    if (config.grad_clip > 0.0 && r.grad_norm > config.grad_clip) {
        const double s = config.grad_clip / r.grad_norm;
        for (auto& [name, p] : model.parameters()) p.grad *= s;
    }
    r.lr = learning_rate(config, step);
    adamw_update(model.parameters(), adam, config, r.lr);
    return r;
}

}  // namespace maskvid
