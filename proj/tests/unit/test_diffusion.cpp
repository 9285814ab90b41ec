#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "maskvid/diffusion.hpp"
#include "maskvid/error.hpp"

using namespace maskvid;
using testutil::random_mat;

TEST(Schedule, ZeroSnrEndpointsAndMonotonicity) {
    for (ScheduleBase b : {ScheduleBase::cosine, ScheduleBase::linear_beta}) {
        const NoiseSchedule s = make_zero_snr_schedule(500, b);
        ASSERT_EQ(s.alpha_bar.size(), 501u);
        EXPECT_EQ(s.alpha_bar[0], 1.0);
        EXPECT_EQ(s.alpha_bar[500], 0.0);
        for (int t = 1; t <= 500; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
        EXPECT_EQ(s.signal(500), 0.0);
        EXPECT_EQ(s.noise(500), 1.0);
    }
}

TEST(Schedule, VParameterizationIdentities) {
    std::mt19937_64 rng(1);
    const NoiseSchedule s = make_zero_snr_schedule(100);
    const Mat x0 = random_mat(rng, 5, 3), eps = random_mat(rng, 5, 3);
    for (int t : {0, 1, 37, 99, 100}) {
        const Mat xt = q_sample(x0, eps, s, t);
        const Mat v = v_target(x0, eps, s, t);
        EXPECT_LT((eps_from_v(xt, v, s, t) - eps).cwiseAbs().maxCoeff(), 1e-12);
        // Norm preservation: |x_t|^2 + |v|^2 = |x0|^2 + |eps|^2.
        EXPECT_NEAR(xt.squaredNorm() + v.squaredNorm(), x0.squaredNorm() + eps.squaredNorm(), 1e-9);
    }
    // At the terminal step the model input is pure noise.
    EXPECT_EQ(q_sample(x0, eps, s, 100), eps);
}

TEST(Schedule, DdimStepFollowsTheDeterministicUpdate) {
    std::mt19937_64 rng(2);
    const NoiseSchedule s = make_zero_snr_schedule(50);
    const Mat x0 = random_mat(rng, 4, 2), eps = random_mat(rng, 4, 2);
    const Mat xt = q_sample(x0, eps, s, 40);
    const Mat v = v_target(x0, eps, s, 40);
    EXPECT_LT((ddim_step(xt, v, 40, 20, s) - q_sample(x0, eps, s, 20)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(ddim_step(xt, v, 20, 20, s), Error);
}

TEST(Schedule, TrailingTimesteps) {
    EXPECT_EQ(ddim_timesteps(1000, 4), (std::vector<int>{1000, 750, 500, 250}));
    const auto ts = ddim_timesteps(1000, 25);
    EXPECT_EQ(ts.front(), 1000);
    for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
    EXPECT_GT(ts.back(), 0);
}

TEST(Flow, PathEndpointsAndVelocity) {
    std::mt19937_64 rng(3);
    const Mat x0 = random_mat(rng, 3, 3), x1 = random_mat(rng, 3, 3);
    EXPECT_EQ(fm_sample_path(x0, x1, 0.0).x_t, x1);
    EXPECT_EQ(fm_sample_path(x0, x1, 1.0).x_t, x0);
    EXPECT_EQ(fm_sample_path(x0, x1, 0.4).velocity, x0 - x1);
    EXPECT_DOUBLE_EQ(mse(x0, x0), 0.0);
}

TEST(Flow, LinearQuadraticScheduleShape) {
    for (int steps : {2, 5, 8, 25, 50}) {
        for (double pivot : {0.1, 0.25, 0.5}) {
            const auto t = make_lq_schedule(steps, pivot);
            ASSERT_EQ(static_cast<int>(t.size()), steps);
            EXPECT_EQ(t.back(), 1.0);
            const int n = static_cast<int>(std::ceil(pivot * steps));
            const int m = steps - n;
            const double h = 1.0 / (static_cast<double>(m) * m + n);
            double prev = 0.0, prev_step = 0.0;
            for (int k = 0; k < steps; ++k) {
                const double step = t[k] - prev;
                if (k < n) {
                    EXPECT_NEAR(step, h, 1e-12);
                } else {
                    // Quadratic part starts at the same size and grows.
                    EXPECT_GE(step, prev_step - 1e-12);
                }
                prev = t[k];
                prev_step = step;
            }
        }
    }
    EXPECT_THROW(make_lq_schedule(1), Error);
    EXPECT_EQ(make_uniform_times(4), (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
}

TEST(Guidance, CombineIsTheAffineForm) {
    std::mt19937_64 rng(4);
    const Mat u = random_mat(rng, 3, 2), v = random_mat(rng, 3, 2), f = random_mat(rng, 3, 2);
    const Mat expected = u + 1.5 * (v - u) + 5.0 * (f - v);
    EXPECT_LT((cfg_combine(u, v, f, 1.5, 5.0) - expected).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((cfg_combine(u, v, f, 1.0, 0.0) - v).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Guidance, ZeroCoefficientBranchesAreSkipped) {
    int calls_u = 0, calls_v = 0, calls_f = 0;
    GuidanceBranches b;
    b.uncond = [&](const Mat& x, double) { ++calls_u; return Mat(x * 0.0); };
    b.vis = [&](const Mat& x, double) { ++calls_v; return Mat(x * 2.0); };
    b.full = [&](const Mat& x, double) { ++calls_f; return Mat(x * 3.0); };
    const Mat x = Mat::Ones(2, 2);
    EXPECT_EQ(guided_prediction(b, x, 0.5, 1.0, 1.0), x * 3.0);
    EXPECT_EQ(calls_u + calls_v, 0);
    guided_prediction(b, x, 0.5, 2.0, 3.0);
    EXPECT_EQ(calls_u, 1);
    EXPECT_EQ(calls_v, 1);
    EXPECT_EQ(calls_f, 2);
}

TEST(Sampler, DdimWithAnOracleRecoversTheTarget) {
    std::mt19937_64 rng(5);
    const NoiseSchedule s = make_zero_snr_schedule(1000);
    const Mat x0 = random_mat(rng, 6, 3), noise = random_mat(rng, 6, 3);
    SolverSpec spec;
    spec.steps = 10;
    // Oracle v for the fixed target given the current state.
    const Mat out = sample(spec, s, noise, [&](const Mat& x, double level) {
        const int t = static_cast<int>(std::lround(level * s.steps));
        const Mat eps = t == 0 ? Mat(x * 0.0) : Mat((x - s.signal(t) * x0) / s.noise(t));
        return v_target(x0, eps, s, t);
    });
    EXPECT_LT((out - x0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sampler, SolverSpecValidation) {
    SolverSpec s;
    s.schedule = StepSchedule::linear_quadratic;
    EXPECT_THROW(s.validate(), Error);
    s.family = SolverFamily::fm_euler;
    EXPECT_NO_THROW(s.validate());
    s.steps = 0;
    EXPECT_THROW(s.validate(), Error);
    nlohmann::json j = SolverSpec{SolverFamily::fm_euler, 12, StepSchedule::linear_quadratic, 0.3, 2.0, 4.0};
    EXPECT_EQ(j["family"], "fm-euler");
    EXPECT_EQ(j["schedule"], "linear-quadratic");
    const SolverSpec r = j.get<SolverSpec>();
    EXPECT_EQ(r.steps, 12);
    EXPECT_EQ(r.g_txt, 4.0);
}

TEST(Optimizer, WarmupRamp) {
    TrainingConfig c;
    c.lr = 1e-3;
    c.warmup = 10;
    EXPECT_DOUBLE_EQ(learning_rate(c, 5), 5e-4);
    EXPECT_DOUBLE_EQ(learning_rate(c, 10), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(c, 1000), 1e-3);
    c.warmup = 0;
    EXPECT_DOUBLE_EQ(learning_rate(c, 0), 1e-3);
}

TEST(Optimizer, FirstAdamStepMovesBySignTimesLr) {
    ParameterSet p;
    Parameter& w = p.add("w", 1, 3);
    w.value << 1.0, 2.0, 3.0;
    w.grad << 0.5, -2.0, 0.0;
    AdamState st;
    TrainingConfig c;
    c.adam_eps = 0.0;
    c.weight_decay = 0.1;
    adamw_update(p, st, c, 0.01);
    EXPECT_NEAR(w.value(0), 1.0 - 0.01 * (1.0 + 0.1 * 1.0), 1e-12);
    EXPECT_NEAR(w.value(1), 2.0 - 0.01 * (-1.0 + 0.1 * 2.0), 1e-12);
    EXPECT_EQ(st.updates, 1);
}

TEST(Training, StepSeedSeparatesSteps) {
    EXPECT_NE(step_seed(1, 0), step_seed(1, 1));
    EXPECT_NE(step_seed(1, 0), step_seed(2, 0));
    EXPECT_EQ(step_seed(7, 42), step_seed(7, 42));
}

namespace {

DenoiserConfig micro() {
    DenoiserConfig c;
    c.width = 8;
    c.heads = 2;
    c.blocks = 1;
    c.masked_blocks = 1;
    c.tokens = {2, 2, 2};
    c.text_len = 4;
    c.caption_len = 5;
    c.ffn_mult = 2;
    c.stage = StageTag::stage2;
    return c;
}

TrainingExample micro_example(const DenoiserConfig& c, std::mt19937_64& rng) {
    TrainingExample ex;
    ex.target = random_mat(rng, 8, c.latent_channels);
    ex.visual = random_mat(rng, 8, c.conditions * c.latent_channels);
    ex.context = tokenize("the ball rolls", template_vocabulary(), c.caption_len);
    ex.local = {tokenize("the box", template_vocabulary(), c.text_len)};
    LatentGrid g(2, 2, 2);
    g.labels = {1, 0, 0, 1, 1, 1, 0, 0};
    ex.masks = std::make_shared<AttentionMaskPair>(build_mask_pair(g, 1, c.text_len));
    ex.null_masks = std::make_shared<AttentionMaskPair>(build_mask_pair(LatentGrid(2, 2, 2), 1, c.text_len));
    return ex;
}

}  // namespace

TEST(Training, ExampleLossGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    for (Objective obj : {Objective::v_prediction, Objective::flow_velocity}) {
        DenoiserConfig c = micro();
        c.objective = obj;
        Denoiser m(c);
        for (auto& [name, p] : m.parameters()) p.value += random_mat(rng, p.value.rows(), p.value.cols(), 0.05);
        const TrainingExample ex = micro_example(c, rng);
        const Mat noise = random_mat(rng, 8, c.latent_channels);
        const NoiseSchedule s = make_zero_snr_schedule(100);
        const double time = obj == Objective::v_prediction ? 40.0 : 0.35;
        m.parameters().zero_grad();
        example_loss(m, ex, noise, time, s, true);
        for (const char* name : {"block0.mcross.wv", "time.w1", "in.w", "text.table"}) {
            Parameter& p = m.parameters().at(name);
            for (Eigen::Index i = 0; i < std::min<Eigen::Index>(p.value.size(), 24); ++i) {
                const double keep = p.value.data()[i], h = 1e-6;
                p.value.data()[i] = keep + h;
                const double up = example_loss(m, ex, noise, time, s, false);
                p.value.data()[i] = keep - h;
                const double down = example_loss(m, ex, noise, time, s, false);
                p.value.data()[i] = keep;
                EXPECT_NEAR(p.grad.data()[i], (up - down) / (2 * h), 1e-6) << name << "[" << i << "]";
            }
        }
    }
}

TEST(Training, TrainStepIsDeterministicAndReducesLossOnOneBatch) {
    std::mt19937_64 rng(7);
    const DenoiserConfig c = micro();
    const TrainingExample ex = micro_example(c, rng);
    TrainingConfig tc;
    tc.lr = 3e-3;
    tc.warmup = 0;
    tc.drop_both = tc.drop_text = tc.drop_visual = 0.0;
    const NoiseSchedule s = make_zero_snr_schedule(tc.diffusion_steps);
    Denoiser a(c), b(c);
    AdamState sa, sb;
    const std::vector<const TrainingExample*> batch{&ex, &ex, &ex, &ex};
    const StepReport ra = train_step(a, sa, batch, tc, s, 3);
    const StepReport rb = train_step(b, sb, batch, tc, s, 3);
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_EQ(a.parameters().at("out.w").value, b.parameters().at("out.w").value);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 300; ++step) {
        const double loss = train_step(a, sa, batch, tc, s, step).loss;
        if (step < 20) first += loss;
        if (step >= 280) last += loss;
    }
    EXPECT_LT(last, first);
}

TEST(Training, ConfigJsonRoundTrip) {
    TrainingConfig c;
    c.lr = 5e-4;
    c.batch = 3;
    c.schedule = ScheduleBase::linear_beta;
    nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<TrainingConfig>()), j);
}

TEST(Guidance, ScalarCombination) {
    const Mat u = Mat::Constant(1, 1, 0.0), v = Mat::Constant(1, 1, 1.0), f = Mat::Constant(1, 1, 3.0);
    EXPECT_DOUBLE_EQ(cfg_combine(u, v, f, 2.0, 1.0)(0, 0), 4.0);
}

TEST(Flow, EightStepScheduleSplitsTwoAndSix) {
    const auto t = make_lq_schedule(8, 0.25);
    const double h = 1.0 / (36.0 + 2.0);
    EXPECT_DOUBLE_EQ(t[0], h);
    EXPECT_DOUBLE_EQ(t[1], 2 * h);
    EXPECT_GT(t[2] - t[1], h - 1e-15);
    EXPECT_GT(t[3] - t[2], t[2] - t[1]);
    for (std::size_t i = 1; i < t.size(); ++i) EXPECT_GT(t[i], t[i - 1]);
}
