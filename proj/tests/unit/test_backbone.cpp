#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "helpers.hpp"
#include "maskvid/backbone.hpp"
#include "maskvid/checkpoint.hpp"
#include "maskvid/error.hpp"

using namespace maskvid;
using testutil::random_mat;

namespace {

DenoiserConfig tiny_config(int masked = 0) {
    DenoiserConfig c;
    c.width = 8;
    c.heads = 2;
    c.blocks = 2;
    c.masked_blocks = masked;
    c.tokens = {2, 2, 3};
    c.text_len = 4;
    c.caption_len = 6;
    c.ffn_mult = 2;
    c.stage = masked > 0 ? StageTag::stage2 : StageTag::stage1;
    return c;
}

DenoiserInput tiny_input(const DenoiserConfig& c, std::mt19937_64& rng) {
    DenoiserInput in;
    in.tokens = random_mat(rng, static_cast<Eigen::Index>(c.tokens.cells()), c.input_channels());
    in.noise_level = 0.3;
    in.context = tokenize("the ball rolls", template_vocabulary(), c.caption_len);
    return in;
}

}  // namespace

TEST(Encoder, PoolThenUpsampleIsExactOnBlockConstantClips) {
    std::mt19937_64 rng(1);
    const Encoder e(4, 2);
    VideoClip small(2, 3, 3, 2);
    for (double& v : small.data) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const VideoClip big = e.decode(small);
    EXPECT_EQ(big.dims(), (GridDims{4, 12, 8}));
    const VideoClip back = e.encode(big);
    ASSERT_EQ(back.data.size(), small.data.size());
    for (std::size_t i = 0; i < small.data.size(); ++i) EXPECT_NEAR(back.data[i], small.data[i], 1e-15);
    EXPECT_EQ(e.latent_dims({4, 12, 8}), (GridDims{2, 3, 2}));
    EXPECT_THROW(e.latent_dims({4, 10, 8}), ShapeError);
}

TEST(Encoder, EncodeAveragesBlocks) {
    const Encoder e(2, 1);
    VideoClip v(1, 1, 2, 2);
    v.data = {0.0, 1.0, 0.5, -0.5};
    EXPECT_DOUBLE_EQ(e.encode(v).data[0], 0.25);
}

TEST(Encoder, TokenLayoutRoundTrip) {
    std::mt19937_64 rng(2);
    VideoClip v(2, 3, 2, 3);
    for (double& x : v.data) x = std::normal_distribution<double>()(rng);
    const Mat t = to_tokens(v);
    ASSERT_EQ(t.rows(), 12);
    EXPECT_EQ(t(1 * 6 + 1 * 3 + 2, 1), v.at(1, 1, 1, 2));
    EXPECT_EQ(from_tokens(t, v.dims()).data, v.data);
    const Mat b = broadcast_frame(v.frame(0), 3);
    EXPECT_EQ(b.rows(), 18);
    EXPECT_EQ(b.row(13), b.row(1));
}

TEST(Backbone, ParameterCountMatchesLayout) {
    for (int k : {0, 1, 2}) {
        const DenoiserConfig c = tiny_config(k);
        const Denoiser m(c);
        EXPECT_EQ(m.parameters().scalar_count(), parameter_count(c));
        EXPECT_EQ(m.parameters().size(), parameter_layout(c).size());
    }
    // A masked block adds two attention sublayers: four d x d projections plus adaLN each.
    const DenoiserConfig c0 = tiny_config(0), c1 = tiny_config(1);
    const std::size_t d = 8;
    const std::size_t extra = 2 * (4 * d * d + d * 2 * d + 2 * d);
    EXPECT_EQ(parameter_count(c1) - parameter_count(c0), extra);
}

TEST(Backbone, BlockLayoutOrder) {
    const auto plain = block_layout(tiny_config(1), 1);
    const auto masked = block_layout(tiny_config(1), 0);
    EXPECT_EQ(plain.size(), 4u);
    ASSERT_EQ(masked.size(), 6u);
    EXPECT_EQ(masked[2], SublayerKind::masked_self_attention);
    EXPECT_EQ(masked[4], SublayerKind::masked_cross_attention);
}

TEST(Backbone, InitializationIsPerNameAndDeterministic) {
    const Denoiser a(tiny_config(0)), b(tiny_config(1)), a2(tiny_config(0));
    for (const auto& [name, p] : a.parameters()) {
        EXPECT_EQ(p.value, a2.parameters().at(name).value) << name;
        EXPECT_EQ(p.value, b.parameters().at(name).value) << name;
    }
    for (const auto& [name, p] : b.parameters()) {
        if (name.find("mself.wo") != std::string::npos || name.find("mcross.wo") != std::string::npos ||
            name.find("mod.") != std::string::npos) {
            EXPECT_EQ(p.value.cwiseAbs().maxCoeff(), 0.0) << name;
        }
    }
    DenoiserConfig other = tiny_config(0);
    other.seed = 99;
    EXPECT_NE(Denoiser(other).parameters().at("in.w").value, a.parameters().at("in.w").value);
}

TEST(Backbone, TextEmbedFlagsPaddingAndRejectsOutOfRangeIds) {
    const Denoiser m(tiny_config(0));
    TokenizedText t = tokenize("the ball", template_vocabulary(), 6);
    const TokenSequence e = m.text_embed(t);
    EXPECT_EQ(e.length(), 6);
    EXPECT_EQ(e.valid, (std::vector<uint8_t>{1, 1, 1, 0, 0, 0}));
    t.ids[1] = template_vocabulary().size() + 5;
    EXPECT_THROW(m.text_embed(t), Error);
}

TEST(Backbone, ForwardShapesAndValidation) {
    std::mt19937_64 rng(3);
    const DenoiserConfig c = tiny_config(0);
    const Denoiser m(c);
    DenoiserInput in = tiny_input(c, rng);
    const Mat out = m.forward(in);
    EXPECT_EQ(out.rows(), 12);
    EXPECT_EQ(out.cols(), c.latent_channels);
    EXPECT_TRUE(out.allFinite());
    in.tokens = random_mat(rng, 11, c.input_channels());
    EXPECT_THROW(m.forward(in), ShapeError);
}

TEST(Backbone, MaskedModelRequiresMasks) {
    std::mt19937_64 rng(4);
    const DenoiserConfig c = tiny_config(1);
    const Denoiser m(c);
    DenoiserInput in = tiny_input(c, rng);
    in.local = {tokenize("the ball", template_vocabulary(), c.text_len)};
    EXPECT_THROW(m.forward(in), Error);
    const AttentionMaskPair wrong = build_mask_pair(LatentGrid(2, 2, 3, 1), 2, c.text_len);
    in.masks = &wrong;
    EXPECT_THROW(m.forward(in), ShapeError);
    const AttentionMaskPair right = build_mask_pair(LatentGrid(2, 2, 3, 1), 1, c.text_len);
    in.masks = &right;
    EXPECT_NO_THROW(m.forward(in));
}

TEST(Backbone, TimeConditioningChangesTheOutputOnceModulationIsTrained) {
    std::mt19937_64 rng(5);
    const DenoiserConfig c = tiny_config(0);
    Denoiser m(c);
    m.parameters().at("final.mod.w").value = random_mat(rng, c.width, 2 * c.width, 0.1);
    DenoiserInput in = tiny_input(c, rng);
    const Mat a = m.forward(in);
    in.noise_level = 0.9;
    EXPECT_GT((a - m.forward(in)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Backbone, ConfigJsonRoundTripAndValidation) {
    const DenoiserConfig c = tiny_config(1);
    nlohmann::json j = c;
    const DenoiserConfig r = j.get<DenoiserConfig>();
    EXPECT_EQ(nlohmann::json(r), j);
    DenoiserConfig bad = c;
    bad.heads = 3;
    EXPECT_THROW(bad.validate(), Error);
    bad = c;
    bad.masked_blocks = 3;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    testutil::TempDir dir("ckpt");
    std::mt19937_64 rng(6);
    StageCheckpoint ck;
    ck.stage = StageTag::stage2;
    ck.config = tiny_config(1);
    ck.params = Denoiser(ck.config).parameters();
    for (auto& [name, p] : ck.params) {
        ck.adam.m[name] = random_mat(rng, p.value.rows(), p.value.cols());
        ck.adam.v[name] = random_mat(rng, p.value.rows(), p.value.cols()).cwiseAbs();
    }
    ck.adam.updates = 12;
    ck.step = 12;
    ck.vocab_hash = template_vocabulary().hash();
    save_checkpoint(dir.file("a.ckpt"), ck);
    const StageCheckpoint r = load_checkpoint(dir.file("a.ckpt"), StageTag::stage2);
    EXPECT_EQ(r.step, 12);
    EXPECT_EQ(r.vocab_hash, ck.vocab_hash);
    EXPECT_EQ(nlohmann::json(r.config), nlohmann::json(ck.config));
    for (const auto& [name, p] : ck.params) {
        EXPECT_EQ(r.params.at(name).value, p.value);
        EXPECT_EQ(r.adam.m.at(name), ck.adam.m.at(name));
        EXPECT_EQ(r.adam.v.at(name), ck.adam.v.at(name));
    }
    EXPECT_THROW(load_checkpoint(dir.file("a.ckpt"), StageTag::stage1), Error);
}

TEST(Checkpoint, CorruptionIsDetected) {
    testutil::TempDir dir("ckpt");
    StageCheckpoint ck;
    ck.config = tiny_config(0);
    ck.params = Denoiser(ck.config).parameters();
    save_checkpoint(dir.file("a.ckpt"), ck);
    std::ifstream in(dir.file("a.ckpt"), std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir.file("short.ckpt"), std::ios::binary) << bytes.substr(0, bytes.size() - 8);
    EXPECT_THROW(load_checkpoint(dir.file("short.ckpt")), FormatError);
    std::ofstream(dir.file("long.ckpt"), std::ios::binary) << bytes << "x";
    EXPECT_THROW(load_checkpoint(dir.file("long.ckpt")), FormatError);
    std::string magic = bytes;
    magic[3] = '?';
    std::ofstream(dir.file("magic.ckpt"), std::ios::binary) << magic;
    EXPECT_THROW(load_checkpoint(dir.file("magic.ckpt")), FormatError);
}
