#include "maskvid/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "maskvid/error.hpp"

namespace maskvid {

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(int spatial, int temporal) : spatial_(spatial), temporal_(temporal) {
    if (spatial < 1 || temporal < 1) throw ShapeError("encoder factors must be positive");
}

Encoder Encoder::external(Transform encode, Transform decode, int spatial, int temporal) {
    if (!encode || !decode) throw Error("external encoder needs both encode and decode");
    Encoder e(spatial, temporal);
    e.mode_ = EncoderMode::external;
    e.encode_fn_ = std::move(encode);
    e.decode_fn_ = std::move(decode);
    return e;
}

GridDims Encoder::latent_dims(GridDims pixels) const {
    if (pixels.height % spatial_ != 0 || pixels.width % spatial_ != 0 || pixels.frames % temporal_ != 0) {
        throw ShapeError("clip " + std::to_string(pixels.frames) + "x" + std::to_string(pixels.height) + "x" +
                         std::to_string(pixels.width) + " is not divisible by encoder factors (" +
                         std::to_string(temporal_) + ", " + std::to_string(spatial_) + ")");
    }
    return {pixels.frames / temporal_, pixels.height / spatial_, pixels.width / spatial_};
}

namespace {

VideoClip average_pool(const VideoClip& clip, int s, int t) {
    const int fo = clip.frames / t, ho = clip.height / s, wo = clip.width / s;
    VideoClip out(fo, clip.channels, ho, wo);
    out.fps = clip.fps;
    const double inv = 1.0 / (static_cast<double>(s) * s * t);
    for (int f = 0; f < clip.frames; ++f)
        for (int c = 0; c < clip.channels; ++c)
            for (int y = 0; y < clip.height; ++y)
                for (int x = 0; x < clip.width; ++x) out.at(f / t, c, y / s, x / s) += clip.at(f, c, y, x) * inv;
    return out;
}

VideoClip nearest_upsample(const VideoClip& latent, int s, int t) {
    VideoClip out(latent.frames * t, latent.channels, latent.height * s, latent.width * s);
    out.fps = latent.fps;
    for (int f = 0; f < out.frames; ++f)
        for (int c = 0; c < out.channels; ++c)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x) out.at(f, c, y, x) = latent.at(f / t, c, y / s, x / s);
    return out;
}

}  // namespace

VideoClip Encoder::encode(const VideoClip& clip) const {
    latent_dims(clip.dims());
    if (mode_ == EncoderMode::external) return encode_fn_(clip);
    return average_pool(clip, spatial_, temporal_);
}

VideoClip Encoder::decode(const VideoClip& latent) const {
    if (mode_ == EncoderMode::external) return decode_fn_(latent);
    return nearest_upsample(latent, spatial_, temporal_);
}

VideoClip Encoder::encode_frame(const VideoClip& frame) const {
    if (frame.frames != 1) throw ShapeError("encode_frame expects a single frame");
    if (frame.height % spatial_ != 0 || frame.width % spatial_ != 0) {
        throw ShapeError("frame is not divisible by the spatial factor");
    }
    if (mode_ == EncoderMode::external) return encode_fn_(frame);
    return average_pool(frame, spatial_, 1);
}

Mat to_tokens(const VideoClip& latent) {
    const int hw = latent.height * latent.width;
    Mat out(static_cast<Eigen::Index>(latent.frames) * hw, latent.channels);
    for (int f = 0; f < latent.frames; ++f)
        for (int y = 0; y < latent.height; ++y)
            for (int x = 0; x < latent.width; ++x)
                for (int c = 0; c < latent.channels; ++c)
                    out(f * hw + y * latent.width + x, c) = latent.at(f, c, y, x);
    return out;
}

VideoClip from_tokens(const Mat& tokens, GridDims dims) {
    if (tokens.rows() != static_cast<Eigen::Index>(dims.cells())) {
        throw ShapeError("token count " + std::to_string(tokens.rows()) + " does not match grid of " +
                         std::to_string(dims.cells()));
    }
    VideoClip out(dims.frames, static_cast<int>(tokens.cols()), dims.height, dims.width);
    const int hw = dims.height * dims.width;
    for (int f = 0; f < dims.frames; ++f)
        for (int y = 0; y < dims.height; ++y)
            for (int x = 0; x < dims.width; ++x)
                for (int c = 0; c < out.channels; ++c) out.at(f, c, y, x) = tokens(f * hw + y * dims.width + x, c);
    return out;
}

Mat broadcast_frame(const VideoClip& frame_latent, int frames) {
    if (frame_latent.frames != 1) throw ShapeError("broadcast_frame expects a single-frame latent");
    const Mat one = to_tokens(frame_latent);
    Mat out(one.rows() * frames, one.cols());
    for (int f = 0; f < frames; ++f) out.middleRows(f * one.rows(), one.rows()) = one;
    return out;
}

// ---------------------------------------------------------------------------
// Config

const char* stage_name(StageTag s) { return s == StageTag::stage1 ? "stage1" : "stage2"; }

StageTag stage_from_name(const std::string& s) {
    if (s == "stage1" || s == "1") return StageTag::stage1;
    if (s == "stage2" || s == "2") return StageTag::stage2;
    throw Error("unknown stage '" + s + "'");
}

const char* objective_name(Objective o) { return o == Objective::v_prediction ? "v" : "flow"; }

Objective objective_from_name(const std::string& s) {
    if (s == "v" || s == "v-prediction") return Objective::v_prediction;
    if (s == "flow" || s == "flow-velocity") return Objective::flow_velocity;
    throw Error("unknown objective '" + s + "'");
}

int DenoiserConfig::resolved_vocab_size() const {
    return vocab_size > 0 ? vocab_size : template_vocabulary().size();
}

void DenoiserConfig::validate() const {
    if (width <= 0) throw ShapeError("denoiser width must be positive");
    if (heads <= 0 || width % heads != 0) throw ShapeError("heads must divide the width");
    if (blocks <= 0) throw ShapeError("denoiser needs at least one block");
    if (masked_blocks < 0 || masked_blocks > blocks) throw ShapeError("masked blocks K must satisfy 0 <= K <= B");
    if (stage == StageTag::stage1 && masked_blocks != 0) throw ShapeError("stage-1 models use plain blocks only");
    if (tokens.frames <= 0 || tokens.height <= 0 || tokens.width <= 0) throw ShapeError("token grid is empty");
    if (latent_channels <= 0 || conditions < 0) throw ShapeError("invalid channel configuration");
    if (text_len < 2 || caption_len < 2) throw ShapeError("text lengths must hold BOS and one word");
    if (ffn_mult <= 0) throw ShapeError("ffn multiplier must be positive");
    if (width % 2 != 0) throw ShapeError("width must be even for the time embedding");
}

namespace {

const char* background_name(BackgroundPolicy p) { return p == BackgroundPolicy::own_group ? "own_group" : "excluded"; }

BackgroundPolicy background_from_name(const std::string& s) {
    if (s == "own_group") return BackgroundPolicy::own_group;
    if (s == "excluded") return BackgroundPolicy::excluded;
    throw Error("unknown background policy '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = nlohmann::json{{"width", c.width},
                       {"heads", c.heads},
                       {"blocks", c.blocks},
                       {"masked_blocks", c.masked_blocks},
                       {"tokens", {c.tokens.frames, c.tokens.height, c.tokens.width}},
                       {"latent_channels", c.latent_channels},
                       {"conditions", c.conditions},
                       {"text_len", c.text_len},
                       {"caption_len", c.caption_len},
                       {"vocab_size", c.vocab_size},
                       {"ffn_mult", c.ffn_mult},
                       {"objective", objective_name(c.objective)},
                       {"stage", stage_name(c.stage)},
                       {"background", background_name(c.background)},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    DenoiserConfig d;
    c.width = j.value("width", d.width);
    c.heads = j.value("heads", d.heads);
    c.blocks = j.value("blocks", d.blocks);
    c.masked_blocks = j.value("masked_blocks", d.masked_blocks);
    if (j.contains("tokens")) {
        const auto& t = j.at("tokens");
        c.tokens = {t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()};
    } else {
        c.tokens = d.tokens;
    }
    c.latent_channels = j.value("latent_channels", d.latent_channels);
    c.conditions = j.value("conditions", d.conditions);
    c.text_len = j.value("text_len", d.text_len);
    c.caption_len = j.value("caption_len", d.caption_len);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.objective = objective_from_name(j.value("objective", std::string(objective_name(d.objective))));
    c.stage = stage_from_name(j.value("stage", std::string(stage_name(d.stage))));
    c.background = background_from_name(j.value("background", std::string(background_name(d.background))));
    c.seed = j.value("seed", d.seed);
}

std::vector<SublayerKind> block_layout(const DenoiserConfig& c, int block) {
    const bool masked = block < c.masked_blocks;
    std::vector<SublayerKind> out{SublayerKind::spatial_attention, SublayerKind::temporal_attention};
    if (masked) out.push_back(SublayerKind::masked_self_attention);
    out.push_back(SublayerKind::cross_attention);
    if (masked) out.push_back(SublayerKind::masked_cross_attention);
    out.push_back(SublayerKind::feed_forward);
    return out;
}

namespace {

const char* sublayer_tag(SublayerKind k) {
    switch (k) {
        case SublayerKind::spatial_attention: return "spatial";
        case SublayerKind::temporal_attention: return "temporal";
        case SublayerKind::masked_self_attention: return "mself";
        case SublayerKind::cross_attention: return "cross";
        case SublayerKind::masked_cross_attention: return "mcross";
        case SublayerKind::feed_forward: return "ffn";
    }
    return "?";
}

bool is_masked(SublayerKind k) {
    return k == SublayerKind::masked_self_attention || k == SublayerKind::masked_cross_attention;
}

std::string sublayer_prefix(int block, SublayerKind k) {
    return "block" + std::to_string(block) + "." + sublayer_tag(k);
}

int text_positions(const DenoiserConfig& c) { return std::max(c.text_len, c.caption_len); }

}  // namespace

std::vector<ParamSpec> parameter_layout(const DenoiserConfig& c) {
    c.validate();
    const int d = c.width;
    const double lin = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<ParamSpec> s;
    const auto normal = [&](std::string name, int r, int col, double scale) {
        s.push_back({std::move(name), r, col, InitKind::normal, scale});
    };
    const auto zeros = [&](std::string name, int r, int col) {
        s.push_back({std::move(name), r, col, InitKind::zeros, 0.0});
    };

    normal("in.w", c.input_channels(), d, 1.0 / std::sqrt(static_cast<double>(c.input_channels())));
    zeros("in.b", 1, d);
    normal("pos.spatial", c.tokens.height * c.tokens.width, d, 0.5);
    normal("pos.temporal", c.tokens.frames, d, 0.5);
    normal("time.w1", d, d, lin);
    zeros("time.b1", 1, d);
    normal("time.w2", d, d, lin);
    zeros("time.b2", 1, d);
    normal("text.table", c.resolved_vocab_size(), d, 1.0);
    normal("text.pos", text_positions(c), d, 0.5);

    for (int b = 0; b < c.blocks; ++b) {
        for (SublayerKind k : block_layout(c, b)) {
            const std::string p = sublayer_prefix(b, k);
            zeros(p + ".mod.w", d, 2 * d);
            zeros(p + ".mod.b", 1, 2 * d);
            if (k == SublayerKind::feed_forward) {
                const int hidden = c.ffn_mult * d;
                normal(p + ".w1", d, hidden, lin);
                zeros(p + ".b1", 1, hidden);
                normal(p + ".w2", hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
                zeros(p + ".b2", 1, d);
            } else {
                normal(p + ".wq", d, d, lin);
                normal(p + ".wk", d, d, lin);
                normal(p + ".wv", d, d, lin);
                if (is_masked(k)) {
                    zeros(p + ".wo", d, d);
                } else {
                    normal(p + ".wo", d, d, lin);
                }
            }
        }
    }
    zeros("final.mod.w", d, 2 * d);
    zeros("final.mod.b", 1, 2 * d);
    normal("out.w", d, c.latent_channels, 0.1 * lin);
    zeros("out.b", 1, c.latent_channels);
    return s;
}

std::size_t parameter_count(const DenoiserConfig& c) {
    std::size_t n = 0;
    for (const auto& p : parameter_layout(c)) n += static_cast<std::size_t>(p.rows) * p.cols;
    return n;
}

// ---------------------------------------------------------------------------
// Denoiser

namespace {

constexpr double kLnEps = 1e-6;

Mat layer_norm(const Mat& x, Eigen::VectorXd& inv_std) {
    const double n = static_cast<double>(x.cols());
    const Eigen::VectorXd mean = x.rowwise().mean();
    Mat centered = x.colwise() - mean;
    const Eigen::VectorXd var = centered.rowwise().squaredNorm() / n;
    inv_std = (var.array() + kLnEps).rsqrt().matrix();
    centered.array().colwise() *= inv_std.array();
    return centered;
}

Mat layer_norm_backward(const Mat& y, const Eigen::VectorXd& inv_std, const Mat& dy) {
    const double n = static_cast<double>(y.cols());
    const Eigen::VectorXd mean_dy = dy.rowwise().mean();
    const Eigen::VectorXd mean_dyy = (dy.array() * y.array()).rowwise().sum().matrix() / n;
    Mat dx = dy.colwise() - mean_dy;
    dx.array() -= y.array().colwise() * mean_dyy.array();
    dx.array().colwise() *= inv_std.array();
    return dx;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
    const double inner = kGeluC * (x + 0.044715 * x * x * x);
    const double th = std::tanh(inner);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

RowVec time_features(double noise_level, int d) {
    RowVec out(d);
    const int half = d / 2;
    const double t = noise_level * 1000.0;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out(i) = std::sin(t * freq);
        out(half + i) = std::cos(t * freq);
    }
    return out;
}

void check_tokens(const TokenizedText& t, int vocab, int max_len, const char* what) {
    if (t.ids.size() != t.valid.size()) throw ShapeError(std::string(what) + ": ids and validity differ in length");
    if (t.length() == 0 || t.length() > max_len) {
        throw ShapeError(std::string(what) + " has " + std::to_string(t.length()) + " tokens, limit " +
                         std::to_string(max_len));
    }
    for (int id : t.ids) {
        if (id < 0 || id >= vocab) throw Error(std::string(what) + ": token id " + std::to_string(id) + " out of range");
    }
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig config) : config_(config) {
    params_ = initialize_parameters(parameter_layout(config_), config_.seed);
    build_groups();
}

Denoiser::Denoiser(DenoiserConfig config, ParameterSet params) : config_(config), params_(std::move(params)) {
    const auto layout = parameter_layout(config_);
    if (layout.size() != params_.size()) throw ShapeError("parameter set does not match the denoiser layout");
    for (const auto& s : layout) {
        if (!params_.contains(s.name)) throw ShapeError("missing parameter '" + s.name + "'");
        const auto& p = params_.at(s.name);
        if (p.value.rows() != s.rows || p.value.cols() != s.cols) {
            throw ShapeError("parameter '" + s.name + "' has the wrong shape");
        }
    }
    build_groups();
}

void Denoiser::build_groups() {
    const GridDims g = config_.tokens;
    const int hw = g.height * g.width;
    spatial_groups_.assign(g.frames, {});
    for (int f = 0; f < g.frames; ++f)
        for (int i = 0; i < hw; ++i) spatial_groups_[f].push_back(f * hw + i);
    temporal_groups_.assign(hw, {});
    for (int i = 0; i < hw; ++i)
        for (int f = 0; f < g.frames; ++f) temporal_groups_[i].push_back(f * hw + i);
}

AttentionParams Denoiser::attention_params(const std::string& prefix) const {
    AttentionParams p;
    p.w_q = params_.at(prefix + ".wq").value;
    p.w_k = params_.at(prefix + ".wk").value;
    p.w_v = params_.at(prefix + ".wv").value;
    p.w_o = params_.at(prefix + ".wo").value;
    p.heads = config_.heads;
    return p;
}

TokenSequence Denoiser::text_embed(const TokenizedText& tokens) const {
    check_tokens(tokens, config_.resolved_vocab_size(), text_positions(config_), "text");
    const Mat& table = params_.at("text.table").value;
    const Mat& pos = params_.at("text.pos").value;
    TokenSequence out;
    out.values.resize(tokens.length(), config_.width);
    for (int i = 0; i < tokens.length(); ++i) out.values.row(i) = table.row(tokens.ids[i]) + pos.row(i);
    out.valid.resize(tokens.ids.size());
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
        out.valid[i] = (tokens.valid[i] != 0 && tokens.ids[i] != Vocabulary::kPad) ? 1 : 0;
    }
    return out;
}

Mat Denoiser::forward(const DenoiserInput& in, ForwardCache* cache) const {
    const DenoiserConfig& c = config_;
    const int d = c.width;
    const auto n = static_cast<Eigen::Index>(c.tokens.cells());
    if (in.tokens.rows() != n || in.tokens.cols() != c.input_channels()) {
        throw ShapeError("denoiser input is " + std::to_string(in.tokens.rows()) + "x" +
                         std::to_string(in.tokens.cols()) + ", expected " + std::to_string(n) + "x" +
                         std::to_string(c.input_channels()));
    }
    if (!std::isfinite(in.noise_level)) throw Error("noise level is not finite");
    check_tokens(in.context, c.resolved_vocab_size(), c.caption_len, "caption");
    if (c.masked_blocks > 0) {
        if (in.masks == nullptr) throw ShapeError("masked blocks require an attention mask pair");
        const int l = static_cast<int>(in.local.size());
        if (in.masks->cross.rows != n || in.masks->self.rows != n || in.masks->self.cols != n) {
            throw ShapeError("attention masks were built for a different token grid");
        }
        if (in.masks->cross.cols != l * c.text_len) {
            throw ShapeError("m_cross has " + std::to_string(in.masks->cross.cols / c.text_len) +
                             " object blocks but " + std::to_string(l) + " object prompts were given");
        }
        for (const auto& t : in.local) {
            if (t.length() != c.text_len) throw ShapeError("object prompts must have text_len tokens");
        }
    }

    ForwardCache local_cache;
    ForwardCache& fc = cache != nullptr ? *cache : local_cache;
    fc = ForwardCache{};
    fc.input = in.tokens;
    fc.masks = in.masks;

    // Time conditioning.
    fc.time_features = time_features(in.noise_level, d);
    fc.time_pre1 = fc.time_features * params_.at("time.w1").value + params_.at("time.b1").value;
    fc.time_act1 = fc.time_pre1.unaryExpr(&silu);
    fc.time_pre2 = fc.time_act1 * params_.at("time.w2").value + params_.at("time.b2").value;
    fc.cond = fc.time_pre2.unaryExpr(&silu);

    // Text.
    fc.context = text_embed(in.context);
    fc.context_ids = in.context.ids;
    if (c.masked_blocks > 0 && !in.local.empty()) {
        std::vector<TokenSequence> embedded;
        for (const auto& t : in.local) {
            embedded.push_back(text_embed(t));
            fc.local_ids.insert(fc.local_ids.end(), t.ids.begin(), t.ids.end());
        }
        fc.local = concat_prompts(embedded);
    }

    // Input projection and positions.
    const int hw = c.tokens.height * c.tokens.width;
    Mat h = in.tokens * params_.at("in.w").value;
    h.rowwise() += params_.at("in.b").value.row(0);
    const Mat& ps = params_.at("pos.spatial").value;
    const Mat& pt = params_.at("pos.temporal").value;
    for (int f = 0; f < c.tokens.frames; ++f) {
        h.middleRows(static_cast<Eigen::Index>(f) * hw, hw) += ps;
        h.middleRows(static_cast<Eigen::Index>(f) * hw, hw).rowwise() += pt.row(f);
    }

    fc.blocks.resize(c.blocks);
    for (int b = 0; b < c.blocks; ++b) {
        for (SublayerKind k : block_layout(c, b)) {
            const std::string prefix = sublayer_prefix(b, k);
            SublayerCache sc;
            sc.kind = k;
            const RowVec mod = fc.cond * params_.at(prefix + ".mod.w").value + params_.at(prefix + ".mod.b").value;
            sc.shift = mod.leftCols(d);
            sc.scale = mod.rightCols(d);
            sc.normed = layer_norm(h, sc.inv_std);
            Mat u = sc.normed;
            u.array().rowwise() *= (sc.scale.array() + 1.0);
            u.rowwise() += sc.shift;

            Mat o;
            switch (k) {
                case SublayerKind::spatial_attention:
                case SublayerKind::temporal_attention: {
                    AttentionLayout layout;
                    layout.groups = k == SublayerKind::spatial_attention ? &spatial_groups_ : &temporal_groups_;
                    o = attention_forward(u, u, attention_params(prefix), layout, &sc.attn);
                    break;
                }
                case SublayerKind::masked_self_attention:
                    o = masked_self_attention(u, in.masks->self, attention_params(prefix), &sc.attn);
                    break;
                case SublayerKind::cross_attention:
                    o = cross_attention(u, fc.context, attention_params(prefix), &sc.attn);
                    break;
                case SublayerKind::masked_cross_attention:
                    if (fc.local.length() == 0) {
                        o = Mat::Zero(n, d);
                    } else {
                        AttentionLayout layout;
                        layout.mask = &in.masks->cross;
                        layout.key_valid = fc.local.valid;
                        o = attention_forward(u, fc.local.values, attention_params(prefix), layout, &sc.attn);
                    }
                    break;
                case SublayerKind::feed_forward: {
                    sc.ffn_in = u;
                    sc.ffn_pre = u * params_.at(prefix + ".w1").value;
                    sc.ffn_pre.rowwise() += params_.at(prefix + ".b1").value.row(0);
                    sc.ffn_hidden = sc.ffn_pre.unaryExpr(&gelu);
                    o = sc.ffn_hidden * params_.at(prefix + ".w2").value;
                    o.rowwise() += params_.at(prefix + ".b2").value.row(0);
                    break;
                }
            }
            h += o;
            fc.blocks[b].push_back(std::move(sc));
        }
    }

    const RowVec fmod = fc.cond * params_.at("final.mod.w").value + params_.at("final.mod.b").value;
    fc.final_shift = fmod.leftCols(d);
    fc.final_scale = fmod.rightCols(d);
    fc.final_normed = layer_norm(h, fc.final_inv_std);
    fc.final_mod = fc.final_normed;
    fc.final_mod.array().rowwise() *= (fc.final_scale.array() + 1.0);
    fc.final_mod.rowwise() += fc.final_shift;
    Mat out = fc.final_mod * params_.at("out.w").value;
    out.rowwise() += params_.at("out.b").value.row(0);
    return out;
}

namespace {

/// Backward through u = LN(h) * (1 + scale) + shift. Returns dh and accumulates d(cond).
Mat modulation_backward(const Mat& du, const Mat& normed, const Eigen::VectorXd& inv_std, const RowVec& scale,
                        const RowVec& cond, Parameter& mod_w, Parameter& mod_b, RowVec& d_cond) {
    const int d = static_cast<int>(normed.cols());
    RowVec d_mod(2 * d);
    d_mod.leftCols(d) = du.colwise().sum();
    d_mod.rightCols(d) = (du.array() * normed.array()).colwise().sum().matrix();
    mod_w.grad += cond.transpose() * d_mod;
    mod_b.grad += d_mod;
    d_cond += d_mod * mod_w.value.transpose();
    Mat dy = du;
    dy.array().rowwise() *= (scale.array() + 1.0);
    return layer_norm_backward(normed, inv_std, dy);
}

void add_attention_grads(ParameterSet& ps, const std::string& prefix, const AttentionGrads& g) {
    ps.at(prefix + ".wq").grad += g.d_wq;
    ps.at(prefix + ".wk").grad += g.d_wk;
    ps.at(prefix + ".wv").grad += g.d_wv;
    ps.at(prefix + ".wo").grad += g.d_wo;
}

}  // namespace

void Denoiser::backward(const ForwardCache& fc, const Mat& d_out) {
    const DenoiserConfig& c = config_;
    const int d = c.width;
    const auto n = static_cast<Eigen::Index>(c.tokens.cells());
    if (d_out.rows() != n || d_out.cols() != c.latent_channels) throw ShapeError("output gradient shape mismatch");
    if (static_cast<int>(fc.blocks.size()) != c.blocks) throw Error("forward cache does not belong to this model");

    RowVec d_cond = RowVec::Zero(d);
    Mat d_context = Mat::Zero(fc.context.length(), d);
    Mat d_local = Mat::Zero(fc.local.length(), d);

    params_.at("out.w").grad += fc.final_mod.transpose() * d_out;
    params_.at("out.b").grad += d_out.colwise().sum();
    const Mat d_final = d_out * params_.at("out.w").value.transpose();
    Mat dh = modulation_backward(d_final, fc.final_normed, fc.final_inv_std, fc.final_scale, fc.cond,
                                 params_.at("final.mod.w"), params_.at("final.mod.b"), d_cond);

    for (int b = c.blocks - 1; b >= 0; --b) {
        const auto& subs = fc.blocks[b];
        for (auto it = subs.rbegin(); it != subs.rend(); ++it) {
            const SublayerCache& sc = *it;
            const std::string prefix = sublayer_prefix(b, sc.kind);
            Mat du;
            if (sc.kind == SublayerKind::feed_forward) {
                Parameter& w1 = params_.at(prefix + ".w1");
                Parameter& w2 = params_.at(prefix + ".w2");
                w2.grad += sc.ffn_hidden.transpose() * dh;
                params_.at(prefix + ".b2").grad += dh.colwise().sum();
                Mat d_pre = dh * w2.value.transpose();
                d_pre.array() *= sc.ffn_pre.unaryExpr(&gelu_grad).array();
                w1.grad += sc.ffn_in.transpose() * d_pre;
                params_.at(prefix + ".b1").grad += d_pre.colwise().sum();
                du = d_pre * w1.value.transpose();
            } else if (sc.kind == SublayerKind::masked_cross_attention && !sc.attn.filled) {
                du = Mat::Zero(n, d);
            } else {
                const AttentionGrads g = attention_backward(sc.attn, attention_params(prefix), dh);
                add_attention_grads(params_, prefix, g);
                switch (sc.kind) {
                    case SublayerKind::spatial_attention:
                    case SublayerKind::temporal_attention:
                    case SublayerKind::masked_self_attention:
                        du = g.d_xq + g.d_xkv;
                        break;
                    case SublayerKind::cross_attention:
                        du = g.d_xq;
                        d_context += g.d_xkv;
                        break;
                    case SublayerKind::masked_cross_attention:
                        du = g.d_xq;
                        d_local += g.d_xkv;
                        break;
                    case SublayerKind::feed_forward:
                        break;
                }
            }
            dh += modulation_backward(du, sc.normed, sc.inv_std, sc.scale, fc.cond, params_.at(prefix + ".mod.w"),
                                      params_.at(prefix + ".mod.b"), d_cond);
        }
    }

    // Input projection and positions.
    const int hw = c.tokens.height * c.tokens.width;
    params_.at("in.w").grad += fc.input.transpose() * dh;
    params_.at("in.b").grad += dh.colwise().sum();
    Mat& gps = params_.at("pos.spatial").grad;
    Mat& gpt = params_.at("pos.temporal").grad;
    for (int f = 0; f < c.tokens.frames; ++f) {
        const auto rows = dh.middleRows(static_cast<Eigen::Index>(f) * hw, hw);
        gps += rows;
        gpt.row(f) += rows.colwise().sum();
    }

    // Text embeddings.
    Mat& gtable = params_.at("text.table").grad;
    Mat& gpos = params_.at("text.pos").grad;
    for (int i = 0; i < fc.context.length(); ++i) {
        gtable.row(fc.context_ids[i]) += d_context.row(i);
        gpos.row(i) += d_context.row(i);
    }
    for (int i = 0; i < fc.local.length(); ++i) {
        gtable.row(fc.local_ids[i]) += d_local.row(i);
        gpos.row(i % c.text_len) += d_local.row(i);
    }

    // Time MLP.
    RowVec d_pre2 = d_cond.array() * fc.time_pre2.unaryExpr(&silu_grad).array();
    params_.at("time.w2").grad += fc.time_act1.transpose() * d_pre2;
    params_.at("time.b2").grad += d_pre2;
    RowVec d_pre1 = (d_pre2 * params_.at("time.w2").value.transpose()).array() *
                    fc.time_pre1.unaryExpr(&silu_grad).array();
    params_.at("time.w1").grad += fc.time_features.transpose() * d_pre1;
    params_.at("time.b1").grad += d_pre1;
}

// ---------------------------------------------------------------------------
// Stage entry points

namespace {

Mat assemble_input(const DenoiserConfig& c, const Mat& noisy, const VideoClip& enc_frame, const Mat& third) {
    const auto n = static_cast<Eigen::Index>(c.tokens.cells());
    if (noisy.rows() != n || noisy.cols() != c.latent_channels) {
        throw ShapeError("noisy latent is " + std::to_string(noisy.rows()) + "x" + std::to_string(noisy.cols()) +
                         ", expected " + std::to_string(n) + "x" + std::to_string(c.latent_channels));
    }
    if (enc_frame.frames != 1 || enc_frame.height != c.tokens.height || enc_frame.width != c.tokens.width ||
        enc_frame.channels != c.latent_channels) {
        throw ShapeError("first-frame encoding does not match the token grid");
    }
    if (third.rows() != n || third.cols() != c.latent_channels) {
        throw ShapeError("trajectory encoding does not match the token grid");
    }
    if (c.conditions != 2) throw ShapeError("stage models expect two concatenated conditions");
    Mat x(n, c.input_channels());
    const int lc = c.latent_channels;
    x.leftCols(lc) = noisy;
    x.middleCols(lc, lc) = broadcast_frame(enc_frame, c.tokens.frames);
    x.rightCols(lc) = third;
    return x;
}

}  // namespace

Mat denoise_stage1(const Denoiser& model, const Mat& noisy, double noise_level, const VideoClip& enc_x0,
                   const VideoClip& enc_s0, const TokenizedText& motion_tokens) {
    const DenoiserConfig& c = model.config();
    if (c.stage != StageTag::stage1) throw Error("denoise_stage1 called with a stage2 parameter set");
    DenoiserInput in;
    in.tokens = assemble_input(c, noisy, enc_x0, broadcast_frame(enc_s0, c.tokens.frames));
    in.noise_level = noise_level;
    in.context = motion_tokens;
    return model.forward(in);
}

Mat denoise_stage2(const Denoiser& model, const Mat& noisy, double noise_level, const VideoClip& enc_x0,
                   const VideoClip& enc_s, const TokenizedText& caption_tokens,
                   const std::vector<TokenizedText>& local_tokens, const AttentionMaskPair& masks) {
    const DenoiserConfig& c = model.config();
    if (c.stage != StageTag::stage2) throw Error("denoise_stage2 called with a stage1 parameter set");
    if (enc_s.dims() != c.tokens || enc_s.channels != c.latent_channels) {
        throw ShapeError("trajectory encoding does not match the token grid");
    }
    DenoiserInput in;
    in.tokens = assemble_input(c, noisy, enc_x0, to_tokens(enc_s));
    in.noise_level = noise_level;
    in.context = caption_tokens;
    in.local = local_tokens;
    in.masks = &masks;
    return model.forward(in);
}

}  // namespace maskvid
