#include "maskvid/attention.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "maskvid/error.hpp"

namespace maskvid {

namespace {

/// Query and key token indices of one attention group.
struct GroupView {
    std::vector<int> queries;
    std::vector<int> keys;
};

std::vector<GroupView> expand_groups(const AttentionLayout& layout, int n_q, int n_k) {
    std::vector<GroupView> out;
    if (layout.groups != nullptr) {
        if (n_q != n_k) throw ShapeError("grouped attention requires self-attention");
        for (const auto& g : *layout.groups) out.push_back({g, g});
        return out;
    }
    GroupView all;
    all.queries.resize(n_q);
    all.keys.resize(n_k);
    std::iota(all.queries.begin(), all.queries.end(), 0);
    std::iota(all.keys.begin(), all.keys.end(), 0);
    out.push_back(std::move(all));
    return out;
}

void check_layout(const AttentionLayout& layout, int n_q, int n_k) {
    if (layout.mask != nullptr && (layout.mask->rows != n_q || layout.mask->cols != n_k)) {
        throw ShapeError("attention mask is " + std::to_string(layout.mask->rows) + "x" +
                         std::to_string(layout.mask->cols) + ", expected " + std::to_string(n_q) + "x" +
                         std::to_string(n_k));
    }
    if (!layout.key_valid.empty() && static_cast<int>(layout.key_valid.size()) != n_k) {
        throw ShapeError("key validity length does not match key count");
    }
}

/// In-place masked softmax over the rows of `s`; admissible(i, j) selects entries.
template <typename Admissible>
void softmax_rows(Mat& s, Admissible admissible) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double max_score = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (std::isnan(s(i, j))) throw Error("NaN attention score");
            if (admissible(i, j)) {
                max_score = any ? std::max(max_score, s(i, j)) : s(i, j);
                any = true;
            }
        }
        if (!any) {
            s.row(i).setZero();
            continue;
        }
        double total = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (admissible(i, j)) {
                s(i, j) = std::exp(s(i, j) - max_score);
                total += s(i, j);
            } else {
                s(i, j) = 0.0;
            }
        }
        s.row(i) /= total;
    }
}

}  // namespace

void AttentionParams::validate(int input_width, int context_width) const {
    const auto d = w_q.cols();
    if (d <= 0 || heads <= 0 || d % heads != 0) throw ShapeError("attention width must be divisible by heads");
    if (w_q.rows() != input_width || w_k.rows() != context_width || w_v.rows() != context_width ||
        w_k.cols() != d || w_v.cols() != d || w_o.rows() != d) {
        throw ShapeError("attention projection shapes do not match inputs");
    }
}

Mat softmax_masked(const Mat& scores, const BinaryMask& mask) {
    if (mask.rows != scores.rows() || mask.cols != scores.cols()) {
        throw ShapeError("softmax_masked: mask shape differs from scores");
    }
    Mat w = scores;
    softmax_rows(w, [&](Eigen::Index i, Eigen::Index j) {
        return mask(static_cast<int>(i), static_cast<int>(j)) != 0;
    });
    return w;
}

Mat attention_forward(const Mat& x_q, const Mat& x_kv, const AttentionParams& p, const AttentionLayout& layout,
                      AttentionCache* cache) {
    p.validate(static_cast<int>(x_q.cols()), static_cast<int>(x_kv.cols()));
    const int n_q = static_cast<int>(x_q.rows());
    const int n_k = static_cast<int>(x_kv.rows());
    check_layout(layout, n_q, n_k);
    const int d = p.width();
    const int dh = d / p.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat q = x_q * p.w_q;
    Mat k = x_kv * p.w_k;
    Mat v = x_kv * p.w_v;
    Mat heads_out = Mat::Zero(n_q, d);
    const auto groups = expand_groups(layout, n_q, n_k);
    std::vector<Mat> weights;
    if (cache != nullptr) weights.reserve(groups.size() * p.heads);

    for (const auto& g : groups) {
        const auto admissible = [&](Eigen::Index i, Eigen::Index j) {
            const int kj = g.keys[j];
            if (!layout.key_valid.empty() && layout.key_valid[kj] == 0) return false;
            return layout.mask == nullptr || (*layout.mask)(g.queries[i], kj) != 0;
        };
        for (int h = 0; h < p.heads; ++h) {
            const auto cols = Eigen::seqN(h * dh, dh);
            const Mat qg = q(g.queries, cols);
            const Mat kg = k(g.keys, cols);
            Mat w = (qg * kg.transpose()) * scale;
            softmax_rows(w, admissible);
            heads_out(g.queries, cols) = w * v(g.keys, cols);
            if (cache != nullptr) weights.push_back(std::move(w));
        }
    }

    Mat out = heads_out * p.w_o;
    if (cache != nullptr) {
        cache->filled = true;
        cache->x_q = x_q;
        cache->x_kv = x_kv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->heads_out = std::move(heads_out);
        cache->weights = std::move(weights);
        cache->layout = layout;
    }
    return out;
}

AttentionGrads attention_backward(const AttentionCache& cache, const AttentionParams& p, const Mat& d_out) {
    if (!cache.filled) throw Error("attention_backward: forward activations were not retained");
    const int n_q = static_cast<int>(cache.x_q.rows());
    const int n_k = static_cast<int>(cache.x_kv.rows());
    if (d_out.rows() != n_q || d_out.cols() != p.w_o.cols()) throw ShapeError("upstream gradient shape mismatch");
    const int d = p.width();
    const int dh = d / p.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    AttentionGrads g;
    g.d_wo = cache.heads_out.transpose() * d_out;
    const Mat d_heads = d_out * p.w_o.transpose();
    Mat dq = Mat::Zero(n_q, d);
    Mat dk = Mat::Zero(n_k, d);
    Mat dv = Mat::Zero(n_k, d);

    const auto groups = expand_groups(cache.layout, n_q, n_k);
    std::size_t wi = 0;
    for (const auto& grp : groups) {
        for (int h = 0; h < p.heads; ++h, ++wi) {
            const auto cols = Eigen::seqN(h * dh, dh);
            const Mat& w = cache.weights[wi];
            const Mat qg = cache.q(grp.queries, cols);
            const Mat kg = cache.k(grp.keys, cols);
            const Mat vg = cache.v(grp.keys, cols);
            const Mat d_o = d_heads(grp.queries, cols);

            const Mat d_w = d_o * vg.transpose();
            const Eigen::VectorXd row_dot = (w.array() * d_w.array()).rowwise().sum();
            const Mat d_s = (w.array() * (d_w.colwise() - row_dot).array()).matrix() * scale;

            dq(grp.queries, cols) += d_s * kg;
            dk(grp.keys, cols) += d_s.transpose() * qg;
            dv(grp.keys, cols) += w.transpose() * d_o;
        }
    }

    g.d_wq = cache.x_q.transpose() * dq;
    g.d_wk = cache.x_kv.transpose() * dk;
    g.d_wv = cache.x_kv.transpose() * dv;
    g.d_xq = dq * p.w_q.transpose();
    g.d_xkv = dk * p.w_k.transpose() + dv * p.w_v.transpose();
    return g;
}

Mat cross_attention(const Mat& z, const TokenSequence& prompt, const AttentionParams& p, AttentionCache* cache) {
    AttentionLayout layout;
    layout.key_valid = prompt.valid;
    return attention_forward(z, prompt.values, p, layout, cache);
}

Mat self_attention(const Mat& z, const AttentionParams& p, AttentionCache* cache) {
    return attention_forward(z, z, p, AttentionLayout{}, cache);
}

TokenSequence concat_prompts(std::span<const TokenSequence> prompts) {
    TokenSequence out;
    if (prompts.empty()) return out;
    Eigen::Index rows = 0;
    for (const auto& pr : prompts) rows += pr.values.rows();
    out.values.resize(rows, prompts.front().values.cols());
    Eigen::Index r = 0;
    for (const auto& pr : prompts) {
        if (pr.values.cols() != out.values.cols()) throw ShapeError("prompt embeddings differ in width");
        if (!pr.valid.empty() && static_cast<Eigen::Index>(pr.valid.size()) != pr.values.rows()) {
            throw ShapeError("prompt validity length mismatch");
        }
        out.values.middleRows(r, pr.values.rows()) = pr.values;
        r += pr.values.rows();
        if (pr.valid.empty()) {
            out.valid.insert(out.valid.end(), static_cast<std::size_t>(pr.values.rows()), uint8_t{1});
        } else {
            out.valid.insert(out.valid.end(), pr.valid.begin(), pr.valid.end());
        }
    }
    return out;
}

Mat masked_cross_attention(const Mat& z, std::span<const TokenSequence> prompts, const BinaryMask& m_cross,
                           const AttentionParams& p, AttentionCache* cache) {
    const TokenSequence keys = concat_prompts(prompts);
    if (m_cross.cols != keys.length() || m_cross.rows != z.rows()) {
        throw ShapeError("m_cross is " + std::to_string(m_cross.rows) + "x" + std::to_string(m_cross.cols) +
                         " but there are " + std::to_string(z.rows()) + " tokens and " +
                         std::to_string(keys.length()) + " prompt tokens");
    }
    AttentionLayout layout;
    layout.mask = &m_cross;
    layout.key_valid = keys.valid;
    return attention_forward(z, keys.values, p, layout, cache);
}

Mat masked_self_attention(const Mat& z, const BinaryMask& m_self, const AttentionParams& p,
                          AttentionCache* cache) {
    AttentionLayout layout;
    layout.mask = &m_self;
    return attention_forward(z, z, p, layout, cache);
}

}  // namespace maskvid
