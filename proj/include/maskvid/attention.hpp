#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "maskvid/maskops.hpp"
#include "maskvid/types.hpp"

namespace maskvid {

/// Projections of one attention sublayer. All matrices are d x d; heads split the width.
struct AttentionParams {
    Mat w_q;
    Mat w_k;
    Mat w_v;
    Mat w_o;
    int heads = 1;

    int width() const { return static_cast<int>(w_q.cols()); }
    void validate(int input_width, int context_width) const;
};

/// Token features plus per-token validity; invalid tokens are never attended to.
struct TokenSequence {
    Mat values;
    std::vector<uint8_t> valid;

    int length() const { return static_cast<int>(values.rows()); }
};

/// Row-wise softmax restricted to entries with mask == 1. Masked entries get
/// exactly zero weight and a row with no admissible entry is all zeros.
/// Throws on NaN scores.
Mat softmax_masked(const Mat& scores, const BinaryMask& mask);

/// Which query/key pairs may interact. Groups partition tokens for factorized
/// self-attention (queries only see keys of their own group); a mask restricts
/// individual pairs; key validity is ANDed into every row.
struct AttentionLayout {
    const BinaryMask* mask = nullptr;
    std::vector<uint8_t> key_valid;
    const std::vector<std::vector<int>>* groups = nullptr;
};

/// Activations retained by a forward pass for attention_backward.
struct AttentionCache {
    bool filled = false;
    Mat x_q;
    Mat x_kv;
    Mat q, k, v;
    Mat heads_out;                 ///< concatenated per-head outputs before w_o
    std::vector<Mat> weights;      ///< [group * heads + head]
    AttentionLayout layout;
};

struct AttentionGrads {
    Mat d_wq, d_wk, d_wv, d_wo;
    Mat d_xq;
    Mat d_xkv;
};

/// softmax(q k^T / sqrt(d_head) + log M) v, followed by the output projection.
Mat attention_forward(const Mat& x_q, const Mat& x_kv, const AttentionParams& p, const AttentionLayout& layout,
                      AttentionCache* cache = nullptr);

AttentionGrads attention_backward(const AttentionCache& cache, const AttentionParams& p, const Mat& d_out);

/// Standard (unmasked) cross-attention from z to one prompt.
Mat cross_attention(const Mat& z, const TokenSequence& prompt, const AttentionParams& p,
                    AttentionCache* cache = nullptr);
/// Standard self-attention over all tokens.
Mat self_attention(const Mat& z, const AttentionParams& p, AttentionCache* cache = nullptr);

/// Cross-attention to the concatenation of object prompts. Column block l of
/// m_cross admits prompt l; padding tokens are excluded.
Mat masked_cross_attention(const Mat& z, std::span<const TokenSequence> prompts, const BinaryMask& m_cross,
                           const AttentionParams& p, AttentionCache* cache = nullptr);

Mat masked_self_attention(const Mat& z, const BinaryMask& m_self, const AttentionParams& p,
                          AttentionCache* cache = nullptr);

/// Stacks prompt embeddings along the sequence axis.
TokenSequence concat_prompts(std::span<const TokenSequence> prompts);

}  // namespace maskvid
