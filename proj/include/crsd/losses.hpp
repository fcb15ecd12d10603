#pragma once

// Training objectives: batch cross-entropy, cosine alignment, InfoNCE over
// in-batch teacher negatives, and the weighted composites. All differentiable
// through the tape. Reductions default to batch mean; sum mode reproduces the
// literal per-batch sums.

#include <vector>

#include "crsd/common.hpp"
#include "crsd/tensor.hpp"

namespace crsd {

// Mean over the batch of -log softmax(logits)[label].
inline Tensor classification_ce(const Tensor& logits, const std::vector<int>& labels,
                                bool mean_reduce = true) {
    return cross_entropy_rows(logits, labels, mean_reduce);
}

// [N,1] column of per-row sums.
inline Tensor sum_rows(const Tensor& x) {
    return matmul(x, Tensor::full({x.cols(), 1}, 1.0));
}

// [N,1] eps-guarded cosine similarity of paired rows.
inline Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    return sum_rows(mul(l2norm_rows(a, eps), l2norm_rows(b, eps)));
}

// Mean over rows of 1 - cosine(a_i, b_i).
inline Tensor cosine_align_loss(const Tensor& emb_c, const Tensor& emb_r,
                                bool mean_reduce = true) {
    Tensor gap = sub(1.0, cosine_rows(emb_c, emb_r));
    return mean_reduce ? mean(gap) : sum(gap);
}

inline Tensor baseline_total(const Tensor& ce, const Tensor& cos, double mu = 0.1) {
    if (mu < 0) throw ConfigError("baseline_total: negative mu");
    return add(ce, mul(cos, mu));
}

// InfoNCE over a precomputed similarity matrix: row i scores student i against
// every teacher j, the diagonal is the positive pair.
inline Tensor info_nce_from_sims(const Tensor& sims, double tau, bool mean_reduce = true) {
    if (tau <= 0) throw ConfigError("info_nce: tau must be positive");
    if (sims.shape().size() != 2 || sims.rows() != sims.cols())
        throw std::invalid_argument("info_nce: similarity matrix must be square, got " +
                                    shape_str(sims.shape()));
    std::vector<int> diag(sims.rows());
    for (int i = 0; i < sims.rows(); ++i) diag[i] = i;
    return cross_entropy_rows(mul(sims, 1.0 / tau), diag, mean_reduce);
}

inline Tensor info_nce(const Tensor& cls, const Tensor& cls_r, double tau,
                       bool mean_reduce = true, double eps = 1e-12) {
    if (cls.shape() != cls_r.shape())
        throw std::invalid_argument("info_nce: shape mismatch " + shape_str(cls.shape()) +
                                    " vs " + shape_str(cls_r.shape()));
    Tensor sims = matmul(l2norm_rows(cls, eps), transpose(l2norm_rows(cls_r, eps)));
    return info_nce_from_sims(sims, tau, mean_reduce);
}

inline Tensor crsd_total(const Tensor& l_sce, const Tensor& l_tce, const Tensor& l_align,
                         double gamma = 0.01, double delta = 0.01) {
    if (gamma < 0 || delta < 0) throw ConfigError("crsd_total: negative weight");
    return add(add(l_sce, mul(l_tce, gamma)), mul(l_align, delta));
}

}  // namespace crsd
