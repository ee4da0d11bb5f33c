#pragma once

#include "octattn/pyramid.hpp"
#include "octattn/semantic_pe.hpp"

namespace octattn {

enum class SelectMode { Train, Infer };

// multiply-accumulate tallies at the attention gemm sites
struct MacCounter {
  std::uint64_t score = 0;  // Q K^T
  std::uint64_t av = 0;     // attn * V
  std::uint64_t proj = 0;   // W_q / W_k / W_v / W_h applications
  std::uint64_t attention() const { return score + av; }
};

// per-level attention weights; one set of projections per head
struct LevelAttnParams {
  std::vector<Tensor> wq, wk, wv;  // d x head_dim each
  std::vector<Tensor> wh;          // head_dim x d each
  Tensor sape_w;                   // (d + 4) x d
  int heads() const { return static_cast<int>(wq.size()); }
};

struct OtbParams {
  std::vector<LevelAttnParams> levels;  // indexed by pyramid level, size N
  Tensor fc_w;  // (N*d) x d multi-level concat projection
  Tensor fc_b;  // d
  SubmConvParams lepe;  // d -> d
  Tensor ffn_w1, ffn_b1;  // d -> 2d
  Tensor ffn_w2, ffn_b2;  // 2d -> d
  Tensor bn_gamma, bn_beta;  // output-side BN affine
  PyramidParams pyramid;     // per-level BN affine for the pyramid build
  Index k = 8;       // top-k relevance selection
  Index K = 32;      // attending-octant budget per query
  Scalar tau = 1.0;  // Gumbel temperature

  int height() const { return static_cast<int>(levels.size()); }
  Index model_dim() const { return fc_w.dim(1); }
};

OtbParams make_otb_params(Rng& rng, int height, Index d, int heads, Index head_dim,
                          Index k, Index K, Scalar tau = 1.0);

// Top-of-pyramid self-attention on the padded token view. Scores are the
// head-summed post-softmax matrices (valid rows sum to the head count).
struct MhsaTopResult {
  std::vector<Tensor> head_sum;               // per scene, m_max x m_max
  std::vector<std::vector<Tensor>> per_head;  // [scene][head] post-softmax
  Tensor feats;                               // compact, grid-row order
};
MhsaTopResult mhsa_top(const DenseTokenBatch& batch, const LevelAttnParams& params,
                       const std::vector<Matrix>* additive_masks = nullptr,
                       MacCounter* macs = nullptr);

// Row-wise top-k of a score matrix. Infer takes raw scores, ties to the
// lowest column; train perturbs each valid score with Gumbel noise / tau.
// Rows with fewer than k valid entries are padded with -1.
IndexMatrix topk_select(const Eigen::Ref<const Matrix>& scores, const BoolMatrix* valid,
                        Index k, SelectMode mode, Scalar tau = 1.0, Rng* rng = nullptr);

// Per parent token: children of its k selected coarse tokens, most relevant
// parents first, truncated to the K budget (uniform without replacement in
// train mode, canonical-order prefix in infer mode).
IndexMatrix sample_octants(const IndexMatrix& parent_topk, const IndexBank& bank,
                           Index K, SelectMode mode, Rng* rng = nullptr);

// Cross-attention of every level token against its own sampled key set
// (entries index rows of feats; -1 slots are masked out).
struct CrossAttnResult {
  Tensor head_sum;                // m x K
  std::vector<Tensor> per_head;
  Tensor feats;                   // m x d
  BoolMatrix valid;               // m x K
};
CrossAttnResult cross_attention(const Tensor& feats, const IndexMatrix& key_sets,
                                const LevelAttnParams& params,
                                const Matrix* additive_mask = nullptr,
                                MacCounter* macs = nullptr);

// locally enhanced positional embedding: a submanifold conv of the level-0
// features, used in place of the attention residual
Tensor lepe(const SparseVoxelGrid& level0, const Tensor& feats,
            const SubmConvParams& params);

// linear d -> 2d, ReLU, linear 2d -> d (caller adds BN and the residual)
Tensor ffn(const Tensor& x, const OtbParams& params);

struct OtbOptions {
  SelectMode mode = SelectMode::Infer;
  Rng* rng = nullptr;                  // required in train mode
  const Vector* seg_scores = nullptr;  // level-0 scores; enables SAPE + SAM
  SamConfig sam;
  MacCounter* macs = nullptr;
  Index top_pad = -1;  // force a larger m_max on the top level (tests)
};

struct OtbResult {
  Tensor output;                        // m0 x d
  std::vector<Tensor> level_feats;      // attentive features per level, compact
  std::vector<IndexMatrix> selections;  // O_n per level (global rows)
  std::vector<IndexMatrix> key_sets;    // per level n < N-1, m_n x K
};

// One Octree Transformer Block: top-level MHSA, recursive top-k restricted
// cross-attention, multi-level concat + FC + LePE residual, FFN with BN
// residual.
OtbResult otb_forward(const FeaturePyramid& pyramid, const OtbParams& params,
                      const OtbOptions& options = {});

// k/K large enough that selection keeps every token and every candidate
std::pair<Index, Index> exhaustive_selection(const FeaturePyramid& pyramid);

}  // namespace octattn
