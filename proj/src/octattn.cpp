#include "octattn/octattn.hpp"

#include <algorithm>
#include <stdexcept>

namespace octattn {

namespace {

constexpr Index kQueryBlock = 4096;

BoolMatrix column_validity(const DenseTokenBatch& batch, Index scene) {
  BoolMatrix mask(batch.m_max, batch.m_max);
  for (Index j = 0; j < batch.m_max; ++j) {
    const bool v = batch.valid[static_cast<size_t>(scene * batch.m_max + j)] != 0;
    mask.col(j).setConstant(v);
  }
  return mask;
}

void check_heads(const LevelAttnParams& params) {
  if (params.wq.empty() || params.wq.size() != params.wk.size() ||
      params.wq.size() != params.wv.size() || params.wq.size() != params.wh.size())
    throw std::invalid_argument("attention: per-head weight lists disagree");
}

}  // namespace

OtbParams make_otb_params(Rng& rng, int height, Index d, int heads, Index head_dim,
                          Index k, Index K, Scalar tau) {
  if (heads < 1 || head_dim * heads != d)
    throw std::invalid_argument("make_otb_params: d must equal heads * head_dim");
  OtbParams p;
  const Scalar bd = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  const Scalar bh = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
  for (int n = 0; n < height; ++n) {
    LevelAttnParams lp;
    for (int h = 0; h < heads; ++h) {
      lp.wq.push_back(Tensor::constant(uniform_matrix(rng, d, head_dim, bd)));
      lp.wk.push_back(Tensor::constant(uniform_matrix(rng, d, head_dim, bd)));
      lp.wv.push_back(Tensor::constant(uniform_matrix(rng, d, head_dim, bd)));
      lp.wh.push_back(Tensor::constant(uniform_matrix(rng, head_dim, d, bh)));
    }
    lp.sape_w = Tensor::constant(
        uniform_matrix(rng, d + 4, d, Scalar(1) / std::sqrt(static_cast<Scalar>(d + 4))));
    p.levels.push_back(std::move(lp));
  }
  p.fc_w = Tensor::constant(uniform_matrix(
      rng, height * d, d, Scalar(1) / std::sqrt(static_cast<Scalar>(height * d))));
  p.fc_b = Tensor::constant({d}, ArrayX::Zero(d));
  p.lepe = make_subm_conv_params(rng, d, d);
  p.ffn_w1 = Tensor::constant(uniform_matrix(rng, d, 2 * d, bd));
  p.ffn_b1 = Tensor::constant({2 * d}, ArrayX::Zero(2 * d));
  p.ffn_w2 = Tensor::constant(
      uniform_matrix(rng, 2 * d, d, Scalar(1) / std::sqrt(static_cast<Scalar>(2 * d))));
  p.ffn_b2 = Tensor::constant({d}, ArrayX::Zero(d));
  p.bn_gamma = Tensor::constant({d}, ArrayX::Ones(d));
  p.bn_beta = Tensor::constant({d}, ArrayX::Zero(d));
  p.pyramid = make_pyramid_params(d, height);
  p.k = k;
  p.K = K;
  p.tau = tau;
  return p;
}

MhsaTopResult mhsa_top(const DenseTokenBatch& batch, const LevelAttnParams& params,
                       const std::vector<Matrix>* additive_masks, MacCounter* macs) {
  check_heads(params);
  const Index b_count = batch.scenes;
  const Index m = batch.m_max;
  const Index d = params.wq[0].rows();
  const Index dh = params.wq[0].cols();
  const int heads = params.heads();
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  if (batch.tokens.cols() != d)
    throw std::invalid_argument("mhsa_top: token width does not match the weights");
  if (additive_masks && static_cast<Index>(additive_masks->size()) != b_count)
    throw std::invalid_argument("mhsa_top: one additive mask per scene required");

  MhsaTopResult res;
  res.per_head.resize(static_cast<size_t>(b_count));
  std::vector<Tensor> outs;
  for (Index b = 0; b < b_count; ++b) {
    Tensor x = slice_rows(batch.tokens, b * m, m);
    const BoolMatrix keymask = column_validity(batch, b);
    Tensor additive;
    if (additive_masks) {
      const Matrix& am = (*additive_masks)[static_cast<size_t>(b)];
      if (am.rows() != m || am.cols() != m)
        throw std::invalid_argument("mhsa_top: additive mask shape mismatch");
      additive = Tensor::constant(am);
    }
    Tensor head_sum, out_b;
    for (int h = 0; h < heads; ++h) {
      Tensor q = matmul(x, params.wq[static_cast<size_t>(h)]);
      Tensor kk = matmul(x, params.wk[static_cast<size_t>(h)]);
      Tensor v = matmul(x, params.wv[static_cast<size_t>(h)]);
      if (macs) macs->proj += 3ull * static_cast<std::uint64_t>(m * d * dh);
      Tensor s = scale(matmul_nt(q, kk), att_scale);
      if (macs) macs->score += static_cast<std::uint64_t>(m * m * dh);
      if (additive_masks) s = add(s, additive);
      RowSoftmax sm = softmax_rows(s, &keymask);
      res.per_head[static_cast<size_t>(b)].push_back(sm.probs);
      head_sum = h == 0 ? sm.probs : add(head_sum, sm.probs);
      Tensor fh = matmul(sm.probs, v);
      if (macs) macs->av += static_cast<std::uint64_t>(m * m * dh);
      Tensor oh = matmul(fh, params.wh[static_cast<size_t>(h)]);
      if (macs) macs->proj += static_cast<std::uint64_t>(m * dh * d);
      out_b = h == 0 ? oh : add(out_b, oh);
    }
    res.head_sum.push_back(head_sum);
    outs.push_back(out_b);
  }
  res.feats = dense_to_compact(batch, concat_rows(outs));
  return res;
}

IndexMatrix topk_select(const Eigen::Ref<const Matrix>& scores, const BoolMatrix* valid,
                        Index k, SelectMode mode, Scalar tau, Rng* rng) {
  if (k <= 0) throw std::invalid_argument("topk_select: k must be positive");
  if (mode == SelectMode::Train) {
    if (!rng) throw std::invalid_argument("topk_select: train mode needs an rng");
    if (!(tau > 0)) throw std::invalid_argument("topk_select: tau must be positive");
  }
  const Index m = scores.rows(), n = scores.cols();
  if (valid && (valid->rows() != m || valid->cols() != n))
    throw std::invalid_argument("topk_select: validity shape mismatch");
  IndexMatrix out = IndexMatrix::Constant(m, k, -1);
  std::vector<std::pair<Scalar, Index>> entries;
  for (Index i = 0; i < m; ++i) {
    entries.clear();
    for (Index j = 0; j < n; ++j) {
      if (valid && !(*valid)(i, j)) continue;
      Scalar s = scores(i, j);
      if (mode == SelectMode::Train) s = (s + rng->gumbel()) / tau;
      entries.emplace_back(s, j);
    }
    const Index take = std::min<Index>(k, static_cast<Index>(entries.size()));
    std::partial_sort(entries.begin(), entries.begin() + take, entries.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first ||
                               (a.first == b.first && a.second < b.second);
                      });
    for (Index t = 0; t < take; ++t) out(i, t) = entries[static_cast<size_t>(t)].second;
  }
  return out;
}

IndexMatrix sample_octants(const IndexMatrix& parent_topk, const IndexBank& bank,
                           Index K, SelectMode mode, Rng* rng) {
  if (K <= 0) throw std::invalid_argument("sample_octants: K must be positive");
  if (mode == SelectMode::Train && !rng)
    throw std::invalid_argument("sample_octants: train mode needs an rng");
  const Index parents = parent_topk.rows();
  if (static_cast<Index>(bank.parent_to_children.size()) != parents)
    throw std::invalid_argument("sample_octants: bank does not match the selection");
  IndexMatrix out = IndexMatrix::Constant(parents, K, -1);
  std::vector<Index> cand;
  for (Index p = 0; p < parents; ++p) {
    cand.clear();
    // children of the most relevant selections first
    for (Index j = 0; j < parent_topk.cols(); ++j) {
      const Index q = parent_topk(p, j);
      if (q < 0) continue;
      const auto& kids = bank.parent_to_children[static_cast<size_t>(q)];
      cand.insert(cand.end(), kids.begin(), kids.end());
    }
    if (static_cast<Index>(cand.size()) > K && mode == SelectMode::Train) {
      for (Index t = 0; t < K; ++t) {
        const Index pick = t + rng->below(static_cast<Index>(cand.size()) - t);
        std::swap(cand[static_cast<size_t>(t)], cand[static_cast<size_t>(pick)]);
      }
    }
    const Index take = std::min<Index>(K, static_cast<Index>(cand.size()));
    for (Index t = 0; t < take; ++t) out(p, t) = cand[static_cast<size_t>(t)];
  }
  return out;
}

CrossAttnResult cross_attention(const Tensor& feats, const IndexMatrix& key_sets,
                                const LevelAttnParams& params, const Matrix* additive_mask,
                                MacCounter* macs) {
  check_heads(params);
  const Index m = feats.rows();
  const Index d = feats.cols();
  const Index cap = key_sets.cols();
  const Index dh = params.wq[0].cols();
  const int heads = params.heads();
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  if (key_sets.rows() != m)
    throw std::invalid_argument("cross_attention: one key set per query required");
  if (params.wq[0].rows() != d)
    throw std::invalid_argument("cross_attention: feature width does not match the weights");
  if (additive_mask && (additive_mask->rows() != m || additive_mask->cols() != cap))
    throw std::invalid_argument("cross_attention: additive mask shape mismatch");

  std::vector<Index> key_ids(static_cast<size_t>(m * cap));
  std::vector<Index> query_ids(static_cast<size_t>(m * cap));
  BoolMatrix valid(m, cap);
  for (Index q = 0; q < m; ++q) {
    for (Index j = 0; j < cap; ++j) {
      const Index r = key_sets(q, j);
      key_ids[static_cast<size_t>(q * cap + j)] = r;
      query_ids[static_cast<size_t>(q * cap + j)] = q;
      valid(q, j) = r >= 0;
    }
  }

  CrossAttnResult res;
  res.valid = valid;
  Tensor additive;
  if (additive_mask) additive = Tensor::constant(*additive_mask);
  Tensor head_sum, out;
  for (int h = 0; h < heads; ++h) {
    Tensor qp = matmul(feats, params.wq[static_cast<size_t>(h)]);
    Tensor kp = matmul(feats, params.wk[static_cast<size_t>(h)]);
    Tensor vp = matmul(feats, params.wv[static_cast<size_t>(h)]);
    if (macs) macs->proj += 3ull * static_cast<std::uint64_t>(m * d * dh);

    std::vector<Tensor> score_parts;
    for (Index q0 = 0; q0 < m; q0 += kQueryBlock) {
      const Index qn = std::min(kQueryBlock, m - q0);
      std::vector<Index> kid(key_ids.begin() + q0 * cap, key_ids.begin() + (q0 + qn) * cap);
      std::vector<Index> rep(query_ids.begin() + q0 * cap, query_ids.begin() + (q0 + qn) * cap);
      Tensor qg = gather_rows(qp, rep);
      Tensor kg = gather_rows(kp, kid);
      score_parts.push_back(row_sum(mul(qg, kg)));
    }
    Tensor s = reshape(scale(concat_rows(score_parts), att_scale), {m, cap});
    if (macs) macs->score += static_cast<std::uint64_t>(m * cap * dh);
    if (additive_mask) s = add(s, additive);
    RowSoftmax sm = softmax_rows(s, &valid);
    res.per_head.push_back(sm.probs);
    head_sum = h == 0 ? sm.probs : add(head_sum, sm.probs);

    Tensor p_flat = reshape(sm.probs, {m * cap, Index(1)});
    std::vector<Tensor> value_parts;
    for (Index q0 = 0; q0 < m; q0 += kQueryBlock) {
      const Index qn = std::min(kQueryBlock, m - q0);
      std::vector<Index> kid(key_ids.begin() + q0 * cap, key_ids.begin() + (q0 + qn) * cap);
      std::vector<Index> seg(static_cast<size_t>(qn * cap));
      for (Index i = 0; i < qn * cap; ++i) seg[static_cast<size_t>(i)] = i / cap;
      Tensor vg = gather_rows(vp, kid);
      Tensor weighted = mul_colwise(vg, slice_rows(p_flat, q0 * cap, qn * cap));
      value_parts.push_back(segment_sum(weighted, seg, qn));
    }
    Tensor hsum = concat_rows(value_parts);
    if (macs) macs->av += static_cast<std::uint64_t>(m * cap * dh);
    Tensor oh = matmul(hsum, params.wh[static_cast<size_t>(h)]);
    if (macs) macs->proj += static_cast<std::uint64_t>(m * dh * d);
    out = h == 0 ? oh : add(out, oh);
  }
  res.head_sum = head_sum;
  res.feats = out;
  return res;
}

Tensor lepe(const SparseVoxelGrid& level0, const Tensor& feats, const SubmConvParams& params) {
  return subm_conv(level0, feats, params);
}

Tensor ffn(const Tensor& x, const OtbParams& params) {
  Tensor h = relu(add_rowwise(matmul(x, params.ffn_w1), params.ffn_b1));
  return add_rowwise(matmul(h, params.ffn_w2), params.ffn_b2);
}

std::pair<Index, Index> exhaustive_selection(const FeaturePyramid& pyramid) {
  Index top = 0;
  for (const auto& level : pyramid.levels) top = std::max(top, level.size());
  return {top, top};
}

OtbResult otb_forward(const FeaturePyramid& pyramid, const OtbParams& params,
                      const OtbOptions& options) {
  const int height = pyramid.height();
  if (params.height() != height)
    throw std::invalid_argument("otb_forward: params sized for a different pyramid height");
  if (options.mode == SelectMode::Train && !options.rng)
    throw std::invalid_argument("otb_forward: train mode needs an rng");

  // per-level inputs: SAPE-translated features and mean-aggregated scores
  std::vector<Tensor> feats(static_cast<size_t>(height));
  std::vector<Vector> level_scores(static_cast<size_t>(height));
  for (int n = 0; n < height; ++n) {
    Tensor f = pyramid.levels[static_cast<size_t>(n)].features();
    if (options.seg_scores) {
      LevelStats stats = level_stats(pyramid, n, *options.seg_scores);
      f = sape(f, stats.centers, stats.scores, params.levels[static_cast<size_t>(n)].sape_w);
      level_scores[static_cast<size_t>(n)] = std::move(stats.scores);
    }
    feats[static_cast<size_t>(n)] = std::move(f);
  }

  OtbResult res;
  res.level_feats.resize(static_cast<size_t>(height));
  res.selections.resize(static_cast<size_t>(height));
  res.key_sets.resize(static_cast<size_t>(height));

  // top of the pyramid: dense self-attention and first selection
  const int top = height - 1;
  const SparseVoxelGrid& top_grid = pyramid.levels[static_cast<size_t>(top)];
  DenseTokenBatch batch =
      to_dense_batch(top_grid, feats[static_cast<size_t>(top)], options.top_pad);
  std::vector<Matrix> top_masks;
  if (options.seg_scores) {
    for (Index b = 0; b < batch.scenes; ++b) {
      Vector slot_scores = Vector::Zero(batch.m_max);
      for (Index s = 0; s < batch.m_max; ++s) {
        const Index row = batch.row_map[static_cast<size_t>(b * batch.m_max + s)];
        if (row >= 0) slot_scores(s) = level_scores[static_cast<size_t>(top)](row);
      }
      top_masks.push_back(sam_mask(slot_scores, slot_scores, options.sam));
    }
  }
  MhsaTopResult top_res = mhsa_top(batch, params.levels[static_cast<size_t>(top)],
                                   options.seg_scores ? &top_masks : nullptr, options.macs);
  res.level_feats[static_cast<size_t>(top)] = top_res.feats;

  IndexMatrix top_sel = IndexMatrix::Constant(top_grid.size(), params.k, -1);
  for (Index b = 0; b < batch.scenes; ++b) {
    const BoolMatrix keymask = column_validity(batch, b);
    IndexMatrix sel = topk_select(top_res.head_sum[static_cast<size_t>(b)].mat(), &keymask,
                                  params.k, options.mode, params.tau, options.rng);
    for (Index s = 0; s < batch.m_max; ++s) {
      const Index row = batch.row_map[static_cast<size_t>(b * batch.m_max + s)];
      if (row < 0) continue;
      for (Index t = 0; t < params.k; ++t) {
        const Index col = sel(s, t);
        top_sel(row, t) =
            col >= 0 ? batch.row_map[static_cast<size_t>(b * batch.m_max + col)] : -1;
      }
    }
  }
  res.selections[static_cast<size_t>(top)] = std::move(top_sel);

  // walk down: sample octants from the level above, cross-attend, reselect
  for (int n = top - 1; n >= 0; --n) {
    const IndexBank& bank = pyramid.banks[static_cast<size_t>(n)];
    const Index m_n = pyramid.levels[static_cast<size_t>(n)].size();
    IndexMatrix parent_sets = sample_octants(res.selections[static_cast<size_t>(n + 1)],
                                             bank, params.K, options.mode, options.rng);
    IndexMatrix keys(m_n, params.K);
    for (Index q = 0; q < m_n; ++q)
      keys.row(q) = parent_sets.row(bank.child_to_parent[static_cast<size_t>(q)]);

    Matrix sam_additive;
    if (options.seg_scores) {
      const Vector& s_n = level_scores[static_cast<size_t>(n)];
      sam_additive = Matrix::Zero(m_n, params.K);
      for (Index q = 0; q < m_n; ++q) {
        if (s_n(q) < options.sam.delta_q) continue;  // background query: unmasked
        for (Index j = 0; j < params.K; ++j) {
          const Index r = keys(q, j);
          if (r >= 0 && s_n(r) < options.sam.delta_k) sam_additive(q, j) = -options.sam.gamma;
        }
      }
    }
    CrossAttnResult ca = cross_attention(feats[static_cast<size_t>(n)], keys,
                                         params.levels[static_cast<size_t>(n)],
                                         options.seg_scores ? &sam_additive : nullptr,
                                         options.macs);
    res.level_feats[static_cast<size_t>(n)] = ca.feats;
    IndexMatrix sel = topk_select(ca.head_sum.mat(), &ca.valid, params.k, options.mode,
                                  params.tau, options.rng);
    IndexMatrix level_sel = IndexMatrix::Constant(m_n, params.k, -1);
    for (Index q = 0; q < m_n; ++q)
      for (Index t = 0; t < params.k; ++t)
        if (sel(q, t) >= 0) level_sel(q, t) = keys(q, sel(q, t));
    res.selections[static_cast<size_t>(n)] = std::move(level_sel);
    res.key_sets[static_cast<size_t>(n)] = std::move(keys);
  }

  // multi-level concat (top first), FC, LePE residual, FFN with BN residual
  std::vector<Tensor> upsampled;
  for (int n = top; n >= 0; --n)
    upsampled.push_back(upsample(pyramid, n, res.level_feats[static_cast<size_t>(n)]));
  Tensor cat = concat_cols(upsampled);
  Tensor fc = add_rowwise(matmul(cat, params.fc_w), params.fc_b);
  Tensor ftilde = add(fc, lepe(pyramid.levels[0], feats[0], params.lepe));
  Tensor out = add(
      batch_norm(ffn(ftilde, params), params.bn_gamma, params.bn_beta, params.pyramid.bn_eps),
      ftilde);
  res.output = std::move(out);
  return res;
}

}  // namespace octattn
