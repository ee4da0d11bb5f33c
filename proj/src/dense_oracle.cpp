#include "octattn/dense_oracle.hpp"

#include <array>
#include <map>
#include <stdexcept>

namespace octattn::oracle {

namespace {

using Key = std::array<std::int64_t, 4>;  // batch, x, y, z

Matrix self_attention(const Matrix& x, const LevelAttnParams& params) {
  const Index m = x.rows();
  const Index d = x.cols();
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Matrix out = Matrix::Zero(m, d);
  for (size_t h = 0; h < params.wq.size(); ++h) {
    const Matrix q = x * params.wq[h].mat();
    const Matrix k = x * params.wk[h].mat();
    const Matrix v = x * params.wv[h].mat();
    Matrix s = q * k.transpose() * inv_sqrt_d;
    for (Index i = 0; i < m; ++i) {
      const Scalar mx = s.row(i).maxCoeff();
      Eigen::RowVectorXd e = (s.row(i).array() - mx).exp();
      s.row(i) = e / e.sum();
    }
    out += s * v * params.wh[h].mat();
  }
  return out;
}

}  // namespace

DenseReference dense_reference(const FeaturePyramid& pyramid, const OtbParams& params) {
  const int height = pyramid.height();
  if (params.height() != height)
    throw std::invalid_argument("dense_reference: params sized for a different height");
  const SparseVoxelGrid& base = pyramid.levels[0];
  const Index m0 = base.size();
  const Index d = params.model_dim();

  DenseReference ref;
  ref.level_feats.resize(static_cast<size_t>(height));

  // full self-attention per scene at every level
  for (int n = 0; n < height; ++n) {
    const SparseVoxelGrid& level = pyramid.levels[static_cast<size_t>(n)];
    const Matrix feats = level.features().mat();
    Matrix out = Matrix::Zero(level.size(), d);
    for (std::int32_t scene : level.scene_ids()) {
      const auto rows = level.scene_rows(scene);
      Matrix x(static_cast<Index>(rows.size()), d);
      for (size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Index>(i)) = feats.row(rows[i]);
      const Matrix y = self_attention(x, params.levels[static_cast<size_t>(n)]);
      for (size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) = y.row(static_cast<Index>(i));
    }
    ref.level_feats[static_cast<size_t>(n)] = std::move(out);
  }

  // upsample by coarse-coordinate lookup, concat top level first
  Matrix cat(m0, static_cast<Index>(height) * d);
  for (int n = height - 1; n >= 0; --n) {
    const Index column = static_cast<Index>(height - 1 - n) * d;
    if (n == 0) {
      cat.middleCols(column, d) = ref.level_feats[0];
      continue;
    }
    const SparseVoxelGrid& level = pyramid.levels[static_cast<size_t>(n)];
    std::map<Key, Index> lookup;
    for (Index r = 0; r < level.size(); ++r)
      lookup[{level.batch_ids()[static_cast<size_t>(r)], level.coords()(r, 0),
              level.coords()(r, 1), level.coords()(r, 2)}] = r;
    for (Index i = 0; i < m0; ++i) {
      const Key key{base.batch_ids()[static_cast<size_t>(i)], base.coords()(i, 0) >> n,
                    base.coords()(i, 1) >> n, base.coords()(i, 2) >> n};
      auto it = lookup.find(key);
      if (it == lookup.end()) throw std::logic_error("dense_reference: missing ancestor");
      cat.row(i).segment(column, d) = ref.level_feats[static_cast<size_t>(n)].row(it->second);
    }
  }

  Matrix ftilde = cat * params.fc_w.mat();
  ftilde.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(params.fc_b.array().data(), d);

  // LePE: 3x3x3 submanifold conv over the level-0 features
  {
    const Matrix feats = base.features().mat();
    std::map<Key, Index> lookup;
    for (Index r = 0; r < m0; ++r)
      lookup[{base.batch_ids()[static_cast<size_t>(r)], base.coords()(r, 0),
              base.coords()(r, 1), base.coords()(r, 2)}] = r;
    const auto& kernel = params.lepe.kernel.array();
    Matrix conv(m0, d);
    conv.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(params.lepe.bias.array().data(), d);
    for (Index v = 0; v < m0; ++v) {
      for (int o = 0; o < 27; ++o) {
        const int dx = o / 9 - 1, dy = (o / 3) % 3 - 1, dz = o % 3 - 1;
        const Key key{base.batch_ids()[static_cast<size_t>(v)], base.coords()(v, 0) + dx,
                      base.coords()(v, 1) + dy, base.coords()(v, 2) + dz};
        auto it = lookup.find(key);
        if (it == lookup.end()) continue;
        Eigen::Map<const Matrix> block(kernel.data() + o * d * d, d, d);
        conv.row(v) += feats.row(it->second) * block;
      }
    }
    ftilde += conv;
  }

  // FFN then BN with the residual
  Matrix hidden = ftilde * params.ffn_w1.mat();
  hidden.rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(params.ffn_b1.array().data(), 2 * d);
  hidden = hidden.cwiseMax(0.0);
  Matrix ffn_out = hidden * params.ffn_w2.mat();
  ffn_out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(params.ffn_b2.array().data(), d);

  Matrix normed(m0, d);
  for (Index c = 0; c < d; ++c) {
    const Scalar mu = ffn_out.col(c).mean();
    const Scalar var = (ffn_out.col(c).array() - mu).square().sum() / static_cast<Scalar>(m0);
    const Scalar inv = Scalar(1) / std::sqrt(var + params.pyramid.bn_eps);
    normed.col(c) = (ffn_out.col(c).array() - mu) * inv * params.bn_gamma.array()(c) +
                    params.bn_beta.array()(c);
  }
  ref.output = normed + ftilde;
  return ref;
}

}  // namespace octattn::oracle
