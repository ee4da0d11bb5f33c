#include "octattn/sparse_conv.hpp"

#include "octattn/voxel_grid.hpp"

#include <stdexcept>

namespace octattn {

SubmConvParams make_subm_conv_params(Rng& rng, Index c_in, Index c_out) {
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(27 * c_in));
  Matrix k = uniform_matrix(rng, 27 * c_in, c_out, bound);
  SubmConvParams p;
  p.kernel = Tensor::constant({3, 3, 3, c_in, c_out},
                              Eigen::Map<const ArrayX>(k.data(), k.size()));
  p.bias = Tensor::constant({c_out}, ArrayX::Zero(c_out));
  return p;
}

SubmConvParams identity_subm_conv_params(Index channels) {
  Matrix k = Matrix::Zero(27 * channels, channels);
  k.middleRows(13 * channels, channels).setIdentity();  // center tap
  SubmConvParams p;
  p.kernel = Tensor::constant({3, 3, 3, channels, channels},
                              Eigen::Map<const ArrayX>(k.data(), k.size()));
  p.bias = Tensor::constant({channels}, ArrayX::Zero(channels));
  return p;
}

Tensor subm_conv(const SparseVoxelGrid& grid, const Tensor& features,
                 const SubmConvParams& params) {
  const Index m = grid.size();
  const Index ci = params.c_in();
  const Index co = params.c_out();
  if (features.rows() != m)
    throw std::invalid_argument("subm_conv: one feature row per voxel required");
  if (features.cols() != ci)
    throw std::invalid_argument("subm_conv: feature width does not match kernel c_in");
  if (params.bias.size() != co)
    throw std::invalid_argument("subm_conv: bias width does not match kernel c_out");

  // (out_row, in_row) pairs per offset, fixed iteration order
  std::vector<std::vector<std::pair<Index, Index>>> pairs(27);
  for (int o = 0; o < 27; ++o) {
    const int dx = o / 9 - 1, dy = (o / 3) % 3 - 1, dz = o % 3 - 1;
    auto& list = pairs[static_cast<size_t>(o)];
    for (Index v = 0; v < m; ++v) {
      const Index j = grid.find(grid.batch_ids()[static_cast<size_t>(v)],
                                grid.coords()(v, 0) + dx, grid.coords()(v, 1) + dy,
                                grid.coords()(v, 2) + dz);
      if (j >= 0) list.emplace_back(v, j);
    }
  }

  auto kd = params.kernel.data_handle();
  auto fd = features.data_handle();
  auto kernel_block = [kd, ci, co](int o) {
    return Eigen::Map<const Matrix>(kd->data() + o * ci * co, ci, co);
  };

  Matrix out(m, co);
  {
    Eigen::Map<const Eigen::RowVectorXd> bias(params.bias.array().data(), co);
    out.rowwise() = bias;
    Eigen::Map<const Matrix> in(fd->data(), m, ci);
    for (int o = 0; o < 27; ++o) {
      const auto& list = pairs[static_cast<size_t>(o)];
      if (list.empty()) continue;
      Matrix gathered(static_cast<Index>(list.size()), ci);
      for (size_t i = 0; i < list.size(); ++i) gathered.row(static_cast<Index>(i)) = in.row(list[i].second);
      Matrix contrib = gathered * kernel_block(o);
      for (size_t i = 0; i < list.size(); ++i) out.row(list[i].first) += contrib.row(static_cast<Index>(i));
    }
  }

  Tensor result = Tensor::constant(out);
  Tape* tape = nullptr;
  for (const Tensor* t : {&features, &params.kernel, &params.bias})
    if (t->tracked()) tape = t->tape();
  if (tape) {
    const int fn = features.tracked() ? features.node() : -1;
    const int kn = params.kernel.tracked() ? params.kernel.node() : -1;
    const int bn = params.bias.tracked() ? params.bias.node() : -1;
    auto pair_list = std::make_shared<const std::vector<std::vector<std::pair<Index, Index>>>>(
        std::move(pairs));
    result.bind(*tape, tape->push(m * co, [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, co);
      Eigen::Map<const Matrix> in(fd->data(), m, ci);
      if (bn >= 0) t.accumulate(bn, ArrayX(G.colwise().sum().transpose().array()));
      Matrix dfeat = fn >= 0 ? Matrix(Matrix::Zero(m, ci)) : Matrix();
      Matrix dkernel = kn >= 0 ? Matrix(Matrix::Zero(27 * ci, co)) : Matrix();
      for (int o = 0; o < 27; ++o) {
        const auto& list = (*pair_list)[static_cast<size_t>(o)];
        if (list.empty()) continue;
        Matrix gathered_g(static_cast<Index>(list.size()), co);
        for (size_t i = 0; i < list.size(); ++i)
          gathered_g.row(static_cast<Index>(i)) = G.row(list[i].first);
        if (fn >= 0) {
          Matrix dthis = gathered_g * kernel_block(o).transpose();
          for (size_t i = 0; i < list.size(); ++i)
            dfeat.row(list[i].second) += dthis.row(static_cast<Index>(i));
        }
        if (kn >= 0) {
          Matrix gathered_in(static_cast<Index>(list.size()), ci);
          for (size_t i = 0; i < list.size(); ++i)
            gathered_in.row(static_cast<Index>(i)) = in.row(list[i].second);
          dkernel.middleRows(o * ci, ci) += gathered_in.transpose() * gathered_g;
        }
      }
      if (fn >= 0) t.accumulate(fn, dfeat);
      if (kn >= 0) t.accumulate(kn, dkernel);
    }));
  }
  return result;
}

SparseVoxelGrid subm_conv(const SparseVoxelGrid& grid, const SubmConvParams& params) {
  return grid.with_features(subm_conv(grid, grid.features(), params));
}

}  // namespace octattn
