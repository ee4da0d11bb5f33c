#pragma once

#include "octattn/tensor.hpp"

namespace octattn {

class SparseVoxelGrid;

// 3x3x3 submanifold convolution weights. Offsets run over {-1,0,1}^3 in
// row-major order; slice o of the kernel is the c_in x c_out block applied
// to the neighbor at that offset.
struct SubmConvParams {
  Tensor kernel;  // shape {3,3,3,c_in,c_out}
  Tensor bias;    // shape {c_out}

  Index c_in() const { return kernel.dim(3); }
  Index c_out() const { return kernel.dim(4); }
};

SubmConvParams make_subm_conv_params(Rng& rng, Index c_in, Index c_out);

// identity kernel: center tap is the identity map, all other taps zero
SubmConvParams identity_subm_conv_params(Index channels);

// Convolution evaluated only at the non-empty sites, reading only non-empty
// neighbors of the same scene; the sparsity pattern is preserved.
Tensor subm_conv(const SparseVoxelGrid& grid, const Tensor& features,
                 const SubmConvParams& params);
SparseVoxelGrid subm_conv(const SparseVoxelGrid& grid, const SubmConvParams& params);

}  // namespace octattn
