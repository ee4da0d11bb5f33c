#pragma once

#include "octattn/octattn.hpp"

namespace octattn::oracle {

// Straight-line reference for one OTB pass with nothing pruned: full
// self-attention at every pyramid level, then the identical upsample /
// concat / FC / LePE / FFN assembly. Plain Eigen arithmetic throughout,
// sharing only the pyramid and the weights with the implementation under
// test.
struct DenseReference {
  std::vector<Matrix> level_feats;  // compact attentive features per level
  Matrix output;                    // m0 x d
};

DenseReference dense_reference(const FeaturePyramid& pyramid, const OtbParams& params);

}  // namespace octattn::oracle
