#pragma once

#include "octattn/voxel_grid.hpp"

namespace octattn {

// Bidirectional child/parent row maps between two adjacent pyramid levels.
// Children of one parent are listed in coord-lexicographic order and never
// exceed 8 per scene-parent.
struct IndexBank {
  std::vector<Index> child_to_parent;
  std::vector<std::vector<Index>> parent_to_children;
};

struct PyramidParams {
  std::vector<Tensor> bn_gamma;  // one per level
  std::vector<Tensor> bn_beta;
  Scalar bn_eps = 1e-5;
};

PyramidParams make_pyramid_params(Index d, int levels);

struct FeaturePyramid {
  std::vector<SparseVoxelGrid> levels;  // [0] = finest
  std::vector<IndexBank> banks;         // banks[n] maps level n <-> n+1
  std::vector<Scalar> down_ratio;       // observed m_n / m_{n+1}

  int height() const { return static_cast<int>(levels.size()); }
  // composed child->parent chain: level-0 row -> level-n row
  std::vector<Index> ancestors_at(int n) const;
};

// Level n: coords = floor(level-0 coords / 2^n) deduplicated, features =
// BN(channelwise max over the level-0 rows sharing the coarse coord).
FeaturePyramid build_pyramid(const SparseVoxelGrid& grid, int height,
                             const PyramidParams& params);

// broadcast level-n rows back onto the level-0 rows they cover
Tensor upsample(const FeaturePyramid& pyramid, int n, const Tensor& level_feats);

// Mean position / mean segmentation score of the level-0 members of every
// level-n voxel; plain values, not tracked.
struct LevelStats {
  Matrix centers;  // m_n x 3, meters
  Vector scores;   // m_n
};
LevelStats level_stats(const FeaturePyramid& pyramid, int n, const Vector& level0_scores);

}  // namespace octattn
