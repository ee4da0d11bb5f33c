#pragma once

#include "octattn/pyramid.hpp"

#include <optional>

namespace octattn {

struct SegParams {
  SubmConvParams conv;  // d -> d
  Tensor w;             // d x 1
  Tensor b;             // 1
};

SegParams make_seg_params(Rng& rng, Index d);

struct SegScores {
  Tensor scores;  // m x 1, in (0, 1)
  std::optional<std::vector<std::uint8_t>> labels;
};

// subm conv + ReLU + linear + sigmoid foreground head
SegScores seg_branch(const SparseVoxelGrid& grid, const SegParams& params);

struct Box {
  int scene_id = 0;
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() < max.array()).all();
  }
};

// CSV: scene_id,xmin,ymin,zmin,xmax,ymax,zmax
std::vector<Box> load_boxes(const std::string& path);
void save_boxes(const std::string& path, const std::vector<Box>& boxes);

// foreground iff the voxel center lies in a same-scene box
// (min-inclusive, max-exclusive)
std::vector<std::uint8_t> label_voxels(const SparseVoxelGrid& grid,
                                       const std::vector<Box>& boxes);

// mean over voxels of -alpha_t (1 - p_t)^gamma ln(p_t); scores clamped to
// [1e-7, 1 - 1e-7] before the log
Tensor focal_loss(const Tensor& scores, const std::vector<std::uint8_t>& labels,
                  Scalar alpha = 0.25, Scalar gamma = 2.0);

// Semantic-aware positional embedding: {x, y, z, score | f} through one
// bias-free linear map. sape() feeds the concatenation; sape_split() is the
// algebraically identical two-term form sharing the same weight partition.
Tensor sape(const Tensor& features, const Matrix& centers, const Vector& scores,
            const Tensor& w);
Tensor sape_split(const Tensor& features, const Matrix& centers, const Vector& scores,
                  const Tensor& w);

struct SamConfig {
  Scalar delta_q = 0.05;
  Scalar delta_k = 0.2;
  Scalar gamma = 10000;  // additive suppression magnitude
};

// Additive pre-softmax mask. Foreground queries (S_q >= delta_q) get -gamma
// on keys below delta_k; background-query rows stay fully unmasked.
Matrix sam_mask(const Vector& score_q, const Vector& score_k, const SamConfig& cfg);

}  // namespace octattn
