#pragma once

#include "octattn/sparse_conv.hpp"
#include "octattn/tensor.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace octattn {

struct Point {
  Scalar x = 0, y = 0, z = 0;
  Scalar intensity = 0;
};

struct PointCloud {
  std::vector<Point> points;
  int scene_id = 0;
};

enum class PointFormat { Csv, BinF32x4 };

// CSV: x,y,z[,intensity], optional header. Binary: little-endian f32
// quadruples, no header.
PointCloud load_points(const std::string& path, PointFormat format);

struct VoxelizeReport {
  Index points_in = 0;
  Index points_kept = 0;
  Index points_dropped = 0;
};

// Batch of non-empty voxels. Rows are (batch_id, integer coord, feature);
// immutable after construction, with a coord hash for neighbor lookup.
class SparseVoxelGrid {
 public:
  SparseVoxelGrid() = default;
  SparseVoxelGrid(CoordMatrix coords, std::vector<std::int32_t> batch_ids,
                  Tensor features, Vec3 voxel_size, Vec3 range_min, Vec3 range_max);

  Index size() const { return coords_.rows(); }
  Index feature_dim() const { return features_.cols(); }
  const CoordMatrix& coords() const { return coords_; }
  const std::vector<std::int32_t>& batch_ids() const { return batch_ids_; }
  const Tensor& features() const { return features_; }
  const Vec3& voxel_size() const { return voxel_size_; }
  const Vec3& range_min() const { return range_min_; }
  const Vec3& range_max() const { return range_max_; }

  // row of (batch, coord), or -1
  Index find(std::int32_t batch, std::int32_t x, std::int32_t y, std::int32_t z) const;

  Vec3 center(Index row) const;
  Eigen::Vector3i grid_dims() const;

  std::vector<std::int32_t> scene_ids() const;          // sorted, distinct
  std::vector<Index> scene_rows(std::int32_t id) const; // rows of one scene

  SparseVoxelGrid with_features(Tensor features) const;

 private:
  CoordMatrix coords_;
  std::vector<std::int32_t> batch_ids_;
  Tensor features_;
  Vec3 voxel_size_ = Vec3::Ones();
  Vec3 range_min_ = Vec3::Zero();
  Vec3 range_max_ = Vec3::Ones();
  std::unordered_map<std::uint64_t, Index> index_;
};

// coord = floor((p - range_min) / voxel_size); out-of-range points dropped;
// per-voxel raw feature = mean (x, y, z, intensity) of member points
SparseVoxelGrid voxelize(const PointCloud& cloud, const Vec3& voxel_size,
                         const Vec3& range_min, const Vec3& range_max,
                         VoxelizeReport* report = nullptr);

// scenes with distinct ids stacked into one batched grid
SparseVoxelGrid merge_scenes(const std::vector<SparseVoxelGrid>& scenes);

// 2x coordinate-halving downsample with channelwise max pooling
SparseVoxelGrid max_pool2(const SparseVoxelGrid& grid);

// Padded per-scene token view. Slot order is coord-lexicographic within
// each scene; empty slots hold zero features.
struct DenseTokenBatch {
  Index scenes = 0;   // B
  Index m_max = 0;
  Tensor tokens;                     // (B*m_max) x d, padded with 0
  std::vector<std::uint8_t> valid;   // B*m_max
  std::vector<Index> row_map;        // slot -> grid row, -1 if empty
  std::vector<Index> grid_to_slot;   // grid row -> slot
  std::vector<std::int32_t> scene_of_batch;  // batch slot -> scene id
};

DenseTokenBatch to_dense_batch(const SparseVoxelGrid& grid, const Tensor& features,
                               Index m_max_override = -1);
DenseTokenBatch to_dense_batch(const SparseVoxelGrid& grid, Index m_max_override = -1);

// inverse of the padding: original grid-row order
Tensor dense_to_compact(const DenseTokenBatch& batch, const Tensor& dense_rows);

struct EmbedParams {
  SubmConvParams conv;  // d_raw -> d_raw
  Tensor w;             // d_raw x d
  Tensor b;             // d
};

EmbedParams make_embed_params(Rng& rng, Index d_raw, Index d);

// one submanifold conv then linear + ReLU into the working feature width
SparseVoxelGrid embed(const SparseVoxelGrid& grid, const EmbedParams& params);

}  // namespace octattn
