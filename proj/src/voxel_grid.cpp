#include "octattn/voxel_grid.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace octattn {

namespace {

constexpr std::int32_t kCoordLimit = 1 << 16;

std::uint64_t pack_key(std::int32_t batch, std::int32_t x, std::int32_t y, std::int32_t z) {
  return (static_cast<std::uint64_t>(batch) << 48) | (static_cast<std::uint64_t>(x) << 32) |
         (static_cast<std::uint64_t>(y) << 16) | static_cast<std::uint64_t>(z);
}

bool parse_scalar(const std::string& tok, Scalar& out) {
  try {
    size_t used = 0;
    out = std::stod(tok, &used);
    while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used]))) ++used;
    return used == tok.size();
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, ',')) fields.push_back(tok);
  return fields;
}

}  // namespace

PointCloud load_points(const std::string& path, PointFormat format) {
  PointCloud cloud;
  if (format == PointFormat::BinF32x4) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    if (bytes.size() % 16 != 0)
      throw std::runtime_error(path + ": size " + std::to_string(bytes.size()) +
                               " is not a multiple of 16 bytes");
    const size_t n = bytes.size() / 16;
    cloud.points.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      float f[4];
      std::memcpy(f, bytes.data() + i * 16, 16);
      cloud.points.push_back({f[0], f[1], f[2], f[3]});
    }
    return cloud;
  }

  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  int line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv(line);
    Scalar probe;
    if (first && !fields.empty() && !parse_scalar(fields[0], probe)) {
      first = false;  // header row
      continue;
    }
    first = false;
    if (fields.size() != 3 && fields.size() != 4)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 3 or 4 columns, got " +
                               std::to_string(fields.size()));
    Point p;
    Scalar v[4] = {0, 0, 0, 0};
    for (size_t c = 0; c < fields.size(); ++c) {
      if (!parse_scalar(fields[c], v[c]))
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": malformed value '" + fields[c] + "'");
    }
    p.x = v[0];
    p.y = v[1];
    p.z = v[2];
    p.intensity = fields.size() == 4 ? v[3] : 0;
    cloud.points.push_back(p);
  }
  return cloud;
}

SparseVoxelGrid::SparseVoxelGrid(CoordMatrix coords, std::vector<std::int32_t> batch_ids,
                                 Tensor features, Vec3 voxel_size, Vec3 range_min,
                                 Vec3 range_max)
    : coords_(std::move(coords)),
      batch_ids_(std::move(batch_ids)),
      features_(std::move(features)),
      voxel_size_(voxel_size),
      range_min_(range_min),
      range_max_(range_max) {
  const Index m = coords_.rows();
  if (static_cast<Index>(batch_ids_.size()) != m)
    throw std::invalid_argument("grid: one batch id per voxel required");
  if (features_.rows() != m)
    throw std::invalid_argument("grid: one feature row per voxel required");
  const Eigen::Vector3i dims = grid_dims();
  index_.reserve(static_cast<size_t>(m) * 2);
  for (Index i = 0; i < m; ++i) {
    for (int a = 0; a < 3; ++a) {
      if (coords_(i, a) < 0 || coords_(i, a) >= dims(a) || coords_(i, a) >= kCoordLimit)
        throw std::invalid_argument("grid: coord outside the range/voxel_size bounds");
    }
    if (batch_ids_[static_cast<size_t>(i)] < 0 ||
        batch_ids_[static_cast<size_t>(i)] >= kCoordLimit)
      throw std::invalid_argument("grid: batch id out of range");
    auto key = pack_key(batch_ids_[static_cast<size_t>(i)], coords_(i, 0), coords_(i, 1),
                        coords_(i, 2));
    if (!index_.emplace(key, i).second)
      throw std::invalid_argument("grid: duplicate (batch, coord) pair");
  }
}

Index SparseVoxelGrid::find(std::int32_t batch, std::int32_t x, std::int32_t y,
                            std::int32_t z) const {
  if (x < 0 || y < 0 || z < 0 || x >= kCoordLimit || y >= kCoordLimit || z >= kCoordLimit)
    return -1;
  auto it = index_.find(pack_key(batch, x, y, z));
  return it == index_.end() ? -1 : it->second;
}

Vec3 SparseVoxelGrid::center(Index row) const {
  Vec3 c(coords_(row, 0) + 0.5, coords_(row, 1) + 0.5, coords_(row, 2) + 0.5);
  return range_min_ + c.cwiseProduct(voxel_size_);
}

Eigen::Vector3i SparseVoxelGrid::grid_dims() const {
  Eigen::Vector3i dims;
  for (int a = 0; a < 3; ++a)
    dims(a) = static_cast<int>(std::ceil((range_max_(a) - range_min_(a)) / voxel_size_(a)));
  return dims;
}

std::vector<std::int32_t> SparseVoxelGrid::scene_ids() const {
  std::vector<std::int32_t> ids(batch_ids_);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<Index> SparseVoxelGrid::scene_rows(std::int32_t id) const {
  std::vector<Index> rows;
  for (Index i = 0; i < size(); ++i)
    if (batch_ids_[static_cast<size_t>(i)] == id) rows.push_back(i);
  return rows;
}

SparseVoxelGrid SparseVoxelGrid::with_features(Tensor features) const {
  return SparseVoxelGrid(coords_, batch_ids_, std::move(features), voxel_size_, range_min_,
                         range_max_);
}

SparseVoxelGrid voxelize(const PointCloud& cloud, const Vec3& voxel_size,
                         const Vec3& range_min, const Vec3& range_max,
                         VoxelizeReport* report) {
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size(a) > 0)) throw std::invalid_argument("voxelize: voxel_size must be > 0");
    if (!(range_min(a) < range_max(a)))
      throw std::invalid_argument("voxelize: range_min must be below range_max");
  }
  struct Cell {
    Eigen::Vector3i coord;
    Vec3 sum_xyz = Vec3::Zero();
    Scalar sum_intensity = 0;
    Index count = 0;
  };
  std::unordered_map<std::uint64_t, Cell> cells;
  VoxelizeReport rep;
  for (const Point& p : cloud.points) {
    rep.points_in++;
    Vec3 pos(p.x, p.y, p.z);
    if ((pos.array() < range_min.array()).any() || (pos.array() >= range_max.array()).any()) {
      rep.points_dropped++;
      continue;
    }
    rep.points_kept++;
    Eigen::Vector3i c;
    for (int a = 0; a < 3; ++a)
      c(a) = static_cast<int>(std::floor((pos(a) - range_min(a)) / voxel_size(a)));
    auto& cell = cells[pack_key(cloud.scene_id, c(0), c(1), c(2))];
    cell.coord = c;
    cell.sum_xyz += pos;
    cell.sum_intensity += p.intensity;
    cell.count++;
  }
  std::vector<const Cell*> ordered;
  ordered.reserve(cells.size());
  for (const auto& kv : cells) ordered.push_back(&kv.second);
  std::sort(ordered.begin(), ordered.end(), [](const Cell* a, const Cell* b) {
    return std::lexicographical_compare(a->coord.data(), a->coord.data() + 3,
                                        b->coord.data(), b->coord.data() + 3);
  });
  const Index m = static_cast<Index>(ordered.size());
  CoordMatrix coords(m, 3);
  Matrix feats(m, 4);
  std::vector<std::int32_t> batch(static_cast<size_t>(m), cloud.scene_id);
  for (Index i = 0; i < m; ++i) {
    const Cell& cell = *ordered[static_cast<size_t>(i)];
    coords.row(i) = cell.coord.transpose();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(cell.count);
    feats(i, 0) = cell.sum_xyz(0) * inv;
    feats(i, 1) = cell.sum_xyz(1) * inv;
    feats(i, 2) = cell.sum_xyz(2) * inv;
    feats(i, 3) = cell.sum_intensity * inv;
  }
  if (report) *report = rep;
  return SparseVoxelGrid(std::move(coords), std::move(batch), Tensor::constant(feats),
                         voxel_size, range_min, range_max);
}

SparseVoxelGrid merge_scenes(const std::vector<SparseVoxelGrid>& scenes) {
  if (scenes.empty()) throw std::invalid_argument("merge_scenes: no scenes");
  std::vector<const SparseVoxelGrid*> order;
  for (const auto& g : scenes) {
    if (g.size() == 0) throw std::invalid_argument("merge_scenes: empty scene");
    if (g.scene_ids().size() != 1)
      throw std::invalid_argument("merge_scenes: each input must hold exactly one scene");
    order.push_back(&g);
  }
  std::sort(order.begin(), order.end(), [](const SparseVoxelGrid* a, const SparseVoxelGrid* b) {
    return a->batch_ids().front() < b->batch_ids().front();
  });
  for (size_t i = 1; i < order.size(); ++i)
    if (order[i]->batch_ids().front() == order[i - 1]->batch_ids().front())
      throw std::invalid_argument("merge_scenes: duplicate scene id");
  Index total = 0;
  for (const auto* g : order) total += g->size();
  CoordMatrix coords(total, 3);
  std::vector<std::int32_t> batch;
  batch.reserve(static_cast<size_t>(total));
  std::vector<Tensor> feats;
  Index at = 0;
  for (const auto* g : order) {
    coords.middleRows(at, g->size()) = g->coords();
    batch.insert(batch.end(), g->batch_ids().begin(), g->batch_ids().end());
    feats.push_back(g->features());
    at += g->size();
  }
  const auto& ref = *order.front();
  return SparseVoxelGrid(std::move(coords), std::move(batch), concat_rows(feats),
                         ref.voxel_size(), ref.range_min(), ref.range_max());
}

SparseVoxelGrid max_pool2(const SparseVoxelGrid& grid) {
  const Index m = grid.size();
  struct Parent {
    std::int32_t batch;
    Eigen::Vector3i coord;
  };
  std::unordered_map<std::uint64_t, Index> seen;
  std::vector<Parent> parents;
  std::vector<Index> seg(static_cast<size_t>(m));
  for (Index i = 0; i < m; ++i) {
    Eigen::Vector3i c(grid.coords()(i, 0) / 2, grid.coords()(i, 1) / 2, grid.coords()(i, 2) / 2);
    auto key = pack_key(grid.batch_ids()[static_cast<size_t>(i)], c(0), c(1), c(2));
    auto [it, fresh] = seen.emplace(key, static_cast<Index>(parents.size()));
    if (fresh) parents.push_back({grid.batch_ids()[static_cast<size_t>(i)], c});
    seg[static_cast<size_t>(i)] = it->second;
  }
  // canonical (scene, coord) order
  std::vector<Index> perm(parents.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Index>(i);
  std::sort(perm.begin(), perm.end(), [&](Index a, Index b) {
    const Parent& pa = parents[static_cast<size_t>(a)];
    const Parent& pb = parents[static_cast<size_t>(b)];
    if (pa.batch != pb.batch) return pa.batch < pb.batch;
    return std::lexicographical_compare(pa.coord.data(), pa.coord.data() + 3,
                                        pb.coord.data(), pb.coord.data() + 3);
  });
  std::vector<Index> rank(parents.size());
  for (size_t i = 0; i < perm.size(); ++i) rank[static_cast<size_t>(perm[i])] = static_cast<Index>(i);
  for (auto& s : seg) s = rank[static_cast<size_t>(s)];
  const Index n_parent = static_cast<Index>(parents.size());
  CoordMatrix coords(n_parent, 3);
  std::vector<std::int32_t> batch(static_cast<size_t>(n_parent));
  for (size_t i = 0; i < perm.size(); ++i) {
    const Parent& p = parents[static_cast<size_t>(perm[i])];
    coords.row(static_cast<Index>(i)) = p.coord.transpose();
    batch[i] = p.batch;
  }
  Tensor pooled = segment_max(grid.features(), seg, n_parent).values;
  return SparseVoxelGrid(std::move(coords), std::move(batch), std::move(pooled),
                         grid.voxel_size() * 2, grid.range_min(), grid.range_max());
}

DenseTokenBatch to_dense_batch(const SparseVoxelGrid& grid, const Tensor& features,
                               Index m_max_override) {
  DenseTokenBatch out;
  auto ids = grid.scene_ids();
  out.scenes = static_cast<Index>(ids.size());
  out.scene_of_batch = ids;
  std::vector<std::vector<Index>> per_scene;
  Index m_max = 0;
  for (auto id : ids) {
    auto rows = grid.scene_rows(id);
    std::sort(rows.begin(), rows.end(), [&](Index a, Index b) {
      return std::lexicographical_compare(
          grid.coords().row(a).data(), grid.coords().row(a).data() + 3,
          grid.coords().row(b).data(), grid.coords().row(b).data() + 3);
    });
    m_max = std::max(m_max, static_cast<Index>(rows.size()));
    per_scene.push_back(std::move(rows));
  }
  if (m_max_override >= 0) {
    if (m_max_override < m_max)
      throw std::invalid_argument("to_dense_batch: override below the max scene size");
    m_max = m_max_override;
  }
  out.m_max = m_max;
  out.valid.assign(static_cast<size_t>(out.scenes * m_max), 0);
  out.row_map.assign(static_cast<size_t>(out.scenes * m_max), -1);
  out.grid_to_slot.assign(static_cast<size_t>(grid.size()), -1);
  for (Index b = 0; b < out.scenes; ++b) {
    const auto& rows = per_scene[static_cast<size_t>(b)];
    for (size_t s = 0; s < rows.size(); ++s) {
      const Index slot = b * m_max + static_cast<Index>(s);
      out.valid[static_cast<size_t>(slot)] = 1;
      out.row_map[static_cast<size_t>(slot)] = rows[s];
      out.grid_to_slot[static_cast<size_t>(rows[s])] = slot;
    }
  }
  out.tokens = gather_rows(features, out.row_map);
  return out;
}

DenseTokenBatch to_dense_batch(const SparseVoxelGrid& grid, Index m_max_override) {
  return to_dense_batch(grid, grid.features(), m_max_override);
}

Tensor dense_to_compact(const DenseTokenBatch& batch, const Tensor& dense_rows) {
  return gather_rows(dense_rows, batch.grid_to_slot);
}

EmbedParams make_embed_params(Rng& rng, Index d_raw, Index d) {
  EmbedParams p;
  p.conv = make_subm_conv_params(rng, d_raw, d_raw);
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(d_raw));
  p.w = Tensor::constant(uniform_matrix(rng, d_raw, d, bound));
  p.b = Tensor::constant(uniform_matrix(rng, 1, d, bound));
  return p;
}

SparseVoxelGrid embed(const SparseVoxelGrid& grid, const EmbedParams& params) {
  Tensor conv = subm_conv(grid, grid.features(), params.conv);
  Tensor out = relu(add_rowwise(matmul(conv, params.w), params.b));
  return grid.with_features(std::move(out));
}

}  // namespace octattn
