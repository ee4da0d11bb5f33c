#include "octattn/pyramid.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace octattn {

PyramidParams make_pyramid_params(Index d, int levels) {
  PyramidParams p;
  for (int n = 0; n < levels; ++n) {
    p.bn_gamma.push_back(Tensor::constant({d}, ArrayX::Ones(d)));
    p.bn_beta.push_back(Tensor::constant({d}, ArrayX::Zero(d)));
  }
  return p;
}

std::vector<Index> FeaturePyramid::ancestors_at(int n) const {
  std::vector<Index> anc(static_cast<size_t>(levels[0].size()));
  for (size_t i = 0; i < anc.size(); ++i) anc[i] = static_cast<Index>(i);
  for (int step = 0; step < n; ++step)
    for (auto& a : anc) a = banks[static_cast<size_t>(step)].child_to_parent[static_cast<size_t>(a)];
  return anc;
}

namespace {

struct LevelLayout {
  CoordMatrix coords;
  std::vector<std::int32_t> batch;
  std::vector<Index> seg_from_level0;  // level-0 row -> level-n row
};

LevelLayout coarsen(const SparseVoxelGrid& grid, int n) {
  struct Entry {
    std::int32_t batch;
    Eigen::Vector3i coord;
  };
  const Index m = grid.size();
  std::unordered_map<std::uint64_t, Index> seen;
  std::vector<Entry> entries;
  std::vector<Index> seg(static_cast<size_t>(m));
  for (Index i = 0; i < m; ++i) {
    if (grid.coords().row(i).minCoeff() < 0)
      throw std::logic_error("pyramid: negative coordinates are not supported");
    Eigen::Vector3i c(grid.coords()(i, 0) >> n, grid.coords()(i, 1) >> n,
                      grid.coords()(i, 2) >> n);
    const std::int32_t b = grid.batch_ids()[static_cast<size_t>(i)];
    const std::uint64_t key = (static_cast<std::uint64_t>(b) << 48) |
                              (static_cast<std::uint64_t>(c(0)) << 32) |
                              (static_cast<std::uint64_t>(c(1)) << 16) |
                              static_cast<std::uint64_t>(c(2));
    auto [it, fresh] = seen.emplace(key, static_cast<Index>(entries.size()));
    if (fresh) entries.push_back({b, c});
    seg[static_cast<size_t>(i)] = it->second;
  }
  std::vector<Index> perm(entries.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Index>(i);
  std::sort(perm.begin(), perm.end(), [&](Index a, Index b) {
    const Entry& ea = entries[static_cast<size_t>(a)];
    const Entry& eb = entries[static_cast<size_t>(b)];
    if (ea.batch != eb.batch) return ea.batch < eb.batch;
    return std::lexicographical_compare(ea.coord.data(), ea.coord.data() + 3,
                                        eb.coord.data(), eb.coord.data() + 3);
  });
  std::vector<Index> rank(entries.size());
  for (size_t i = 0; i < perm.size(); ++i)
    rank[static_cast<size_t>(perm[i])] = static_cast<Index>(i);

  LevelLayout layout;
  layout.coords.resize(static_cast<Index>(entries.size()), 3);
  layout.batch.resize(entries.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    const Entry& e = entries[static_cast<size_t>(perm[i])];
    layout.coords.row(static_cast<Index>(i)) = e.coord.transpose();
    layout.batch[i] = e.batch;
  }
  layout.seg_from_level0 = std::move(seg);
  for (auto& s : layout.seg_from_level0) s = rank[static_cast<size_t>(s)];
  return layout;
}

IndexBank link_levels(const SparseVoxelGrid& child, const SparseVoxelGrid& parent) {
  IndexBank bank;
  const Index m = child.size();
  bank.child_to_parent.resize(static_cast<size_t>(m));
  bank.parent_to_children.assign(static_cast<size_t>(parent.size()), {});
  for (Index i = 0; i < m; ++i) {
    const Index p = parent.find(child.batch_ids()[static_cast<size_t>(i)],
                                child.coords()(i, 0) / 2, child.coords()(i, 1) / 2,
                                child.coords()(i, 2) / 2);
    if (p < 0) throw std::logic_error("pyramid: child without a parent");
    bank.child_to_parent[static_cast<size_t>(i)] = p;
    bank.parent_to_children[static_cast<size_t>(p)].push_back(i);
  }
  // children in coord-lexicographic order, independent of row order
  for (auto& kids : bank.parent_to_children) {
    if (kids.empty()) throw std::logic_error("pyramid: parent without children");
    std::sort(kids.begin(), kids.end(), [&](Index a, Index b) {
      return std::lexicographical_compare(
          child.coords().row(a).data(), child.coords().row(a).data() + 3,
          child.coords().row(b).data(), child.coords().row(b).data() + 3);
    });
  }
  return bank;
}

}  // namespace

FeaturePyramid build_pyramid(const SparseVoxelGrid& grid, int height,
                             const PyramidParams& params) {
  if (height < 1) throw std::invalid_argument("build_pyramid: height must be >= 1");
  if (grid.size() == 0) throw std::invalid_argument("build_pyramid: empty grid");
  if (static_cast<int>(params.bn_gamma.size()) < height ||
      static_cast<int>(params.bn_beta.size()) < height)
    throw std::invalid_argument("build_pyramid: BN affine missing for some level");

  FeaturePyramid pyr;
  const Tensor& f0 = grid.features();
  for (int n = 0; n < height; ++n) {
    if (n == 0) {
      Tensor f = batch_norm(f0, params.bn_gamma[0], params.bn_beta[0], params.bn_eps);
      pyr.levels.push_back(grid.with_features(std::move(f)));
      continue;
    }
    LevelLayout layout = coarsen(grid, n);
    const Index m_n = layout.coords.rows();
    Tensor pooled = segment_max(f0, layout.seg_from_level0, m_n).values;
    Tensor f = batch_norm(pooled, params.bn_gamma[static_cast<size_t>(n)],
                          params.bn_beta[static_cast<size_t>(n)], params.bn_eps);
    pyr.levels.emplace_back(std::move(layout.coords), std::move(layout.batch), std::move(f),
                            grid.voxel_size() * static_cast<Scalar>(1 << n), grid.range_min(),
                            grid.range_max());
  }
  for (int n = 0; n + 1 < height; ++n) {
    pyr.banks.push_back(link_levels(pyr.levels[static_cast<size_t>(n)],
                                    pyr.levels[static_cast<size_t>(n + 1)]));
    pyr.down_ratio.push_back(static_cast<Scalar>(pyr.levels[static_cast<size_t>(n)].size()) /
                             static_cast<Scalar>(pyr.levels[static_cast<size_t>(n + 1)].size()));
  }
  return pyr;
}

Tensor upsample(const FeaturePyramid& pyramid, int n, const Tensor& level_feats) {
  if (n < 0 || n >= pyramid.height()) throw std::invalid_argument("upsample: bad level");
  if (level_feats.rows() != pyramid.levels[static_cast<size_t>(n)].size())
    throw std::invalid_argument("upsample: features do not match the level size");
  if (n == 0) return level_feats;
  return gather_rows(level_feats, pyramid.ancestors_at(n));
}

LevelStats level_stats(const FeaturePyramid& pyramid, int n, const Vector& level0_scores) {
  const SparseVoxelGrid& base = pyramid.levels[0];
  if (level0_scores.size() != base.size())
    throw std::invalid_argument("level_stats: one score per level-0 voxel required");
  const auto anc = pyramid.ancestors_at(n);
  const Index m_n = pyramid.levels[static_cast<size_t>(n)].size();
  LevelStats stats;
  stats.centers = Matrix::Zero(m_n, 3);
  stats.scores = Vector::Zero(m_n);
  std::vector<Index> count(static_cast<size_t>(m_n), 0);
  for (Index i = 0; i < base.size(); ++i) {
    const Index p = anc[static_cast<size_t>(i)];
    stats.centers.row(p) += base.center(i).transpose();
    stats.scores(p) += level0_scores(i);
    ++count[static_cast<size_t>(p)];
  }
  for (Index p = 0; p < m_n; ++p) {
    stats.centers.row(p) /= static_cast<Scalar>(count[static_cast<size_t>(p)]);
    stats.scores(p) /= static_cast<Scalar>(count[static_cast<size_t>(p)]);
  }
  return stats;
}

}  // namespace octattn
