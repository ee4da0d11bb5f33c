#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "octattn/voxel_grid.hpp"

#include <fstream>
#include <map>

using namespace octattn;

namespace {

const Vec3 kSize(0.05, 0.05, 0.125);
const Vec3 kMin(0, 0, 0);
const Vec3 kMax(4, 4, 4);

std::string write_temp(const std::string& name, const std::string& text) {
  std::string path = "/tmp/octattn_" + name;
  std::ofstream out(path);
  out << text;
  return path;
}

PointCloud random_cloud(Rng& rng, int n, int scene = 0) {
  PointCloud pc;
  pc.scene_id = scene;
  for (int i = 0; i < n; ++i)
    pc.points.push_back({rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(0, 4),
                         rng.uniform01()});
  return pc;
}

}  // namespace

TEST_CASE("csv points parse with and without a header") {
  auto with_header = load_points(write_temp("h.csv", "x,y,z\n1.0,2.0,3.0\n"), PointFormat::Csv);
  REQUIRE(with_header.points.size() == 1);
  CHECK(with_header.points[0].x == 1.0);
  CHECK(with_header.points[0].intensity == 0.0);  // missing column defaults

  auto plain = load_points(write_temp("p.csv", "1,2,3,0.25\n4,5,6,0.5\n"), PointFormat::Csv);
  REQUIRE(plain.points.size() == 2);
  CHECK(plain.points[1].intensity == 0.5);
}

TEST_CASE("malformed csv reports the line number") {
  auto path = write_temp("bad.csv", "1,2,3\n1,oops,3\n");
  try {
    load_points(path, PointFormat::Csv);
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
}

TEST_CASE("binary points parse and reject truncation") {
  const float rec[4] = {1, 2, 3, 0.5f};
  std::string path = "/tmp/octattn_one.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(rec), 16);
  }
  auto cloud = load_points(path, PointFormat::BinF32x4);
  REQUIRE(cloud.points.size() == 1);
  CHECK(cloud.points[0].z == 3.0);
  CHECK(cloud.points[0].intensity == 0.5);

  std::string bad = "/tmp/octattn_trunc.bin";
  {
    std::ofstream out(bad, std::ios::binary);
    out.write(reinterpret_cast<const char*>(rec), 16);
    out.write(reinterpret_cast<const char*>(rec), 16);
    out.put(0);  // 33 bytes
  }
  CHECK_THROWS_AS((void)load_points(bad, PointFormat::BinF32x4), std::runtime_error);
}

TEST_CASE("voxelize floors coordinates and averages member points") {
  PointCloud pc;
  pc.points.push_back({0.12, 0.07, 0.30, 0.4});
  pc.points.push_back({0.14, 0.08, 0.31, 0.6});
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax);
  REQUIRE(grid.size() == 1);
  CHECK(grid.coords()(0, 0) == 2);
  CHECK(grid.coords()(0, 1) == 1);
  CHECK(grid.coords()(0, 2) == 2);
  CHECK(grid.features().mat()(0, 0) == doctest::Approx(0.13).epsilon(1e-12));
  CHECK(grid.features().mat()(0, 1) == doctest::Approx(0.075).epsilon(1e-12));
  CHECK(grid.features().mat()(0, 2) == doctest::Approx(0.305).epsilon(1e-12));
  CHECK(grid.features().mat()(0, 3) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("a point exactly on a voxel boundary lands in the upper cell") {
  PointCloud pc;
  pc.points.push_back({3 * 0.05, 0.0, 0.0, 0.0});
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax);
  REQUIRE(grid.size() == 1);
  CHECK(grid.coords()(0, 0) == 3);
}

TEST_CASE("voxelize bookkeeping against a brute-force recount") {
  Rng rng(99);
  PointCloud pc = random_cloud(rng, 10000);
  // a few points outside the range
  pc.points.push_back({-1, 0, 0, 0});
  pc.points.push_back({0, 5, 0, 0});
  VoxelizeReport rep;
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax, &rep);
  CHECK(rep.points_in == 10002);
  CHECK(rep.points_dropped == 2);
  CHECK(rep.points_kept == 10000);

  std::map<std::array<int, 3>, Index> counts;
  for (const Point& p : pc.points) {
    if (p.x < 0 || p.y < 0 || p.z < 0 || p.x >= 4 || p.y >= 4 || p.z >= 4) continue;
    std::array<int, 3> c{static_cast<int>(std::floor(p.x / 0.05)),
                         static_cast<int>(std::floor(p.y / 0.05)),
                         static_cast<int>(std::floor(p.z / 0.125))};
    counts[c]++;
  }
  CHECK(static_cast<Index>(counts.size()) == grid.size());
  Index total = 0;
  for (const auto& [c, n] : counts) {
    total += n;
    CHECK(grid.find(0, c[0], c[1], c[2]) >= 0);
  }
  CHECK(total == rep.points_kept);
}

TEST_CASE("voxelize is invariant to the input point order") {
  Rng rng(5);
  PointCloud pc = random_cloud(rng, 500);
  PointCloud reversed = pc;
  std::reverse(reversed.points.begin(), reversed.points.end());
  SparseVoxelGrid a = voxelize(pc, kSize, kMin, kMax);
  SparseVoxelGrid b = voxelize(reversed, kSize, kMin, kMax);
  REQUIRE(a.size() == b.size());
  CHECK((a.coords() - b.coords()).cwiseAbs().maxCoeff() == 0);
  CHECK((a.features().mat() - b.features().mat()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hash lookup returns each row for its own coord") {
  Rng rng(6);
  SparseVoxelGrid grid = voxelize(random_cloud(rng, 2000), kSize, kMin, kMax);
  for (Index i = 0; i < grid.size(); ++i)
    CHECK(grid.find(0, grid.coords()(i, 0), grid.coords()(i, 1), grid.coords()(i, 2)) == i);
}

TEST_CASE("duplicate (batch, coord) pairs are rejected") {
  CoordMatrix coords(2, 3);
  coords << 1, 1, 1, 1, 1, 1;
  CHECK_THROWS_AS(SparseVoxelGrid(coords, {0, 0}, Tensor::zeros({2, 4}), kSize, kMin, kMax),
                  std::invalid_argument);
}

TEST_CASE("zero surviving points yields a valid empty grid") {
  PointCloud pc;
  pc.points.push_back({-1, -1, -1, 0});
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax);
  CHECK(grid.size() == 0);
}

TEST_CASE("dense batch pads the smaller scene and round-trips") {
  Rng rng(7);
  PointCloud a = random_cloud(rng, 3, 0);
  PointCloud b = random_cloud(rng, 40, 1);
  SparseVoxelGrid ga = voxelize(a, kSize, kMin, kMax);
  SparseVoxelGrid gb = voxelize(b, kSize, kMin, kMax);
  SparseVoxelGrid grid = merge_scenes({ga, gb});
  REQUIRE(grid.size() == ga.size() + gb.size());

  DenseTokenBatch batch = to_dense_batch(grid);
  CHECK(batch.scenes == 2);
  CHECK(batch.m_max == std::max(ga.size(), gb.size()));
  Index invalid = 0;
  for (auto v : batch.valid)
    if (!v) ++invalid;
  CHECK(invalid == 2 * batch.m_max - grid.size());
  for (Index s = 0; s < batch.scenes * batch.m_max; ++s)
    if (!batch.valid[static_cast<size_t>(s)])
      CHECK(batch.tokens.mat().row(s).cwiseAbs().maxCoeff() == 0.0);

  Tensor back = dense_to_compact(batch, batch.tokens);
  CHECK((back.mat() - grid.features().mat()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single scene dense batch is fully valid") {
  Rng rng(8);
  SparseVoxelGrid grid = voxelize(random_cloud(rng, 64), kSize, kMin, kMax);
  DenseTokenBatch batch = to_dense_batch(grid);
  CHECK(batch.scenes == 1);
  CHECK(batch.m_max == grid.size());
  for (auto v : batch.valid) CHECK(v == 1);
}

TEST_CASE("embed propagates the empty grid") {
  PointCloud pc;
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax);
  Rng rng(9);
  EmbedParams params = make_embed_params(rng, 4, 16);
  SparseVoxelGrid out = embed(grid, params);
  CHECK(out.size() == 0);
  CHECK(out.feature_dim() == 16);
}

TEST_CASE("an isolated voxel embeds through the center tap alone") {
  PointCloud pc;
  pc.points.push_back({0.11, 0.22, 0.33, 0.7});
  SparseVoxelGrid grid = voxelize(pc, kSize, kMin, kMax);
  Rng rng(10);
  EmbedParams params = make_embed_params(rng, 4, 8);
  SparseVoxelGrid out = embed(grid, params);

  Eigen::Map<const Matrix> kernel(params.conv.kernel.array().data(), 27 * 4, 4);
  Eigen::RowVectorXd f = grid.features().mat().row(0);
  Eigen::RowVectorXd conv = f * kernel.middleRows(13 * 4, 4);
  conv += Eigen::Map<const Eigen::RowVectorXd>(params.conv.bias.array().data(), 4);
  Eigen::RowVectorXd expect =
      (conv * params.w.mat() +
       Eigen::Map<const Eigen::RowVectorXd>(params.b.array().data(), 8))
          .cwiseMax(0.0);
  CHECK((out.features().mat().row(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("embedding commutes with a row permutation") {
  Rng rng(11);
  SparseVoxelGrid grid = voxelize(random_cloud(rng, 300), kSize, kMin, kMax);
  Rng prng(12);
  std::vector<Index> perm(static_cast<size_t>(grid.size()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Index>(i);
  for (size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<size_t>(prng.below(static_cast<Index>(i)))]);

  CoordMatrix coords(grid.size(), 3);
  Matrix feats(grid.size(), 4);
  std::vector<std::int32_t> batch(static_cast<size_t>(grid.size()));
  for (Index i = 0; i < grid.size(); ++i) {
    coords.row(i) = grid.coords().row(perm[static_cast<size_t>(i)]);
    feats.row(i) = grid.features().mat().row(perm[static_cast<size_t>(i)]);
    batch[static_cast<size_t>(i)] =
        grid.batch_ids()[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  SparseVoxelGrid shuffled(coords, batch, Tensor::constant(feats), kSize, kMin, kMax);

  Rng e1(13), e2(13);
  EmbedParams p1 = make_embed_params(e1, 4, 8);
  SparseVoxelGrid a = embed(grid, p1);
  EmbedParams p2 = make_embed_params(e2, 4, 8);
  SparseVoxelGrid b = embed(shuffled, p2);
  for (Index i = 0; i < grid.size(); ++i)
    CHECK((b.features().mat().row(i) -
           a.features().mat().row(perm[static_cast<size_t>(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("max_pool2 halves coordinates and takes channel maxima") {
  CoordMatrix coords(3, 3);
  coords << 0, 0, 0, 1, 1, 1, 2, 2, 2;
  Matrix feats(3, 2);
  feats << 1, 5, 3, 2, 7, 0;
  SparseVoxelGrid grid(coords, {0, 0, 0}, Tensor::constant(feats), kSize, kMin, kMax);
  SparseVoxelGrid pooled = max_pool2(grid);
  REQUIRE(pooled.size() == 2);  // (0,0,0) and (1,1,1)
  CHECK(pooled.features().mat()(0, 0) == 3.0);
  CHECK(pooled.features().mat()(0, 1) == 5.0);
  CHECK(pooled.features().mat()(1, 0) == 7.0);
  CHECK(pooled.voxel_size()(0) == doctest::Approx(0.1));
}
