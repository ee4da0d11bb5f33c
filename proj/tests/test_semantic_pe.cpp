#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "octattn/semantic_pe.hpp"

#include <fstream>

using namespace octattn;

namespace {

const Vec3 kSize(0.1, 0.1, 0.1);
const Vec3 kMin(0, 0, 0);
const Vec3 kMax(6.4, 6.4, 6.4);

SparseVoxelGrid random_grid(Rng& rng, Index m, Index d) {
  CoordMatrix coords(m, 3);
  std::vector<std::int32_t> batch(static_cast<size_t>(m), 0);
  Index at = 0;
  while (at < m) {
    Eigen::Vector3i c(static_cast<int>(rng.below(40)), static_cast<int>(rng.below(40)),
                      static_cast<int>(rng.below(40)));
    bool dup = false;
    for (Index i = 0; i < at; ++i)
      if (coords(i, 0) == c(0) && coords(i, 1) == c(1) && coords(i, 2) == c(2)) dup = true;
    if (dup) continue;
    coords.row(at++) = c.transpose();
  }
  return SparseVoxelGrid(coords, batch, Tensor::constant(uniform_matrix(rng, m, d, 1.5)),
                         kSize, kMin, kMax);
}

SegParams zero_seg_params(Index d) {
  SegParams p;
  p.conv.kernel = Tensor::zeros({3, 3, 3, d, d});
  p.conv.bias = Tensor::zeros({d});
  p.w = Tensor::zeros({d, 1});
  p.b = Tensor::zeros({1});
  return p;
}

}  // namespace

TEST_CASE("zero-weight segmentation branch scores everything 0.5") {
  Rng rng(1);
  SparseVoxelGrid grid = random_grid(rng, 20, 4);
  SegScores out = seg_branch(grid, zero_seg_params(4));
  for (Index i = 0; i < grid.size(); ++i) CHECK(out.scores.mat()(i, 0) == 0.5);
}

TEST_CASE("segmentation scores stay strictly inside (0, 1)") {
  Rng rng(2);
  SparseVoxelGrid grid = random_grid(rng, 60, 6);
  Rng prng(3);
  SegParams p = make_seg_params(prng, 6);
  SegScores out = seg_branch(grid, p);
  for (Index i = 0; i < grid.size(); ++i) {
    CHECK(out.scores.mat()(i, 0) > 0.0);
    CHECK(out.scores.mat()(i, 0) < 1.0);
  }
}

TEST_CASE("segmentation branch gradient passes the checker") {
  Rng rng(4);
  SparseVoxelGrid grid = random_grid(rng, 10, 3);
  SegParams proto = make_seg_params(rng, 3);
  Matrix weight = uniform_matrix(rng, grid.size(), 1, 1.0);
  auto f = [&](const std::vector<Tensor>& in) {
    SegParams p;
    p.conv.kernel = reshape(in[0], {3, 3, 3, 3, 3});
    p.conv.bias = in[1];
    p.w = in[2];
    p.b = in[3];
    return sum(mul(seg_branch(grid, p).scores, Tensor::constant(weight)));
  };
  GradReport rep = grad_check(f,
                              {{"kernel", {27 * 3, 3}, proto.conv.kernel.array()},
                               {"conv_bias", {3}, proto.conv.bias.array()},
                               {"w", {3, 1}, proto.w.array()},
                               {"b", {1}, proto.b.array()}},
                              1e-5);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("voxel labels against boxes") {
  Rng rng(5);
  SparseVoxelGrid grid = random_grid(rng, 80, 2);

  SUBCASE("no boxes means all background") {
    auto labels = label_voxels(grid, {});
    for (auto l : labels) CHECK(l == 0);
  }
  SUBCASE("a box over the whole range marks everything foreground") {
    Box all{0, kMin, kMax + Vec3::Ones()};
    auto labels = label_voxels(grid, {all});
    for (auto l : labels) CHECK(l == 1);
  }
  SUBCASE("random boxes match the point-in-box brute force") {
    std::vector<Box> boxes;
    for (int b = 0; b < 4; ++b) {
      Vec3 lo(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5));
      Vec3 hi = lo + Vec3(rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5));
      boxes.push_back({b % 2, lo, hi});  // half target another scene
    }
    auto labels = label_voxels(grid, boxes);
    for (Index i = 0; i < grid.size(); ++i) {
      const Vec3 c = grid.center(i);
      bool want = false;
      for (const Box& b : boxes)
        want = want || (b.scene_id == 0 && (c.array() >= b.min.array()).all() &&
                        (c.array() < b.max.array()).all());
      CHECK(static_cast<bool>(labels[static_cast<size_t>(i)]) == want);
    }
  }
}

TEST_CASE("box boundaries are min-inclusive and max-exclusive") {
  CoordMatrix coords(1, 3);
  coords << 0, 0, 0;  // center (0.05, 0.05, 0.05)
  SparseVoxelGrid grid(coords, {0}, Tensor::constant(Matrix::Ones(1, 1)), kSize, kMin, kMax);
  Box at_min{0, Vec3(0.05, 0.05, 0.05), Vec3(1, 1, 1)};
  CHECK(label_voxels(grid, {at_min})[0] == 1);
  Box at_max{0, Vec3(0, 0, 0), Vec3(0.05, 0.05, 0.05)};
  CHECK(label_voxels(grid, {at_max})[0] == 0);
}

TEST_CASE("focal loss closed-form values") {
  // S = 0.5 foreground, alpha = 0.25, gamma = 2
  Tensor s = Tensor::constant({1, 1}, ArrayX::Constant(1, 0.5));
  Tensor loss = focal_loss(s, {1});
  CHECK(loss.value() == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-10));
  CHECK(std::abs(loss.value() - 0.0433217) < 1e-6);

  // perfect foreground prediction drives the loss to ~0
  Tensor sharp = Tensor::constant({1, 1}, ArrayX::Constant(1, 1.0 - 1e-9));
  CHECK(focal_loss(sharp, {1}).value() < 1e-15);
}

TEST_CASE("gamma = 0, alpha = 0.5 reduces to half the binary cross-entropy") {
  Rng rng(6);
  const Index m = 32;
  ArrayX s(m);
  std::vector<std::uint8_t> labels(static_cast<size_t>(m));
  for (Index i = 0; i < m; ++i) {
    s(i) = rng.uniform(0.05, 0.95);
    labels[static_cast<size_t>(i)] = rng.uniform01() < 0.5 ? 0 : 1;
  }
  Tensor loss = focal_loss(Tensor::constant({m, 1}, s), labels, 0.5, 0.0);
  Scalar bce = 0;
  for (Index i = 0; i < m; ++i)
    bce -= labels[static_cast<size_t>(i)] ? std::log(s(i)) : std::log(1 - s(i));
  bce /= static_cast<Scalar>(m);
  CHECK(std::abs(loss.value() - 0.5 * bce) < 1e-12);
}

TEST_CASE("focal loss is monotone in the score") {
  const Scalar h = 1e-6;
  for (Scalar s0 : {0.2, 0.5, 0.8}) {
    auto at = [&](Scalar s, std::uint8_t label) {
      return focal_loss(Tensor::constant({1, 1}, ArrayX::Constant(1, s)), {label}).value();
    };
    CHECK(at(s0 + h, 1) < at(s0 - h, 1));  // decreasing on foreground
    CHECK(at(s0 + h, 0) > at(s0 - h, 0));  // increasing on background
  }
}

TEST_CASE("focal loss gradient passes the checker") {
  Rng rng(7);
  const Index m = 24;
  ArrayX s(m);
  std::vector<std::uint8_t> labels(static_cast<size_t>(m));
  for (Index i = 0; i < m; ++i) {
    s(i) = rng.uniform(0.05, 0.95);
    labels[static_cast<size_t>(i)] = rng.uniform01() < 0.4 ? 1 : 0;
  }
  auto f = [&](const std::vector<Tensor>& in) { return focal_loss(in[0], labels); };
  GradReport rep = grad_check(f, {{"scores", {m, 1}, s}}, 1e-6);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("sape: zero position block reduces to the feature projection") {
  Rng rng(8);
  const Index m = 10, d = 6;
  Matrix feats = uniform_matrix(rng, m, d, 1.0);
  Matrix centers = uniform_matrix(rng, m, 3, 3.0);
  Vector scores = Vector::Constant(m, 0.5);
  Matrix w = uniform_matrix(rng, d + 4, d, 1.0);
  w.topRows(4).setZero();
  Tensor out = sape(Tensor::constant(feats), centers, scores, Tensor::constant(w));
  Matrix want = feats * w.bottomRows(d);
  CHECK((out.mat() - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sape concat and split forms agree") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Index m = 1 + rng.below(12), d = 4 + rng.below(8);
    Matrix feats = uniform_matrix(rng, m, d, 2.0);
    Matrix centers = uniform_matrix(rng, m, 3, 30.0);
    Vector scores(m);
    for (Index i = 0; i < m; ++i) scores(i) = rng.uniform01();
    Matrix w = uniform_matrix(rng, d + 4, d, 1.0);
    Tensor a = sape(Tensor::constant(feats), centers, scores, Tensor::constant(w));
    Tensor b = sape_split(Tensor::constant(feats), centers, scores, Tensor::constant(w));
    CHECK((a.mat() - b.mat()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sape gradient passes the checker") {
  Rng rng(10);
  const Index m = 8, d = 5;
  Matrix feats = uniform_matrix(rng, m, d, 1.5);
  Matrix centers = uniform_matrix(rng, m, 3, 5.0);
  Vector scores(m);
  for (Index i = 0; i < m; ++i) scores(i) = rng.uniform01();
  Matrix w = uniform_matrix(rng, d + 4, d, 1.0);
  Matrix proj = uniform_matrix(rng, m, d, 1.0);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(mul(sape(in[0], centers, scores, in[1]), Tensor::constant(proj)));
  };
  GradReport rep = grad_check(
      f,
      {{"features", {m, d}, Eigen::Map<const ArrayX>(feats.data(), feats.size())},
       {"w", {d + 4, d}, Eigen::Map<const ArrayX>(w.data(), w.size())}},
      1e-5);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("sam mask entries follow the threshold table") {
  SamConfig cfg;
  Vector sq(3), sk(2);
  sq << 0.5, 0.01, 0.06;  // fg, bg, fg (just above delta_q)
  sk << 0.1, 0.9;         // below delta_k, above
  Matrix mask = sam_mask(sq, sk, cfg);
  CHECK(mask(0, 0) == -10000.0);
  CHECK(mask(0, 1) == 0.0);
  CHECK(mask(1, 0) == 0.0);  // background query row untouched
  CHECK(mask(1, 1) == 0.0);
  CHECK(mask(2, 0) == -10000.0);
}

TEST_CASE("masked foreground->background weight vanishes below 1e-300") {
  SamConfig cfg;
  Vector sq(1), sk(3);
  sq << 0.7;
  sk << 0.1, 0.8, 0.9;  // one background key, two competitors
  Matrix scores(1, 3);
  scores << 3.0, 1.0, -2.0;
  Matrix masked = scores + sam_mask(sq, sk, cfg);
  RowSoftmax sm = softmax_rows(Tensor::constant(masked));
  CHECK(sm.probs.mat()(0, 0) < 1e-300);
  CHECK(sm.probs.mat()(0, 1) > 0.0);
  CHECK(std::abs(sm.probs.mat().row(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("background query rows are bit-identical to the unmasked computation") {
  Rng rng(11);
  SamConfig cfg;
  const Index nq = 6, nk = 5;
  Matrix scores = uniform_matrix(rng, nq, nk, 2.0);
  Vector sq(nq), sk(nk);
  for (Index i = 0; i < nq; ++i) sq(i) = i % 2 == 0 ? 0.01 : 0.5;  // even rows background
  for (Index j = 0; j < nk; ++j) sk(j) = j % 2 == 0 ? 0.05 : 0.8;
  Matrix masked = scores + sam_mask(sq, sk, cfg);
  RowSoftmax with = softmax_rows(Tensor::constant(masked));
  RowSoftmax without = softmax_rows(Tensor::constant(scores));
  for (Index i = 0; i < nq; i += 2)
    for (Index j = 0; j < nk; ++j)
      CHECK(with.probs.mat()(i, j) == without.probs.mat()(i, j));
}

TEST_CASE("applying the mask twice changes nothing after softmax") {
  Rng rng(12);
  SamConfig cfg;
  const Index nq = 5, nk = 7;
  Matrix scores = uniform_matrix(rng, nq, nk, 2.0);
  Vector sq(nq), sk(nk);
  for (Index i = 0; i < nq; ++i) sq(i) = rng.uniform01();
  for (Index j = 0; j < nk; ++j) sk(j) = rng.uniform01();
  Matrix mask = sam_mask(sq, sk, cfg);
  RowSoftmax once = softmax_rows(Tensor::constant(Matrix(scores + mask)));
  RowSoftmax twice = softmax_rows(Tensor::constant(Matrix(scores + mask + mask)));
  CHECK((once.probs.mat() - twice.probs.mat()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("box csv round trip") {
  std::vector<Box> boxes = {{0, Vec3(0, 1, 2), Vec3(3, 4, 5)}, {1, Vec3(-1, -2, -3), Vec3(0, 0, 0)}};
  const std::string path = "/tmp/octattn_boxes.csv";
  save_boxes(path, boxes);
  auto back = load_boxes(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].scene_id == 0);
  CHECK(back[1].scene_id == 1);
  CHECK((back[0].min - boxes[0].min).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back[1].max - boxes[1].max).cwiseAbs().maxCoeff() == 0.0);
}
