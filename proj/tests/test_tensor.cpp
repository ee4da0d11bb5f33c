#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "octattn/tensor.hpp"

using namespace octattn;

namespace {

Matrix random_box(Rng& rng, Index r, Index c, Scalar lo = -2, Scalar hi = 2) {
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

GradInput input_of(const std::string& name, const Matrix& m) {
  return {name, {m.rows(), m.cols()}, Eigen::Map<const ArrayX>(m.data(), m.size())};
}

// fixed random projection so the scalar reduction has a non-trivial gradient
Tensor project(const Tensor& t, Rng& rng) {
  Matrix w = random_box(rng, t.rows(), t.cols(), -1, 1);
  return sum(mul(t, Tensor::constant(w)));
}

}  // namespace

TEST_CASE("matmul identity and hand product") {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix eye = Matrix::Identity(2, 2);
  Tensor prod = matmul(Tensor::constant(eye), Tensor::constant(a));
  CHECK((prod.mat() - a).cwiseAbs().maxCoeff() == 0.0);

  Matrix b(2, 1);
  b << 0, 1;
  Tensor ab = matmul(Tensor::constant(a), Tensor::constant(b));
  CHECK(ab.mat()(0, 0) == 2.0);
  CHECK(ab.mat()(1, 0) == 4.0);
}

TEST_CASE("matmul shape mismatch raises") {
  Tensor a = Tensor::constant(Matrix::Zero(2, 3));
  Tensor b = Tensor::constant(Matrix::Zero(2, 3));
  CHECK_THROWS_AS((void)matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient vs central differences") {
  Rng rng(42);
  Matrix a = random_box(rng, 5, 7);
  Matrix b = random_box(rng, 7, 3);
  Rng proj_rng(7);
  auto f = [&](const std::vector<Tensor>& in) {
    Rng local(7);
    return project(matmul(in[0], in[1]), local);
  };
  GradReport rep = grad_check(f, {input_of("a", a), input_of("b", b)}, 1e-5);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("matmul_nt matches explicit transpose") {
  Rng rng(3);
  Matrix a = random_box(rng, 4, 6);
  Matrix b = random_box(rng, 5, 6);
  Tensor got = matmul_nt(Tensor::constant(a), Tensor::constant(b));
  Matrix want = a * b.transpose();
  CHECK((got.mat() - want).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("softmax uniform and single-valid rows") {
  Tensor x = Tensor::constant({1, 3}, ArrayX::Zero(3));
  RowSoftmax sm = softmax_rows(x);
  for (Index j = 0; j < 3; ++j) CHECK(sm.probs.mat()(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Matrix row(1, 2);
  row << 5.0, 123.0;
  BoolMatrix mask(1, 2);
  mask << true, false;
  RowSoftmax masked = softmax_rows(Tensor::constant(row), &mask);
  CHECK(masked.probs.mat()(0, 0) == 1.0);
  CHECK(masked.probs.mat()(0, 1) == 0.0);  // exactly zero
  CHECK(masked.row_valid[0] == 1);
}

TEST_CASE("softmax all-masked row comes back flagged and zero") {
  Matrix x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  BoolMatrix mask(2, 3);
  mask.row(0).setConstant(true);
  mask.row(1).setConstant(false);
  RowSoftmax sm = softmax_rows(Tensor::constant(x), &mask);
  CHECK(sm.row_valid[0] == 1);
  CHECK(sm.row_valid[1] == 0);
  CHECK(sm.probs.mat().row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  Rng rng(11);
  Matrix x = random_box(rng, 40, 17, -30, 30);
  BoolMatrix mask(40, 17);
  for (Index i = 0; i < 40; ++i)
    for (Index j = 0; j < 17; ++j) mask(i, j) = rng.uniform01() < 0.7 || j == 0;
  RowSoftmax sm = softmax_rows(Tensor::constant(x), &mask);
  for (Index i = 0; i < 40; ++i) {
    CHECK(std::abs(sm.probs.mat().row(i).sum() - 1.0) < 1e-12);
    for (Index j = 0; j < 17; ++j)
      if (!mask(i, j)) CHECK(sm.probs.mat()(i, j) == 0.0);
  }
}

TEST_CASE("softmax gradient vs central differences") {
  Rng rng(5);
  Matrix x = random_box(rng, 4, 6);
  auto f = [&](const std::vector<Tensor>& in) {
    Rng local(19);
    return project(softmax_rows(in[0]).probs, local);
  };
  GradReport rep = grad_check(f, {input_of("x", x)}, 1e-5);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("batch_norm zero-variance rows collapse to beta") {
  Matrix x(4, 3);
  x.rowwise() = Eigen::RowVector3d(7.0, -2.0, 0.5);
  Rng rng(1);
  Matrix gamma = random_box(rng, 1, 3);
  Matrix beta = random_box(rng, 1, 3);
  Tensor out = batch_norm(Tensor::constant(x), Tensor::constant(gamma), Tensor::constant(beta));
  for (Index i = 0; i < 4; ++i)
    CHECK((out.mat().row(i) - beta.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batch_norm on an already standardized column") {
  Matrix x(2, 1);
  x << -1, 1;
  Tensor out = batch_norm(Tensor::constant(x), Tensor::constant(Matrix::Ones(1, 1)),
                          Tensor::constant(Matrix::Zero(1, 1)), 1e-5);
  CHECK(out.mat()(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(out.mat()(1, 0) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(std::abs(out.mat()(0, 0) + 1.0) < 1e-5);  // eps-scale deviation only
}

TEST_CASE("batch_norm statistics on random input") {
  Rng rng(8);
  Matrix x = random_box(rng, 16, 8);
  const Scalar eps = 1e-5;
  Tensor out = batch_norm(Tensor::constant(x), Tensor::constant(Matrix::Ones(1, 8)),
                          Tensor::constant(Matrix::Zero(1, 8)), eps);
  for (Index c = 0; c < 8; ++c) {
    const Scalar mu = out.mat().col(c).mean();
    const Scalar var = (out.mat().col(c).array() - mu).square().sum() / 16.0;
    CHECK(std::abs(mu) < 1e-10);
    CHECK(std::abs(var - 1.0) < 10 * eps);  // var/(var+eps) correction
  }
}

TEST_CASE("batch_norm single row gives beta") {
  Matrix x(1, 3);
  x << 4, 5, 6;
  Matrix beta(1, 3);
  beta << -1, 0, 1;
  Tensor out = batch_norm(Tensor::constant(x), Tensor::constant(Matrix::Ones(1, 3)),
                          Tensor::constant(beta));
  CHECK((out.mat() - beta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("batch_norm gradient vs central differences") {
  Rng rng(13);
  Matrix x = random_box(rng, 6, 4);
  Matrix gamma = random_box(rng, 1, 4, 0.5, 1.5);
  Matrix beta = random_box(rng, 1, 4);
  auto f = [&](const std::vector<Tensor>& in) {
    Rng local(3);
    return project(batch_norm(in[0], in[1], in[2]), local);
  };
  GradReport rep =
      grad_check(f, {input_of("x", x), input_of("gamma", gamma), input_of("beta", beta)}, 1e-5);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("grad_check on sum is exact") {
  Rng rng(2);
  Matrix x = random_box(rng, 3, 5);
  auto f = [](const std::vector<Tensor>& in) { return sum(in[0]); };
  GradReport rep = grad_check(f, {input_of("x", x)}, 1e-5);
  CHECK(rep.max_rel_err < 1e-10);

  Tape tape;
  Tensor leaf = Tensor::leaf(tape, {3, 5}, Eigen::Map<const ArrayX>(x.data(), x.size()));
  Tensor total = sum(leaf);
  tape.backward(total);
  CHECK((tape.grad(leaf) == 1.0).all());
}

TEST_CASE("segment_max takes ties from the lowest row and routes gradient there") {
  Matrix x(4, 2);
  x << 1, 5, 3, 2, 3, 1, 0, 7;
  std::vector<Index> seg{0, 0, 1, 1};
  SegmentMax sm = segment_max(Tensor::constant(x), seg, 2);
  CHECK(sm.values.mat()(0, 0) == 3.0);
  CHECK(sm.values.mat()(0, 1) == 5.0);
  CHECK(sm.argmax_row[0 * 2 + 0] == 1);
  CHECK(sm.argmax_row[0 * 2 + 1] == 0);

  // tie: rows 2 and 3 equal in a channel -> lowest row wins
  Matrix t(2, 1);
  t << 4, 4;
  SegmentMax tie = segment_max(Tensor::constant(t), {0, 0}, 1);
  CHECK(tie.argmax_row[0] == 0);

  Tape tape;
  Tensor leaf = Tensor::leaf(tape, {4, 2}, Eigen::Map<const ArrayX>(x.data(), x.size()));
  tape.backward(sum(segment_max(leaf, seg, 2).values));
  ArrayX g = tape.grad(leaf);
  Eigen::Map<const Matrix> gm(g.data(), 4, 2);
  Matrix expect(4, 2);
  expect << 0, 1, 1, 0, 1, 0, 0, 1;
  CHECK((gm - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("segment_max rejects empty segments") {
  Matrix x(2, 1);
  x << 1, 2;
  CHECK_THROWS_AS((void)segment_max(Tensor::constant(x), {0, 0}, 2), std::invalid_argument);
}

TEST_CASE("segment mean and sum agree with hand grouping") {
  Matrix x(3, 2);
  x << 1, 2, 3, 4, 5, 6;
  std::vector<Index> seg{1, 1, 0};
  Tensor s = segment_sum(Tensor::constant(x), seg, 2);
  CHECK(s.mat()(0, 0) == 5.0);
  CHECK(s.mat()(1, 1) == 6.0);
  Tensor mn = segment_mean(Tensor::constant(x), seg, 2);
  CHECK(mn.mat()(1, 0) == 2.0);
  CHECK(mn.mat()(1, 1) == 3.0);
}

TEST_CASE("gather_rows pads -1 with zeros and accumulates duplicates in backward") {
  Matrix x(2, 2);
  x << 1, 2, 3, 4;
  Tape tape;
  Tensor leaf = Tensor::leaf(tape, {2, 2}, Eigen::Map<const ArrayX>(x.data(), x.size()));
  Tensor g = gather_rows(leaf, {1, -1, 1});
  CHECK(g.mat()(0, 0) == 3.0);
  CHECK(g.mat()(1, 0) == 0.0);
  CHECK(g.mat()(1, 1) == 0.0);
  tape.backward(sum(g));
  ArrayX grad = tape.grad(leaf);
  Eigen::Map<const Matrix> gm(grad.data(), 2, 2);
  CHECK(gm(0, 0) == 0.0);
  CHECK(gm(1, 0) == 2.0);  // picked twice
}

TEST_CASE("elementwise and structural op gradients vs central differences") {
  Rng rng(23);
  Matrix a = random_box(rng, 3, 4);
  Matrix b = random_box(rng, 3, 4);
  Matrix bias = random_box(rng, 1, 4);
  Matrix coeff = random_box(rng, 3, 1);
  Matrix pos = random_box(rng, 3, 4, 0.3, 2.0);  // for log / pow

  auto check = [&](const char* name,
                   std::function<Tensor(const std::vector<Tensor>&)> f,
                   std::vector<GradInput> in, Scalar tol = 1e-5) {
    GradReport rep = grad_check(f, in, 1e-5);
    INFO(name);
    CHECK(rep.max_rel_err < tol);
  };

  Rng p1(101);
  check("add_mul_sub", [&](const std::vector<Tensor>& in) {
    Rng local(101);
    return project(sub(mul(in[0], in[1]), scale(add(in[0], in[1]), 0.3)), local);
  }, {input_of("a", a), input_of("b", b)});

  check("add_rowwise", [&](const std::vector<Tensor>& in) {
    Rng local(102);
    return project(add_rowwise(in[0], in[1]), local);
  }, {input_of("a", a), input_of("bias", bias)});

  check("mul_colwise", [&](const std::vector<Tensor>& in) {
    Rng local(103);
    return project(mul_colwise(in[0], in[1]), local);
  }, {input_of("a", a), input_of("coeff", coeff)});

  check("relu_sigmoid", [&](const std::vector<Tensor>& in) {
    Rng local(104);
    return project(sigmoid(relu(in[0])), local);
  }, {input_of("a", a)});

  check("log_pow", [&](const std::vector<Tensor>& in) {
    Rng local(105);
    return project(mul(log_elem(in[0]), pow_elem(in[0], 1.7)), local);
  }, {input_of("pos", pos)});

  check("clamp_inactive", [&](const std::vector<Tensor>& in) {
    Rng local(106);
    return project(clamp(in[0], -5, 5), local);
  }, {input_of("a", a)});

  check("concat_slice_reshape", [&](const std::vector<Tensor>& in) {
    Rng local(107);
    Tensor cat = concat_cols({in[0], in[1]});
    Tensor rows = concat_rows({slice_rows(cat, 0, 2), slice_rows(cat, 1, 2)});
    return project(reshape(rows, {2, 16}), local);
  }, {input_of("a", a), input_of("b", b)});

  check("row_sum_mean", [&](const std::vector<Tensor>& in) {
    Rng local(108);
    return add(project(row_sum(in[0]), local), mean(in[0]));
  }, {input_of("a", a)});

  check("segment_ops", [&](const std::vector<Tensor>& in) {
    Rng local(109);
    std::vector<Index> seg{0, 1, 0};
    Tensor s = segment_sum(in[0], seg, 2);
    Tensor mns = segment_mean(in[0], seg, 2);
    return add(project(s, local), sum(mns));
  }, {input_of("a", a)});

  check("gather", [&](const std::vector<Tensor>& in) {
    Rng local(110);
    return project(gather_rows(in[0], {2, 0, 2, -1}), local);
  }, {input_of("a", a)});

  check("matmul_nt", [&](const std::vector<Tensor>& in) {
    Rng local(111);
    return project(matmul_nt(in[0], in[1]), local);
  }, {input_of("a", a), input_of("b", b)});
}

TEST_CASE("clamp zeroes gradient outside the window and keeps values inside") {
  Matrix x(1, 3);
  x << -7, 0.25, 9;
  Tape tape;
  Tensor leaf = Tensor::leaf(tape, {1, 3}, Eigen::Map<const ArrayX>(x.data(), x.size()));
  Tensor c = clamp(leaf, -1, 1);
  CHECK(c.mat()(0, 0) == -1.0);
  CHECK(c.mat()(0, 1) == 0.25);
  CHECK(c.mat()(0, 2) == 1.0);
  tape.backward(sum(c));
  ArrayX g = tape.grad(leaf);
  CHECK(g(0) == 0.0);
  CHECK(g(1) == 1.0);
  CHECK(g(2) == 0.0);
}

TEST_CASE("forward chains are bit-identical across runs") {
  auto run = [] {
    Rng rng(77);
    Matrix a = random_box(rng, 6, 6);
    Matrix b = random_box(rng, 6, 6);
    Tensor t = softmax_rows(matmul(Tensor::constant(a), Tensor::constant(b))).probs;
    t = batch_norm(t, Tensor::constant(Matrix::Ones(1, 6)),
                   Tensor::constant(Matrix::Zero(1, 6)));
    return ArrayX(t.array());
  };
  ArrayX first = run();
  ArrayX second = run();
  CHECK((first == second).all());
}

TEST_CASE("randomized gradient property across the op set") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(900 + seed);
    Matrix a = random_box(rng, 4, 5);
    Matrix b = random_box(rng, 4, 5);
    auto f = [&](const std::vector<Tensor>& in) {
      Rng local(500 + seed);
      Tensor mix = add(mul(in[0], in[1]), scale(in[0], 0.5));
      Tensor soft = softmax_rows(mix).probs;
      Tensor prod = matmul_nt(soft, in[1]);
      return project(prod, local);
    };
    GradReport rep = grad_check(f, {input_of("a", a), input_of("b", b)}, 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
  }
}
