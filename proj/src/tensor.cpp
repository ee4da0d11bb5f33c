#include "octattn/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace octattn {

namespace {

ArrayX flat_of(const Matrix& m) {
  return Eigen::Map<const ArrayX>(m.data(), m.size());
}

Tape* joint_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw std::invalid_argument("operands live on different tapes");
    }
  }
  return tape;
}

Tape* joint_tape(const std::vector<Tensor>& ts) {
  Tape* tape = nullptr;
  for (const Tensor& t : ts) {
    if (!t.tracked()) continue;
    if (tape == nullptr) {
      tape = t.tape();
    } else if (tape != t.tape()) {
      throw std::invalid_argument("operands live on different tapes");
    }
  }
  return tape;
}

using RowArray = Eigen::Array<Scalar, 1, Eigen::Dynamic>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

// ---- Tensor

Tensor::Tensor(Shape shape, ArrayX data) : shape_(std::move(shape)) {
  if (shape_size(shape_) != data.size())
    throw std::invalid_argument("tensor: shape does not match data length");
  data_ = std::make_shared<const ArrayX>(std::move(data));
}

Tensor Tensor::constant(Shape shape, ArrayX data) {
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::constant(const Matrix& m) {
  return Tensor({m.rows(), m.cols()}, flat_of(m));
}

Tensor Tensor::scalar_value(Scalar v) {
  return Tensor({1}, ArrayX::Constant(1, v));
}

Tensor Tensor::zeros(Shape shape) {
  Index n = shape_size(shape);
  return Tensor(std::move(shape), ArrayX::Zero(n));
}

Tensor Tensor::leaf(Tape& tape, Shape shape, ArrayX data) {
  Tensor t(std::move(shape), std::move(data));
  t.bind(tape, tape.push(t.size(), nullptr));
  return t;
}

Tensor Tensor::leaf(Tape& tape, const Matrix& m) {
  return leaf(tape, {m.rows(), m.cols()}, flat_of(m));
}

Index Tensor::rows() const {
  if (ndim() >= 2) return shape_[0];
  return 1;
}

Index Tensor::cols() const {
  if (ndim() >= 2) return shape_[1];
  return ndim() == 1 ? shape_[0] : 1;
}

Eigen::Map<const Matrix> Tensor::mat() const {
  if (ndim() > 2)
    throw std::invalid_argument("mat(): tensor has more than 2 dimensions");
  return {data_->data(), rows(), cols()};
}

Scalar Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value(): tensor is not size 1");
  return (*data_)(0);
}

void Tensor::bind(Tape& tape, int node) {
  tape_ = &tape;
  node_ = node;
}

// ---- Tape

int Tape::push(Index size, BackwardFn fn) {
  nodes_.push_back({size, std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& out) {
  if (!out.tracked() || out.tape() != this)
    throw std::invalid_argument("backward: output is not on this tape");
  if (out.size() != 1)
    throw std::invalid_argument("backward: output must be a scalar");
  grads_.assign(nodes_.size(), ArrayX());
  grad_set_.assign(nodes_.size(), 0);
  accumulate(out.node(), ArrayX(ArrayX::Ones(1)));
  for (int i = out.node(); i >= 0; --i) {
    if (grad_set_[static_cast<size_t>(i)] && nodes_[static_cast<size_t>(i)].backward)
      nodes_[static_cast<size_t>(i)].backward(*this, grads_[static_cast<size_t>(i)]);
  }
}

ArrayX Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape() != this)
    throw std::invalid_argument("grad: tensor is not on this tape");
  auto n = static_cast<size_t>(t.node());
  if (n < grad_set_.size() && grad_set_[n]) return grads_[n];
  return ArrayX::Zero(t.size());
}

void Tape::accumulate(int node, const ArrayX& g) {
  auto n = static_cast<size_t>(node);
  if (!grad_set_[n]) {
    grads_[n] = ArrayX::Zero(nodes_[n].size);
    grad_set_[n] = 1;
  }
  grads_[n] += g;
}

void Tape::accumulate(int node, const Matrix& g) {
  accumulate(node, ArrayX(Eigen::Map<const ArrayX>(g.data(), g.size())));
}

// ---- operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() > 2 || b.ndim() > 2)
    throw std::invalid_argument("matmul: operands must be 1-D or 2-D");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions do not match");
  Matrix c = a.mat() * b.mat();
  Tensor out({c.rows(), c.cols()}, flat_of(c));
  if (Tape* tape = joint_tape({&a, &b})) {
    auto ad = a.data_handle();
    auto bd = b.data_handle();
    const int an = a.tracked() ? a.node() : -1;
    const int bn = b.tracked() ? b.node() : -1;
    const Index m = a.rows(), p = a.cols(), n = b.cols();
    out.bind(*tape, tape->push(c.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, n);
      Eigen::Map<const Matrix> A(ad->data(), m, p);
      Eigen::Map<const Matrix> B(bd->data(), p, n);
      if (an >= 0) t.accumulate(an, Matrix(G * B.transpose()));
      if (bn >= 0) t.accumulate(bn, Matrix(A.transpose() * G));
    }));
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() > 2 || b.ndim() > 2)
    throw std::invalid_argument("matmul_nt: operands must be 1-D or 2-D");
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: column counts do not match");
  Matrix c = a.mat() * b.mat().transpose();
  Tensor out({c.rows(), c.cols()}, flat_of(c));
  if (Tape* tape = joint_tape({&a, &b})) {
    auto ad = a.data_handle();
    auto bd = b.data_handle();
    const int an = a.tracked() ? a.node() : -1;
    const int bn = b.tracked() ? b.node() : -1;
    const Index m = a.rows(), p = a.cols(), n = b.rows();
    out.bind(*tape, tape->push(c.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, n);
      Eigen::Map<const Matrix> A(ad->data(), m, p);
      Eigen::Map<const Matrix> B(bd->data(), n, p);
      if (an >= 0) t.accumulate(an, Matrix(G * B));
      if (bn >= 0) t.accumulate(bn, Matrix(G.transpose() * A));
    }));
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape(), a.array() + b.array());
  if (Tape* tape = joint_tape({&a, &b})) {
    const int an = a.tracked() ? a.node() : -1;
    const int bn = b.tracked() ? b.node() : -1;
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) t.accumulate(bn, g);
    }));
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.array() - b.array());
  if (Tape* tape = joint_tape({&a, &b})) {
    const int an = a.tracked() ? a.node() : -1;
    const int bn = b.tracked() ? b.node() : -1;
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) t.accumulate(bn, ArrayX(-g));
    }));
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.array() * b.array());
  if (Tape* tape = joint_tape({&a, &b})) {
    auto ad = a.data_handle();
    auto bd = b.data_handle();
    const int an = a.tracked() ? a.node() : -1;
    const int bn = b.tracked() ? b.node() : -1;
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      if (an >= 0) t.accumulate(an, ArrayX(g * *bd));
      if (bn >= 0) t.accumulate(bn, ArrayX(g * *ad));
    }));
  }
  return out;
}

Tensor scale(const Tensor& a, Scalar s) { return affine(a, s, 0.0); }

Tensor affine(const Tensor& a, Scalar s, Scalar c) {
  Tensor out(a.shape(), s * a.array() + c);
  if (a.tracked()) {
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX(s * g));
    }));
  }
  return out;
}

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
  if (bias.size() != a.cols())
    throw std::invalid_argument("add_rowwise: bias length must equal column count");
  Matrix y = a.mat();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.array().data(), bias.size());
  Tensor out(a.shape(), flat_of(y));
  if (Tape* tape = joint_tape({&a, &bias})) {
    const int an = a.tracked() ? a.node() : -1;
    const int bn = bias.tracked() ? bias.node() : -1;
    const Index m = a.rows(), n = a.cols();
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) {
        Eigen::Map<const Matrix> G(g.data(), m, n);
        t.accumulate(bn, ArrayX(G.colwise().sum().transpose().array()));
      }
    }));
  }
  return out;
}

Tensor mul_colwise(const Tensor& a, const Tensor& coeff) {
  if (coeff.size() != a.rows())
    throw std::invalid_argument("mul_colwise: coefficient length must equal row count");
  Matrix y = a.mat();
  y.array().colwise() *= coeff.array();
  Tensor out(a.shape(), flat_of(y));
  if (Tape* tape = joint_tape({&a, &coeff})) {
    auto ad = a.data_handle();
    auto cd = coeff.data_handle();
    const int an = a.tracked() ? a.node() : -1;
    const int cn = coeff.tracked() ? coeff.node() : -1;
    const Index m = a.rows(), n = a.cols();
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, n);
      if (an >= 0) {
        Matrix da = G;
        da.array().colwise() *= *cd;
        t.accumulate(an, da);
      }
      if (cn >= 0) {
        Eigen::Map<const Matrix> A(ad->data(), m, n);
        t.accumulate(cn, ArrayX((G.array() * A.array()).rowwise().sum()));
      }
    }));
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out(a.shape(), a.array().max(Scalar(0)));
  if (a.tracked()) {
    auto ad = a.data_handle();
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX((*ad > Scalar(0)).select(g, ArrayX::Zero(g.size()))));
    }));
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  const ArrayX& x = a.array();
  ArrayX s = (x >= Scalar(0))
                 .select(Scalar(1) / (Scalar(1) + (-x).exp()),
                         x.exp() / (Scalar(1) + x.exp()));
  Tensor out(a.shape(), std::move(s));
  if (a.tracked()) {
    auto od = out.data_handle();
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX(g * *od * (Scalar(1) - *od)));
    }));
  }
  return out;
}

Tensor log_elem(const Tensor& a) {
  Tensor out(a.shape(), a.array().log());
  if (a.tracked()) {
    auto ad = a.data_handle();
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX(g / *ad));
    }));
  }
  return out;
}

Tensor pow_elem(const Tensor& a, Scalar exponent) {
  Tensor out(a.shape(), a.array().pow(exponent));
  if (a.tracked()) {
    auto ad = a.data_handle();
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      if (exponent == Scalar(0)) return;
      t.accumulate(an, ArrayX(g * exponent * ad->pow(exponent - Scalar(1))));
    }));
  }
  return out;
}

Tensor clamp(const Tensor& a, Scalar lo, Scalar hi) {
  Tensor out(a.shape(), a.array().max(lo).min(hi));
  if (a.tracked()) {
    auto ad = a.data_handle();
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      ArrayX da = (*ad >= lo && *ad <= hi).select(g, ArrayX::Zero(g.size()));
      t.accumulate(an, da);
    }));
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), a.array());
  if (a.tracked()) {
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, g);
    }));
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index m = parts[0].rows();
  Index total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix y(m, total);
  Index at = 0;
  for (const Tensor& p : parts) {
    y.middleCols(at, p.cols()) = p.mat();
    at += p.cols();
  }
  Tensor out({m, total}, flat_of(y));
  if (Tape* tape = joint_tape(parts)) {
    struct Part { int node; Index begin, cols; };
    std::vector<Part> meta;
    Index col = 0;
    for (const Tensor& p : parts) {
      meta.push_back({p.tracked() ? p.node() : -1, col, p.cols()});
      col += p.cols();
    }
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, total);
      for (const Part& pt : meta)
        if (pt.node >= 0) t.accumulate(pt.node, Matrix(G.middleCols(pt.begin, pt.cols)));
    }));
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Index n = parts[0].cols();
  Index total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) throw std::invalid_argument("concat_rows: column counts differ");
    total += p.rows();
  }
  Matrix y(total, n);
  Index at = 0;
  for (const Tensor& p : parts) {
    y.middleRows(at, p.rows()) = p.mat();
    at += p.rows();
  }
  Tensor out({total, n}, flat_of(y));
  if (Tape* tape = joint_tape(parts)) {
    struct Part { int node; Index begin, rows; };
    std::vector<Part> meta;
    Index row = 0;
    for (const Tensor& p : parts) {
      meta.push_back({p.tracked() ? p.node() : -1, row, p.rows()});
      row += p.rows();
    }
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), total, n);
      for (const Part& pt : meta)
        if (pt.node >= 0) t.accumulate(pt.node, Matrix(G.middleRows(pt.begin, pt.rows)));
    }));
  }
  return out;
}

Tensor slice_rows(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  Matrix y = a.mat().middleRows(begin, count);
  Tensor out({count, a.cols()}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    const Index m = a.rows(), n = a.cols();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Matrix da = Matrix::Zero(m, n);
      da.middleRows(begin, count) = Eigen::Map<const Matrix>(g.data(), count, n);
      t.accumulate(an, da);
    }));
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<Index>& idx) {
  const Index m = a.rows(), n = a.cols();
  const Index r = static_cast<Index>(idx.size());
  Matrix y = Matrix::Zero(r, n);
  auto src = a.mat();
  for (Index i = 0; i < r; ++i) {
    Index j = idx[static_cast<size_t>(i)];
    if (j < -1 || j >= m) throw std::invalid_argument("gather_rows: index out of range");
    if (j >= 0) y.row(i) = src.row(j);
  }
  Tensor out({r, n}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    auto ids = idx;
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), r, n);
      Matrix da = Matrix::Zero(m, n);
      for (Index i = 0; i < r; ++i)
        if (ids[static_cast<size_t>(i)] >= 0) da.row(ids[static_cast<size_t>(i)]) += G.row(i);
      t.accumulate(an, da);
    }));
  }
  return out;
}

Tensor row_sum(const Tensor& a) {
  const Index m = a.rows(), n = a.cols();
  Matrix y = a.mat().rowwise().sum();
  Tensor out({m, Index(1)}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Matrix da(m, n);
      da.colwise() = Eigen::Map<const Vector>(g.data(), m);
      t.accumulate(an, da);
    }));
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out({1}, ArrayX::Constant(1, a.array().sum()));
  if (a.tracked()) {
    const int an = a.node();
    const Index sz = a.size();
    out.bind(*a.tape(), a.tape()->push(1, [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX(ArrayX::Constant(sz, g(0))));
    }));
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const Index sz = a.size();
  Tensor out({1}, ArrayX::Constant(1, a.array().sum() / static_cast<Scalar>(sz)));
  if (a.tracked()) {
    const int an = a.node();
    out.bind(*a.tape(), a.tape()->push(1, [=](Tape& t, const ArrayX& g) {
      t.accumulate(an, ArrayX(ArrayX::Constant(sz, g(0) / static_cast<Scalar>(sz))));
    }));
  }
  return out;
}

namespace {

void check_segments(const Tensor& a, const std::vector<Index>& seg, Index n_seg,
                    const char* op) {
  if (static_cast<Index>(seg.size()) != a.rows())
    throw std::invalid_argument(std::string(op) + ": segment ids must cover every row");
  for (Index s : seg)
    if (s < 0 || s >= n_seg)
      throw std::invalid_argument(std::string(op) + ": segment id out of range");
}

}  // namespace

Tensor segment_sum(const Tensor& a, const std::vector<Index>& seg, Index n_seg) {
  check_segments(a, seg, n_seg, "segment_sum");
  const Index m = a.rows(), n = a.cols();
  Matrix y = Matrix::Zero(n_seg, n);
  auto src = a.mat();
  for (Index i = 0; i < m; ++i) y.row(seg[static_cast<size_t>(i)]) += src.row(i);
  Tensor out({n_seg, n}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    auto ids = seg;
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), n_seg, n);
      Matrix da(m, n);
      for (Index i = 0; i < m; ++i) da.row(i) = G.row(ids[static_cast<size_t>(i)]);
      t.accumulate(an, da);
    }));
  }
  return out;
}

Tensor segment_mean(const Tensor& a, const std::vector<Index>& seg, Index n_seg) {
  check_segments(a, seg, n_seg, "segment_mean");
  const Index m = a.rows(), n = a.cols();
  Matrix y = Matrix::Zero(n_seg, n);
  std::vector<Index> count(static_cast<size_t>(n_seg), 0);
  auto src = a.mat();
  for (Index i = 0; i < m; ++i) {
    y.row(seg[static_cast<size_t>(i)]) += src.row(i);
    ++count[static_cast<size_t>(seg[static_cast<size_t>(i)])];
  }
  for (Index s = 0; s < n_seg; ++s)
    if (count[static_cast<size_t>(s)] > 0)
      y.row(s) /= static_cast<Scalar>(count[static_cast<size_t>(s)]);
  Tensor out({n_seg, n}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    auto ids = seg;
    out.bind(*a.tape(), a.tape()->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), n_seg, n);
      Matrix da(m, n);
      for (Index i = 0; i < m; ++i) {
        Index s = ids[static_cast<size_t>(i)];
        da.row(i) = G.row(s) / static_cast<Scalar>(count[static_cast<size_t>(s)]);
      }
      t.accumulate(an, da);
    }));
  }
  return out;
}

SegmentMax segment_max(const Tensor& a, const std::vector<Index>& seg, Index n_seg) {
  check_segments(a, seg, n_seg, "segment_max");
  const Index m = a.rows(), n = a.cols();
  Matrix y = Matrix::Constant(n_seg, n, -std::numeric_limits<Scalar>::infinity());
  std::vector<Index> arg(static_cast<size_t>(n_seg * n), -1);
  auto src = a.mat();
  for (Index i = 0; i < m; ++i) {
    Index s = seg[static_cast<size_t>(i)];
    for (Index c = 0; c < n; ++c) {
      if (src(i, c) > y(s, c)) {  // strict: ties keep the lowest row
        y(s, c) = src(i, c);
        arg[static_cast<size_t>(s * n + c)] = i;
      }
    }
  }
  for (Index s = 0; s < n_seg; ++s)
    if (arg[static_cast<size_t>(s * n)] < 0)
      throw std::invalid_argument("segment_max: empty segment");
  SegmentMax result;
  result.argmax_row = arg;
  result.values = Tensor({n_seg, n}, flat_of(y));
  if (a.tracked()) {
    const int an = a.node();
    result.values.bind(*a.tape(), a.tape()->push(n_seg * n, [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), n_seg, n);
      Matrix da = Matrix::Zero(m, n);
      for (Index s = 0; s < n_seg; ++s)
        for (Index c = 0; c < n; ++c)
          da(arg[static_cast<size_t>(s * n + c)], c) += G(s, c);
      t.accumulate(an, da);
    }));
  }
  return result;
}

RowSoftmax softmax_rows(const Tensor& x, const BoolMatrix* mask) {
  const Index m = x.rows(), n = x.cols();
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw std::invalid_argument("softmax_rows: mask shape mismatch");
  Matrix p = Matrix::Zero(m, n);
  std::vector<std::uint8_t> row_valid(static_cast<size_t>(m), 0);
  auto src = x.mat();
  for (Index i = 0; i < m; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < n; ++j)
      if (!mask || (*mask)(i, j)) mx = std::max(mx, src(i, j));
    if (!std::isfinite(mx)) continue;  // all masked
    row_valid[static_cast<size_t>(i)] = 1;
    Scalar total = 0;
    for (Index j = 0; j < n; ++j) {
      if (!mask || (*mask)(i, j)) {
        p(i, j) = std::exp(src(i, j) - mx);
        total += p(i, j);
      }
    }
    p.row(i) /= total;
  }
  RowSoftmax result;
  result.row_valid = row_valid;
  result.probs = Tensor({m, n}, flat_of(p));
  if (x.tracked()) {
    const int xn = x.node();
    auto pd = result.probs.data_handle();
    result.probs.bind(*x.tape(), x.tape()->push(m * n, [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, n);
      Eigen::Map<const Matrix> P(pd->data(), m, n);
      Matrix dx(m, n);
      ArrayX dot = (G.array() * P.array()).rowwise().sum();
      for (Index i = 0; i < m; ++i)
        dx.row(i) = (P.row(i).array() * (G.row(i).array() - dot(i))).matrix();
      t.accumulate(xn, dx);
    }));
  }
  return result;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  const Index m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n)
    throw std::invalid_argument("batch_norm: affine parameters must have one entry per channel");
  if (m < 1) throw std::invalid_argument("batch_norm: needs at least one row");
  auto src = x.mat();
  Eigen::RowVectorXd mu = src.colwise().mean();
  Matrix centered = src.rowwise() - mu;
  RowArray var = centered.array().square().colwise().sum() / static_cast<Scalar>(m);
  RowArray inv = (var + eps).rsqrt();
  Matrix xhat = (centered.array().rowwise() * inv).matrix();
  Eigen::Map<const Eigen::RowVectorXd> gvec(gamma.array().data(), n);
  Eigen::Map<const Eigen::RowVectorXd> bvec(beta.array().data(), n);
  Matrix y = (xhat.array().rowwise() * gvec.array()).matrix();
  y.rowwise() += bvec;
  Tensor out({m, n}, flat_of(y));
  if (Tape* tape = joint_tape({&x, &gamma, &beta})) {
    const int xn = x.tracked() ? x.node() : -1;
    const int gn = gamma.tracked() ? gamma.node() : -1;
    const int bn = beta.tracked() ? beta.node() : -1;
    auto gd = gamma.data_handle();
    auto xhat_ptr = std::make_shared<const Matrix>(std::move(xhat));
    auto inv_ptr = std::make_shared<const RowArray>(std::move(inv));
    out.bind(*tape, tape->push(out.size(), [=](Tape& t, const ArrayX& g) {
      Eigen::Map<const Matrix> G(g.data(), m, n);
      const Matrix& H = *xhat_ptr;
      if (bn >= 0) t.accumulate(bn, ArrayX(G.colwise().sum().transpose().array()));
      if (gn >= 0)
        t.accumulate(gn, ArrayX((G.array() * H.array()).colwise().sum().transpose()));
      if (xn >= 0) {
        RowArray gmean = G.array().colwise().mean();
        RowArray ghmean = (G.array() * H.array()).colwise().mean();
        Matrix dx = (G.array().rowwise() - gmean).matrix();
        dx.array() -= H.array().rowwise() * ghmean;
        RowArray coef =
            *inv_ptr * Eigen::Map<const RowArray>(gd->data(), n);
        dx.array().rowwise() *= coef;
        t.accumulate(xn, dx);
      }
    }));
  }
  return out;
}

// ---- gradient checking

GradReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<GradInput>& inputs, Scalar h) {
  // analytic pass on a fresh tape
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const GradInput& in : inputs) leaves.push_back(Tensor::leaf(tape, in.shape, in.value));
  Tensor out = f(leaves);
  if (out.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  if (!std::isfinite(out.value()))
    throw std::runtime_error("grad_check: f is not finite at the given inputs");
  tape.backward(out);
  std::vector<ArrayX> analytic;
  for (const Tensor& leaf : leaves) analytic.push_back(tape.grad(leaf));

  auto eval = [&](size_t which, Index elem, Scalar delta) {
    std::vector<Tensor> args;
    args.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
      ArrayX v = inputs[i].value;
      if (i == which) v(elem) += delta;
      args.emplace_back(inputs[i].shape, std::move(v));
    }
    Scalar y = f(args).value();
    if (!std::isfinite(y))
      throw std::runtime_error("grad_check: f is not finite at a perturbed input");
    return y;
  };

  GradReport report;
  for (size_t i = 0; i < inputs.size(); ++i) {
    GradReport::Param param;
    param.name = inputs[i].name;
    Scalar num_sq = 0;
    for (Index e = 0; e < inputs[i].value.size(); ++e) {
      Scalar numeric = (eval(i, e, h) - eval(i, e, -h)) / (2 * h);
      Scalar a = analytic[i](e);
      Scalar rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), Scalar(1e-8)});
      param.max_rel_err = std::max(param.max_rel_err, rel);
      num_sq += numeric * numeric;
    }
    param.analytic_norm = std::sqrt(analytic[i].square().sum());
    param.numeric_norm = std::sqrt(num_sq);
    report.max_rel_err = std::max(report.max_rel_err, param.max_rel_err);
    report.params.push_back(std::move(param));
  }
  return report;
}

}  // namespace octattn
