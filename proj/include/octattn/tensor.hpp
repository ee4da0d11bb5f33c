#pragma once

#include "octattn/types.hpp"

#include <functional>
#include <memory>
#include <string>

namespace octattn {

class Tape;

// Immutable dense value array with an optional handle onto a reverse-mode
// tape. Data is row-major; 1-D tensors behave as 1xN in matrix contexts.
class Tensor {
 public:
  Tensor() = default;

  // untracked value
  Tensor(Shape shape, ArrayX data);
  static Tensor constant(Shape shape, ArrayX data);
  static Tensor constant(const Matrix& m);
  static Tensor scalar_value(Scalar v);
  static Tensor zeros(Shape shape);

  // tracked leaf (a parameter: participates in backward)
  static Tensor leaf(Tape& tape, Shape shape, ArrayX data);
  static Tensor leaf(Tape& tape, const Matrix& m);

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  Index size() const { return data_ ? data_->size() : 0; }

  // 2-D view; a 1-D tensor maps to a single row
  Index rows() const;
  Index cols() const;
  Eigen::Map<const Matrix> mat() const;
  const ArrayX& array() const { return *data_; }
  Scalar value() const;  // size-1 tensors

  bool tracked() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // internal: share the data buffer / bind to a tape node
  const std::shared_ptr<const ArrayX>& data_handle() const { return data_; }
  void bind(Tape& tape, int node);

 private:
  Shape shape_;
  std::shared_ptr<const ArrayX> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Wengert list. Built per forward pass, consumed by one backward() call.
// Single-threaded by design; independent tapes are independent.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const ArrayX& out_grad)>;

  int push(Index size, BackwardFn fn);
  size_t node_count() const { return nodes_.size(); }

  // runs reverse accumulation from a size-1 output
  void backward(const Tensor& out);

  // gradient of a tracked tensor, valid after backward(); zeros if the
  // tensor never influenced the output
  ArrayX grad(const Tensor& t) const;

  void accumulate(int node, const ArrayX& g);
  void accumulate(int node, const Matrix& g);

 private:
  struct Node {
    Index size;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<ArrayX> grads_;
  std::vector<char> grad_set_;
};

// ---- forward operations (all register on the tape when any input is tracked)

Tensor matmul(const Tensor& a, const Tensor& b);     // [m x p] * [p x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T, [m x p] * [n x p]

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, Scalar s);
Tensor affine(const Tensor& a, Scalar s, Scalar c);  // s*a + c
Tensor add_rowwise(const Tensor& a, const Tensor& bias);   // bias per column
Tensor mul_colwise(const Tensor& a, const Tensor& coeff);  // row i scaled by coeff[i]

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor pow_elem(const Tensor& a, Scalar exponent);   // a > 0 for non-integer exponents
Tensor clamp(const Tensor& a, Scalar lo, Scalar hi); // zero gradient where clamped

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, Index begin, Index count);

// rows picked by index; -1 yields a zero row and routes no gradient
Tensor gather_rows(const Tensor& a, const std::vector<Index>& idx);

Tensor row_sum(const Tensor& a);  // [m x n] -> [m x 1]
Tensor sum(const Tensor& a);      // -> scalar
Tensor mean(const Tensor& a);     // -> scalar

Tensor segment_sum(const Tensor& a, const std::vector<Index>& seg, Index n_seg);
Tensor segment_mean(const Tensor& a, const std::vector<Index>& seg, Index n_seg);

// channelwise max per segment; ties go to the lowest input row, and the
// recorded argmax rows are exactly where the backward routes gradient
struct SegmentMax {
  Tensor values;                 // [n_seg x d]
  std::vector<Index> argmax_row; // n_seg*d entries, input row per (seg, channel)
};
SegmentMax segment_max(const Tensor& a, const std::vector<Index>& seg, Index n_seg);

// Row-wise masked softmax. Masked entries come out exactly 0; rows whose
// entries are all masked come out all-zero and are flagged.
struct RowSoftmax {
  Tensor probs;
  std::vector<std::uint8_t> row_valid;
};
RowSoftmax softmax_rows(const Tensor& x, const BoolMatrix* mask = nullptr);

// Per-channel standardization over the row axis with affine, current-batch
// statistics only (biased variance).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = 1e-5);

// ---- finite-difference gradient checking

struct GradInput {
  std::string name;
  Shape shape;
  ArrayX value;
};

struct GradReport {
  struct Param {
    std::string name;
    Scalar max_rel_err = 0;
    Scalar analytic_norm = 0;
    Scalar numeric_norm = 0;
  };
  std::vector<Param> params;
  Scalar max_rel_err = 0;
};

// f maps the input tensors (leaves on one tape for the analytic pass,
// constants for the perturbed evaluations) to a size-1 tensor. Relative
// error per element is |a-n| / max(|a|,|n|,1e-8).
GradReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<GradInput>& inputs, Scalar h = 1e-5);

}  // namespace octattn
