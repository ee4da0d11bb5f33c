#include "octattn/semantic_pe.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace octattn {

SegParams make_seg_params(Rng& rng, Index d) {
  SegParams p;
  p.conv = make_subm_conv_params(rng, d, d);
  const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  p.w = Tensor::constant(uniform_matrix(rng, d, 1, bound));
  p.b = Tensor::constant({1}, ArrayX::Zero(1));
  return p;
}

SegScores seg_branch(const SparseVoxelGrid& grid, const SegParams& params) {
  Tensor h = relu(subm_conv(grid, grid.features(), params.conv));
  Tensor logits = add_rowwise(matmul(h, params.w), params.b);
  SegScores out;
  out.scores = sigmoid(logits);
  return out;
}

std::vector<Box> load_boxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Box> boxes;
  std::string line;
  int line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<Scalar> v;
    bool header = false;
    while (std::getline(ss, tok, ',')) {
      try {
        v.push_back(std::stod(tok));
      } catch (const std::exception&) {
        if (first && v.empty()) {
          header = true;
          break;
        }
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": malformed value '" + tok + "'");
      }
    }
    first = false;
    if (header) continue;
    if (v.size() != 7)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 7 columns");
    Box b;
    b.scene_id = static_cast<int>(v[0]);
    b.min = Vec3(v[1], v[2], v[3]);
    b.max = Vec3(v[4], v[5], v[6]);
    if ((b.min.array() >= b.max.array()).any())
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": box min must be below max");
    boxes.push_back(b);
  }
  return boxes;
}

void save_boxes(const std::string& path, const std::vector<Box>& boxes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "scene_id,xmin,ymin,zmin,xmax,ymax,zmax\n";
  out.precision(17);
  for (const Box& b : boxes) {
    out << b.scene_id << ',' << b.min(0) << ',' << b.min(1) << ',' << b.min(2) << ','
        << b.max(0) << ',' << b.max(1) << ',' << b.max(2) << '\n';
  }
}

std::vector<std::uint8_t> label_voxels(const SparseVoxelGrid& grid,
                                       const std::vector<Box>& boxes) {
  for (const Box& b : boxes)
    if ((b.min.array() >= b.max.array()).any())
      throw std::invalid_argument("label_voxels: box min must be below max");
  std::vector<std::uint8_t> labels(static_cast<size_t>(grid.size()), 0);
  for (Index i = 0; i < grid.size(); ++i) {
    const Vec3 c = grid.center(i);
    for (const Box& b : boxes) {
      if (b.scene_id == grid.batch_ids()[static_cast<size_t>(i)] && b.contains(c)) {
        labels[static_cast<size_t>(i)] = 1;
        break;
      }
    }
  }
  return labels;
}

Tensor focal_loss(const Tensor& scores, const std::vector<std::uint8_t>& labels,
                  Scalar alpha, Scalar gamma) {
  const Index m = scores.rows();
  if (static_cast<Index>(labels.size()) != m)
    throw std::invalid_argument("focal_loss: one label per score required");
  ArrayX y(m), alpha_t(m);
  for (Index i = 0; i < m; ++i) {
    const bool fg = labels[static_cast<size_t>(i)] != 0;
    y(i) = fg ? 1.0 : 0.0;
    alpha_t(i) = fg ? alpha : 1 - alpha;
  }
  Tensor y_t = Tensor::constant({m, 1}, y);
  Tensor ym_t = Tensor::constant({m, 1}, 1 - y);
  Tensor at_t = Tensor::constant({m, 1}, alpha_t);
  // p_t = S for foreground, 1-S for background
  Tensor p_t = add(mul(y_t, scores), mul(ym_t, affine(scores, -1, 1)));
  Tensor p_c = clamp(p_t, 1e-7, 1 - 1e-7);
  Tensor per_voxel = mul(at_t, mul(pow_elem(affine(p_c, -1, 1), gamma), log_elem(p_c)));
  return scale(mean(per_voxel), -1);
}

namespace {

Tensor position_block(const Matrix& centers, const Vector& scores) {
  const Index m = centers.rows();
  if (scores.size() != m)
    throw std::invalid_argument("sape: centers and scores disagree on length");
  Matrix pos(m, 4);
  pos.leftCols(3) = centers;
  pos.col(3) = scores;
  return Tensor::constant(pos);
}

}  // namespace

Tensor sape(const Tensor& features, const Matrix& centers, const Vector& scores,
            const Tensor& w) {
  if (w.rows() != features.cols() + 4)
    throw std::invalid_argument("sape: weight must be (d+4) x d");
  return matmul(concat_cols({position_block(centers, scores), features}), w);
}

Tensor sape_split(const Tensor& features, const Matrix& centers, const Vector& scores,
                  const Tensor& w) {
  if (w.rows() != features.cols() + 4)
    throw std::invalid_argument("sape: weight must be (d+4) x d");
  Tensor w_pos = slice_rows(w, 0, 4);
  Tensor w_feat = slice_rows(w, 4, features.cols());
  return add(matmul(position_block(centers, scores), w_pos), matmul(features, w_feat));
}

Matrix sam_mask(const Vector& score_q, const Vector& score_k, const SamConfig& cfg) {
  if (!(cfg.gamma > 0)) throw std::invalid_argument("sam_mask: gamma must be positive");
  Matrix mask = Matrix::Zero(score_q.size(), score_k.size());
  for (Index q = 0; q < score_q.size(); ++q) {
    if (score_q(q) < cfg.delta_q) continue;  // background query rows stay unmasked
    for (Index k = 0; k < score_k.size(); ++k)
      if (score_k(k) < cfg.delta_k) mask(q, k) = -cfg.gamma;
  }
  return mask;
}

}  // namespace octattn
