#include "ensa/balltree.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>

namespace ensa {

void PointCloud::validate() const {
  if (positions.rows() < 1) throw ValueError("point cloud is empty");
  if (positions.cols() != 3) {
    throw ShapeError("positions must be n x 3, got " + shape_str(positions));
  }
  if (features.rows() != positions.rows()) {
    throw ShapeError("features " + shape_str(features) + " do not match positions " +
                     shape_str(positions));
  }
  if (targets.size() != 0 && targets.rows() != positions.rows()) {
    throw ShapeError("targets " + shape_str(targets) + " do not match positions " +
                     shape_str(positions));
  }
  if (!all_finite(positions) || !all_finite(features) || !all_finite(targets)) {
    throw NumericError("point cloud contains non-finite values");
  }
}

bool is_power_of_two(Index v) { return v > 0 && (v & (v - 1)) == 0; }

std::vector<int> BallTree::slot_index() const {
  std::vector<int> idx(static_cast<std::size_t>(n_padded));
  for (Index s = 0; s < n_padded; ++s) {
    const int p = perm[static_cast<std::size_t>(s)];
    idx[static_cast<std::size_t>(s)] = p < n ? p : -1;
  }
  return idx;
}

namespace {

void split(const Matrix& pos, std::span<int> ids, Index block) {
  const auto size = static_cast<Index>(ids.size());
  if (size <= 1) return;

  Index left = size / 2;
  if (size > block) {
    const Index blocks = size / block;
    left = ((blocks + 1) / 2) * block;
  }

  int axis = 0;
  double best = -1.0;
  for (int a = 0; a < 3; ++a) {
    double lo = pos(ids[0], a), hi = lo;
    for (int id : ids) {
      lo = std::min(lo, pos(id, a));
      hi = std::max(hi, pos(id, a));
    }
    if (hi - lo > best) {
      best = hi - lo;
      axis = a;
    }
  }

  auto less = [&](int x, int y) {
    const double px = pos(x, axis), py = pos(y, axis);
    return px < py || (px == py && x < y);
  };
  std::nth_element(ids.begin(), ids.begin() + left, ids.end(), less);
  split(pos, ids.first(static_cast<std::size_t>(left)), block);
  split(pos, ids.subspan(static_cast<std::size_t>(left)), block);
}

}  // namespace

BallTree build_ball_tree(const Matrix& positions, Index local_size, Index compressed_size) {
  if (positions.rows() < 1) throw ValueError("build_ball_tree: empty point cloud");
  if (positions.cols() != 3) {
    throw ShapeError("build_ball_tree: positions must be n x 3, got " + shape_str(positions));
  }
  if (!is_power_of_two(local_size) || !is_power_of_two(compressed_size)) {
    throw ValueError("build_ball_tree: ball sizes must be powers of two, got local " +
                     std::to_string(local_size) + ", compressed " +
                     std::to_string(compressed_size));
  }
  if (!all_finite(positions)) throw NumericError("build_ball_tree: non-finite positions");

  const Index n = positions.rows();
  const Index block = std::max(local_size, compressed_size);
  const Index n_padded = ((n + block - 1) / block) * block;

  Matrix padded(n_padded, 3);
  padded.topRows(n) = positions;
  for (Index i = n; i < n_padded; ++i) padded.row(i) = positions.row(n - 1);

  BallTree tree;
  tree.n = n;
  tree.n_padded = n_padded;
  tree.local_size = local_size;
  tree.compressed_size = compressed_size;
  tree.perm.resize(static_cast<std::size_t>(n_padded));
  for (Index i = 0; i < n_padded; ++i) tree.perm[static_cast<std::size_t>(i)] = static_cast<int>(i);
  split(padded, tree.perm, block);

  tree.inv_perm.assign(static_cast<std::size_t>(n_padded), -1);
  tree.mask.resize(n_padded);
  tree.positions.resize(n_padded, 3);
  for (Index s = 0; s < n_padded; ++s) {
    const int p = tree.perm[static_cast<std::size_t>(s)];
    tree.inv_perm[static_cast<std::size_t>(p)] = static_cast<int>(s);
    tree.mask(s) = p < n;
    tree.positions.row(s) = padded.row(p);
  }
  return tree;
}

BallTree build_ball_tree(const PointCloud& cloud, Index local_size, Index compressed_size) {
  cloud.validate();
  return build_ball_tree(cloud.positions, local_size, compressed_size);
}

TreeSet build_tree_set(const PointCloud& cloud, Index local_size, Index compressed_size,
                       const Eigen::Matrix3d& rotation) {
  const double err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-10)) {
    throw ValueError("build_tree_set: rotation is not orthogonal (max |R^T R - I| = " +
                     std::to_string(err) + ")");
  }
  cloud.validate();
  TreeSet set;
  set.main = build_ball_tree(cloud.positions, local_size, compressed_size);
  const Matrix rotated = cloud.positions * rotation.transpose();
  set.rotated = build_ball_tree(rotated, local_size, compressed_size);
  // Both trees describe the original geometry; slot positions are unrotated.
  for (Index s = 0; s < set.rotated.n_padded; ++s) {
    const int p = set.rotated.perm[static_cast<std::size_t>(s)];
    set.rotated.positions.row(s) = cloud.positions.row(std::min<Index>(p, cloud.size() - 1));
  }
  return set;
}

Eigen::Matrix3d default_rotation() {
  const double a = std::numbers::pi / 4.0;
  const Eigen::Matrix3d rx = Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix();
  const Eigen::Matrix3d ry = Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Matrix3d rz = Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

Matrix gather_to_tree(const BallTree& tree, const Matrix& features) {
  if (features.rows() != tree.n) {
    throw ShapeError("gather_to_tree: features " + shape_str(features) + " for a tree over " +
                     std::to_string(tree.n) + " points");
  }
  Matrix out = Matrix::Zero(tree.n_padded, features.cols());
  for (Index s = 0; s < tree.n_padded; ++s) {
    const int p = tree.perm[static_cast<std::size_t>(s)];
    if (p < tree.n) out.row(s) = features.row(p);
  }
  return out;
}

Matrix scatter_from_tree(const BallTree& tree, const Matrix& tree_features) {
  if (tree_features.rows() != tree.n_padded) {
    throw ShapeError("scatter_from_tree: input " + shape_str(tree_features) + " for a tree of " +
                     std::to_string(tree.n_padded) + " slots");
  }
  Matrix out(tree.n, tree_features.cols());
  for (Index i = 0; i < tree.n; ++i) {
    out.row(i) = tree_features.row(tree.inv_perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace ensa
