#pragma once

#include "ensa/tensor.hpp"

#include <vector>

namespace ensa {

// One sample: n points with positions (n x 3), input features (n x F) and
// optional regression targets (n x T, T may be 0).
struct PointCloud {
  Matrix positions;
  Matrix features;
  Matrix targets;

  Index size() const { return positions.rows(); }
  Index feature_dim() const { return features.cols(); }
  Index target_dim() const { return targets.cols(); }

  // Throws on inconsistent row counts, wrong position width, n == 0 or
  // non-finite entries.
  void validate() const;
};

// Points reordered so that every aligned block of `local_size` (resp.
// `compressed_size`) slots is one spatial ball. Slots past the real points
// are padding: perm[slot] >= n and mask[slot] == false.
struct BallTree {
  Index n = 0;
  Index n_padded = 0;
  Index local_size = 1;
  Index compressed_size = 1;
  std::vector<int> perm;      // slot -> point id (ids >= n are padding)
  std::vector<int> inv_perm;  // point id -> slot
  Mask mask;                  // slot is a real point
  Matrix positions;           // n_padded x 3 in slot order; padding copies the last point

  Index local_ball_count() const { return n_padded / local_size; }
  Index compressed_ball_count() const { return n_padded / compressed_size; }
  // Slot -> original index, -1 for padding. Serves both gather_rows and
  // scatter_add_rows between point order and slot order.
  std::vector<int> slot_index() const;
};

struct TreeSet {
  BallTree main;
  BallTree rotated;
};

bool is_power_of_two(Index v);

// Balanced median-split tree. Each split cuts along the axis of largest
// coordinate spread (lowest axis on ties), ordering by coordinate and then by
// point id, with split sizes chosen so that ball boundaries fall on multiples
// of max(local_size, compressed_size). Recursion continues to single slots.
BallTree build_ball_tree(const Matrix& positions, Index local_size, Index compressed_size);
BallTree build_ball_tree(const PointCloud& cloud, Index local_size, Index compressed_size);

// `rotation` must be orthogonal to 1e-10; the rotated tree is built on
// positions * rotation^T.
TreeSet build_tree_set(const PointCloud& cloud, Index local_size, Index compressed_size,
                       const Eigen::Matrix3d& rotation);

// Rx(45 deg), then Ry(45 deg), then Rz(45 deg).
Eigen::Matrix3d default_rotation();

// n_padded x F rows in slot order; padding rows are zero.
Matrix gather_to_tree(const BallTree& tree, const Matrix& features);
// n x F rows in original order; padding rows are dropped.
Matrix scatter_from_tree(const BallTree& tree, const Matrix& tree_features);

}  // namespace ensa
