#pragma once

#include "ensa/param_store.hpp"
#include "ensa/tensor.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ensa {

// Logit written into masked attention slots. Finite so that fully masked rows
// stay NaN-free; exp(kMaskedLogit - max) underflows to exactly 0 otherwise.
inline constexpr double kMaskedLogit = -1e30;

using MaskMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class OpKind {
  Input,
  Param,
  MatMul,
  Add,
  AddRow,
  Sub,
  Mul,
  RowScale,
  Scale,
  SliceCols,
  ConcatCols,
  RowSoftmax,
  MaskedFill,
  Sigmoid,
  Gelu,
  Relu,
  LayerNorm,
  GatherRows,
  ScatterAddRows,
  SegmentMeanRows,
  Square,
  SumAll,
  MeanAll,
  Fused,
};

const char* op_name(OpKind kind);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }

  const Matrix& value() const;
  // Empty matrix when no gradient reached this node.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

class BackwardContext {
public:
  const Matrix& out_value() const;
  const Matrix& out_grad() const;
  std::size_t input_count() const { return inputs_.size(); }
  const Matrix& in_value(std::size_t k) const;
  bool needs_grad(std::size_t k) const;
  // Zero-initialised on first access. Only valid when needs_grad(k).
  Matrix& in_grad(std::size_t k);

private:
  friend class Graph;
  BackwardContext(Graph& g, int self, std::span<const int> inputs)
      : graph_(g), self_(self), inputs_(inputs) {}

  Graph& graph_;
  int self_;
  std::span<const int> inputs_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Tape of a single forward evaluation. Nodes are appended in topological
// order; backward() walks them once in reverse creation order.
class Graph {
public:
  enum class Mode { Train, Inference };

  explicit Graph(Mode mode = Mode::Train) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return mode_ == Mode::Train; }

  Var input(Matrix value, bool requires_grad = false, std::string label = "input");
  // Binds a stored parameter. Binding the same entry twice returns the same Var.
  Var param(ParamStore& store, const std::string& name);

  // Appends an op node. Throws NumericError when value has NaN/Inf.
  Var record(OpKind kind, std::string label, std::vector<Var> inputs, Matrix value,
             BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates to every node that requires a
  // gradient, then adds parameter gradients into their ParamStore. A graph
  // can be differentiated once; a second call throws.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value.mat(); }
  const Matrix& grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).grad.mat(); }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

private:
  friend class BackwardContext;

  struct Node {
    OpKind kind;
    std::string label;
    std::vector<int> inputs;
    Tensor2 value;
    Tensor2 grad;
    BackwardFn backward;
    bool requires_grad = false;
    ParamStore* store = nullptr;
  };

  Matrix& grad_slot(int id);
  void check_owner(const Var& v) const;

  Mode mode_;
  std::vector<Node> nodes_;
  std::map<std::pair<const ParamStore*, std::string>, int> bound_params_;
  bool differentiated_ = false;
};

// Ops. All shapes are checked; errors name the op and the offending shapes.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// a (r x c) + row (1 x c) broadcast over rows.
Var add_row(Var a, Var row);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Scales row i of a (r x c) by s(i, 0), s is r x 1.
Var row_scale(Var a, Var s);
Var scale(Var a, double factor);
Var slice_cols(Var a, Index start, Index count);
Var concat_cols(const std::vector<Var>& parts);
Var row_softmax(Var a);
// Entries where mask is true become kMaskedLogit and receive no gradient.
Var masked_fill(Var a, const MaskMatrix& mask);
Var sigmoid(Var a);
Var gelu(Var a);
Var relu(Var a);
// Per-row standardisation followed by column-wise gamma/beta (both 1 x c).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Row i of the result is a.row(index[i]); index -1 yields a zero row.
Var gather_rows(Var a, std::vector<int> index);
// result.row(index[i]) += a.row(i); index -1 drops the row.
Var scatter_add_rows(Var a, std::vector<int> index, Index out_rows);
// Mean over consecutive groups of `segment` rows, counting only rows whose
// row_mask entry is true (all rows if row_mask is empty). A group with no
// counted rows yields zeros.
Var segment_mean_rows(Var a, Index segment, const Mask& row_mask = Mask());
Var square(Var a);
Var sum_all(Var a);
Var mean_all(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// Scalar-loop reference pieces shared by ops and tests.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace ensa
