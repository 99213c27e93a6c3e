#include "ensa/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ensa {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::RowScale: return "row_scale";
    case OpKind::Scale: return "scale";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::RowSoftmax: return "row_softmax";
    case OpKind::MaskedFill: return "masked_fill";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Gelu: return "gelu";
    case OpKind::Relu: return "relu";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::ScatterAddRows: return "scatter_add_rows";
    case OpKind::SegmentMeanRows: return "segment_mean_rows";
    case OpKind::Square: return "square";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::Fused: return "fused";
  }
  return "?";
}

const Matrix& Var::value() const { return graph_->value(id_); }
const Matrix& Var::grad() const { return graph_->grad(id_); }

const Matrix& BackwardContext::out_value() const { return graph_.value(self_); }
const Matrix& BackwardContext::out_grad() const { return graph_.grad(self_); }
const Matrix& BackwardContext::in_value(std::size_t k) const { return graph_.value(inputs_[k]); }
bool BackwardContext::needs_grad(std::size_t k) const { return graph_.requires_grad(inputs_[k]); }
Matrix& BackwardContext::in_grad(std::size_t k) { return graph_.grad_slot(inputs_[k]); }

Matrix& Graph::grad_slot(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor2(n.value.rows(), n.value.cols());
  return n.grad.mat();
}

void Graph::check_owner(const Var& v) const {
  if (!v.valid() || &v.graph() != this) throw ValueError("Var does not belong to this graph");
}

Var Graph::input(Matrix value, bool requires_grad, std::string label) {
  if (!all_finite(value)) throw NumericError("input '" + label + "' contains non-finite values");
  Node n{OpKind::Input, std::move(label), {}, Tensor2(std::move(value)), {}, {},
         requires_grad && grad_enabled(), nullptr};
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(ParamStore& store, const std::string& name) {
  const auto key = std::make_pair(static_cast<const ParamStore*>(&store), name);
  if (auto it = bound_params_.find(key); it != bound_params_.end()) return Var(this, it->second);
  Node n{OpKind::Param, name, {}, Tensor2(store.value(name)), {}, {}, grad_enabled(), &store};
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  bound_params_.emplace(key, id);
  return Var(this, id);
}

Var Graph::record(OpKind kind, std::string label, std::vector<Var> inputs, Matrix value,
                  BackwardFn backward) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  bool needs = false;
  for (const Var& v : inputs) {
    check_owner(v);
    ids.push_back(v.id());
    needs = needs || requires_grad(v.id());
  }
  if (!all_finite(value)) {
    throw NumericError(std::string(op_name(kind)) + (label.empty() ? "" : " '" + label + "'") +
                       " produced non-finite output of shape " + shape_str(value));
  }
  Node n{kind, std::move(label), std::move(ids), Tensor2(std::move(value)), {},
         needs && grad_enabled() ? std::move(backward) : BackwardFn{}, needs && grad_enabled(),
         nullptr};
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::backward(Var loss) {
  check_owner(loss);
  if (!grad_enabled()) throw ValueError("backward() on an inference-mode graph");
  if (differentiated_) {
    throw ValueError("backward() already ran on this graph; build a new graph per step");
  }
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward() needs a 1x1 loss, got " + shape_str(loss.value()));
  }
  differentiated_ = true;
  grad_slot(loss.id())(0, 0) = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    BackwardContext ctx(*this, id, n.inputs);
    n.backward(ctx);
  }
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::Param && n.store != nullptr && !n.grad.empty()) {
      n.store->accumulate_grad(n.label, n.grad.mat());
    }
  }
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void require_same(OpKind kind, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_fail(kind, "shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    shape_fail(OpKind::MatMul,
               "inner dimensions differ " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return a.graph().record(OpKind::MatMul, "", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Matrix& g = ctx.out_grad();
    if (ctx.needs_grad(0)) ctx.in_grad(0).noalias() += g * ctx.in_value(1).transpose();
    if (ctx.needs_grad(1)) ctx.in_grad(1).noalias() += ctx.in_value(0).transpose() * g;
  });
}

Var add(Var a, Var b) {
  require_same(OpKind::Add, a, b);
  Matrix out = a.value() + b.value();
  return a.graph().record(OpKind::Add, "", {a, b}, std::move(out), [](BackwardContext& ctx) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (ctx.needs_grad(k)) ctx.in_grad(k) += ctx.out_grad();
    }
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    shape_fail(OpKind::AddRow, "cannot broadcast " + shape_str(row.value()) + " over " +
                                   shape_str(a.value()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.graph().record(OpKind::AddRow, "", {a, row}, std::move(out), [](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) ctx.in_grad(0) += ctx.out_grad();
    if (ctx.needs_grad(1)) ctx.in_grad(1) += ctx.out_grad().colwise().sum();
  });
}

Var sub(Var a, Var b) {
  require_same(OpKind::Sub, a, b);
  Matrix out = a.value() - b.value();
  return a.graph().record(OpKind::Sub, "", {a, b}, std::move(out), [](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) ctx.in_grad(0) += ctx.out_grad();
    if (ctx.needs_grad(1)) ctx.in_grad(1) -= ctx.out_grad();
  });
}

Var mul(Var a, Var b) {
  require_same(OpKind::Mul, a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return a.graph().record(OpKind::Mul, "", {a, b}, std::move(out), [](BackwardContext& ctx) {
    const Matrix& g = ctx.out_grad();
    if (ctx.needs_grad(0)) ctx.in_grad(0) += g.cwiseProduct(ctx.in_value(1));
    if (ctx.needs_grad(1)) ctx.in_grad(1) += g.cwiseProduct(ctx.in_value(0));
  });
}

Var row_scale(Var a, Var s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    shape_fail(OpKind::RowScale, "scale vector " + shape_str(s.value()) + " for " +
                                     shape_str(a.value()));
  }
  Matrix out = s.value().col(0).asDiagonal() * a.value();
  return a.graph().record(OpKind::RowScale, "", {a, s}, std::move(out), [](BackwardContext& ctx) {
    const Matrix& g = ctx.out_grad();
    if (ctx.needs_grad(0)) ctx.in_grad(0) += ctx.in_value(1).col(0).asDiagonal() * g;
    if (ctx.needs_grad(1)) {
      ctx.in_grad(1).col(0) += g.cwiseProduct(ctx.in_value(0)).rowwise().sum();
    }
  });
}

Var scale(Var a, double factor) {
  Matrix out = a.value() * factor;
  return a.graph().record(OpKind::Scale, "", {a}, std::move(out), [factor](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) ctx.in_grad(0) += factor * ctx.out_grad();
  });
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    shape_fail(OpKind::SliceCols, "columns [" + std::to_string(start) + ", " +
                                      std::to_string(start + count) + ") out of range for " +
                                      shape_str(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return a.graph().record(OpKind::SliceCols, "", {a}, std::move(out),
                          [start, count](BackwardContext& ctx) {
                            if (ctx.needs_grad(0)) {
                              ctx.in_grad(0).middleCols(start, count) += ctx.out_grad();
                            }
                          });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) shape_fail(OpKind::ConcatCols, "no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      shape_fail(OpKind::ConcatCols, "row count mismatch " + shape_str(parts.front().value()) +
                                         " vs " + shape_str(p.value()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().graph().record(OpKind::ConcatCols, "", parts, std::move(out),
                                      [](BackwardContext& ctx) {
                                        Index at = 0;
                                        for (std::size_t k = 0; k < ctx.input_count(); ++k) {
                                          const Index w = ctx.in_value(k).cols();
                                          if (ctx.needs_grad(k)) {
                                            ctx.in_grad(k) += ctx.out_grad().middleCols(at, w);
                                          }
                                          at += w;
                                        }
                                      });
}

Var row_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return a.graph().record(OpKind::RowSoftmax, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Matrix& p = ctx.out_value();
    const Matrix& g = ctx.out_grad();
    Matrix& gi = ctx.in_grad(0);
    for (Index i = 0; i < p.rows(); ++i) {
      const double dot = p.row(i).dot(g.row(i));
      gi.row(i).array() += p.row(i).array() * (g.row(i).array() - dot);
    }
  });
}

Var masked_fill(Var a, const MaskMatrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    shape_fail(OpKind::MaskedFill, "mask " + shape_str(mask.rows(), mask.cols()) + " for " +
                                       shape_str(a.value()));
  }
  Matrix out = mask.select(Matrix::Constant(a.rows(), a.cols(), kMaskedLogit), a.value());
  return a.graph().record(OpKind::MaskedFill, "", {a}, std::move(out),
                          [mask](BackwardContext& ctx) {
                            if (!ctx.needs_grad(0)) return;
                            ctx.in_grad(0) += mask.select(Matrix::Zero(mask.rows(), mask.cols()),
                                                          ctx.out_grad());
                          });
}

Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return a.graph().record(OpKind::Sigmoid, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Matrix& s = ctx.out_value();
    ctx.in_grad(0).array() += ctx.out_grad().array() * s.array() * (1.0 - s.array());
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var gelu(Var a) {
  Matrix out = a.value().unaryExpr(&gelu_value);
  return a.graph().record(OpKind::Gelu, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    ctx.in_grad(0).array() +=
        ctx.out_grad().array() * ctx.in_value(0).unaryExpr(&gelu_derivative).array();
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.graph().record(OpKind::Relu, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    ctx.in_grad(0).array() +=
        (ctx.in_value(0).array() > 0.0).select(ctx.out_grad().array(), 0.0);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Index c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    shape_fail(OpKind::LayerNorm, "gamma " + shape_str(gamma.value()) + " / beta " +
                                      shape_str(beta.value()) + " for input " +
                                      shape_str(x.value()));
  }
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), c);
  Eigen::VectorXd inv_std(v.rows());
  for (Index i = 0; i < v.rows(); ++i) {
    const double mean = v.row(i).mean();
    const double var = (v.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  return x.graph().record(
      OpKind::LayerNorm, "", {x, gamma, beta}, std::move(out),
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardContext& ctx) {
        const Matrix& g = ctx.out_grad();
        const Matrix& gam = ctx.in_value(1);
        if (ctx.needs_grad(0)) {
          Matrix& gx = ctx.in_grad(0);
          for (Index i = 0; i < g.rows(); ++i) {
            const Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(gam.row(0));
            const double m1 = dxhat.mean();
            const double m2 = dxhat.dot(xhat.row(i)) / static_cast<double>(dxhat.size());
            gx.row(i).array() += inv_std(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
          }
        }
        if (ctx.needs_grad(1)) ctx.in_grad(1) += g.cwiseProduct(xhat).colwise().sum();
        if (ctx.needs_grad(2)) ctx.in_grad(2) += g.colwise().sum();
      });
}

Var gather_rows(Var a, std::vector<int> index) {
  const Matrix& v = a.value();
  Matrix out = Matrix::Zero(static_cast<Index>(index.size()), v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int src = index[i];
    if (src < -1 || src >= v.rows()) {
      shape_fail(OpKind::GatherRows, "row index " + std::to_string(src) + " out of range for " +
                                         shape_str(v));
    }
    if (src >= 0) out.row(static_cast<Index>(i)) = v.row(src);
  }
  return a.graph().record(OpKind::GatherRows, "", {a}, std::move(out),
                          [index = std::move(index)](BackwardContext& ctx) {
                            if (!ctx.needs_grad(0)) return;
                            Matrix& ga = ctx.in_grad(0);
                            const Matrix& g = ctx.out_grad();
                            for (std::size_t i = 0; i < index.size(); ++i) {
                              if (index[i] >= 0) ga.row(index[i]) += g.row(static_cast<Index>(i));
                            }
                          });
}

Var scatter_add_rows(Var a, std::vector<int> index, Index out_rows) {
  const Matrix& v = a.value();
  if (static_cast<Index>(index.size()) != v.rows()) {
    shape_fail(OpKind::ScatterAddRows, "index length " + std::to_string(index.size()) +
                                           " for input " + shape_str(v));
  }
  Matrix out = Matrix::Zero(out_rows, v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int dst = index[i];
    if (dst < -1 || dst >= out_rows) {
      shape_fail(OpKind::ScatterAddRows, "row index " + std::to_string(dst) +
                                             " out of range for output rows " +
                                             std::to_string(out_rows));
    }
    if (dst >= 0) out.row(dst) += v.row(static_cast<Index>(i));
  }
  return a.graph().record(OpKind::ScatterAddRows, "", {a}, std::move(out),
                          [index = std::move(index)](BackwardContext& ctx) {
                            if (!ctx.needs_grad(0)) return;
                            Matrix& ga = ctx.in_grad(0);
                            const Matrix& g = ctx.out_grad();
                            for (std::size_t i = 0; i < index.size(); ++i) {
                              if (index[i] >= 0) ga.row(static_cast<Index>(i)) += g.row(index[i]);
                            }
                          });
}

Var segment_mean_rows(Var a, Index segment, const Mask& row_mask) {
  const Matrix& v = a.value();
  if (segment <= 0 || v.rows() % segment != 0) {
    shape_fail(OpKind::SegmentMeanRows, "segment " + std::to_string(segment) +
                                            " does not divide rows of " + shape_str(v));
  }
  if (row_mask.size() != 0 && row_mask.size() != v.rows()) {
    shape_fail(OpKind::SegmentMeanRows, "row mask of length " + std::to_string(row_mask.size()) +
                                            " for " + shape_str(v));
  }
  const Index groups = v.rows() / segment;
  Eigen::VectorXd weight = Eigen::VectorXd::Zero(v.rows());
  for (Index gi = 0; gi < groups; ++gi) {
    Index count = 0;
    for (Index r = gi * segment; r < (gi + 1) * segment; ++r) {
      if (row_mask.size() == 0 || row_mask(r)) ++count;
    }
    if (count == 0) continue;
    for (Index r = gi * segment; r < (gi + 1) * segment; ++r) {
      if (row_mask.size() == 0 || row_mask(r)) weight(r) = 1.0 / static_cast<double>(count);
    }
  }
  Matrix out = Matrix::Zero(groups, v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    if (weight(r) != 0.0) out.row(r / segment) += weight(r) * v.row(r);
  }
  return a.graph().record(OpKind::SegmentMeanRows, "", {a}, std::move(out),
                          [segment, weight = std::move(weight)](BackwardContext& ctx) {
                            if (!ctx.needs_grad(0)) return;
                            Matrix& ga = ctx.in_grad(0);
                            const Matrix& g = ctx.out_grad();
                            for (Index r = 0; r < ga.rows(); ++r) {
                              if (weight(r) != 0.0) ga.row(r) += weight(r) * g.row(r / segment);
                            }
                          });
}

Var square(Var a) {
  Matrix out = a.value().array().square().matrix();
  return a.graph().record(OpKind::Square, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    ctx.in_grad(0).array() += 2.0 * ctx.in_value(0).array() * ctx.out_grad().array();
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph().record(OpKind::SumAll, "", {a}, std::move(out), [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    ctx.in_grad(0).array() += ctx.out_grad()(0, 0);
  });
}

Var mean_all(Var a) {
  if (a.value().size() == 0) shape_fail(OpKind::MeanAll, "empty input");
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return a.graph().record(OpKind::MeanAll, "", {a}, std::move(out), [inv](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    ctx.in_grad(0).array() += ctx.out_grad()(0, 0) * inv;
  });
}

}  // namespace ensa
