#pragma once

// Dynamic reverse-mode tape over dense row-batched blocks.
//
// Every value is a 2-D block (rows = batch, cols = features). Nodes are
// appended in creation order, which is already a topological order, so the
// backward sweep is a single reverse pass over the node list.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "thermoloop/core/errors.hpp"

namespace thermoloop::nn {

using Tensor = Eigen::MatrixXd;

inline std::string shape_string(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Ordered, name-addressable collection of trainable blocks.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor init) {
    require(!find(name).has_value(), "duplicate parameter name: " + name);
    Tensor grad = Tensor::Zero(init.rows(), init.cols());
    params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
    return params_.size() - 1;
  }

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t size() const { return params_.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return std::nullopt;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  /// Copies values from another set with identical layout.
  void assign_values(const ParameterSet& other) {
    require(other.size() == size(), "parameter layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      require(params_[i].value.rows() == other[i].value.rows() &&
                  params_[i].value.cols() == other[i].value.cols(),
              "parameter shape mismatch for " + params_[i].name);
      params_[i].value = other[i].value;
    }
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

class Tape;

/// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

  /// With recording disabled the tape only stores forward values; used for
  /// inference where no gradient is requested.
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Var constant(Tensor value, const char* tag = "const") {
    return push(std::move(value), tag, false, nullptr);
  }

  Var parameter(ParameterSet& set, std::size_t index) {
    Var v = push(set[index].value, "param", recording_, nullptr);
    nodes_[v.id].set = &set;
    nodes_[v.id].param_index = index;
    return v;
  }

  /// Appends an interior node. `inputs` decides whether the node needs a gradient.
  Var record(Tensor value, const char* tag, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (recording_)
      for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), tag, needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var record(Tensor value, const char* tag, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    if (recording_)
      for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), tag, needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  bool needs_grad(int id) const { return nodes_.at(id).needs_grad; }
  const char* tag(int id) const { return nodes_.at(id).tag; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass with respect to node `v` (zero when
  /// the node is not on any path to the output).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(int id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw ContractViolation(std::string("gradient shape mismatch at node '") + n.tag + "': " +
                              shape_string(g) + " vs " + shape_string(n.value));
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1x1 output. Parameter gradients are added into
  /// the owning ParameterSet's `grad` blocks.
  void backward(Var output) {
    require(output.tape == this, "output belongs to another tape");
    const Node& out = nodes_.at(output.id);
    if (out.value.rows() != 1 || out.value.cols() != 1)
      throw ContractViolation("backward requires a scalar output, got " + shape_string(out.value));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    for (int i = 0; i <= output.id; ++i) {
      if (nodes_[i].needs_grad && !nodes_[i].value.allFinite())
        throw NumericalFailure(std::string("non-finite forward value at node '") + nodes_[i].tag +
                               "' (#" + std::to_string(i) + ")");
    }
    if (!out.needs_grad) return;
    nodes_[output.id].grad = Tensor::Ones(1, 1);
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        Tensor upstream = n.grad;
        n.backward(*this, upstream);
      } else if (n.set != nullptr) {
        (*n.set)[n.param_index].grad += n.grad;
      }
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    const char* tag = "";
    bool needs_grad = false;
    BackwardFn backward;
    ParameterSet* set = nullptr;
    std::size_t param_index = 0;
  };

  Var push(Tensor value, const char* tag, bool needs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.tag = tag;
    n.needs_grad = needs;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool recording_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Primitive operations.

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.value()) +
                            " vs " + shape_string(b.value()));
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw ContractViolation("matmul: inner dimensions differ " + shape_string(a.value()) + " * " +
                            shape_string(b.value()));
  Tensor out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), "matmul", {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var operator+(Var a, Var b) {
  detail::same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), "add", {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var operator-(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), "sub", {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

/// Elementwise (Hadamard) product.
inline Var operator*(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  Tensor out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), "mul", {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

inline Var scale(Var a, double c) {
  const int ia = a.id;
  return a.tape->record(a.value() * c, "scale", {a},
                        [ia, c](Tape& t, const Tensor& g) { t.accumulate(ia, g * c); });
}

inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double c) {
  const int ia = a.id;
  Tensor out = a.value().array() + c;
  return a.tape->record(std::move(out), "add_scalar", {a},
                        [ia](Tape& t, const Tensor& g) { t.accumulate(ia, g); });
}

/// 1 - a, elementwise.
inline Var one_minus(Var a) { return add_scalar(scale(a, -1.0), 1.0); }

/// Adds a 1xN row to every row of `a`.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ContractViolation("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                            shape_string(row.value()));
  Tensor out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), "add_row", {a, row}, [ia, ir](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

/// Multiplies every row of `a` elementwise by a 1xN row.
inline Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ContractViolation("mul_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                            shape_string(row.value()));
  Tensor out = a.value().array().rowwise() * row.value().row(0).array();
  const int ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), "mul_row", {a, row}, [ia, ir](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia))
      t.accumulate(ia, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
    if (t.needs_grad(ir))
      t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

/// Subtracts a Bx1 column from every column of `a`.
inline Var sub_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows())
    throw ContractViolation("sub_col: expected " + std::to_string(a.rows()) + "x1 column, got " +
                            shape_string(col.value()));
  Tensor out = a.value().colwise() - col.value().col(0);
  const int ia = a.id, ic = col.id;
  return a.tape->record(std::move(out), "sub_col", {a, col}, [ia, ic](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ic)) t.accumulate(ic, -g.rowwise().sum());
  });
}

/// Multiplies every column of `a` elementwise by a Bx1 column.
inline Var mul_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows())
    throw ContractViolation("mul_col: expected " + std::to_string(a.rows()) + "x1 column, got " +
                            shape_string(col.value()));
  Tensor out = a.value().array().colwise() * col.value().col(0).array();
  const int ia = a.id, ic = col.id;
  return a.tape->record(std::move(out), "mul_col", {a, col}, [ia, ic](Tape& t, const Tensor& g) {
    if (t.needs_grad(ia))
      t.accumulate(ia, (g.array().colwise() * t.value(ic).col(0).array()).matrix());
    if (t.needs_grad(ic)) t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

/// Per-row mean, producing a Bx1 column.
inline Var row_mean(Var a) {
  const double n = static_cast<double>(a.cols());
  Tensor out = a.value().rowwise().mean();
  const int ia = a.id;
  const Eigen::Index cols = a.cols();
  return a.tape->record(std::move(out), "row_mean", {a}, [ia, n, cols](Tape& t, const Tensor& g) {
    t.accumulate(ia, (g / n).replicate(1, cols));
  });
}

inline Tensor sigmoid_values(const Tensor& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

inline Var sigmoid(Var a) {
  const int ia = a.id;
  return a.tape->record(sigmoid_values(a.value()), "sigmoid", {a},
                        [ia](Tape& t, const Tensor& g) {
                          const Tensor s = sigmoid_values(t.value(ia));
                          t.accumulate(ia, (g.array() * s.array() * (1.0 - s.array())).matrix());
                        });
}

inline Var tanh(Var a) {
  Tensor out = a.value().array().tanh().matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), "tanh", {a}, [ia](Tape& t, const Tensor& g) {
    const auto th = t.value(ia).array().tanh();
    t.accumulate(ia, (g.array() * (1.0 - th * th)).matrix());
  });
}

inline Var square(Var a) {
  Tensor out = a.value().array().square().matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), "square", {a}, [ia](Tape& t, const Tensor& g) {
    t.accumulate(ia, (2.0 * g.array() * t.value(ia).array()).matrix());
  });
}

/// (a + eps)^(-1/2), elementwise.
inline Var rsqrt(Var a, double eps) {
  Tensor out = (a.value().array() + eps).rsqrt().matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), "rsqrt", {a}, [ia, eps](Tape& t, const Tensor& g) {
    const auto base = t.value(ia).array() + eps;
    t.accumulate(ia, (-0.5 * g.array() * base.pow(-1.5)).matrix());
  });
}

inline Var sum(Var a) {
  Tensor out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->record(std::move(out), "sum", {a}, [ia, r, c](Tape& t, const Tensor& g) {
    t.accumulate(ia, Tensor::Constant(r, c, g(0, 0)));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Elementwise product with a constant block (e.g. a dropout mask).
inline Var mul_const(Var a, const Tensor& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols())
    throw ContractViolation("mul_const: shape mismatch");
  Tensor out = a.value().cwiseProduct(c);
  const int ia = a.id;
  return a.tape->record(std::move(out), "mul_const", {a},
                        [ia, c](Tape& t, const Tensor& g) { t.accumulate(ia, g.cwiseProduct(c)); });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    layout.emplace_back(p.id, offset);
    offset += p.cols();
  }
  Tape* tape = parts.front().tape;
  return tape->record(std::move(out), "concat_cols", parts, [layout](Tape& t, const Tensor& g) {
    for (const auto& [id, off] : layout)
      if (t.needs_grad(id)) t.accumulate(id, g.middleCols(off, t.value(id).cols()));
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Tensor out = a.value().middleCols(start, count);
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->record(std::move(out), "slice_cols", {a},
                        [ia, r, c, start, count](Tape& t, const Tensor& g) {
                          Tensor full = Tensor::Zero(r, c);
                          full.middleCols(start, count) = g;
                          t.accumulate(ia, full);
                        });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Tensor out = a.value().middleRows(start, count);
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->record(std::move(out), "slice_rows", {a},
                        [ia, r, c, start, count](Tape& t, const Tensor& g) {
                          Tensor full = Tensor::Zero(r, c);
                          full.middleRows(start, count) = g;
                          t.accumulate(ia, full);
                        });
}

}  // namespace thermoloop::nn
