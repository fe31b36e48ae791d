#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vhe/errors.hpp"
#include "vhe/tensor.hpp"

namespace vhe::diff {

enum class OpKind {
  Constant,
  Param,
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  MatMul,
  Transpose,
  Conv1d,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Sqrt,
  Square,
  SoftmaxMasked,
  MaxPoolMasked,
  Concat,
  Gather,
  Reshape,
  Sum,
  Mean,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Constant: return "constant";
    case OpKind::Param: return "param";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MulScalar: return "mul_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::SoftmaxMasked: return "softmax_masked";
    case OpKind::MaxPoolMasked: return "maxpool_masked";
    case OpKind::Concat: return "concat";
    case OpKind::Gather: return "gather";
    case OpKind::Reshape: return "reshape";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
  }
  return "?";
}

inline const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::Add,           OpKind::Sub,     OpKind::Mul,    OpKind::AddScalar,
      OpKind::MulScalar,     OpKind::MatMul,  OpKind::Transpose, OpKind::Conv1d,
      OpKind::Tanh,          OpKind::Sigmoid, OpKind::Exp,    OpKind::Log,
      OpKind::Sqrt,          OpKind::Square,  OpKind::SoftmaxMasked,
      OpKind::MaxPoolMasked, OpKind::Concat,  OpKind::Gather, OpKind::Reshape,
      OpKind::Sum,           OpKind::Mean,
  };
  return kinds;
}

struct Attrs {
  double scalar = 0.0;                 // AddScalar / MulScalar constant
  int axis = -1;                       // MaxPoolMasked / Gather reduced or indexed axis
  std::vector<std::uint8_t> mask;      // SoftmaxMasked / MaxPoolMasked (empty = no mask)
  std::vector<std::size_t> indices;    // Gather
  Shape target_shape;                  // Reshape
};

class Graph;

// Handle to a node on a Graph; cheap to copy, valid for the graph's lifetime.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
  const Tensor& value() const;
  double scalar() const;
};

namespace detail {

// Argmax positions for maxpool; ties resolve to the lowest index.
inline void maxpool_argmax(const Tensor& in, int axis, const std::vector<std::uint8_t>& mask,
                           std::vector<std::size_t>& arg) {
  const std::size_t rows = in.shape[0], cols = in.shape[1];
  if (axis == 0) {
    arg.assign(cols, 0);
    for (std::size_t j = 0; j < cols; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_i = rows;
      for (std::size_t i = 0; i < rows; ++i) {
        if (!mask.empty() && !mask[i]) continue;
        if (in.at(i, j) > best) {
          best = in.at(i, j);
          best_i = i;
        }
      }
      if (best_i == rows) throw ShapeError("maxpool_masked: all positions masked");
      arg[j] = best_i;
    }
  } else {
    arg.assign(rows, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_j = cols;
      for (std::size_t j = 0; j < cols; ++j) {
        if (!mask.empty() && !mask[j]) continue;
        if (in.at(i, j) > best) {
          best = in.at(i, j);
          best_j = j;
        }
      }
      if (best_j == cols) throw ShapeError("maxpool_masked: all positions masked");
      arg[i] = best_j;
    }
  }
}

}  // namespace detail

// Append-only computation tape over dense tensors with reverse-mode
// differentiation. Nodes reference only earlier nodes, so the graph is
// acyclic by construction and one reverse sweep visits each node once.
class Graph {
 public:
  Var constant(Tensor t) { return push(OpKind::Constant, {}, {}, std::move(t), {}); }

  Var param(const std::string& name, Tensor t) {
    if (param_ids_.count(name))
      throw Error("graph: parameter '" + name + "' registered twice");
    Var v = push(OpKind::Param, {}, {}, std::move(t), name);
    param_ids_[name] = v.id;
    return v;
  }

  Var apply(OpKind kind, const std::vector<std::size_t>& inputs, Attrs attrs = {}) {
    Tensor out = forward(kind, inputs, attrs);
    return push(kind, inputs, std::move(attrs), std::move(out), {});
  }

  Var apply(OpKind kind, std::initializer_list<Var> inputs, Attrs attrs = {}) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) ids.push_back(v.id);
    return apply(kind, ids, std::move(attrs));
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Gradients accumulate by sum over all
  // paths; parameter gradients are then available via param_gradients().
  void backward(Var loss) {
    if (loss.graph != this) throw Error("backward: loss from another graph");
    const std::size_t loss_id = loss.id;
    if (nodes_[loss_id].value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(nodes_[loss_id].value.shape));
    for (auto& n : nodes_) {
      n.grad = Tensor::zeros(n.value.shape);
      n.touched = false;
    }
    nodes_[loss_id].grad.data[0] = 1.0;
    nodes_[loss_id].touched = true;
    for (std::size_t idx = loss_id + 1; idx-- > 0;) {
      if (!nodes_[idx].touched) continue;
      backprop_node(idx);
    }
  }

  std::map<std::string, Tensor> param_gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : param_ids_) out[name] = nodes_[id].grad;
    return out;
  }

  // Diagnostic: scale one op kind's backward flow. Exists so the gradient
  // checker's negative-control test can exercise a genuinely wrong gradient.
  void debug_backward_scale(OpKind k, double s) { backward_scale_ = {k, s}; }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Attrs attrs;
    Tensor value;
    Tensor grad;
    std::string param_name;
    bool touched = false;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
  std::optional<std::pair<OpKind, double>> backward_scale_;

  Var push(OpKind kind, std::vector<std::size_t> inputs, Attrs attrs, Tensor value,
           std::string param_name) {
    ensure_all_finite(value, op_name(kind));
    nodes_.push_back(Node{kind, std::move(inputs), std::move(attrs), std::move(value), {},
                          std::move(param_name)});
    return Var{this, nodes_.size() - 1};
  }

  [[noreturn]] void shape_fail(OpKind kind, const std::vector<std::size_t>& inputs,
                               const char* detail) const {
    std::string msg = std::string(op_name(kind)) + ": " + detail + " (shapes:";
    for (auto id : inputs) msg += " " + shape_str(nodes_[id].value.shape);
    msg += ")";
    throw ShapeError(msg);
  }

  const Tensor& in(const std::vector<std::size_t>& inputs, std::size_t k) const {
    return nodes_[inputs[k]].value;
  }

  Tensor forward(OpKind kind, const std::vector<std::size_t>& inputs, const Attrs& attrs) const {
    switch (kind) {
      case OpKind::Constant:
      case OpKind::Param:
        throw Error("apply: leaf kinds are created via constant()/param()");

      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        if (inputs.size() != 2) shape_fail(kind, inputs, "expects 2 inputs");
        const Tensor &a = in(inputs, 0), &b = in(inputs, 1);
        if (!a.same_shape(b)) shape_fail(kind, inputs, "shape mismatch");
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i)
          out.data[i] = kind == OpKind::Add   ? a.data[i] + b.data[i]
                        : kind == OpKind::Sub ? a.data[i] - b.data[i]
                                              : a.data[i] * b.data[i];
        return out;
      }

      case OpKind::AddScalar:
      case OpKind::MulScalar: {
        if (inputs.size() != 1) shape_fail(kind, inputs, "expects 1 input");
        const Tensor& a = in(inputs, 0);
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i)
          out.data[i] = kind == OpKind::AddScalar ? a.data[i] + attrs.scalar
                                                  : a.data[i] * attrs.scalar;
        return out;
      }

      case OpKind::MatMul: {
        if (inputs.size() != 2) shape_fail(kind, inputs, "expects 2 inputs");
        const Tensor &a = in(inputs, 0), &b = in(inputs, 1);
        if (a.rank() != 2) shape_fail(kind, inputs, "lhs must be rank 2");
        if (b.rank() == 2) {
          if (a.shape[1] != b.shape[0]) shape_fail(kind, inputs, "inner dim mismatch");
          Tensor out({a.shape[0], b.shape[1]});
          for (std::size_t i = 0; i < a.shape[0]; ++i)
            for (std::size_t k = 0; k < a.shape[1]; ++k) {
              const double av = a.at(i, k);
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < b.shape[1]; ++j) out.at(i, j) += av * b.at(k, j);
            }
          return out;
        }
        if (b.rank() == 1) {
          if (a.shape[1] != b.shape[0]) shape_fail(kind, inputs, "inner dim mismatch");
          Tensor out({a.shape[0]});
          for (std::size_t i = 0; i < a.shape[0]; ++i) {
            double acc = 0;
            for (std::size_t k = 0; k < a.shape[1]; ++k) acc += a.at(i, k) * b.at(k);
            out.at(i) = acc;
          }
          return out;
        }
        shape_fail(kind, inputs, "rhs must be rank 1 or 2");
      }

      case OpKind::Transpose: {
        if (inputs.size() != 1 || in(inputs, 0).rank() != 2)
          shape_fail(kind, inputs, "expects one rank-2 input");
        const Tensor& a = in(inputs, 0);
        Tensor out({a.shape[1], a.shape[0]});
        for (std::size_t i = 0; i < a.shape[0]; ++i)
          for (std::size_t j = 0; j < a.shape[1]; ++j) out.at(j, i) = a.at(i, j);
        return out;
      }

      case OpKind::Conv1d: {
        // signal [C,P] * kernel [K,C,l] -> [K,P]; zero same-padding, stride 1.
        if (inputs.size() != 2) shape_fail(kind, inputs, "expects (signal, kernel)");
        const Tensor &s = in(inputs, 0), &ker = in(inputs, 1);
        if (s.rank() != 2 || ker.rank() != 3) shape_fail(kind, inputs, "signal rank 2, kernel rank 3");
        const std::size_t C = s.shape[0], P = s.shape[1];
        const std::size_t K = ker.shape[0], l = ker.shape[2];
        if (ker.shape[1] != C) shape_fail(kind, inputs, "channel mismatch");
        if (l % 2 == 0) shape_fail(kind, inputs, "kernel width must be odd");
        const std::size_t pad = l / 2;
        Tensor out({K, P});
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t p = 0; p < P; ++p) {
            double acc = 0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t t = 0; t < l; ++t) {
                const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + t) -
                                         static_cast<std::ptrdiff_t>(pad);
                if (q < 0 || q >= static_cast<std::ptrdiff_t>(P)) continue;
                acc += s.at(c, static_cast<std::size_t>(q)) * ker.at(k, c, t);
              }
            out.at(k, p) = acc;
          }
        return out;
      }

      case OpKind::Tanh:
      case OpKind::Sigmoid:
      case OpKind::Exp:
      case OpKind::Log:
      case OpKind::Sqrt:
      case OpKind::Square: {
        if (inputs.size() != 1) shape_fail(kind, inputs, "expects 1 input");
        const Tensor& a = in(inputs, 0);
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double x = a.data[i];
          switch (kind) {
            case OpKind::Tanh: out.data[i] = std::tanh(x); break;
            case OpKind::Sigmoid: out.data[i] = 1.0 / (1.0 + std::exp(-x)); break;
            case OpKind::Exp: out.data[i] = std::exp(x); break;
            case OpKind::Log: out.data[i] = std::log(x); break;
            case OpKind::Sqrt: out.data[i] = std::sqrt(x); break;
            default: out.data[i] = x * x; break;
          }
        }
        return out;
      }

      case OpKind::SoftmaxMasked: {
        if (inputs.size() != 1 || in(inputs, 0).rank() != 1)
          shape_fail(kind, inputs, "expects one rank-1 input");
        const Tensor& a = in(inputs, 0);
        if (!attrs.mask.empty() && attrs.mask.size() != a.numel())
          shape_fail(kind, inputs, "mask length mismatch");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < a.numel(); ++i)
          if (attrs.mask.empty() || attrs.mask[i]) mx = std::max(mx, a.data[i]);
        if (!std::isfinite(mx)) throw ShapeError("softmax_masked: all positions masked");
        Tensor out(a.shape);
        double z = 0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
          if (!attrs.mask.empty() && !attrs.mask[i]) continue;
          out.data[i] = std::exp(a.data[i] - mx);
          z += out.data[i];
        }
        for (std::size_t i = 0; i < a.numel(); ++i)
          if (attrs.mask.empty() || attrs.mask[i]) out.data[i] /= z;
        return out;
      }

      case OpKind::MaxPoolMasked: {
        if (inputs.size() != 1 || in(inputs, 0).rank() != 2)
          shape_fail(kind, inputs, "expects one rank-2 input");
        if (attrs.axis != 0 && attrs.axis != 1) shape_fail(kind, inputs, "axis must be 0 or 1");
        const Tensor& a = in(inputs, 0);
        const std::size_t reduced = a.shape[static_cast<std::size_t>(attrs.axis)];
        if (!attrs.mask.empty() && attrs.mask.size() != reduced)
          shape_fail(kind, inputs, "mask length mismatch");
        std::vector<std::size_t> arg;
        detail::maxpool_argmax(a, attrs.axis, attrs.mask, arg);
        Tensor out({arg.size()});
        for (std::size_t i = 0; i < arg.size(); ++i)
          out.at(i) = attrs.axis == 0 ? a.at(arg[i], i) : a.at(i, arg[i]);
        return out;
      }

      case OpKind::Concat: {
        if (inputs.empty()) shape_fail(kind, inputs, "expects at least 1 input");
        std::size_t total = 0;
        for (auto id : inputs) {
          if (nodes_[id].value.rank() != 1) shape_fail(kind, inputs, "inputs must be rank 1");
          total += nodes_[id].value.numel();
        }
        Tensor out({total});
        std::size_t off = 0;
        for (auto id : inputs) {
          const Tensor& a = nodes_[id].value;
          std::copy(a.data.begin(), a.data.end(), out.data.begin() + off);
          off += a.numel();
        }
        return out;
      }

      case OpKind::Gather: {
        if (inputs.size() != 1 || in(inputs, 0).rank() != 2)
          shape_fail(kind, inputs, "expects one rank-2 input");
        if (attrs.axis != 0 && attrs.axis != 1) shape_fail(kind, inputs, "axis must be 0 or 1");
        const Tensor& a = in(inputs, 0);
        const std::size_t dim = a.shape[static_cast<std::size_t>(attrs.axis)];
        for (auto ix : attrs.indices)
          if (ix >= dim) shape_fail(kind, inputs, "index out of range");
        if (attrs.axis == 0) {
          Tensor out({attrs.indices.size(), a.shape[1]});
          for (std::size_t r = 0; r < attrs.indices.size(); ++r)
            for (std::size_t j = 0; j < a.shape[1]; ++j) out.at(r, j) = a.at(attrs.indices[r], j);
          return out;
        }
        Tensor out({a.shape[0], attrs.indices.size()});
        for (std::size_t i = 0; i < a.shape[0]; ++i)
          for (std::size_t c = 0; c < attrs.indices.size(); ++c)
            out.at(i, c) = a.at(i, attrs.indices[c]);
        return out;
      }

      case OpKind::Reshape: {
        if (inputs.size() != 1) shape_fail(kind, inputs, "expects 1 input");
        const Tensor& a = in(inputs, 0);
        if (shape_numel(attrs.target_shape) != a.numel())
          shape_fail(kind, inputs, "element count mismatch");
        Tensor out = a;
        out.shape = attrs.target_shape;
        return out;
      }

      case OpKind::Sum:
      case OpKind::Mean: {
        if (inputs.size() != 1) shape_fail(kind, inputs, "expects 1 input");
        const Tensor& a = in(inputs, 0);
        double acc = 0;
        for (double v : a.data) acc += v;
        if (kind == OpKind::Mean) acc /= static_cast<double>(a.numel());
        return Tensor::scalar(acc);
      }
    }
    throw Error("apply: unknown op kind");
  }

  void backprop_node(std::size_t idx) {
    Node& n = nodes_[idx];
    if (n.kind == OpKind::Constant || n.kind == OpKind::Param) return;
    Tensor g = n.grad;
    if (backward_scale_ && backward_scale_->first == n.kind)
      for (auto& v : g.data) v *= backward_scale_->second;

    auto acc = [&](std::size_t input_pos) -> Tensor& {
      Node& src = nodes_[n.inputs[input_pos]];
      src.touched = true;
      return src.grad;
    };

    switch (n.kind) {
      case OpKind::Add: {
        Tensor &da = acc(0), &db = acc(1);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da.data[i] += g.data[i];
          db.data[i] += g.data[i];
        }
        break;
      }
      case OpKind::Sub: {
        Tensor &da = acc(0), &db = acc(1);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da.data[i] += g.data[i];
          db.data[i] -= g.data[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor &a = in(n.inputs, 0), &b = in(n.inputs, 1);
        Tensor &da = acc(0), &db = acc(1);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da.data[i] += g.data[i] * b.data[i];
          db.data[i] += g.data[i] * a.data[i];
        }
        break;
      }
      case OpKind::AddScalar: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
        break;
      }
      case OpKind::MulScalar: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i] * n.attrs.scalar;
        break;
      }
      case OpKind::MatMul: {
        const Tensor &a = in(n.inputs, 0), &b = in(n.inputs, 1);
        Tensor &da = acc(0), &db = acc(1);
        if (b.rank() == 2) {
          for (std::size_t i = 0; i < a.shape[0]; ++i)
            for (std::size_t j = 0; j < b.shape[1]; ++j) {
              const double gv = g.at(i, j);
              if (gv == 0.0) continue;
              for (std::size_t k = 0; k < a.shape[1]; ++k) {
                da.at(i, k) += gv * b.at(k, j);
                db.at(k, j) += gv * a.at(i, k);
              }
            }
        } else {
          for (std::size_t i = 0; i < a.shape[0]; ++i) {
            const double gv = g.at(i);
            if (gv == 0.0) continue;
            for (std::size_t k = 0; k < a.shape[1]; ++k) {
              da.at(i, k) += gv * b.at(k);
              db.at(k) += gv * a.at(i, k);
            }
          }
        }
        break;
      }
      case OpKind::Transpose: {
        const Tensor& a = in(n.inputs, 0);
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < a.shape[0]; ++i)
          for (std::size_t j = 0; j < a.shape[1]; ++j) da.at(i, j) += g.at(j, i);
        break;
      }
      case OpKind::Conv1d: {
        const Tensor &s = in(n.inputs, 0), &ker = in(n.inputs, 1);
        Tensor &ds = acc(0), &dker = acc(1);
        const std::size_t C = s.shape[0], P = s.shape[1];
        const std::size_t K = ker.shape[0], l = ker.shape[2];
        const std::size_t pad = l / 2;
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t p = 0; p < P; ++p) {
            const double gv = g.at(k, p);
            if (gv == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t t = 0; t < l; ++t) {
                const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + t) -
                                         static_cast<std::ptrdiff_t>(pad);
                if (q < 0 || q >= static_cast<std::ptrdiff_t>(P)) continue;
                ds.at(c, static_cast<std::size_t>(q)) += gv * ker.at(k, c, t);
                dker.at(k, c, t) += gv * s.at(c, static_cast<std::size_t>(q));
              }
          }
        break;
      }
      case OpKind::Tanh: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double y = n.value.data[i];
          da.data[i] += g.data[i] * (1.0 - y * y);
        }
        break;
      }
      case OpKind::Sigmoid: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double y = n.value.data[i];
          da.data[i] += g.data[i] * y * (1.0 - y);
        }
        break;
      }
      case OpKind::Exp: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i] * n.value.data[i];
        break;
      }
      case OpKind::Log: {
        const Tensor& a = in(n.inputs, 0);
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i] / a.data[i];
        break;
      }
      case OpKind::Sqrt: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i)
          da.data[i] += g.data[i] * 0.5 / n.value.data[i];
        break;
      }
      case OpKind::Square: {
        const Tensor& a = in(n.inputs, 0);
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i] * 2.0 * a.data[i];
        break;
      }
      case OpKind::SoftmaxMasked: {
        Tensor& da = acc(0);
        const Tensor& y = n.value;
        double dot = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) {
          if (!n.attrs.mask.empty() && !n.attrs.mask[i]) continue;
          dot += g.data[i] * y.data[i];
        }
        for (std::size_t i = 0; i < y.numel(); ++i) {
          if (!n.attrs.mask.empty() && !n.attrs.mask[i]) continue;
          da.data[i] += y.data[i] * (g.data[i] - dot);
        }
        break;
      }
      case OpKind::MaxPoolMasked: {
        const Tensor& a = in(n.inputs, 0);
        Tensor& da = acc(0);
        std::vector<std::size_t> arg;
        detail::maxpool_argmax(a, n.attrs.axis, n.attrs.mask, arg);
        for (std::size_t i = 0; i < arg.size(); ++i) {
          if (n.attrs.axis == 0)
            da.at(arg[i], i) += g.at(i);
          else
            da.at(i, arg[i]) += g.at(i);
        }
        break;
      }
      case OpKind::Concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Tensor& da = acc(k);
          for (std::size_t i = 0; i < da.numel(); ++i) da.data[i] += g.data[off + i];
          off += da.numel();
        }
        break;
      }
      case OpKind::Gather: {
        const Tensor& a = in(n.inputs, 0);
        Tensor& da = acc(0);
        if (n.attrs.axis == 0) {
          for (std::size_t r = 0; r < n.attrs.indices.size(); ++r)
            for (std::size_t j = 0; j < a.shape[1]; ++j)
              da.at(n.attrs.indices[r], j) += g.at(r, j);
        } else {
          for (std::size_t i = 0; i < a.shape[0]; ++i)
            for (std::size_t c = 0; c < n.attrs.indices.size(); ++c)
              da.at(i, n.attrs.indices[c]) += g.at(i, c);
        }
        break;
      }
      case OpKind::Reshape: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
        break;
      }
      case OpKind::Sum: {
        Tensor& da = acc(0);
        for (std::size_t i = 0; i < da.numel(); ++i) da.data[i] += g.data[0];
        break;
      }
      case OpKind::Mean: {
        Tensor& da = acc(0);
        const double s = g.data[0] / static_cast<double>(da.numel());
        for (std::size_t i = 0; i < da.numel(); ++i) da.data[i] += s;
        break;
      }
      default:
        break;
    }
  }
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline double Var::scalar() const {
  const Tensor& t = value();
  if (t.numel() != 1) throw ShapeError("Var::scalar on non-scalar shape " + shape_str(t.shape));
  return t.data[0];
}

// Expression helpers. Elementwise operators require identical shapes.
inline Var operator+(Var a, Var b) { return a.graph->apply(OpKind::Add, {a, b}); }
inline Var operator-(Var a, Var b) { return a.graph->apply(OpKind::Sub, {a, b}); }
inline Var operator*(Var a, Var b) { return a.graph->apply(OpKind::Mul, {a, b}); }
inline Var add_scalar(Var a, double c) {
  Attrs at;
  at.scalar = c;
  return a.graph->apply(OpKind::AddScalar, {a}, std::move(at));
}
inline Var mul_scalar(Var a, double c) {
  Attrs at;
  at.scalar = c;
  return a.graph->apply(OpKind::MulScalar, {a}, std::move(at));
}
inline Var operator*(double c, Var a) { return mul_scalar(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(double c, Var a) { return add_scalar(mul_scalar(a, -1.0), c); }
inline Var operator-(Var a) { return mul_scalar(a, -1.0); }

inline Var matmul(Var a, Var b) { return a.graph->apply(OpKind::MatMul, {a, b}); }
inline Var transpose(Var a) { return a.graph->apply(OpKind::Transpose, {a}); }
inline Var conv1d(Var signal, Var kernel) {
  return signal.graph->apply(OpKind::Conv1d, {signal, kernel});
}
inline Var tanh(Var a) { return a.graph->apply(OpKind::Tanh, {a}); }
inline Var sigmoid(Var a) { return a.graph->apply(OpKind::Sigmoid, {a}); }
inline Var exp(Var a) { return a.graph->apply(OpKind::Exp, {a}); }
inline Var log(Var a) { return a.graph->apply(OpKind::Log, {a}); }
inline Var sqrt(Var a) { return a.graph->apply(OpKind::Sqrt, {a}); }
inline Var square(Var a) { return a.graph->apply(OpKind::Square, {a}); }
inline Var softmax_masked(Var a, std::vector<std::uint8_t> mask) {
  Attrs at;
  at.mask = std::move(mask);
  return a.graph->apply(OpKind::SoftmaxMasked, {a}, std::move(at));
}
inline Var maxpool_masked(Var a, int axis, std::vector<std::uint8_t> mask = {}) {
  Attrs at;
  at.axis = axis;
  at.mask = std::move(mask);
  return a.graph->apply(OpKind::MaxPoolMasked, {a}, std::move(at));
}
inline Var concat(const std::vector<Var>& parts) {
  std::vector<std::size_t> ids;
  for (const Var& v : parts) ids.push_back(v.id);
  return parts.front().graph->apply(OpKind::Concat, ids);
}
inline Var gather(Var a, int axis, std::vector<std::size_t> indices) {
  Attrs at;
  at.axis = axis;
  at.indices = std::move(indices);
  return a.graph->apply(OpKind::Gather, {a}, std::move(at));
}
inline Var reshape(Var a, Shape target) {
  Attrs at;
  at.target_shape = std::move(target);
  return a.graph->apply(OpKind::Reshape, {a}, std::move(at));
}
inline Var sum(Var a) { return a.graph->apply(OpKind::Sum, {a}); }
inline Var mean(Var a) { return a.graph->apply(OpKind::Mean, {a}); }

}  // namespace vhe::diff
