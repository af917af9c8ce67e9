#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ektm/errors.hpp"

namespace ektm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Operator set of the reverse-mode engine. The first block is the public
// algebra (everything the model equations need); the second block is the
// structural ops that make batched evaluation possible (broadcast bias,
// row scaling, gathers, feature-position attention plumbing).
enum class Op : uint8_t {
  Leaf,
  Detach,
  Add,
  Sub,
  ElemMul,
  Div,
  Scale,        // by a compile-time constant
  ScaleBy,      // by a scalar graph node
  Matmul,
  Transpose,
  ConcatRows,
  ConcatCols,
  SliceLast,
  Reshape,
  MeanRows,
  SumAll,
  Dot,
  L2Norm,
  Sigmoid,
  Relu,
  MaxZero,
  SoftmaxRows,
  Log,
  Exp,
  Clamp,
  AddRowwise,   // (r,c) + (c)
  ScaleRows,    // (r,c) * (r)
  RowwiseDot,   // (r,c),(r,c) -> (r)
  RowwiseNorm,  // (r,c) -> (r)
  GatherRows,   // embedding lookup
  OuterRows,    // (r,c) -> (r*c, c), row-wise outer product with itself
  AttendRows,   // (r*c, c),(r,c) -> (r,c), per-row attention application
};

const char* op_name(Op op);

class Node {
 public:
  Op op = Op::Leaf;
  Shape shape;
  std::vector<double> values;
  // True when a gradient path to a trainable leaf runs through this node.
  // Detach forces false while keeping the operand edge, so detached leaves
  // stay reachable for gradient registration.
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  double attr_a = 0.0;  // scale factor / clamp lo
  double attr_b = 0.0;  // clamp hi
  int64_t attr_i = 0;   // slice start
  int64_t attr_j = 0;   // slice count
  std::vector<int32_t> indices;  // gather rows

  int64_t numel() const { return shape_numel(shape); }
};

// Value-semantics handle onto a graph node. Cheap to copy; the graph is a
// DAG of shared_ptr edges that frees itself when the last handle drops.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad);
  static Tensor scalar(double v);                       // constant, shape [1]
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t rows() const;
  int64_t cols() const;
  const std::vector<double>& values() const { return node_->values; }
  // In-place access for optimizer updates and finite-difference probes.
  // Valid on leaves only; transient graphs are rebuilt after mutation.
  std::vector<double>& mutable_values();
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->op == Op::Leaf; }
  double item() const;

  const Node* id() const { return node_.get(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

// ---- operator surface -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elem_mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& a, int64_t start, int64_t count);
Tensor reshape(const Tensor& a, Shape shape);
Tensor mean_rows(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_norm(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor max_zero(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor add_rowwise(const Tensor& m, const Tensor& v);
Tensor scale_rows(const Tensor& m, const Tensor& s);
Tensor rowwise_dot(const Tensor& a, const Tensor& b);
Tensor rowwise_norm(const Tensor& a);
Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& idx);
Tensor outer_rows(const Tensor& a);
Tensor attend_rows(const Tensor& attn, const Tensor& f);
Tensor detach(const Tensor& a);

// Generic dispatcher over the attribute-free kinds; `scale` is reached by
// passing the factor as a scalar second operand.
Tensor apply(Op op, const std::vector<Tensor>& operands);

// ---- reverse accumulation ----------------------------------------------

// Gradients of a scalar root w.r.t. every requires_grad leaf reachable
// through lineage edges (including through detach, whose entries stay
// exactly zero). Entries are in deterministic first-visit order.
class GradMap {
 public:
  const std::vector<double>* find(const Tensor& leaf) const;
  const std::vector<double>* find(const Node* leaf) const;
  bool contains(const Tensor& leaf) const { return find(leaf) != nullptr; }
  size_t size() const { return entries_.size(); }
  const std::vector<std::pair<const Node*, std::vector<double>>>& entries() const {
    return entries_;
  }

  void insert(const Node* leaf, std::vector<double> grad);

 private:
  std::vector<std::pair<const Node*, std::vector<double>>> entries_;
  std::unordered_map<const Node*, size_t> index_;
};

GradMap backward(const Tensor& root);

// Central finite differences against backward(); returns the maximum
// relative error max(|a-n| / max(|a|,|n|,1e-8)) over all coordinates of
// all requires_grad inputs. The callable must rebuild the graph from the
// current input values on every call.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& inputs, double eps);

}  // namespace ektm
