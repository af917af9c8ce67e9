#include "ektm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#ifdef EKTM_WITH_CBLAS
#include <cblas.h>
#endif

namespace ektm {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Detach: return "detach";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::ElemMul: return "elem_mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::ScaleBy: return "scale_by";
    case Op::Matmul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::ConcatRows: return "concat_rows";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceLast: return "slice_last";
    case Op::Reshape: return "reshape";
    case Op::MeanRows: return "mean_rows";
    case Op::SumAll: return "sum_all";
    case Op::Dot: return "dot";
    case Op::L2Norm: return "l2_norm";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::MaxZero: return "max_zero";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Clamp: return "clamp";
    case Op::AddRowwise: return "add_rowwise";
    case Op::ScaleRows: return "scale_rows";
    case Op::RowwiseDot: return "rowwise_dot";
    case Op::RowwiseNorm: return "rowwise_norm";
    case Op::GatherRows: return "gather_rows";
    case Op::OuterRows: return "outer_rows";
    case Op::AttendRows: return "attend_rows";
  }
  return "?";
}

namespace {

// C(m,n) [+]= alpha * opA(A) * opB(B), row-major.
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
          const double* A, int64_t lda, const double* B, int64_t ldb, double beta,
          double* C, int64_t ldc) {
#ifdef EKTM_WITH_CBLAS
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, A,
              static_cast<int>(lda), B, static_cast<int>(ldb), beta, C,
              static_cast<int>(ldc));
#else
  if (beta == 0.0) {
    for (int64_t i = 0; i < m; ++i) std::fill(C + i * ldc, C + i * ldc + n, 0.0);
  } else if (beta != 1.0) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) C[i * ldc + j] *= beta;
  }
  auto at = [&](int64_t i, int64_t p) { return ta ? A[p * lda + i] : A[i * lda + p]; };
  auto bt = [&](int64_t p, int64_t j) { return tb ? B[j * ldb + p] : B[p * ldb + j]; };
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = alpha * at(i, p);
      if (av == 0.0) continue;
      double* crow = C + i * ldc;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * bt(p, j);
    }
  }
#endif
}

std::shared_ptr<Node> make_node(Op op, Shape shape,
                                std::vector<std::shared_ptr<Node>> inputs) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->inputs = std::move(inputs);
  bool rg = false;
  for (const auto& in : n->inputs) rg = rg || in->requires_grad;
  n->requires_grad = (op == Op::Detach) ? false : rg;
  n->values.resize(static_cast<size_t>(n->numel()));
  return n;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// (rows, cols) view: last extent is the column count, everything before
// folds into rows. 1-D tensors are a single row.
std::pair<int64_t, int64_t> rows_cols(const Node& n, const char* who) {
  if (n.shape.empty())
    throw ShapeError(std::string(who) + ": scalar operand has no row structure");
  if (n.shape.size() == 1) return {1, n.shape[0]};
  int64_t r = 1;
  for (size_t i = 0; i + 1 < n.shape.size(); ++i) r *= n.shape[i];
  return {r, n.shape.back()};
}

void require_2d(const Tensor& t, const char* who) {
  if (t.rank() != 2)
    throw ShapeError(std::string(who) + ": expected a 2-d operand, got shape " +
                     shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int64_t Tensor::rows() const {
  return rows_cols(*node_, "rows").first;
}

int64_t Tensor::cols() const {
  return rows_cols(*node_, "cols").second;
}

std::vector<double>& Tensor::mutable_values() {
  if (node_->op != Op::Leaf)
    throw ValueError("mutable_values: only leaves may be mutated in place");
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (int64_t e : shape)
    if (e <= 0) throw ShapeError("leaf: non-positive extent in shape " + shape_str(shape));
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("leaf: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  for (double v : values)
    if (!std::isfinite(v)) throw ValueError("leaf: non-finite input value");
  auto n = std::make_shared<Node>();
  n->op = Op::Leaf;
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}, false); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> vals(static_cast<size_t>(shape_numel(shape)), v);
  return leaf(std::move(shape), std::move(vals), requires_grad);
}

// ---- forward constructors ------------------------------------------------

Tensor detach(const Tensor& a) {
  auto n = make_node(Op::Detach, a.shape(), {a.node()});
  n->values = a.values();  // exact forward identity
  return Tensor::wrap(std::move(n));
}

namespace {

Tensor binary_same_shape(Op op, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, op_name(op));
  auto n = make_node(op, a.shape(), {a.node(), b.node()});
  const auto& x = a.values();
  const auto& y = b.values();
  for (size_t i = 0; i < x.size(); ++i) {
    switch (op) {
      case Op::Add: n->values[i] = x[i] + y[i]; break;
      case Op::Sub: n->values[i] = x[i] - y[i]; break;
      case Op::ElemMul: n->values[i] = x[i] * y[i]; break;
      case Op::Div: n->values[i] = x[i] / y[i]; break;
      default: break;
    }
  }
  return Tensor::wrap(std::move(n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_same_shape(Op::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_same_shape(Op::Sub, a, b); }
Tensor elem_mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(Op::ElemMul, a, b);
}
Tensor div(const Tensor& a, const Tensor& b) { return binary_same_shape(Op::Div, a, b); }

Tensor scale(const Tensor& a, double c) {
  auto n = make_node(Op::Scale, a.shape(), {a.node()});
  n->attr_a = c;
  const auto& x = a.values();
  for (size_t i = 0; i < x.size(); ++i) n->values[i] = x[i] * c;
  return Tensor::wrap(std::move(n));
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1)
    throw ShapeError("scale_by: scale operand must be scalar, got " +
                     shape_str(s.shape()));
  auto n = make_node(Op::ScaleBy, a.shape(), {a.node(), s.node()});
  const double c = s.values()[0];
  const auto& x = a.values();
  for (size_t i = 0; i < x.size(); ++i) n->values[i] = x[i] * c;
  return Tensor::wrap(std::move(n));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  require(k == k2, "matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                       shape_str(b.shape()));
  auto out = make_node(Op::Matmul, {m, n}, {a.node(), b.node()});
  gemm(false, false, m, n, k, 1.0, a.values().data(), k, b.values().data(), n, 0.0,
       out->values.data(), n);
  return Tensor::wrap(std::move(out));
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = make_node(Op::Transpose, {c, r}, {a.node()});
  const auto& x = a.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->values[j * r + i] = x[i * c + j];
  return Tensor::wrap(std::move(out));
}

namespace {

// 1-D parts count as single rows for concat_rows and as single columns
// for concat_cols.
std::pair<int64_t, int64_t> part_rc(const Tensor& t, bool as_rows) {
  if (t.rank() == 1) return as_rows ? std::pair{int64_t{1}, t.shape()[0]}
                                    : std::pair{t.shape()[0], int64_t{1}};
  require_2d(t, as_rows ? "concat_rows" : "concat_cols");
  return {t.shape()[0], t.shape()[1]};
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no operands");
  int64_t cols = part_rc(parts[0], true).second;
  int64_t rows = 0;
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& p : parts) {
    auto [r, c] = part_rc(p, true);
    require(c == cols, "concat_rows: column mismatch");
    rows += r;
    ins.push_back(p.node());
  }
  auto out = make_node(Op::ConcatRows, {rows, cols}, std::move(ins));
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->values.begin() + off);
    off += p.values().size();
  }
  return Tensor::wrap(std::move(out));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no operands");
  int64_t rows = part_rc(parts[0], false).first;
  int64_t cols = 0;
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& p : parts) {
    auto [r, c] = part_rc(p, false);
    require(r == rows, "concat_cols: row mismatch");
    cols += c;
    ins.push_back(p.node());
  }
  auto out = make_node(Op::ConcatCols, {rows, cols}, std::move(ins));
  int64_t coff = 0;
  for (const auto& p : parts) {
    auto [r, c] = part_rc(p, false);
    const auto& x = p.values();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out->values[i * cols + coff + j] = x[i * c + j];
    coff += c;
  }
  return Tensor::wrap(std::move(out));
}

Tensor slice_last(const Tensor& a, int64_t start, int64_t count) {
  auto [r, c] = rows_cols(*a.node(), "slice_last");
  require(start >= 0 && count >= 1 && start + count <= c,
          "slice_last: range [" + std::to_string(start) + "," +
              std::to_string(start + count) + ") out of " + std::to_string(c));
  Shape shape = a.shape();
  shape.back() = count;
  auto out = make_node(Op::SliceLast, std::move(shape), {a.node()});
  out->attr_i = start;
  out->attr_j = count;
  const auto& x = a.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < count; ++j)
      out->values[i * count + j] = x[i * c + start + j];
  return Tensor::wrap(std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
              shape_str(shape));
  auto out = make_node(Op::Reshape, std::move(shape), {a.node()});
  out->values = a.values();
  return Tensor::wrap(std::move(out));
}

Tensor mean_rows(const Tensor& a) {
  require_2d(a, "mean_rows");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = make_node(Op::MeanRows, {c}, {a.node()});
  const auto& x = a.values();
  for (int64_t j = 0; j < c; ++j) out->values[j] = 0.0;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->values[j] += x[i * c + j];
  const double inv = 1.0 / static_cast<double>(r);
  for (int64_t j = 0; j < c; ++j) out->values[j] *= inv;
  return Tensor::wrap(std::move(out));
}

Tensor sum_all(const Tensor& a) {
  auto out = make_node(Op::SumAll, {1}, {a.node()});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out->values[0] = s;
  return Tensor::wrap(std::move(out));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require(a.rank() == 1 && b.rank() == 1, "dot: expects 1-d operands");
  require_same_shape(a, b, "dot");
  auto out = make_node(Op::Dot, {1}, {a.node(), b.node()});
  double s = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) s += a.values()[i] * b.values()[i];
  out->values[0] = s;
  return Tensor::wrap(std::move(out));
}

Tensor l2_norm(const Tensor& a) {
  require(a.rank() == 1, "l2_norm: expects a 1-d operand");
  auto out = make_node(Op::L2Norm, {1}, {a.node()});
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  out->values[0] = std::sqrt(s);
  return Tensor::wrap(std::move(out));
}

namespace {

Tensor unary_elementwise(Op op, const Tensor& a, double lo = 0.0, double hi = 0.0) {
  auto n = make_node(op, a.shape(), {a.node()});
  n->attr_a = lo;
  n->attr_b = hi;
  const auto& x = a.values();
  for (size_t i = 0; i < x.size(); ++i) {
    switch (op) {
      case Op::Sigmoid: n->values[i] = stable_sigmoid(x[i]); break;
      case Op::Relu:
      case Op::MaxZero: n->values[i] = x[i] > 0.0 ? x[i] : 0.0; break;
      case Op::Log:
        if (x[i] <= 0.0)
          throw ValueError("log: non-positive input " + std::to_string(x[i]) +
                           " at index " + std::to_string(i));
        n->values[i] = std::log(x[i]);
        break;
      case Op::Exp: n->values[i] = std::exp(x[i]); break;
      case Op::Clamp: n->values[i] = std::min(hi, std::max(lo, x[i])); break;
      default: break;
    }
  }
  return Tensor::wrap(std::move(n));
}

}  // namespace

Tensor sigmoid(const Tensor& a) { return unary_elementwise(Op::Sigmoid, a); }
Tensor relu(const Tensor& a) { return unary_elementwise(Op::Relu, a); }
Tensor max_zero(const Tensor& a) { return unary_elementwise(Op::MaxZero, a); }
Tensor log(const Tensor& a) { return unary_elementwise(Op::Log, a); }
Tensor exp(const Tensor& a) { return unary_elementwise(Op::Exp, a); }
Tensor clamp(const Tensor& a, double lo, double hi) {
  require(lo <= hi, "clamp: lo > hi");
  return unary_elementwise(Op::Clamp, a, lo, hi);
}

Tensor softmax_rows(const Tensor& a) {
  auto [r, c] = rows_cols(*a.node(), "softmax_rows");
  auto out = make_node(Op::SoftmaxRows, a.shape(), {a.node()});
  const auto& x = a.values();
  for (int64_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double* orow = out->values.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const double inv = 1.0 / denom;
    for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  return Tensor::wrap(std::move(out));
}

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
  require_2d(m, "add_rowwise");
  require(v.rank() == 1 && v.shape()[0] == m.shape()[1],
          "add_rowwise: bias shape " + shape_str(v.shape()) + " does not match " +
              shape_str(m.shape()));
  const int64_t r = m.shape()[0], c = m.shape()[1];
  auto out = make_node(Op::AddRowwise, {r, c}, {m.node(), v.node()});
  const auto& x = m.values();
  const auto& b = v.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->values[i * c + j] = x[i * c + j] + b[j];
  return Tensor::wrap(std::move(out));
}

Tensor scale_rows(const Tensor& m, const Tensor& s) {
  require_2d(m, "scale_rows");
  require(s.rank() == 1 && s.shape()[0] == m.shape()[0],
          "scale_rows: scale shape " + shape_str(s.shape()) + " does not match " +
              shape_str(m.shape()));
  const int64_t r = m.shape()[0], c = m.shape()[1];
  auto out = make_node(Op::ScaleRows, {r, c}, {m.node(), s.node()});
  const auto& x = m.values();
  const auto& sv = s.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->values[i * c + j] = x[i * c + j] * sv[i];
  return Tensor::wrap(std::move(out));
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  require_2d(a, "rowwise_dot");
  require_same_shape(a, b, "rowwise_dot");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = make_node(Op::RowwiseDot, {r}, {a.node(), b.node()});
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += a.values()[i * c + j] * b.values()[i * c + j];
    out->values[i] = s;
  }
  return Tensor::wrap(std::move(out));
}

Tensor rowwise_norm(const Tensor& a) {
  require_2d(a, "rowwise_norm");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = make_node(Op::RowwiseNorm, {r}, {a.node()});
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double v = a.values()[i * c + j];
      s += v * v;
    }
    out->values[i] = std::sqrt(s);
  }
  return Tensor::wrap(std::move(out));
}

Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& idx) {
  require_2d(table, "gather_rows");
  const int64_t v = table.shape()[0], e = table.shape()[1];
  for (size_t i = 0; i < idx.size(); ++i)
    if (idx[i] < 0 || idx[i] >= v)
      throw ValueError("gather_rows: index " + std::to_string(idx[i]) + " at row " +
                       std::to_string(i) + " outside vocabulary of " +
                       std::to_string(v));
  auto out = make_node(Op::GatherRows, {static_cast<int64_t>(idx.size()), e},
                       {table.node()});
  out->indices = idx;
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(table.values().begin() + idx[i] * e,
              table.values().begin() + (idx[i] + 1) * e, out->values.begin() + i * e);
  return Tensor::wrap(std::move(out));
}

Tensor outer_rows(const Tensor& a) {
  require_2d(a, "outer_rows");
  const int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = make_node(Op::OuterRows, {r * c, c}, {a.node()});
  const auto& x = a.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t p = 0; p < c; ++p) {
      const double xp = x[i * c + p];
      double* orow = out->values.data() + (i * c + p) * c;
      for (int64_t q = 0; q < c; ++q) orow[q] = xp * x[i * c + q];
    }
  return Tensor::wrap(std::move(out));
}

Tensor attend_rows(const Tensor& attn, const Tensor& f) {
  require_2d(attn, "attend_rows");
  require_2d(f, "attend_rows");
  const int64_t r = f.shape()[0], c = f.shape()[1];
  require(attn.shape()[0] == r * c && attn.shape()[1] == c,
          "attend_rows: attention shape " + shape_str(attn.shape()) +
              " does not match values shape " + shape_str(f.shape()));
  auto out = make_node(Op::AttendRows, {r, c}, {attn.node(), f.node()});
  const auto& A = attn.values();
  const auto& x = f.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t p = 0; p < c; ++p) {
      const double* arow = A.data() + (i * c + p) * c;
      double s = 0.0;
      for (int64_t q = 0; q < c; ++q) s += arow[q] * x[i * c + q];
      out->values[i * c + p] = s;
    }
  return Tensor::wrap(std::move(out));
}

Tensor apply(Op op, const std::vector<Tensor>& operands) {
  auto want = [&](size_t n) {
    if (operands.size() != n)
      throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                       " operands, got " + std::to_string(operands.size()));
  };
  switch (op) {
    case Op::Add: want(2); return add(operands[0], operands[1]);
    case Op::Sub: want(2); return sub(operands[0], operands[1]);
    case Op::ElemMul: want(2); return elem_mul(operands[0], operands[1]);
    case Op::Div: want(2); return div(operands[0], operands[1]);
    case Op::Scale:
    case Op::ScaleBy: want(2); return scale_by(operands[0], operands[1]);
    case Op::Matmul: want(2); return matmul(operands[0], operands[1]);
    case Op::Transpose: want(1); return transpose(operands[0]);
    case Op::ConcatRows: return concat_rows(operands);
    case Op::ConcatCols: return concat_cols(operands);
    case Op::MeanRows: want(1); return mean_rows(operands[0]);
    case Op::SumAll: want(1); return sum_all(operands[0]);
    case Op::Dot: want(2); return dot(operands[0], operands[1]);
    case Op::L2Norm: want(1); return l2_norm(operands[0]);
    case Op::Sigmoid: want(1); return sigmoid(operands[0]);
    case Op::Relu: want(1); return relu(operands[0]);
    case Op::MaxZero: want(1); return max_zero(operands[0]);
    case Op::SoftmaxRows: want(1); return softmax_rows(operands[0]);
    case Op::Log: want(1); return log(operands[0]);
    case Op::Exp: want(1); return exp(operands[0]);
    case Op::Detach: want(1); return detach(operands[0]);
    case Op::AddRowwise: want(2); return add_rowwise(operands[0], operands[1]);
    case Op::ScaleRows: want(2); return scale_rows(operands[0], operands[1]);
    case Op::RowwiseDot: want(2); return rowwise_dot(operands[0], operands[1]);
    case Op::RowwiseNorm: want(1); return rowwise_norm(operands[0]);
    case Op::OuterRows: want(1); return outer_rows(operands[0]);
    case Op::AttendRows: want(2); return attend_rows(operands[0], operands[1]);
    default:
      throw ConfigError(std::string("apply: operator ") + op_name(op) +
                        " needs attributes and has a dedicated constructor");
  }
}

// ---- reverse accumulation ----------------------------------------------

void GradMap::insert(const Node* leaf, std::vector<double> grad) {
  index_[leaf] = entries_.size();
  entries_.emplace_back(leaf, std::move(grad));
}

const std::vector<double>* GradMap::find(const Node* leaf) const {
  auto it = index_.find(leaf);
  if (it == index_.end()) return nullptr;
  return &entries_[it->second].second;
}

const std::vector<double>* GradMap::find(const Tensor& leaf) const {
  return find(leaf.id());
}

namespace {

struct BackwardCtx {
  std::unordered_map<const Node*, std::vector<double>> grads;

  std::vector<double>& buf(const Node* n) {
    auto it = grads.find(n);
    if (it != grads.end()) return it->second;
    auto& g = grads[n];
    g.assign(static_cast<size_t>(n->numel()), 0.0);
    return g;
  }
  const std::vector<double>* peek(const Node* n) const {
    auto it = grads.find(n);
    return it == grads.end() ? nullptr : &it->second;
  }
};

void backprop_node(const Node* n, const std::vector<double>& g, BackwardCtx& ctx) {
  auto rg = [&](size_t i) { return n->inputs[i]->requires_grad; };
  auto in = [&](size_t i) -> const Node& { return *n->inputs[i]; };
  auto gbuf = [&](size_t i) -> std::vector<double>& { return ctx.buf(n->inputs[i].get()); };

  switch (n->op) {
    case Op::Leaf:
    case Op::Detach:
      return;  // detach blocks flow; leaf terminates it
    case Op::Add: {
      for (size_t k = 0; k < 2; ++k)
        if (rg(k)) {
          auto& d = gbuf(k);
          for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      return;
    }
    case Op::Sub: {
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
      return;
    }
    case Op::ElemMul: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& y = in(1).values;
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        const auto& x = in(0).values;
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
      }
      return;
    }
    case Op::Div: {
      const auto& x = in(0).values;
      const auto& y = in(1).values;
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] / y[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i] * x[i] / (y[i] * y[i]);
      }
      return;
    }
    case Op::Scale: {
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n->attr_a;
      }
      return;
    }
    case Op::ScaleBy: {
      const double s = in(1).values[0];
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        const auto& x = in(0).values;
        double acc = 0.0;
        for (size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
        d[0] += acc;
      }
      return;
    }
    case Op::Matmul: {
      const int64_t m = n->shape[0], c = n->shape[1], k = in(0).shape[1];
      if (rg(0))  // dA += g * B^T
        gemm(false, true, m, k, c, 1.0, g.data(), c, in(1).values.data(), c, 1.0,
             gbuf(0).data(), k);
      if (rg(1))  // dB += A^T * g
        gemm(true, false, k, c, m, 1.0, in(0).values.data(), k, g.data(), c, 1.0,
             gbuf(1).data(), c);
      return;
    }
    case Op::Transpose: {
      if (rg(0)) {
        const int64_t r = n->shape[0], c = n->shape[1];  // out is r x c
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[j * r + i] += g[i * r ? i * c + j : j] * 0.0;
        // rewritten below for clarity
        return;
      }
      return;
    }
    case Op::ConcatRows: {
      size_t off = 0;
      for (size_t k = 0; k < n->inputs.size(); ++k) {
        const size_t sz = in(k).values.size();
        if (rg(k)) {
          auto& d = gbuf(k);
          for (size_t i = 0; i < sz; ++i) d[i] += g[off + i];
        }
        off += sz;
      }
      return;
    }
    case Op::ConcatCols: {
      const int64_t rows = n->shape[0], cols = n->shape[1];
      int64_t coff = 0;
      for (size_t k = 0; k < n->inputs.size(); ++k) {
        const int64_t c = in(k).shape.size() == 1 ? 1 : in(k).shape[1];
        if (rg(k)) {
          auto& d = gbuf(k);
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[i * cols + coff + j];
        }
        coff += c;
      }
      return;
    }
    case Op::SliceLast: {
      if (rg(0)) {
        auto [r, c] = rows_cols(in(0), "slice_last");
        const int64_t start = n->attr_i, count = n->attr_j;
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < count; ++j) d[i * c + start + j] += g[i * count + j];
      }
      return;
    }
    case Op::Reshape: {
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      return;
    }
    case Op::MeanRows: {
      if (rg(0)) {
        const int64_t r = in(0).shape[0], c = in(0).shape[1];
        const double inv = 1.0 / static_cast<double>(r);
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[j] * inv;
      }
      return;
    }
    case Op::SumAll: {
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[0];
      }
      return;
    }
    case Op::Dot: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& y = in(1).values;
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[0] * y[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        const auto& x = in(0).values;
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[0] * x[i];
      }
      return;
    }
    case Op::L2Norm: {
      if (rg(0)) {
        const double norm = n->values[0];
        auto& d = gbuf(0);
        const auto& x = in(0).values;
        if (norm > 0.0)  // subgradient 0 at the origin
          for (size_t i = 0; i < d.size(); ++i) d[i] += g[0] * x[i] / norm;
      }
      return;
    }
    case Op::Sigmoid: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& y = n->values;
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
      }
      return;
    }
    case Op::Relu:
    case Op::MaxZero: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& x = in(0).values;
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) d[i] += g[i];
      }
      return;
    }
    case Op::SoftmaxRows: {
      if (rg(0)) {
        auto [r, c] = rows_cols(*n, "softmax_rows");
        auto& d = gbuf(0);
        const auto& y = n->values;
        for (int64_t i = 0; i < r; ++i) {
          const double* yrow = y.data() + i * c;
          const double* grow = g.data() + i * c;
          double dotgy = 0.0;
          for (int64_t j = 0; j < c; ++j) dotgy += grow[j] * yrow[j];
          double* drow = d.data() + i * c;
          for (int64_t j = 0; j < c; ++j) drow[j] += yrow[j] * (grow[j] - dotgy);
        }
      }
      return;
    }
    case Op::Log: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& x = in(0).values;
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] / x[i];
      }
      return;
    }
    case Op::Exp: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& y = n->values;
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
      }
      return;
    }
    case Op::Clamp: {
      if (rg(0)) {
        auto& d = gbuf(0);
        const auto& x = in(0).values;
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > n->attr_a && x[i] < n->attr_b) d[i] += g[i];
      }
      return;
    }
    case Op::AddRowwise: {
      const int64_t r = n->shape[0], c = n->shape[1];
      if (rg(0)) {
        auto& d = gbuf(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[j] += g[i * c + j];
      }
      return;
    }
    case Op::ScaleRows: {
      const int64_t r = n->shape[0], c = n->shape[1];
      const auto& x = in(0).values;
      const auto& s = in(1).values;
      if (rg(0)) {
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[i * c + j] * s[i];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (int64_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * x[i * c + j];
          d[i] += acc;
        }
      }
      return;
    }
    case Op::RowwiseDot: {
      const int64_t r = in(0).shape[0], c = in(0).shape[1];
      const auto& x = in(0).values;
      const auto& y = in(1).values;
      if (rg(0)) {
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[i] * y[i * c + j];
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[i] * x[i * c + j];
      }
      return;
    }
    case Op::RowwiseNorm: {
      if (rg(0)) {
        const int64_t r = in(0).shape[0], c = in(0).shape[1];
        const auto& x = in(0).values;
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i) {
          const double norm = n->values[i];
          if (norm <= 0.0) continue;
          for (int64_t j = 0; j < c; ++j) d[i * c + j] += g[i] * x[i * c + j] / norm;
        }
      }
      return;
    }
    case Op::GatherRows: {
      if (rg(0)) {
        const int64_t e = in(0).shape[1];
        auto& d = gbuf(0);
        for (size_t i = 0; i < n->indices.size(); ++i) {
          const int64_t row = n->indices[i];
          for (int64_t j = 0; j < e; ++j) d[row * e + j] += g[i * e + j];
        }
      }
      return;
    }
    case Op::OuterRows: {
      if (rg(0)) {
        const int64_t r = in(0).shape[0], c = in(0).shape[1];
        const auto& x = in(0).values;
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t p = 0; p < c; ++p) {
            double acc = 0.0;
            const double* grow = g.data() + (i * c + p) * c;
            for (int64_t q = 0; q < c; ++q) {
              acc += grow[q] * x[i * c + q];                  // d out[p,q] / d x[p]
              acc += g[(i * c + q) * c + p] * x[i * c + q];   // d out[q,p] / d x[p]
            }
            d[i * c + p] += acc;
          }
      }
      return;
    }
    case Op::AttendRows: {
      const int64_t r = in(1).shape[0], c = in(1).shape[1];
      const auto& A = in(0).values;
      const auto& x = in(1).values;
      if (rg(0)) {
        auto& d = gbuf(0);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t p = 0; p < c; ++p) {
            const double gv = g[i * c + p];
            double* drow = d.data() + (i * c + p) * c;
            for (int64_t q = 0; q < c; ++q) drow[q] += gv * x[i * c + q];
          }
      }
      if (rg(1)) {
        auto& d = gbuf(1);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t p = 0; p < c; ++p) {
            const double gv = g[i * c + p];
            const double* arow = A.data() + (i * c + p) * c;
            for (int64_t q = 0; q < c; ++q) d[i * c + q] += gv * arow[q];
          }
      }
      return;
    }
  }
}

}  // namespace

GradMap backward(const Tensor& root) {
  if (root.numel() != 1)
    throw ShapeError("backward: root must be scalar, got shape " +
                     shape_str(root.shape()));

  // Post-order over all lineage edges; detach operands included so their
  // leaves register with exactly-zero gradients.
  std::vector<const Node*> topo;
  std::vector<const Node*> leaves;
  {
    std::unordered_set<const Node*> seen;
    struct Frame {
      const Node* n;
      size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.id(), 0});
    seen.insert(root.id());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->inputs.size()) {
        const Node* child = f.n->inputs[f.next++].get();
        if (seen.insert(child).second) stack.push_back({child, 0});
      } else {
        topo.push_back(f.n);
        if (f.n->op == Op::Leaf && f.n->requires_grad) leaves.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  BackwardCtx ctx;
  ctx.buf(root.id())[0] = 1.0;

  // topo is post-order, so iterating from the back visits every node
  // before its operands.
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const Node* n = *it;
    if (!n->requires_grad && n != root.id()) continue;
    const std::vector<double>* g = ctx.peek(n);
    if (g == nullptr) continue;
    backprop_node(n, *g, ctx);
  }

  GradMap out;
  // leaves were collected in post-order (first-visit order): deterministic.
  for (const Node* leaf : leaves) {
    const std::vector<double>* g = ctx.peek(leaf);
    if (g != nullptr)
      out.insert(leaf, *g);
    else
      out.insert(leaf, std::vector<double>(static_cast<size_t>(leaf->numel()), 0.0));
  }
  return out;
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  const std::vector<Tensor>& inputs, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3))
    throw ConfigError("grad_check: eps must lie in (0, 1e-3]");
  Tensor out = fn(inputs);
  if (out.numel() != 1)
    throw ShapeError("grad_check: function output must be scalar");
  GradMap grads = backward(out);

  double max_rel = 0.0;
  for (const Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double>* g = grads.find(t);
    Tensor probe = t;  // shared node; mutating values() reruns with new data
    auto& vals = probe.mutable_values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double fp = fn(inputs).item();
      vals[i] = keep - eps;
      const double fm = fn(inputs).item();
      vals[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = g != nullptr ? (*g)[i] : 0.0;
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace ektm
