#include "shield/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace shield {

namespace {

std::string op_shapes(const char* op, const Tensor& a) {
  return std::string(op) + ": shape " + Tensor::shape_str(a.shape);
}

std::string op_shapes(const char* op, const Tensor& a, const Tensor& b) {
  return std::string(op) + ": shapes " + Tensor::shape_str(a.shape) + " and " +
         Tensor::shape_str(b.shape);
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.shape.size() != 2) throw ShapeError(op_shapes(op, t) + " (rank-2 required)");
}

// Rowwise stable softmax of src (rows x cols) into dst.
void softmax_rows(const double* src, double* dst, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    const double* x = src + r * cols;
    double* y = dst + r * cols;
    double mx = x[0];
    for (size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (size_t c = 0; c < cols; ++c) y[c] /= z;
  }
}

}  // namespace

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
    throw ShapeError("tape: invalid var handle");
  return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
    throw ShapeError("tape: invalid var handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::push(Node nd) {
  nodes_.push_back(std::move(nd));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Tape::any_rg(const std::vector<Var>& vs) const {
  for (Var v : vs)
    if (node(v).requires_grad) return true;
  return false;
}

Var Tape::leaf(Tensor t, bool requires_grad) {
  Node nd;
  nd.op = Op::Leaf;
  nd.value = std::move(t);
  nd.requires_grad = requires_grad;
  return push(std::move(nd));
}

Tensor Tape::grad(Var v) const {
  const Node& nd = node(v);
  Tensor g(nd.value.shape);
  if (nd.stamp == pass_ && !nd.grad.empty()) g.values = nd.grad;
  return g;
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  require_rank2("matmul", A);
  require_rank2("matmul", B);
  if (A.shape[1] != B.shape[0]) throw ShapeError(op_shapes("matmul", A, B));
  const size_t R = A.shape[0], K = A.shape[1], C = B.shape[1];
  Node nd;
  nd.op = Op::MatMul;
  nd.parents = {a.id, b.id};
  nd.requires_grad = any_rg({a, b});
  nd.value = Tensor({R, C});
  const double* pa = A.values.data();
  const double* pb = B.values.data();
  double* po = nd.value.values.data();
  for (size_t r = 0; r < R; ++r) {
    const double* ar = pa + r * K;
    double* orow = po + r * C;
    for (size_t k = 0; k < K; ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      const double* brow = pb + k * C;
      for (size_t c = 0; c < C; ++c) orow[c] += av * brow[c];
    }
  }
  return push(std::move(nd));
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (!A.same_shape(B)) throw ShapeError(op_shapes("add", A, B));
  Node nd;
  nd.op = Op::Add;
  nd.parents = {a.id, b.id};
  nd.requires_grad = any_rg({a, b});
  nd.value = A;
  for (size_t i = 0; i < nd.value.size(); ++i) nd.value.values[i] += B.values[i];
  return push(std::move(nd));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (!A.same_shape(B)) throw ShapeError(op_shapes("mul", A, B));
  Node nd;
  nd.op = Op::Mul;
  nd.parents = {a.id, b.id};
  nd.requires_grad = any_rg({a, b});
  nd.value = A;
  for (size_t i = 0; i < nd.value.size(); ++i) nd.value.values[i] *= B.values[i];
  return push(std::move(nd));
}

Var Tape::add_rowvec(Var m, Var v) {
  const Tensor& M = node(m).value;
  const Tensor& V = node(v).value;
  require_rank2("add_rowvec", M);
  if (V.shape.size() != 1 || V.shape[0] != M.shape[1])
    throw ShapeError(op_shapes("add_rowvec", M, V));
  Node nd;
  nd.op = Op::AddRowVec;
  nd.parents = {m.id, v.id};
  nd.requires_grad = any_rg({m, v});
  nd.value = M;
  const size_t R = M.shape[0], C = M.shape[1];
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) nd.value.values[r * C + c] += V.values[c];
  return push(std::move(nd));
}

Var Tape::scale(Var a, double s) {
  Node nd;
  nd.op = Op::Scale;
  nd.parents = {a.id};
  nd.s = s;
  nd.requires_grad = node(a).requires_grad;
  nd.value = node(a).value;
  for (double& x : nd.value.values) x *= s;
  return push(std::move(nd));
}

Var Tape::relu(Var a) {
  Node nd;
  nd.op = Op::Relu;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  nd.value = node(a).value;
  for (double& x : nd.value.values) x = x > 0.0 ? x : 0.0;
  return push(std::move(nd));
}

Var Tape::log(Var a) {
  Node nd;
  nd.op = Op::Log;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  nd.value = node(a).value;
  for (double& x : nd.value.values) x = std::log(x);
  return push(std::move(nd));
}

Var Tape::hconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("hconcat: no inputs");
  const size_t R = node(parts[0]).value.shape.size() == 2
                       ? node(parts[0]).value.shape[0]
                       : 0;
  size_t total = 0;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    require_rank2("hconcat", t);
    if (t.shape[0] != R)
      throw ShapeError(op_shapes("hconcat", node(parts[0]).value, t));
    total += t.shape[1];
  }
  Node nd;
  nd.op = Op::HConcat;
  nd.requires_grad = any_rg(parts);
  for (Var p : parts) {
    nd.parents.push_back(p.id);
    nd.aux.push_back(node(p).value.shape[1]);
  }
  nd.value = Tensor({R, total});
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    const size_t C = t.shape[1];
    for (size_t r = 0; r < R; ++r)
      for (size_t c = 0; c < C; ++c)
        nd.value.values[r * total + off + c] = t.values[r * C + c];
    off += C;
  }
  return push(std::move(nd));
}

Var Tape::vconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("vconcat: no inputs");
  const size_t C = node(parts[0]).value.shape.size() == 2
                       ? node(parts[0]).value.shape[1]
                       : 0;
  size_t total = 0;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    require_rank2("vconcat", t);
    if (t.shape[1] != C)
      throw ShapeError(op_shapes("vconcat", node(parts[0]).value, t));
    total += t.shape[0];
  }
  Node nd;
  nd.op = Op::VConcat;
  nd.requires_grad = any_rg(parts);
  for (Var p : parts) {
    nd.parents.push_back(p.id);
    nd.aux.push_back(node(p).value.shape[0]);
  }
  nd.value = Tensor({total, C});
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& t = node(p).value;
    std::copy(t.values.begin(), t.values.end(), nd.value.values.begin() + off * C);
    off += t.shape[0];
  }
  return push(std::move(nd));
}

Var Tape::sum(Var a) {
  Node nd;
  nd.op = Op::Sum;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  double s = 0.0;
  for (double x : node(a).value.values) s += x;
  nd.value = Tensor({1}, {s});
  return push(std::move(nd));
}

Var Tape::mean(Var a) {
  const size_t n = node(a).value.size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  Node nd;
  nd.op = Op::Mean;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  double s = 0.0;
  for (double x : node(a).value.values) s += x;
  nd.value = Tensor({1}, {s / static_cast<double>(n)});
  return push(std::move(nd));
}

Var Tape::mean_rows(Var m) {
  const Tensor& M = node(m).value;
  require_rank2("mean_rows", M);
  const size_t R = M.shape[0], C = M.shape[1];
  if (R == 0) throw ShapeError("mean_rows: zero rows");
  Node nd;
  nd.op = Op::MeanRows;
  nd.parents = {m.id};
  nd.requires_grad = node(m).requires_grad;
  nd.value = Tensor({C});
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) nd.value.values[c] += M.values[r * C + c];
  for (size_t c = 0; c < C; ++c) nd.value.values[c] /= static_cast<double>(R);
  return push(std::move(nd));
}

Var Tape::max_rows(Var m) {
  const Tensor& M = node(m).value;
  require_rank2("max_rows", M);
  const size_t R = M.shape[0], C = M.shape[1];
  if (R == 0) throw ShapeError("max_rows: zero rows");
  Node nd;
  nd.op = Op::MaxRows;
  nd.parents = {m.id};
  nd.requires_grad = node(m).requires_grad;
  nd.value = Tensor({C});
  nd.aux.assign(C, 0);
  for (size_t c = 0; c < C; ++c) {
    double best = M.values[c];
    size_t arg = 0;
    for (size_t r = 1; r < R; ++r) {
      const double x = M.values[r * C + c];
      if (x > best) {
        best = x;
        arg = r;
      }
    }
    nd.value.values[c] = best;
    nd.aux[c] = arg;
  }
  return push(std::move(nd));
}

Var Tape::softmax(Var a) {
  const Tensor& A = node(a).value;
  if (A.shape.size() != 1 && A.shape.size() != 2)
    throw ShapeError(op_shapes("softmax", A));
  const size_t rows = A.shape.size() == 2 ? A.shape[0] : 1;
  const size_t cols = A.shape.size() == 2 ? A.shape[1] : A.shape[0];
  Node nd;
  nd.op = Op::Softmax;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  nd.value = Tensor(A.shape);
  softmax_rows(A.values.data(), nd.value.values.data(), rows, cols);
  return push(std::move(nd));
}

Var Tape::gather_rows(Var m, const std::vector<size_t>& rows) {
  const Tensor& M = node(m).value;
  require_rank2("gather_rows", M);
  const size_t C = M.shape[1];
  Node nd;
  nd.op = Op::GatherRows;
  nd.parents = {m.id};
  nd.requires_grad = node(m).requires_grad;
  nd.aux = rows;
  nd.value = Tensor({rows.size(), C});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= M.shape[0])
      throw ShapeError("gather_rows: index " + std::to_string(rows[i]) +
                       " out of range for " + Tensor::shape_str(M.shape));
    for (size_t c = 0; c < C; ++c)
      nd.value.values[i * C + c] = M.values[rows[i] * C + c];
  }
  return push(std::move(nd));
}

Var Tape::rows_scale(Var m, Var v) {
  const Tensor& M = node(m).value;
  const Tensor& V = node(v).value;
  require_rank2("rows_scale", M);
  if (V.shape.size() != 1 || V.shape[0] != M.shape[0])
    throw ShapeError(op_shapes("rows_scale", M, V));
  Node nd;
  nd.op = Op::RowsScale;
  nd.parents = {m.id, v.id};
  nd.requires_grad = any_rg({m, v});
  nd.value = M;
  const size_t R = M.shape[0], C = M.shape[1];
  for (size_t r = 0; r < R; ++r)
    for (size_t c = 0; c < C; ++c) nd.value.values[r * C + c] *= V.values[r];
  return push(std::move(nd));
}

Var Tape::col(Var m, size_t j) {
  const Tensor& M = node(m).value;
  require_rank2("col", M);
  if (j >= M.shape[1])
    throw ShapeError("col: index " + std::to_string(j) + " out of range for " +
                     Tensor::shape_str(M.shape));
  Node nd;
  nd.op = Op::Col;
  nd.parents = {m.id};
  nd.requires_grad = node(m).requires_grad;
  nd.aux = {j};
  const size_t R = M.shape[0], C = M.shape[1];
  nd.value = Tensor({R});
  for (size_t r = 0; r < R; ++r) nd.value.values[r] = M.values[r * C + j];
  return push(std::move(nd));
}

Var Tape::nll(Var logits, const std::vector<size_t>& labels) {
  const Tensor& L = node(logits).value;
  require_rank2("nll", L);
  const size_t B = L.shape[0], M = L.shape[1];
  if (labels.size() != B)
    throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for " +
                     Tensor::shape_str(L.shape));
  Node nd;
  nd.op = Op::Nll;
  nd.parents = {logits.id};
  nd.requires_grad = node(logits).requires_grad;
  nd.aux = labels;
  // Saved probabilities drive the backward pass: d/dlogit = (p - onehot)/B.
  Tensor probs({B, M});
  softmax_rows(L.values.data(), probs.values.data(), B, M);
  double loss = 0.0;
  for (size_t b = 0; b < B; ++b) {
    if (labels[b] >= M)
      throw ShapeError("nll: label " + std::to_string(labels[b]) +
                       " out of range for " + Tensor::shape_str(L.shape));
    const double* x = L.values.data() + b * M;
    double mx = x[0];
    for (size_t c = 1; c < M; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (size_t c = 0; c < M; ++c) z += std::exp(x[c] - mx);
    loss -= x[labels[b]] - mx - std::log(z);
  }
  nd.value = Tensor({1}, {loss / static_cast<double>(B)});
  nd.saved_probs = std::move(probs.values);
  return push(std::move(nd));
}

Var Tape::reshape(Var a, std::vector<size_t> new_shape) {
  const Tensor& A = node(a).value;
  if (Tensor::numel(new_shape) != A.size())
    throw ShapeError("reshape: " + Tensor::shape_str(A.shape) + " to " +
                     Tensor::shape_str(new_shape));
  Node nd;
  nd.op = Op::Reshape;
  nd.parents = {a.id};
  nd.requires_grad = node(a).requires_grad;
  nd.value = Tensor(std::move(new_shape), A.values);
  return push(std::move(nd));
}

void Tape::touch(Node& nd) {
  if (nd.stamp != pass_) {
    nd.stamp = pass_;
    nd.grad.assign(nd.value.size(), 0.0);
  }
}

void Tape::backward(Var out) {
  Node& o = node(out);
  if (o.value.shape != std::vector<size_t>{1})
    throw ShapeError("backward: output shape " + Tensor::shape_str(o.value.shape) +
                     " (scalar [1] required)");
  ++pass_;
  if (!o.requires_grad) return;
  touch(o);
  o.grad[0] = 1.0;
  // Only nodes stamped by an accumulation are swept, so the cost tracks
  // the dependency cone of `out`, not the whole tape.
  for (int id = out.id; id >= 0; --id) {
    Node& nd = nodes_[static_cast<size_t>(id)];
    if (nd.stamp == pass_ && nd.requires_grad) backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& nd = nodes_[static_cast<size_t>(id)];
  auto parent_grad = [&](int i) -> std::vector<double>& {
    Node& p = nodes_[static_cast<size_t>(nd.parents[static_cast<size_t>(i)])];
    touch(p);
    return p.grad;
  };
  auto parent_rg = [&](int i) {
    return nodes_[static_cast<size_t>(nd.parents[static_cast<size_t>(i)])].requires_grad;
  };
  auto parent_val = [&](int i) -> const Tensor& {
    return nodes_[static_cast<size_t>(nd.parents[static_cast<size_t>(i)])].value;
  };
  const std::vector<double>& g = nd.grad;

  switch (nd.op) {
    case Op::Leaf:
      break;
    case Op::MatMul: {
      const Tensor& A = parent_val(0);
      const Tensor& B = parent_val(1);
      const size_t R = A.shape[0], K = A.shape[1], C = B.shape[1];
      if (parent_rg(0)) {
        std::vector<double>& da = parent_grad(0);
        for (size_t r = 0; r < R; ++r)
          for (size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            const double* grow = g.data() + r * C;
            const double* brow = B.values.data() + k * C;
            for (size_t c = 0; c < C; ++c) acc += grow[c] * brow[c];
            da[r * K + k] += acc;
          }
      }
      if (parent_rg(1)) {
        std::vector<double>& db = parent_grad(1);
        for (size_t r = 0; r < R; ++r) {
          const double* arow = A.values.data() + r * K;
          const double* grow = g.data() + r * C;
          for (size_t k = 0; k < K; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            double* drow = db.data() + k * C;
            for (size_t c = 0; c < C; ++c) drow[c] += av * grow[c];
          }
        }
      }
      break;
    }
    case Op::Add:
      for (int p = 0; p < 2; ++p)
        if (parent_rg(p)) {
          std::vector<double>& d = parent_grad(p);
          for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      break;
    case Op::AddRowVec: {
      const size_t R = nd.value.shape[0], C = nd.value.shape[1];
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (parent_rg(1)) {
        std::vector<double>& d = parent_grad(1);
        for (size_t r = 0; r < R; ++r)
          for (size_t c = 0; c < C; ++c) d[c] += g[r * C + c];
      }
      break;
    }
    case Op::Mul:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const Tensor& B = parent_val(1);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * B.values[i];
      }
      if (parent_rg(1)) {
        std::vector<double>& d = parent_grad(1);
        const Tensor& A = parent_val(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * A.values[i];
      }
      break;
    case Op::Scale:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += nd.s * g[i];
      }
      break;
    case Op::Relu:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (size_t i = 0; i < g.size(); ++i)
          if (nd.value.values[i] > 0.0) d[i] += g[i];
      }
      break;
    case Op::Log:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const Tensor& A = parent_val(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] / A.values[i];
      }
      break;
    case Op::HConcat: {
      const size_t R = nd.value.shape[0], total = nd.value.shape[1];
      size_t off = 0;
      for (size_t p = 0; p < nd.parents.size(); ++p) {
        const size_t C = nd.aux[p];
        if (parent_rg(static_cast<int>(p))) {
          std::vector<double>& d = parent_grad(static_cast<int>(p));
          for (size_t r = 0; r < R; ++r)
            for (size_t c = 0; c < C; ++c) d[r * C + c] += g[r * total + off + c];
        }
        off += C;
      }
      break;
    }
    case Op::VConcat: {
      const size_t C = nd.value.shape[1];
      size_t off = 0;
      for (size_t p = 0; p < nd.parents.size(); ++p) {
        const size_t R = nd.aux[p];
        if (parent_rg(static_cast<int>(p))) {
          std::vector<double>& d = parent_grad(static_cast<int>(p));
          for (size_t i = 0; i < R * C; ++i) d[i] += g[off * C + i];
        }
        off += R;
      }
      break;
    }
    case Op::Sum:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (double& x : d) x += g[0];
      }
      break;
    case Op::Mean:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const double s = g[0] / static_cast<double>(d.size());
        for (double& x : d) x += s;
      }
      break;
    case Op::MeanRows:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const Tensor& M = parent_val(0);
        const size_t R = M.shape[0], C = M.shape[1];
        for (size_t r = 0; r < R; ++r)
          for (size_t c = 0; c < C; ++c)
            d[r * C + c] += g[c] / static_cast<double>(R);
      }
      break;
    case Op::MaxRows:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const size_t C = nd.value.shape[0];
        const size_t Cm = parent_val(0).shape[1];
        for (size_t c = 0; c < C; ++c) d[nd.aux[c] * Cm + c] += g[c];
      }
      break;
    case Op::Softmax:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const size_t rows = nd.value.shape.size() == 2 ? nd.value.shape[0] : 1;
        const size_t cols =
            nd.value.shape.size() == 2 ? nd.value.shape[1] : nd.value.shape[0];
        for (size_t r = 0; r < rows; ++r) {
          const double* y = nd.value.values.data() + r * cols;
          const double* gy = g.data() + r * cols;
          double dot = 0.0;
          for (size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
          for (size_t c = 0; c < cols; ++c)
            d[r * cols + c] += y[c] * (gy[c] - dot);
        }
      }
      break;
    case Op::GatherRows:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const size_t C = nd.value.shape[1];
        for (size_t i = 0; i < nd.aux.size(); ++i)
          for (size_t c = 0; c < C; ++c)
            d[nd.aux[i] * C + c] += g[i * C + c];
      }
      break;
    case Op::RowsScale: {
      const Tensor& M = parent_val(0);
      const Tensor& V = parent_val(1);
      const size_t R = M.shape[0], C = M.shape[1];
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (size_t r = 0; r < R; ++r)
          for (size_t c = 0; c < C; ++c) d[r * C + c] += g[r * C + c] * V.values[r];
      }
      if (parent_rg(1)) {
        std::vector<double>& d = parent_grad(1);
        for (size_t r = 0; r < R; ++r) {
          double acc = 0.0;
          for (size_t c = 0; c < C; ++c) acc += g[r * C + c] * M.values[r * C + c];
          d[r] += acc;
        }
      }
      break;
    }
    case Op::Col:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const size_t C = parent_val(0).shape[1];
        const size_t j = nd.aux[0];
        for (size_t r = 0; r < nd.value.shape[0]; ++r) d[r * C + j] += g[r];
      }
      break;
    case Op::Nll:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        const size_t B = parent_val(0).shape[0], M = parent_val(0).shape[1];
        const double s = g[0] / static_cast<double>(B);
        for (size_t b = 0; b < B; ++b)
          for (size_t c = 0; c < M; ++c) {
            double delta = nd.saved_probs[b * M + c];
            if (c == nd.aux[b]) delta -= 1.0;
            d[b * M + c] += s * delta;
          }
      }
      break;
    case Op::Reshape:
      if (parent_rg(0)) {
        std::vector<double>& d = parent_grad(0);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
  }
}

std::vector<Tensor> Tape::gradient(Var out, const std::vector<Var>& wrt) {
  backward(out);
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (Var v : wrt) result.push_back(grad(v));
  return result;
}

Var Bindings::get(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("unknown input name: " + name);
  return it->second;
}

Tensor evaluate(const GraphFn& fn, const std::map<std::string, Tensor>& inputs) {
  Tape tape;
  Bindings b;
  for (const auto& [name, t] : inputs) b.vars_[name] = tape.constant(t);
  Var out = fn(tape, b);
  return tape.value(out);
}

}  // namespace shield
