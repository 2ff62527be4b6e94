#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "shield/tensor.hpp"

namespace shield {

class Tape;

// Handle into a Tape's node list. Cheap to copy, only meaningful
// together with the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. Every op records a node; backward
// sweeps the node list once in reverse (construction order is already
// topological). Vectors are rank-1, batches are rank-2 row-major.
class Tape {
public:
  Var leaf(Tensor t, bool requires_grad = true);
  Var constant(Tensor t) { return leaf(std::move(t), false); }

  const Tensor& value(Var v) const { return node(v).value; }
  // Gradient accumulated by the last backward(); zeros if the node was
  // not on any path to the output.
  Tensor grad(Var v) const;

  // [A,B] x [B,C] -> [A,C]
  Var matmul(Var a, Var b);
  // elementwise, identical shapes
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  // [R,C] + row vector [C]
  Var add_rowvec(Var m, Var v);
  Var scale(Var a, double s);
  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
  Var relu(Var a);
  Var log(Var a);
  // concat along columns: [R,C1],[R,C2],... -> [R,C1+C2+...]
  Var hconcat(const std::vector<Var>& parts);
  // stack along rows: [R1,C],[R2,C],... -> [R1+R2+...,C]
  Var vconcat(const std::vector<Var>& parts);
  // reductions to scalar shape [1]
  Var sum(Var a);
  Var mean(Var a);
  // column-wise reductions [R,C] -> [C]
  Var mean_rows(Var m);
  Var max_rows(Var m);
  // rank-1: softmax over the vector; rank-2: softmax per row
  Var softmax(Var a);
  // [R,C] with index list -> [#idx, C]; repeated indices allowed
  // (backward scatter-adds)
  Var gather_rows(Var m, const std::vector<size_t>& rows);
  // out[r,c] = m[r,c] * v[r]
  Var rows_scale(Var m, Var v);
  // column j of [R,C] -> [R]
  Var col(Var m, size_t j);
  // mean over batch of -log softmax(logits[b])[labels[b]]; fused
  // log-softmax keeps this stable for sharp logits
  Var nll(Var logits, const std::vector<size_t>& labels);
  Var reshape(Var a, std::vector<size_t> new_shape);

  // Seeds d(out)=1 and accumulates gradients into every node that
  // requires grad. out must have shape [1].
  void backward(Var out);
  // backward(out) then collect per-wrt gradients (zeros for tensors
  // with no path to out).
  std::vector<Tensor> gradient(Var out, const std::vector<Var>& wrt);

  size_t size() const { return nodes_.size(); }

private:
  enum class Op {
    Leaf, MatMul, Add, AddRowVec, Mul, Scale, Relu, Log, HConcat, VConcat,
    Sum, Mean, MeanRows, MaxRows, Softmax, GatherRows, RowsScale,
    Col, Nll, Reshape
  };

  struct Node {
    Op op = Op::Leaf;
    std::vector<int> parents;
    double s = 0.0;
    std::vector<size_t> aux;
    std::vector<double> saved_probs;
    Tensor value;
    std::vector<double> grad;
    uint64_t stamp = 0;  // pass id of the last backward that touched this node
    bool requires_grad = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Node nd);
  bool any_rg(const std::vector<Var>& vs) const;
  void backward_node(int id);
  void touch(Node& nd);

  std::vector<Node> nodes_;
  uint64_t pass_ = 0;
};

// Named-input wrapper so callers can express a computation once and
// evaluate it against different tensor bindings.
class Bindings {
public:
  Var get(const std::string& name) const;

private:
  friend Tensor evaluate(const std::function<Var(Tape&, const Bindings&)>&,
                         const std::map<std::string, Tensor>&);
  std::map<std::string, Var> vars_;
};

using GraphFn = std::function<Var(Tape&, const Bindings&)>;

// Binds every input as a constant leaf, runs the builder, returns the
// forward value of the node it designates.
Tensor evaluate(const GraphFn& fn, const std::map<std::string, Tensor>& inputs);

}  // namespace shield
