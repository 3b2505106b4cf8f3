#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "grecall/tensor.hpp"

namespace grecall::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Handle into a Tape; cheap to copy.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes in creation order, which is already
// topological, so backward() is a single reverse sweep. One backward per
// tape; a second call is an error by contract.
class Tape {
 public:
  Var constant(Tensor t);
  // Leaf bound to an external parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_bias(Var x, Var bias);  // x [..., n] + bias [n]
  Var reshape(Var x, std::vector<int> shape);
  Var relu(Var x);
  Var tanh_act(Var x);
  Var gelu(Var x);
  Var stop_gradient(Var x);
  Var rows_select(Var x, std::vector<int64_t> rows);

  // 2-D matmul on the trailing-matrix view of a: [rows(a), cols(a)] times
  // b [k,n] (or [n,k] when trans_b). Leading dims of a carry through.
  Var matmul(Var a, Var b, bool trans_b = false);
  Var bmm(Var a, Var b, bool trans_b = false);  // [N,p,q] x [N,q,r]
  Var split_heads(Var x, int heads);            // [B,T,d] -> [B*h,T,d/h]
  Var merge_heads(Var x, int batch);            // [B*h,T,dh] -> [B,T,d]
  Var layer_norm(Var x, Var gain, Var bias);    // over last dim, eps 1e-5
  Var causal_softmax(Var scores);               // [N,T,T], row i sees j <= i
  Var embedding(Var table, std::vector<int> ids);
  Var l2_normalize_rows(Var x);

  Var sum_all(Var x);
  Var sum_squares(Var x);
  // Mean over unmasked rows of -log softmax(logits)[target].
  Var softmax_cross_entropy(Var logits, std::vector<int> targets,
                            std::vector<uint8_t> row_mask);
  // Per row r: logits[r][target] - logsumexp over allowed[r]. Output [R].
  Var constrained_logprob(Var logits, std::vector<std::vector<int>> allowed,
                          std::vector<int> targets);
  Var segment_sum(Var x, int seg);  // [R] -> [R/seg], consecutive groups

  // Clipped-surrogate policy loss with a per-output KL estimator, averaged
  // per group then over groups. old/ref log-probs and advantages are
  // constants; gradient flows through new_lp only. clip=false gives the
  // plain ratio*advantage estimator.
  Var grpo_loss(Var new_lp, std::vector<double> old_lp,
                std::vector<double> ref_lp, std::vector<double> advantages,
                std::vector<int> group_offsets, double eps_clip,
                double kl_weight, bool clip);

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  double scalar(Var v) const;

  void backward(Var loss);
  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(Tape&)> back;  // null for leaves
    Parameter* bound = nullptr;
  };

  int push(Tensor val, std::function<void(Tape&)> back, Parameter* bound = nullptr);
  Tensor& g(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  const Tensor& v(int id) const { return nodes_[static_cast<size_t>(id)].val; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace grecall::nn
