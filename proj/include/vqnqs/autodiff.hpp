#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vqnqs/rng.hpp"
#include "vqnqs/tensor.hpp"

namespace vqnqs::ad {

// A named trainable tensor with an external gradient accumulator. Graphs
// reference parameters; backward passes accumulate into `grad` so repeated
// backward calls (or several graphs) sum their contributions.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(v.shape), grad(v.shape) {
    value = std::move(v);
  }
  void zero_grad() { grad.fill(0.0); }
};

struct VqOptions {
  int heads = 1;
  double tau = 1.0;       // surrogate softmax temperature
  bool gumbel = false;    // stochastic code selection during training
  Rng* rng = nullptr;     // required when gumbel is on
};

// Tape-based reverse-mode graph over dense tensors. Nodes are created by the
// op methods; `backward(root)` propagates from a scalar root in reverse
// creation order and accumulates parameter gradients.
class Graph {
 public:
  using Id = int32_t;

  Id constant(Tensor v);
  Id param(Parameter& p);

  Id matmul(Id a, Id b);
  Id linear(Id x, Id w, Id b);
  Id layer_norm(Id x, Id gamma, Id beta, double eps = 1e-5);
  Id softmax_rows(Id x);
  Id log_softmax_rows(Id x);
  Id gelu(Id x);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double c);
  Id exp(Id a);
  Id cos(Id a);
  Id sin(Id a);
  Id sum_all(Id a);                // -> [1 x 1]
  Id dot(Id a, Id b);              // elementwise product summed -> [1 x 1]
  // Multi-head attention over B sequences of length T flattened [B*T x d].
  Id attention(Id q, Id k, Id v, int64_t batch, int64_t seq_len, int n_heads,
               Mask mask);
  Id embedding(Parameter& table, const std::vector<int>& ids);
  Id mean_pool_seq(Id x, int64_t batch, int64_t seq_len);  // -> [B x d]
  // Sums logits[r, targets[r]] over each sequence -> [B x 1].
  Id pick_sum_per_seq(Id logits, const std::vector<int>& targets,
                      int64_t batch, int64_t seq_len);
  Id weighted_sum(Id x, std::vector<double> w);  // [B x 1] -> [1 x 1]

  // Hard vector quantization with a soft surrogate gradient. x is [R x d],
  // codebook [H*Q x d/H] with head h's codes at rows [h*Q, (h+1)*Q). The
  // forward output is the exact concatenation of selected codebook rows; the
  // backward pass differentiates y_h = softmax(D_h/tau)^T W_h instead. When
  // `indices_out` is given it receives the R*H selected code indices
  // (row-major over (row, head)).
  Id vq_quantize(Id x, Parameter& codebook, const VqOptions& opt,
                 std::vector<int>* indices_out = nullptr);

  const Tensor& value(Id id) const { return nodes_[id].value; }
  Tensor& grad(Id id) { return nodes_[id].grad; }
  size_t size() const { return nodes_.size(); }

  void backward(Id root);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alive = false;
    std::function<void(Graph&, Id)> backprop;  // may be empty for leaves
  };

  Id push(Tensor value, bool requires_grad,
          std::function<void(Graph&, Id)> backprop);
  Tensor& ensure_grad(Id id);

  std::vector<Node> nodes_;
};

}  // namespace vqnqs::ad
