#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl {

struct Node;
using VarPtr = std::shared_ptr<Node>;

// One value in a dynamically built computation graph. Parameters are leaves
// that persist across steps; everything else is rebuilt per forward pass.
struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::vector<VarPtr> inputs;
  std::function<void(Node&)> backward_fn;
  std::string name;  // set for parameters

  void ensure_grad() {
    if (!grad.same_shape(val)) grad = Tensor(val.shape());
  }
  void zero_grad() { grad = Tensor(val.shape()); }
};

VarPtr leaf(Tensor v, bool requires_grad = false);
VarPtr constant(Tensor v);

// Reverse-mode sweep from a scalar root. Accumulates into .grad of every
// reachable node with requires_grad set.
void backward(const VarPtr& root);

// ---- elementwise / arithmetic ----
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr sub(const VarPtr& a, const VarPtr& b);
VarPtr mul(const VarPtr& a, const VarPtr& b);
VarPtr neg(const VarPtr& a);
VarPtr scale(const VarPtr& a, double s);
VarPtr add_scalar(const VarPtr& a, double s);
VarPtr add_constt(const VarPtr& a, Tensor c);        // c same shape, no grad
VarPtr mul_constt(const VarPtr& a, Tensor c);
VarPtr add_bcast(const VarPtr& a, const VarPtr& b);  // b.shape is a suffix of a.shape
VarPtr relu(const VarPtr& a);
VarPtr leaky_relu(const VarPtr& a, double slope);
VarPtr sigmoid(const VarPtr& a);
VarPtr tanh_v(const VarPtr& a);
VarPtr exp_v(const VarPtr& a);
VarPtr log_v(const VarPtr& a);
VarPtr softplus(const VarPtr& a);

// ---- linear algebra ----
// 2D x 2D, 3D x 2D (shared rhs), 3D x 3D (batched)
VarPtr matmul(const VarPtr& a, const VarPtr& b);
VarPtr transpose_last2(const VarPtr& a);
VarPtr permute(const VarPtr& a, const std::vector<int>& axes);
VarPtr reshape(const VarPtr& a, Shape s);
VarPtr concat(const std::vector<VarPtr>& xs, int dim);
VarPtr slice(const VarPtr& a, int dim, int64_t start, int64_t len);
VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b);  // x[..,k] w[k,n] b[n]

// ---- reductions / normalizations ----
VarPtr sum_all(const VarPtr& a);   // -> [1]
VarPtr mean_all(const VarPtr& a);  // -> [1]
VarPtr sum_lastdim(const VarPtr& a);
VarPtr logsumexp_lastdim(const VarPtr& a);
VarPtr softmax_lastdim(const VarPtr& a);
VarPtr log_softmax_lastdim(const VarPtr& a);
VarPtr sub_lastdim_bcast(const VarPtr& a, const VarPtr& v);  // a[..,n] - v[..]
VarPtr layer_norm(const VarPtr& x, const VarPtr& gain, const VarPtr& bias, double eps = 1e-5);
VarPtr l2_normalize_rows(const VarPtr& x, double eps = 1e-12);  // [R,D]

// ---- structured ----
VarPtr embedding(const VarPtr& table, const std::vector<int64_t>& ids, Shape id_shape);
VarPtr gather_rows(const VarPtr& x, const std::vector<int64_t>& idx);
VarPtr scatter_add_rows(const VarPtr& x, const std::vector<int64_t>& dst, int64_t n_rows);
VarPtr mul_rows(const VarPtr& x, const VarPtr& w);  // x[R,D] * w[R]
VarPtr segment_softmax(const VarPtr& scores, const std::vector<int64_t>& seg, int64_t n_seg);
VarPtr tile_rows(const VarPtr& m, int64_t b);  // [M,d] -> [b,M,d]
// ragged rows -> zero-padded [B, Rmax, D]; sizes[i] rows per group, in order
VarPtr pad_pack_rows(const VarPtr& x, const std::vector<int64_t>& sizes, int64_t rmax);

// ---- conv ----
VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad);
// fixed (non-learned) kernel applied per channel, stride 1, zero pad to keep H,W
VarPtr depthwise_conv_const(const VarPtr& x, Tensor kernel);
VarPtr global_avg_pool(const VarPtr& x);  // [N,C,H,W] -> [N,C]

// ---- fused losses ----
// mean CE over rows where mask!=0; logits [R,V], targets [R]
VarPtr softmax_ce_mean(const VarPtr& logits, const std::vector<int64_t>& targets,
                       const std::vector<uint8_t>& mask);
// mean over all elements of binary CE on sigmoid(logits) against targets in [0,1]
VarPtr bce_logits_mean(const VarPtr& logits, Tensor targets);

}  // namespace mtl
