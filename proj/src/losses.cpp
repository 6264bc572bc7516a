#include "mtl/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace mtl::losses {

VarPtr supcon_loss(const ContrastiveBatch& batch) {
  if (batch.tau <= 0.0) throw std::invalid_argument("supcon_loss: tau must be positive");
  const auto& z = batch.embeddings;
  if (z->val.ndim() != 2) throw std::invalid_argument("supcon_loss: embeddings must be 2D");
  int64_t n2 = z->val.size(0), d = z->val.size(1);
  if (n2 < 4) throw std::invalid_argument("supcon_loss: batch must have at least 4 rows");
  if (static_cast<int64_t>(batch.labels.size()) != n2)
    throw std::invalid_argument("supcon_loss: label count mismatch");
  for (int64_t i = 0; i < n2; ++i) {
    double nr = 0.0;
    for (int64_t c = 0; c < d; ++c) nr += z->val[i * d + c] * z->val[i * d + c];
    if (std::fabs(std::sqrt(nr) - 1.0) > 1e-6)
      throw std::invalid_argument("supcon_loss: embedding rows must be L2-normalized");
  }

  // positive-pair weights, 1/P_i per anchor row
  Tensor posw({n2, n2});
  for (int64_t i = 0; i < n2; ++i) {
    int64_t pi = 0;
    for (int64_t j = 0; j < n2; ++j)
      if (j != i && batch.labels[static_cast<size_t>(j)] == batch.labels[static_cast<size_t>(i)]) ++pi;
    if (pi == 0) throw std::invalid_argument("supcon_loss: anchor without a positive");
    for (int64_t j = 0; j < n2; ++j)
      if (j != i && batch.labels[static_cast<size_t>(j)] == batch.labels[static_cast<size_t>(i)])
        posw[i * n2 + j] = 1.0 / static_cast<double>(pi);
  }

  auto sims = scale(matmul(z, transpose_last2(z)), 1.0 / batch.tau);
  Tensor diag_mask({n2, n2});
  for (int64_t i = 0; i < n2; ++i) diag_mask[i * n2 + i] = -1e30;  // drop k = i from the denominator
  auto lse = logsumexp_lastdim(add_constt(sims, diag_mask));
  auto log_prob = sub_lastdim_bcast(sims, lse);
  auto weighted = mul_constt(log_prob, std::move(posw));
  return scale(sum_all(weighted), -1.0 / static_cast<double>(n2));
}

VarPtr incremental_kd_loss(const VarPtr& old_logits, const VarPtr& new_logits, double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("incremental_kd_loss: temperature must be positive");
  if (old_logits->val.ndim() != 2 || new_logits->val.ndim() != 2)
    throw std::invalid_argument("incremental_kd_loss: logits must be 2D");
  int64_t n = old_logits->val.size(0);
  int64_t k_old = old_logits->val.size(1);
  int64_t k_new = new_logits->val.size(1);
  if (new_logits->val.size(0) != n) throw std::invalid_argument("incremental_kd_loss: row count mismatch");
  if (n < 1) throw std::invalid_argument("incremental_kd_loss: empty batch");
  if (k_new < k_old) throw std::invalid_argument("incremental_kd_loss: new head narrower than old head");
  auto restricted = (k_new == k_old) ? new_logits : slice(new_logits, -1, 0, k_old);
  return kl_logits_softmax(restricted, old_logits, temperature);
}

VarPtr cicl_total_loss(const VarPtr& contra, const VarPtr& incre) { return add(contra, incre); }

VarPtr caption_ce_loss(const VarPtr& logits, const std::vector<int64_t>& targets,
                       const std::vector<uint8_t>& pad_mask) {
  VarPtr flat = logits;
  if (logits->val.ndim() == 3) {
    int64_t v = logits->val.size(-1);
    flat = reshape(logits, {logits->val.numel() / v, v});
  } else if (logits->val.ndim() != 2) {
    throw std::invalid_argument("caption_ce_loss: logits must be 2D or 3D");
  }
  return softmax_ce_mean(flat, targets, pad_mask);
}

VarPtr interaction_ml_loss(const VarPtr& edge_logits, Tensor edge_labels) {
  if (edge_logits->val.ndim() != 2 || edge_logits->val.size(0) < 1)
    throw std::invalid_argument("interaction_ml_loss: expects [E,K] logits with E >= 1");
  return bce_logits_mean(edge_logits, std::move(edge_labels));
}

VarPtr finetune_loss(const VarPtr& l_caption, const VarPtr& l_scene_graph, double w) {
  return scale(add(l_caption, l_scene_graph), w);
}

VarPtr vanilla_loss(const VarPtr& l_caption, const VarPtr& l_scene_graph, double w) {
  return scale(add(l_caption, l_scene_graph), w);
}

VarPtr kd_loss(const VarPtr& l_ce_c, const VarPtr& l_mls_sg, const VarPtr& l_kl_c,
               const VarPtr& l_kl_sg, const LossWeights& w) {
  return add(scale(add(l_ce_c, l_mls_sg), w.kd_task_w), scale(add(l_kl_c, l_kl_sg), w.kd_distill_w));
}

VarPtr kl_logits_softmax(const VarPtr& student_logits, const VarPtr& teacher_logits,
                         double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("kl_logits_softmax: temperature must be positive");
  if (!student_logits->val.same_shape(teacher_logits->val))
    throw std::invalid_argument("kl_logits_softmax: shape mismatch");
  double t = temperature;
  int64_t rows = student_logits->val.numel() / student_logits->val.size(-1);
  auto ts = scale(teacher_logits, 1.0 / t);
  auto ss = scale(student_logits, 1.0 / t);
  auto p = softmax_lastdim(ts);
  auto gap = sub(log_softmax_lastdim(ts), log_softmax_lastdim(ss));
  return scale(sum_all(mul(p, gap)), t * t / static_cast<double>(rows));
}

VarPtr kl_logits_bernoulli(const VarPtr& student_logits, const VarPtr& teacher_logits,
                           double temperature) {
  if (temperature <= 0.0) throw std::invalid_argument("kl_logits_bernoulli: temperature must be positive");
  if (!student_logits->val.same_shape(teacher_logits->val))
    throw std::invalid_argument("kl_logits_bernoulli: shape mismatch");
  double t = temperature;
  auto ss = scale(student_logits, 1.0 / t);
  auto ts = scale(teacher_logits, 1.0 / t);
  auto p = sigmoid(ts);
  // log sig(x) = -softplus(-x); log(1 - sig(x)) = -softplus(x)
  auto pos_gap = sub(softplus(neg(ss)), softplus(neg(ts)));
  auto neg_gap = sub(softplus(ss), softplus(ts));
  auto one_minus_p = add_scalar(neg(p), 1.0);
  auto kl = add(mul(p, pos_gap), mul(one_minus_p, neg_gap));
  return scale(mean_all(kl), t * t);
}

}  // namespace mtl::losses
