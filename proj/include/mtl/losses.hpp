#pragma once

#include <vector>

#include "mtl/autodiff.hpp"

namespace mtl::losses {

struct LossWeights {
  double finetune_w = 0.5;
  double kd_task_w = 0.35;
  double kd_distill_w = 0.15;
};

struct ContrastiveBatch {
  VarPtr embeddings;            // [2N, D], rows L2-normalized
  std::vector<int64_t> labels;  // 2N entries
  double tau = 0.07;
};

// Supervised contrastive loss. Each anchor averages the log-term over all of
// its positives; the denominator runs over every other sample in the batch.
VarPtr supcon_loss(const ContrastiveBatch& batch);

// Temperature-scaled KL between the old model's class distribution and the
// new model's distribution restricted to the old classes, times T^2.
VarPtr incremental_kd_loss(const VarPtr& old_logits, const VarPtr& new_logits, double temperature);

VarPtr cicl_total_loss(const VarPtr& contra, const VarPtr& incre);

// Mean token-level cross entropy over non-PAD positions. logits [N,L,V] or [R,V].
VarPtr caption_ce_loss(const VarPtr& logits, const std::vector<int64_t>& targets,
                       const std::vector<uint8_t>& pad_mask);

// Mean per-class sigmoid binary log-loss over all edges and classes.
VarPtr interaction_ml_loss(const VarPtr& edge_logits, Tensor edge_labels);

VarPtr finetune_loss(const VarPtr& l_caption, const VarPtr& l_scene_graph, double w = 0.5);
VarPtr vanilla_loss(const VarPtr& l_caption, const VarPtr& l_scene_graph, double w = 0.5);
VarPtr kd_loss(const VarPtr& l_ce_c, const VarPtr& l_mls_sg, const VarPtr& l_kl_c,
               const VarPtr& l_kl_sg, const LossWeights& w = {});

// Distillation divergences, mean over rows/elements, scaled by T^2.
VarPtr kl_logits_softmax(const VarPtr& student_logits, const VarPtr& teacher_logits,
                         double temperature);
VarPtr kl_logits_bernoulli(const VarPtr& student_logits, const VarPtr& teacher_logits,
                           double temperature);

}  // namespace mtl::losses
