#include "mtl/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace mtl::train {

using models::GraphInput;
using models::MtlModel;
using synth::SceneDataset;

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::MTL_FT: return "MTL_FT";
    case Regime::MTL_V: return "MTL_V";
    case Regime::MTL_KD: return "MTL_KD";
    default: return "MTL_KD_FT";
  }
}

std::string protocol_name(Protocol p) { return p == Protocol::UDA ? "UDA" : "FEW"; }

Regime parse_regime(const std::string& s) {
  if (s == "MTL_FT") return Regime::MTL_FT;
  if (s == "MTL_V") return Regime::MTL_V;
  if (s == "MTL_KD") return Regime::MTL_KD;
  if (s == "MTL_KD_FT") return Regime::MTL_KD_FT;
  throw std::invalid_argument("unknown regime: " + s);
}

Protocol parse_protocol(const std::string& s) {
  if (s == "UDA") return Protocol::UDA;
  if (s == "FEW") return Protocol::FEW;
  throw std::invalid_argument("unknown protocol: " + s);
}

bool check_convergence(const std::vector<double>& history, const ConvergencePolicy& policy) {
  if (policy.patience < 1) throw std::invalid_argument("convergence policy: patience must be >= 1");
  if (history.size() < 2) return false;
  double best = history.front();
  int since = 0;
  for (size_t i = 1; i < history.size(); ++i) {
    double v = history[i];
    bool improved = policy.maximize ? v > best + policy.min_delta : v < best - policy.min_delta;
    if (improved) {
      best = v;
      since = 0;
    } else {
      ++since;
    }
  }
  return since >= policy.patience;
}

std::vector<double> TrainLog::series(const std::string& phase, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : records)
    if (r.phase == phase && r.metric == metric) out.push_back(r.value);
  return out;
}

double TrainLog::epoch_value(const std::string& phase, int epoch, const std::string& metric) const {
  for (const auto& r : records)
    if (r.phase == phase && r.epoch == epoch && r.metric == metric) return r.value;
  throw std::out_of_range("no record for " + phase + "/" + metric + " at epoch " + std::to_string(epoch));
}

void Adam::step(models::ParamStore& store, double lr, double max_grad_norm) {
  double norm2 = 0.0;
  for (const auto& p : store.all()) {
    if (!p.node->requires_grad || p.node->grad.numel() == 0) continue;
    for (int64_t i = 0; i < p.node->grad.numel(); ++i) norm2 += p.node->grad[i] * p.node->grad[i];
  }
  double clip = 1.0;
  double norm = std::sqrt(norm2);
  if (max_grad_norm > 0.0 && norm > max_grad_norm) clip = max_grad_norm / norm;

  for (auto& p : store.all()) {
    if (!p.node->requires_grad || p.node->grad.numel() == 0) continue;
    auto& s = state_[p.node.get()];
    if (s.m.numel() != p.node->val.numel()) {
      s.m = Tensor(p.node->val.shape());
      s.v = Tensor(p.node->val.shape());
      s.t = 0;
    }
    ++s.t;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (int64_t i = 0; i < p.node->val.numel(); ++i) {
      double g = p.node->grad[i] * clip;
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
      p.node->val[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
    }
  }
}

double noam_lr(int step, int d_model, int warmup, double factor) {
  double s = std::max(1, step);
  return factor * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

double TrainerContext::now() const {
  using clock = std::chrono::steady_clock;
  static const auto origin = clock::now();
  double t = std::chrono::duration<double>(clock::now() - origin).count();
  return t - started_at;
}

std::map<std::string, Tensor> snapshot_params(const models::ParamStore& store) {
  std::map<std::string, Tensor> out;
  for (const auto& p : store.all()) out[p.group + "/" + p.name] = p.node->val;
  return out;
}

void restore_params(models::ParamStore& store, const std::map<std::string, Tensor>& snap) {
  for (auto& p : store.all()) {
    auto it = snap.find(p.group + "/" + p.name);
    if (it == snap.end()) throw std::runtime_error("snapshot missing param " + p.group + "/" + p.name);
    p.node->val = it->second;
    p.node->grad = Tensor();
  }
}

namespace {

constexpr int64_t kPad = 0, kUnk = 3;

struct StepResult {
  VarPtr loss;
  double caption_part = 0.0;
  double graph_part = 0.0;
};

struct PhaseSpec {
  std::string name;
  std::vector<std::string> frozen;
  int epochs = 0;
  int batch = 1;
  bool noam = false;
  double lr = 1e-3;
  int warmup = 200;
  double lr_factor = 1.0;
  std::vector<std::string> tracked;  // subset of {bleu4, acc}
};

// ---- batch assembly ----

struct CaptionBatch {
  Tensor crops;
  std::vector<int64_t> counts;
  std::vector<std::vector<int64_t>> input_tokens;
  std::vector<int64_t> targets;
  std::vector<uint8_t> target_mask;
};

Tensor stack_crops(const std::vector<Tensor>& crops) {
  int64_t n = static_cast<int64_t>(crops.size());
  const auto& s = crops.front().shape();
  Tensor all({n, s[0], s[1], s[2]});
  int64_t off = 0;
  for (const auto& c : crops) {
    for (int64_t i = 0; i < c.numel(); ++i) all[off + i] = c[i];
    off += c.numel();
  }
  return all;
}

CaptionBatch make_caption_batch(const SceneDataset& ds, const std::vector<int>& frame_ids,
                                int crop_size) {
  CaptionBatch b;
  std::vector<Tensor> crops;
  int64_t lmax = 0;
  for (int fid : frame_ids) {
    const auto& f = ds.frames[static_cast<size_t>(fid)];
    b.counts.push_back(static_cast<int64_t>(f.nodes.size()));
    for (const auto& n : f.nodes) crops.push_back(synth::crop_resize(f.image, n.bbox, crop_size));
    lmax = std::max<int64_t>(lmax, static_cast<int64_t>(f.caption.size()));
  }
  b.crops = stack_crops(crops);
  for (int fid : frame_ids) {
    const auto& f = ds.frames[static_cast<size_t>(fid)];
    std::vector<int64_t> in(f.caption.begin(), f.caption.end() - 1);
    while (static_cast<int64_t>(in.size()) < lmax - 1) in.push_back(kPad);
    b.input_tokens.push_back(std::move(in));
    for (int64_t p = 1; p < lmax; ++p) {
      bool valid = p < static_cast<int64_t>(f.caption.size());
      b.targets.push_back(valid ? f.caption[static_cast<size_t>(p)] : kPad);
      b.target_mask.push_back(valid ? 1 : 0);
    }
  }
  return b;
}

struct GraphBatch {
  Tensor crops;
  Tensor semantic;
  std::vector<std::pair<int, int>> edges;
  Tensor spatial;
  Tensor labels;
};

GraphBatch make_graph_batch(const SceneDataset& ds, const std::vector<int>& frame_ids,
                            int crop_size, int semantic_dim) {
  GraphBatch b;
  std::vector<Tensor> crops;
  std::vector<double> sem, spat, lab;
  int base = 0;
  for (int fid : frame_ids) {
    const auto& f = ds.frames[static_cast<size_t>(fid)];
    for (const auto& n : f.nodes) {
      crops.push_back(synth::crop_resize(f.image, n.bbox, crop_size));
      auto emb = synth::semantic_embedding(n.class_id, semantic_dim);
      sem.insert(sem.end(), emb.vec().begin(), emb.vec().end());
    }
    for (const auto& e : f.edges) {
      b.edges.emplace_back(base + e.tissue_idx, base + e.instrument_idx);
      auto sp = synth::encode_spatial_feature(f.nodes[static_cast<size_t>(e.tissue_idx)].bbox,
                                              f.nodes[static_cast<size_t>(e.instrument_idx)].bbox,
                                              ds.config.width, ds.config.height);
      spat.insert(spat.end(), sp.begin(), sp.end());
      for (auto bit : e.interactions) lab.push_back(bit);
    }
    base += static_cast<int>(f.nodes.size());
  }
  b.crops = stack_crops(crops);
  b.semantic = Tensor({static_cast<int64_t>(base), semantic_dim}, std::move(sem));
  b.spatial = Tensor({static_cast<int64_t>(b.edges.size()), 12}, std::move(spat));
  b.labels = Tensor({static_cast<int64_t>(b.edges.size()), static_cast<int64_t>(ds.config.k_int)},
                    std::move(lab));
  return b;
}

VarPtr caption_logits_for(const MtlModel& m, const CaptionBatch& b,
                          const curriculum::CurriculumFilter& f) {
  auto feats = m.extract_features(b.crops, f);
  int64_t rmax = *std::max_element(b.counts.begin(), b.counts.end());
  auto packed = pad_pack_rows(feats, b.counts, rmax);
  return m.caption_forward(packed, b.counts, b.input_tokens, f);
}

VarPtr graph_logits_for(const MtlModel& m, const GraphBatch& b,
                        const curriculum::CurriculumFilter& f) {
  GraphInput g;
  g.visual = m.extract_features(b.crops, f);
  g.semantic = b.semantic;
  g.edges = b.edges;
  g.spatial = b.spatial;
  return m.scenegraph_forward(g, f);
}

// gather rows of [B*L, V] logits where the target mask is set, so the
// distillation KL ignores PAD positions
VarPtr masked_rows(const VarPtr& logits3d, const std::vector<uint8_t>& mask) {
  int64_t v = logits3d->val.size(-1);
  auto flat = reshape(logits3d, {logits3d->val.numel() / v, v});
  std::vector<int64_t> keep;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) keep.push_back(static_cast<int64_t>(i));
  return gather_rows(flat, keep);
}

// ---- phase runner ----

void save_best(TrainerContext& ctx, TrainerContext::BestTracker& best, const std::string& tag,
               double value, int epoch, double sigma) {
  best.has = true;
  best.value = value;
  best.epoch = epoch;
  best.weights = snapshot_params(ctx.model->params());
  if (!ctx.ckpt_dir.empty()) {
    auto name = regime_name(ctx.cfg.regime) + "-" + tag + "-" + std::to_string(epoch);
    best.path = ctx.ckpt_dir / name;
    ctx.model->save(best.path, {{"epoch", std::to_string(epoch)},
                                {"regime", regime_name(ctx.cfg.regime)},
                                {"sigma", std::to_string(sigma)},
                                {"checkpoint", tag}});
  }
}

using StepFn = std::function<StepResult(const std::vector<int>&, const curriculum::CurriculumFilter&, int)>;
using EvalFn = std::function<metrics::MetricsReport()>;

PhaseInfo run_phase(TrainerContext& ctx, const PhaseSpec& spec, const std::vector<int>& samples,
                    const StepFn& step_fn, const EvalFn& eval_fn) {
  auto& store = ctx.model->params();
  const std::string phase = spec.name;
  for (const char* g : {"sh", "cls", "c", "sg"}) store.unfreeze(g);
  for (const auto& g : spec.frozen) store.freeze(g);
  store.zero_grads();
  PhaseInfo info;
  info.name = phase;
  info.grads_zero_at_entry = store.grad_abs_sum("sh") == 0.0 && store.grad_abs_sum("cls") == 0.0 &&
                             store.grad_abs_sum("c") == 0.0 && store.grad_abs_sum("sg") == 0.0;

  Adam opt;
  std::map<std::string, std::vector<double>> histories;
  int gstep = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto filter = curriculum::filter_for_epoch(ctx.sched, ctx.global_epoch);
    double sigma = curriculum::schedule_sigma(ctx.sched, ctx.global_epoch);

    std::vector<int> order = samples;
    Rng shuffle_rng(mix_seed(mix_seed(ctx.cfg.seed, fnv1a_str(phase)), static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double cap_sum = 0.0, graph_sum = 0.0, loss_sum = 0.0;
    int n_batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(spec.batch)) {
      std::vector<int> batch(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(std::min(order.size(), start + static_cast<size_t>(spec.batch))));
      auto r = step_fn(batch, filter, epoch);
      if (!r.loss) continue;  // builder skipped a degenerate batch
      double lv = r.loss->val[0];
      if (!std::isfinite(lv))
        throw std::runtime_error("training diverged: non-finite loss in phase " + phase);
      store.zero_grads();
      backward(r.loss);
      ++gstep;
      double lr = spec.noam ? noam_lr(gstep, ctx.model->config().d_model, spec.warmup, spec.lr_factor)
                            : spec.lr;
      opt.step(store, lr, ctx.cfg.max_grad_norm);
      cap_sum += r.caption_part;
      graph_sum += r.graph_part;
      loss_sum += lv;
      ++n_batches;
      ++info.steps;
      if (ctx.on_step) ctx.on_step({phase, epoch, info.steps, lv, r.caption_part, r.graph_part});
    }
    if (n_batches > 0) {
      double w = ctx.now();
      ctx.log.add({phase, epoch, "train", "train_loss", loss_sum / n_batches, sigma, w});
      ctx.log.add({phase, epoch, "train", "train_caption_ce", cap_sum / n_batches, sigma, w});
      ctx.log.add({phase, epoch, "train", "train_graph_ml", graph_sum / n_batches, sigma, w});
    }

    bool converged = false;
    if (eval_fn && (epoch % ctx.cfg.eval_every == 0 || epoch == spec.epochs - 1)) {
      auto rep = eval_fn();
      double w = ctx.now();
      ctx.log.add({phase, epoch, rep.split, "bleu4", rep.bleu4, sigma, w});
      ctx.log.add({phase, epoch, rep.split, "cider", rep.cider, sigma, w});
      ctx.log.add({phase, epoch, rep.split, "acc", rep.acc, sigma, w});
      ctx.log.add({phase, epoch, rep.split, "map", rep.map, sigma, w});
      ctx.log.add({phase, epoch, rep.split, "recall", rep.recall, sigma, w});
      for (const auto& metric : spec.tracked) {
        double v = metric == "bleu4" ? rep.bleu4 : rep.acc;
        histories[metric].push_back(v);
        auto& best = metric == "bleu4" ? ctx.best_caption : ctx.best_graph;
        if (!best.has || v > best.value)
          save_best(ctx, best, metric == "bleu4" ? "bc" : "bg", v, ctx.global_epoch, sigma);
        ConvergencePolicy pol{metric, true, ctx.cfg.patience, ctx.cfg.min_delta};
        if (check_convergence(histories[metric], pol)) converged = true;
      }
    }
    ++ctx.global_epoch;
    ++info.epochs_run;
    if (converged) {
      info.converged_early = true;
      break;
    }
  }
  ctx.log.phases.push_back(info);
  return info;
}

std::vector<int> frame_samples(const TrainerContext& ctx) { return ctx.data.train_ids; }

StepFn caption_step(TrainerContext& ctx) {
  return [&ctx](const std::vector<int>& ids, const curriculum::CurriculumFilter& f, int) {
    auto b = make_caption_batch(*ctx.data.ds, ids, ctx.model->config().crop_size);
    auto logits = caption_logits_for(*ctx.model, b, f);
    StepResult r;
    r.loss = losses::caption_ce_loss(logits, b.targets, b.target_mask);
    r.caption_part = r.loss->val[0];
    return r;
  };
}

StepFn graph_step(TrainerContext& ctx) {
  return [&ctx](const std::vector<int>& ids, const curriculum::CurriculumFilter& f, int) {
    auto b = make_graph_batch(*ctx.data.ds, ids, ctx.model->config().crop_size,
                              ctx.model->config().semantic_dim);
    auto logits = graph_logits_for(*ctx.model, b, f);
    StepResult r;
    r.loss = losses::interaction_ml_loss(logits, b.labels);
    r.graph_part = r.loss->val[0];
    return r;
  };
}

StepFn joint_step(TrainerContext& ctx, bool vanilla) {
  return [&ctx, vanilla](const std::vector<int>& ids, const curriculum::CurriculumFilter& f, int) {
    auto cb = make_caption_batch(*ctx.data.ds, ids, ctx.model->config().crop_size);
    auto gb = make_graph_batch(*ctx.data.ds, ids, ctx.model->config().crop_size,
                               ctx.model->config().semantic_dim);
    auto l_cap = losses::caption_ce_loss(caption_logits_for(*ctx.model, cb, f), cb.targets,
                                         cb.target_mask);
    auto l_sg = losses::interaction_ml_loss(graph_logits_for(*ctx.model, gb, f), gb.labels);
    StepResult r;
    r.caption_part = l_cap->val[0];
    r.graph_part = l_sg->val[0];
    r.loss = vanilla ? losses::vanilla_loss(l_cap, l_sg, ctx.cfg.weights.finetune_w)
                     : losses::finetune_loss(l_cap, l_sg, ctx.cfg.weights.finetune_w);
    return r;
  };
}

StepFn kd_step(TrainerContext& ctx, const MtlModel& teacher_c, const MtlModel& teacher_g) {
  return [&ctx, &teacher_c, &teacher_g](const std::vector<int>& ids,
                                        const curriculum::CurriculumFilter& f, int) {
    auto cb = make_caption_batch(*ctx.data.ds, ids, ctx.model->config().crop_size);
    auto gb = make_graph_batch(*ctx.data.ds, ids, ctx.model->config().crop_size,
                               ctx.model->config().semantic_dim);
    auto student_cap = caption_logits_for(*ctx.model, cb, f);
    auto student_sg = graph_logits_for(*ctx.model, gb, f);
    auto l_ce_c = losses::caption_ce_loss(student_cap, cb.targets, cb.target_mask);
    auto l_mls_sg = losses::interaction_ml_loss(student_sg, gb.labels);

    StepResult r;
    r.caption_part = l_ce_c->val[0];
    r.graph_part = l_mls_sg->val[0];
    if (ctx.cfg.weights.kd_distill_w == 0.0) {
      r.loss = scale(add(l_ce_c, l_mls_sg), ctx.cfg.weights.kd_task_w);
      return r;
    }
    auto id = curriculum::CurriculumFilter::off();  // teachers run in eval mode
    auto teacher_cap = caption_logits_for(teacher_c, cb, id);
    auto teacher_sg = graph_logits_for(teacher_g, gb, id);
    auto l_kl_c = losses::kl_logits_softmax(masked_rows(student_cap, cb.target_mask),
                                            masked_rows(teacher_cap, cb.target_mask),
                                            ctx.cfg.kd_temperature);
    auto l_kl_sg = losses::kl_logits_bernoulli(student_sg, teacher_sg, ctx.cfg.kd_temperature);
    r.loss = losses::kd_loss(l_ce_c, l_mls_sg, l_kl_c, l_kl_sg, ctx.cfg.weights);
    return r;
  };
}

EvalFn val_eval(TrainerContext& ctx) {
  return [&ctx] {
    return evaluate_on(*ctx.model, *ctx.data.ds, ctx.data.val_ids, ctx.data.val_split_name);
  };
}

}  // namespace

metrics::MetricsReport evaluate_on(const MtlModel& model, const SceneDataset& ds,
                                   const std::vector<int>& ids, const std::string& split_tag) {
  metrics::MetricsReport rep;
  rep.split = split_tag;
  rep.n_samples = static_cast<int>(ids.size());
  if (ids.empty()) throw std::invalid_argument("evaluate_on: empty id list");
  auto id_filter = curriculum::CurriculumFilter::off();

  std::vector<metrics::TokenSeq> cands, refs;
  std::vector<double> all_scores, all_labels;
  int64_t n_edges = 0;
  const int chunk = 16;
  for (size_t start = 0; start < ids.size(); start += chunk) {
    std::vector<int> part(ids.begin() + static_cast<long>(start),
                          ids.begin() + static_cast<long>(std::min(ids.size(), start + chunk)));
    auto cb = make_caption_batch(ds, part, model.config().crop_size);
    auto feats = model.extract_features(cb.crops, id_filter);
    int64_t rmax = *std::max_element(cb.counts.begin(), cb.counts.end());
    auto packed = pad_pack_rows(feats, cb.counts, rmax);
    auto seqs = model.caption_generate(packed, cb.counts, ds.config.max_caption_len);
    for (size_t i = 0; i < part.size(); ++i) {
      metrics::TokenSeq cand(seqs[i].begin(), seqs[i].end());
      if (metrics::strip_special(cand).empty()) cand = {static_cast<int>(kUnk)};
      cands.push_back(cand);
      const auto& f = ds.frames[static_cast<size_t>(part[i])];
      refs.push_back(metrics::TokenSeq(f.caption.begin(), f.caption.end()));
    }
    auto gb = make_graph_batch(ds, part, model.config().crop_size, model.config().semantic_dim);
    GraphInput g;
    g.visual = model.extract_features(gb.crops, id_filter);
    g.semantic = gb.semantic;
    g.edges = gb.edges;
    g.spatial = gb.spatial;
    auto logits = model.scenegraph_forward(g, id_filter);
    auto probs = sigmoid(logits);
    for (int64_t i = 0; i < probs->val.numel(); ++i) {
      all_scores.push_back(probs->val[i]);
      all_labels.push_back(gb.labels[i]);
    }
    n_edges += probs->val.size(0);
  }
  rep.bleu4 = metrics::bleu(cands, refs);
  rep.cider = metrics::cider(cands, refs);
  int64_t k = static_cast<int64_t>(ds.config.k_int);
  auto im = metrics::interaction_metrics(Tensor({n_edges, k}, std::move(all_scores)),
                                         Tensor({n_edges, k}, std::move(all_labels)));
  rep.acc = im.acc;
  rep.map = im.map;
  rep.recall = im.recall;
  return rep;
}

void pretrain_cicl(TrainerContext& ctx, const MtlModel* old_model) {
  // samples are (frame, node) crops
  struct SampleRef {
    int frame;
    int node;
  };
  std::vector<SampleRef> samples;
  for (int fid : ctx.data.train_ids) {
    const auto& f = ctx.data.ds->frames[static_cast<size_t>(fid)];
    for (size_t ni = 0; ni < f.nodes.size(); ++ni) samples.push_back({fid, static_cast<int>(ni)});
  }
  std::vector<int> idx(samples.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  PhaseSpec spec;
  spec.name = "PRETRAIN_CICL";
  spec.frozen = {"c", "sg"};
  spec.epochs = ctx.cfg.pretrain_epochs;
  spec.batch = ctx.cfg.pretrain_batch;
  spec.lr = ctx.cfg.pretrain_lr;

  const int crop = ctx.model->config().crop_size;
  auto step = [&, old_model](const std::vector<int>& batch_idx,
                             const curriculum::CurriculumFilter& f, int epoch) {
    StepResult r;
    if (batch_idx.size() < 2) return r;  // supcon needs at least two samples
    std::vector<Tensor> views;
    std::vector<int64_t> labels;
    for (int view = 0; view < 2; ++view)
      for (int si : batch_idx) {
        const auto& sref = samples[static_cast<size_t>(si)];
        const auto& frame = ctx.data.ds->frames[static_cast<size_t>(sref.frame)];
        const auto& node = frame.nodes[static_cast<size_t>(sref.node)];
        Tensor c = synth::crop_resize(frame.image, node.bbox, crop);
        Rng aug(mix_seed(mix_seed(ctx.cfg.seed, fnv1a_str("augment")),
                         static_cast<uint64_t>(epoch) * 1000003ull +
                             static_cast<uint64_t>(si) * 2ull + static_cast<uint64_t>(view)));
        views.push_back(synth::augment_crop(c, aug));
        labels.push_back(node.class_id);
      }
    Tensor all = stack_crops(views);
    auto feats = ctx.model->extract_features(all, f);
    auto logits = ctx.model->classify(feats);
    std::vector<uint8_t> mask(labels.size(), 1);
    auto l_ce = softmax_ce_mean(logits, labels, mask);

    losses::ContrastiveBatch cb{l2_normalize_rows(feats), labels, ctx.cfg.tau};
    auto l_contra = losses::supcon_loss(cb);
    VarPtr l_incre;
    if (old_model) {
      auto old_feats = old_model->extract_features(all, curriculum::CurriculumFilter::off());
      auto old_logits = old_model->classify(old_feats);
      l_incre = losses::incremental_kd_loss(old_logits, logits, ctx.cfg.incre_temperature);
    } else {
      l_incre = constant(Tensor::scalar(0.0));  // first training: no old model
    }
    r.loss = add(l_ce, losses::cicl_total_loss(l_contra, l_incre));
    r.caption_part = l_ce->val[0];
    r.graph_part = l_contra->val[0];
    return r;
  };

  // training classification accuracy on clean crops, under the same filter
  // the epoch trained with
  auto eval = [&](const curriculum::CurriculumFilter& f) {
    metrics::MetricsReport rep;
    rep.split = "train";
    std::vector<Tensor> crops;
    std::vector<int64_t> labels;
    for (const auto& s : samples) {
      const auto& frame = ctx.data.ds->frames[static_cast<size_t>(s.frame)];
      const auto& node = frame.nodes[static_cast<size_t>(s.node)];
      crops.push_back(synth::crop_resize(frame.image, node.bbox, crop));
      labels.push_back(node.class_id);
    }
    auto feats = ctx.model->extract_features(stack_crops(crops), f);
    auto logits = ctx.model->classify(feats);
    int64_t kc = logits->val.size(1);
    int correct = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const double* row = logits->val.data() + static_cast<int64_t>(i) * kc;
      int64_t best = 0;
      for (int64_t c = 1; c < kc; ++c)
        if (row[c] > row[best]) best = c;
      if (best == labels[i]) ++correct;
    }
    rep.acc = static_cast<double>(correct) / static_cast<double>(labels.size());
    rep.n_samples = static_cast<int>(labels.size());
    return rep;
  };
  // classifier accuracy drives neither BG nor BC checkpoints; run manually
  auto& store = ctx.model->params();
  for (const char* g : {"sh", "cls", "c", "sg"}) store.unfreeze(g);
  for (const auto& g : spec.frozen) store.freeze(g);
  store.zero_grads();
  PhaseInfo info;
  info.name = spec.name;
  info.grads_zero_at_entry = store.grad_abs_sum("sh") == 0.0 && store.grad_abs_sum("cls") == 0.0 &&
                             store.grad_abs_sum("c") == 0.0 && store.grad_abs_sum("sg") == 0.0;
  Adam opt;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    auto filter = curriculum::filter_for_epoch(ctx.sched, ctx.global_epoch);
    double sigma = curriculum::schedule_sigma(ctx.sched, ctx.global_epoch);
    std::vector<int> order = idx;
    Rng shuffle_rng(mix_seed(mix_seed(ctx.cfg.seed, fnv1a_str(spec.name)), static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int n_batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(spec.batch)) {
      std::vector<int> batch(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(std::min(order.size(), start + static_cast<size_t>(spec.batch))));
      auto r = step(batch, filter, epoch);
      if (!r.loss) continue;
      double lv = r.loss->val[0];
      if (!std::isfinite(lv)) throw std::runtime_error("training diverged: non-finite loss in PRETRAIN_CICL");
      store.zero_grads();
      backward(r.loss);
      opt.step(store, spec.lr, ctx.cfg.max_grad_norm);
      loss_sum += lv;
      ++n_batches;
      ++info.steps;
      if (ctx.on_step) ctx.on_step({spec.name, epoch, info.steps, lv, r.caption_part, r.graph_part});
    }
    double w = ctx.now();
    if (n_batches > 0)
      ctx.log.add({spec.name, epoch, "train", "train_loss", loss_sum / n_batches, sigma, w});
    auto rep = eval(filter);
    ctx.log.add({spec.name, epoch, "train", "cls_acc", rep.acc, sigma, w});
    ++ctx.global_epoch;
    ++info.epochs_run;
  }
  ctx.log.phases.push_back(info);
}

void train_task_aware(TrainerContext& ctx) {
  PhaseSpec cap;
  cap.name = "CAPTION";
  cap.frozen = {"sh", "sg", "cls"};
  cap.epochs = ctx.cfg.caption_epochs;
  cap.batch = ctx.cfg.caption_batch;
  cap.noam = true;
  cap.warmup = ctx.cfg.caption_warmup;
  cap.lr_factor = ctx.cfg.caption_lr_factor;
  cap.tracked = {"bleu4"};
  run_phase(ctx, cap, frame_samples(ctx), caption_step(ctx), val_eval(ctx));

  PhaseSpec sg;
  sg.name = "SCENEGRAPH";
  sg.frozen = {"sh", "c", "cls"};
  sg.epochs = ctx.cfg.graph_epochs;
  sg.batch = ctx.cfg.graph_batch;
  sg.lr = ctx.cfg.graph_lr;
  sg.tracked = {"acc"};
  run_phase(ctx, sg, frame_samples(ctx), graph_step(ctx), val_eval(ctx));
}

void finetune_joint(TrainerContext& ctx) {
  PhaseSpec ft;
  ft.name = "FINETUNE";
  ft.frozen = {"cls"};
  ft.epochs = ctx.cfg.joint_epochs;
  ft.batch = ctx.cfg.joint_batch;
  ft.lr = ctx.cfg.joint_lr;
  ft.tracked = {"bleu4", "acc"};
  run_phase(ctx, ft, frame_samples(ctx), joint_step(ctx, false), val_eval(ctx));
}

void train_vanilla(TrainerContext& ctx) {
  PhaseSpec j;
  j.name = "JOINT";
  j.frozen = {"cls"};
  j.epochs = ctx.cfg.joint_epochs;
  j.batch = ctx.cfg.joint_batch;
  j.lr = ctx.cfg.joint_lr;
  j.tracked = {"bleu4", "acc"};
  run_phase(ctx, j, frame_samples(ctx), joint_step(ctx, true), val_eval(ctx));
}

void train_kd(TrainerContext& ctx, const MtlModel& teacher_caption, const MtlModel& teacher_graph) {
  if (teacher_caption.arch_hash() != ctx.model->arch_hash() ||
      teacher_graph.arch_hash() != ctx.model->arch_hash())
    throw std::invalid_argument("train_kd: teacher architecture incompatible with student");
  PhaseSpec kd;
  kd.name = "KD";
  kd.frozen = {"cls"};
  kd.epochs = ctx.cfg.joint_epochs;
  kd.batch = ctx.cfg.joint_batch;
  kd.lr = ctx.cfg.joint_lr;
  kd.tracked = {"bleu4", "acc"};
  run_phase(ctx, kd, frame_samples(ctx), kd_step(ctx, teacher_caption, teacher_graph), val_eval(ctx));
}

void train_kd_ft(TrainerContext& ctx, const MtlModel& teacher_caption,
                 const MtlModel& teacher_graph) {
  train_kd(ctx, teacher_caption, teacher_graph);
  finetune_joint(ctx);
}

std::pair<MtlModel, MtlModel> train_teachers(const TrainerContext& ctx) {
  MtlModel teacher_c = ctx.model->clone();
  MtlModel teacher_g = ctx.model->clone();

  TrainerContext tc;
  tc.model = &teacher_c;
  tc.cfg = ctx.cfg;
  tc.sched = ctx.sched;
  tc.global_epoch = ctx.global_epoch;
  tc.data = ctx.data;
  PhaseSpec cap;
  cap.name = "TEACHER_CAPTION";
  cap.frozen = {"sg", "cls"};  // single-task model: extractor + caption head
  cap.epochs = ctx.cfg.teacher_caption_epochs;
  cap.batch = ctx.cfg.caption_batch;
  cap.noam = true;
  cap.warmup = ctx.cfg.caption_warmup;
  cap.lr_factor = ctx.cfg.caption_lr_factor;
  run_phase(tc, cap, tc.data.train_ids, caption_step(tc), nullptr);

  TrainerContext tg;
  tg.model = &teacher_g;
  tg.cfg = ctx.cfg;
  tg.sched = ctx.sched;
  tg.global_epoch = ctx.global_epoch;
  tg.data = ctx.data;
  PhaseSpec sg;
  sg.name = "TEACHER_SCENEGRAPH";
  sg.frozen = {"c", "cls"};
  sg.epochs = ctx.cfg.teacher_graph_epochs;
  sg.batch = ctx.cfg.graph_batch;
  sg.lr = ctx.cfg.graph_lr;
  run_phase(tg, sg, tg.data.train_ids, graph_step(tg), nullptr);

  // teachers are frozen from here on
  for (const char* g : {"sh", "cls", "c", "sg"}) {
    teacher_c.params().freeze(g);
    teacher_g.params().freeze(g);
  }
  return {std::move(teacher_c), std::move(teacher_g)};
}

void adapt_few_shot(TrainerContext& ctx, const SceneDataset& td, const MtlModel* teacher_caption,
                    const MtlModel* teacher_graph) {
  if (td.train_ids.empty()) throw std::invalid_argument("adapt_few_shot: TD has no training split");
  PhaseInfo marker;
  marker.name = "ADAPT";
  marker.grads_zero_at_entry = true;
  ctx.log.phases.push_back(marker);

  DataView saved = ctx.data;
  TrainConfig saved_cfg = ctx.cfg;
  ctx.data.ds = &td;
  ctx.data.train_ids = td.train_ids;
  ctx.data.val_ids = td.val_ids;
  ctx.data.val_split_name = "td-val";

  auto scaled = [&](int epochs) {
    return std::max(1, static_cast<int>(std::lround(epochs * saved_cfg.adapt_scale)));
  };
  ctx.cfg.caption_epochs = scaled(saved_cfg.caption_epochs);
  ctx.cfg.graph_epochs = scaled(saved_cfg.graph_epochs);
  ctx.cfg.joint_epochs = scaled(saved_cfg.joint_epochs);

  // BG/BC now reflect the adapted model
  ctx.best_caption = {};
  ctx.best_graph = {};

  switch (ctx.cfg.regime) {
    case Regime::MTL_FT:
      train_task_aware(ctx);
      finetune_joint(ctx);
      break;
    case Regime::MTL_V:
      train_vanilla(ctx);
      break;
    case Regime::MTL_KD:
      if (!teacher_caption || !teacher_graph)
        throw std::invalid_argument("adapt_few_shot: MTL_KD requires teachers");
      train_kd(ctx, *teacher_caption, *teacher_graph);
      break;
    case Regime::MTL_KD_FT:
      if (!teacher_caption || !teacher_graph)
        throw std::invalid_argument("adapt_few_shot: MTL_KD_FT requires teachers");
      train_kd_ft(ctx, *teacher_caption, *teacher_graph);
      break;
  }

  ctx.cfg = saved_cfg;
  ctx.data = saved;
}

}  // namespace mtl::train
