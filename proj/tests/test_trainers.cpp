#include <cmath>

#include "doctest.h"
#include "mtl/trainers.hpp"

using namespace mtl;
using namespace mtl::train;

namespace {

synth::SceneDataset tiny_dataset(int n_frames, uint64_t seed, int k_cls = 6, int k_int = 4) {
  synth::DatasetConfig c;
  c.n_frames = n_frames;
  c.k_cls = k_cls;
  c.k_int = k_int;
  c.height = 48;
  c.width = 48;
  c.min_instruments = 1;
  c.max_instruments = 2;
  auto ds = synth::generate_dataset(c, seed);
  int n_val = std::max(1, n_frames / 5);
  for (int i = 0; i < n_frames; ++i)
    (i < n_frames - n_val ? ds.train_ids : ds.val_ids).push_back(i);
  return ds;
}

models::ModelConfig model_config_for(const synth::SceneDataset& ds) {
  models::ModelConfig mc;
  mc.vocab_size = ds.vocab.size();
  mc.k_classes = ds.config.k_cls;
  mc.k_int = ds.config.k_int;
  mc.max_caption_len = ds.config.max_caption_len;
  return mc;
}

struct Rig {
  synth::SceneDataset ds;
  models::MtlModel model;
  TrainerContext ctx;

  Rig(int n_frames, uint64_t seed, TrainConfig cfg = {})
      : ds(tiny_dataset(n_frames, seed)), model(model_config_for(ds), seed + 1) {
    ctx.model = &model;
    ctx.cfg = cfg;
    ctx.cfg.seed = seed;
    ctx.data.ds = &ds;
    ctx.data.train_ids = ds.train_ids;
    ctx.data.val_ids = ds.val_ids;
    ctx.data.val_split_name = "sd-val";
  }
};

}  // namespace

TEST_CASE("check_convergence") {
  ConvergencePolicy down{"loss", false, 2, 1e-4};
  CHECK_FALSE(check_convergence({1.0, 0.9, 0.8}, down));
  CHECK(check_convergence({0.8, 0.8, 0.8}, down));
  CHECK_FALSE(check_convergence({0.8}, down));
  CHECK_FALSE(check_convergence({}, down));
  ConvergencePolicy up{"acc", true, 3, 1e-4};
  CHECK_FALSE(check_convergence({0.1, 0.2, 0.3, 0.4}, up));
  CHECK(check_convergence({0.4, 0.4, 0.4, 0.4}, up));
  CHECK_THROWS(check_convergence({1.0}, ConvergencePolicy{"x", false, 0, 0.0}));
}

TEST_CASE("noam schedule warms up then decays") {
  double peak = noam_lr(200, 64, 200, 1.0);
  CHECK(noam_lr(50, 64, 200, 1.0) < peak);
  CHECK(noam_lr(2000, 64, 200, 1.0) < peak);
  CHECK(noam_lr(100, 64, 200, 1.0) == doctest::Approx(0.5 * peak).epsilon(1e-9));
}

TEST_CASE("adam skips frozen params and keeps no state for them") {
  Rig rig(6, 21);
  auto& store = rig.model.params();
  store.freeze("sh");
  store.zero_grads();
  for (auto& p : store.all())
    if (p.node->grad.numel() > 0)
      for (int64_t i = 0; i < p.node->grad.numel(); ++i) p.node->grad[i] = 0.01;
  uint64_t sh_before = store.value_hash("sh");
  Adam opt;
  opt.step(store, 1e-3, 0.0);
  CHECK(store.value_hash("sh") == sh_before);
  for (const auto& p : store.all()) {
    if (p.group == "sh") CHECK_FALSE(opt.has_state(p.node.get()));
    else CHECK(opt.has_state(p.node.get()));
  }
  store.unfreeze("sh");
  opt.step(store, 1e-3, 0.0);
  CHECK(store.value_hash("sh") != sh_before);
}

TEST_CASE("task-aware phases freeze the right groups bitwise") {
  TrainConfig cfg;
  cfg.caption_epochs = 3;
  cfg.graph_epochs = 3;
  cfg.caption_batch = 3;
  cfg.graph_batch = 3;
  Rig rig(8, 33, cfg);

  uint64_t sh0 = rig.model.params().value_hash("sh");
  uint64_t sg0 = rig.model.params().value_hash("sg");
  uint64_t c0 = rig.model.params().value_hash("c");

  int caption_steps = 0, graph_steps = 0;
  rig.ctx.on_step = [&](const StepInfo& s) {
    if (s.phase == "CAPTION") {
      ++caption_steps;
      CHECK(rig.model.params().value_hash("sh") == sh0);
      CHECK(rig.model.params().value_hash("sg") == sg0);
    } else if (s.phase == "SCENEGRAPH") {
      ++graph_steps;
      CHECK(rig.model.params().value_hash("sh") == sh0);
      // caption head was trained in phase A and must stay bitwise fixed now
      CHECK(rig.model.params().grad_abs_sum("c") == 0.0);
    }
  };
  train_task_aware(rig.ctx);
  CHECK(caption_steps > 0);
  CHECK(graph_steps > 0);
  CHECK(rig.model.params().value_hash("sh") == sh0);
  CHECK(rig.model.params().value_hash("c") != c0);  // caption head did train
  for (const auto& ph : rig.ctx.log.phases) CHECK(ph.grads_zero_at_entry);
}

TEST_CASE("joint fine-tuning trains all three groups and composes Eq-4 exactly") {
  TrainConfig cfg;
  cfg.joint_epochs = 2;
  cfg.joint_batch = 4;
  Rig rig(8, 35, cfg);
  uint64_t sh0 = rig.model.params().value_hash("sh");
  uint64_t c0 = rig.model.params().value_hash("c");
  uint64_t sg0 = rig.model.params().value_hash("sg");
  bool checked_parts = false;
  rig.ctx.on_step = [&](const StepInfo& s) {
    CHECK(s.loss == doctest::Approx(0.5 * (s.caption_part + s.graph_part)).epsilon(1e-10));
    checked_parts = true;
  };
  finetune_joint(rig.ctx);
  CHECK(checked_parts);
  CHECK(rig.model.params().value_hash("sh") != sh0);
  CHECK(rig.model.params().value_hash("c") != c0);
  CHECK(rig.model.params().value_hash("sg") != sg0);
}

TEST_CASE("same seed and config give identical histories") {
  auto run_once = [] {
    TrainConfig cfg;
    cfg.pretrain_epochs = 2;
    cfg.caption_epochs = 2;
    cfg.graph_epochs = 2;
    cfg.joint_epochs = 1;
    Rig rig(8, 77, cfg);
    pretrain_cicl(rig.ctx);
    train_task_aware(rig.ctx);
    finetune_joint(rig.ctx);
    return std::make_pair(rig.ctx.log, rig.model.params().value_hash("sh") ^
                                           rig.model.params().value_hash("c") ^
                                           rig.model.params().value_hash("sg"));
  };
  auto [log_a, hash_a] = run_once();
  auto [log_b, hash_b] = run_once();
  CHECK(hash_a == hash_b);
  REQUIRE(log_a.records.size() == log_b.records.size());
  for (size_t i = 0; i < log_a.records.size(); ++i) {
    CHECK(log_a.records[i].metric == log_b.records[i].metric);
    CHECK(log_a.records[i].value == log_b.records[i].value);
  }
}

TEST_CASE("pretraining reaches high training classification accuracy") {
  TrainConfig cfg;
  cfg.pretrain_epochs = 20;
  cfg.pretrain_batch = 16;
  Rig rig(26, 41, cfg);  // ~64 node crops
  pretrain_cicl(rig.ctx);
  auto series = rig.ctx.log.series("PRETRAIN_CICL", "cls_acc");
  REQUIRE_FALSE(series.empty());
  CHECK(series.back() >= 0.9);
}

TEST_CASE("first pretraining run has an exactly zero incremental term") {
  TrainConfig cfg;
  cfg.pretrain_epochs = 1;
  Rig rig(6, 43, cfg);
  // graph_part of pretrain steps logs the contrastive term; the incremental
  // term is a literal zero constant, so loss == ce + contra exactly
  bool saw = false;
  rig.ctx.on_step = [&](const StepInfo& s) {
    CHECK(s.loss == doctest::Approx(s.caption_part + s.graph_part).epsilon(1e-12));
    saw = true;
  };
  pretrain_cicl(rig.ctx);
  CHECK(saw);
}

TEST_CASE("incremental pretraining on an expanded head stays finite and trains") {
  TrainConfig cfg;
  cfg.pretrain_epochs = 3;
  Rig rig(8, 45, cfg);
  pretrain_cicl(rig.ctx);
  auto old_model = rig.model.clone();
  for (const char* g : {"sh", "cls", "c", "sg"}) old_model.params().freeze(g);
  uint64_t old_hash = old_model.params().value_hash("cls") ^ old_model.params().value_hash("sh");
  rig.model.expand_classifier_head(2, 99);
  pretrain_cicl(rig.ctx, &old_model);
  CHECK((old_model.params().value_hash("cls") ^ old_model.params().value_hash("sh")) == old_hash);
  auto series = rig.ctx.log.series("PRETRAIN_CICL", "train_loss");
  for (double v : series) CHECK(std::isfinite(v));
}

TEST_CASE("regime equivalence: zero-epoch task phases reduce MTL-FT to plain fine-tuning") {
  TrainConfig cfg;
  cfg.caption_epochs = 0;
  cfg.graph_epochs = 0;
  cfg.joint_epochs = 1;
  double first_ft = -1.0, first_direct = -1.0;

  {
    Rig rig(8, 55, cfg);
    rig.ctx.on_step = [&](const StepInfo& s) {
      if (first_ft < 0 && s.phase == "FINETUNE") first_ft = s.loss;
    };
    train_task_aware(rig.ctx);  // runs zero epochs
    finetune_joint(rig.ctx);
  }
  {
    Rig rig(8, 55, cfg);
    rig.ctx.on_step = [&](const StepInfo& s) {
      if (first_direct < 0 && s.phase == "FINETUNE") first_direct = s.loss;
    };
    finetune_joint(rig.ctx);
  }
  CHECK(first_ft == first_direct);
}

TEST_CASE("overfit probe: steps decrease the loss on a frozen batch") {
  Rig rig(2, 61);
  auto& ds = rig.ds;
  std::vector<int> ids{0, 1};
  Adam opt;
  auto& store = rig.model.params();
  store.freeze("cls");
  auto f = curriculum::CurriculumFilter::off();
  double prev = 1e300;
  int decreases = 0, total = 200;
  for (int step = 0; step < total; ++step) {
    // joint loss on the same two frames every step
    std::vector<Tensor> crops;
    std::vector<int64_t> counts;
    int64_t lmax = 0;
    for (int fid : ids) {
      const auto& fr = ds.frames[static_cast<size_t>(fid)];
      counts.push_back(static_cast<int64_t>(fr.nodes.size()));
      for (const auto& n : fr.nodes) crops.push_back(synth::crop_resize(fr.image, n.bbox, 32));
      lmax = std::max<int64_t>(lmax, static_cast<int64_t>(fr.caption.size()));
    }
    Tensor all({static_cast<int64_t>(crops.size()), 3, 32, 32});
    int64_t off = 0;
    for (const auto& c : crops) {
      for (int64_t i = 0; i < c.numel(); ++i) all[off + i] = c[i];
      off += c.numel();
    }
    auto feats = rig.model.extract_features(all, f);
    int64_t rmax = *std::max_element(counts.begin(), counts.end());
    auto packed = pad_pack_rows(feats, counts, rmax);
    std::vector<std::vector<int64_t>> toks;
    std::vector<int64_t> targets;
    std::vector<uint8_t> mask;
    for (int fid : ids) {
      const auto& fr = ds.frames[static_cast<size_t>(fid)];
      std::vector<int64_t> in(fr.caption.begin(), fr.caption.end() - 1);
      while (static_cast<int64_t>(in.size()) < lmax - 1) in.push_back(0);
      toks.push_back(in);
      for (int64_t p = 1; p < lmax; ++p) {
        bool valid = p < static_cast<int64_t>(fr.caption.size());
        targets.push_back(valid ? fr.caption[static_cast<size_t>(p)] : 0);
        mask.push_back(valid ? 1 : 0);
      }
    }
    auto l_cap = losses::caption_ce_loss(rig.model.caption_forward(packed, counts, toks, f),
                                         targets, mask);

    models::GraphInput g;
    std::vector<double> sem, spat, lab;
    int base = 0;
    std::vector<Tensor> gcrops;
    for (int fid : ids) {
      const auto& fr = ds.frames[static_cast<size_t>(fid)];
      for (const auto& n : fr.nodes) {
        gcrops.push_back(synth::crop_resize(fr.image, n.bbox, 32));
        auto emb = synth::semantic_embedding(n.class_id, 16);
        sem.insert(sem.end(), emb.vec().begin(), emb.vec().end());
      }
      for (const auto& e : fr.edges) {
        g.edges.emplace_back(base + e.tissue_idx, base + e.instrument_idx);
        auto sp = synth::encode_spatial_feature(fr.nodes[static_cast<size_t>(e.tissue_idx)].bbox,
                                                fr.nodes[static_cast<size_t>(e.instrument_idx)].bbox,
                                                ds.config.width, ds.config.height);
        spat.insert(spat.end(), sp.begin(), sp.end());
        for (auto bit : e.interactions) lab.push_back(bit);
      }
      base += static_cast<int>(fr.nodes.size());
    }
    Tensor gall({static_cast<int64_t>(gcrops.size()), 3, 32, 32});
    off = 0;
    for (const auto& c : gcrops) {
      for (int64_t i = 0; i < c.numel(); ++i) gall[off + i] = c[i];
      off += c.numel();
    }
    g.visual = rig.model.extract_features(gall, f);
    g.semantic = Tensor(Shape{static_cast<int64_t>(base), 16}, std::move(sem));
    g.spatial = Tensor(Shape{static_cast<int64_t>(g.edges.size()), 12}, std::move(spat));
    Tensor labels(Shape{static_cast<int64_t>(g.edges.size()), static_cast<int64_t>(ds.config.k_int)},
                  std::move(lab));
    auto l_sg = losses::interaction_ml_loss(rig.model.scenegraph_forward(g, f), labels);
    auto loss = losses::finetune_loss(l_cap, l_sg);

    double lv = loss->val[0];
    if (step > 0 && lv < prev) ++decreases;
    prev = lv;
    store.zero_grads();
    backward(loss);
    opt.step(store, 1e-3, 5.0);
  }
  CHECK(decreases >= static_cast<int>(0.95 * (total - 1)));
}

TEST_CASE("KD: frozen teachers, identity-at-init, and distill_w=0 ratio") {
  TrainConfig cfg;
  cfg.joint_epochs = 1;
  cfg.joint_batch = 4;
  Rig rig(8, 71, cfg);
  rig.ctx.sched.enabled = false;

  // teachers with identical weights to the student
  auto teacher_c = rig.model.clone();
  auto teacher_g = rig.model.clone();
  for (const char* g : {"sh", "cls", "c", "sg"}) {
    teacher_c.params().freeze(g);
    teacher_g.params().freeze(g);
  }
  uint64_t tc_hash = teacher_c.params().value_hash("c") ^ teacher_c.params().value_hash("sh");
  uint64_t tg_hash = teacher_g.params().value_hash("sg") ^ teacher_g.params().value_hash("sh");

  // student == teacher at initialization -> KL = 0 and loss = 0.35 * tasks
  bool first = true;
  rig.ctx.on_step = [&](const StepInfo& s) {
    if (first) {
      CHECK(s.loss == doctest::Approx(0.35 * (s.caption_part + s.graph_part)).epsilon(1e-10));
      first = false;
    }
  };
  train_kd(rig.ctx, teacher_c, teacher_g);
  CHECK_FALSE(first);
  CHECK((teacher_c.params().value_hash("c") ^ teacher_c.params().value_hash("sh")) == tc_hash);
  CHECK((teacher_g.params().value_hash("sg") ^ teacher_g.params().value_hash("sh")) == tg_hash);

  // with the distillation weight at zero, per-step losses match vanilla at ratio 0.7
  TrainConfig kd_cfg = cfg;
  kd_cfg.weights.kd_distill_w = 0.0;
  kd_cfg.joint_epochs = 4;
  kd_cfg.joint_batch = 64;  // one whole-set batch per epoch: order cannot shift the loss
  TrainConfig v_cfg = cfg;
  v_cfg.joint_epochs = 4;
  v_cfg.joint_batch = 64;
  std::vector<double> kd_losses, vanilla_losses;
  {
    Rig r2(8, 73, kd_cfg);
    r2.ctx.sched.enabled = false;
    auto t1 = r2.model.clone(), t2 = r2.model.clone();
    r2.ctx.on_step = [&](const StepInfo& s) { kd_losses.push_back(s.loss); };
    train_kd(r2.ctx, t1, t2);
  }
  {
    Rig r3(8, 73, v_cfg);
    r3.ctx.sched.enabled = false;
    r3.ctx.on_step = [&](const StepInfo& s) { vanilla_losses.push_back(s.loss); };
    train_vanilla(r3.ctx);
  }
  REQUIRE(kd_losses.size() == vanilla_losses.size());
  CHECK(kd_losses[0] == doctest::Approx(0.7 * vanilla_losses[0]).epsilon(1e-9));
  for (size_t i = 1; i < kd_losses.size(); ++i)
    CHECK(kd_losses[i] == doctest::Approx(0.7 * vanilla_losses[i]).epsilon(1e-3));
}

TEST_CASE("teacher mismatch is rejected") {
  TrainConfig cfg;
  cfg.joint_epochs = 1;
  Rig rig(6, 81, cfg);
  auto other_ds = tiny_dataset(6, 82, 8, 4);  // different class count -> different arch
  models::MtlModel other(model_config_for(other_ds), 5);
  CHECK_THROWS(train_kd(rig.ctx, other, other));
}

TEST_CASE("few-shot adaptation switches to the TD split and logs ADAPT") {
  TrainConfig cfg;
  cfg.regime = Regime::MTL_V;
  cfg.joint_epochs = 2;
  cfg.adapt_scale = 0.5;
  Rig rig(10, 91, cfg);

  synth::DomainShiftSpec shift;
  shift.brightness_delta = -0.05;
  shift.contrast_scale = 0.8;
  shift.novel_class_ids = {5};
  auto split = synth::split_domains(rig.ds, shift, 3);

  train_vanilla(rig.ctx);
  auto pre_adapt = evaluate_on(rig.model, split.td, split.td.val_ids, "td-val");

  rig.model.expand_classifier_head(1, 7);
  adapt_few_shot(rig.ctx, split.td);

  bool has_adapt = false, has_td_joint = false;
  for (const auto& ph : rig.ctx.log.phases) {
    if (ph.name == "ADAPT") has_adapt = true;
    if (ph.name == "JOINT" && has_adapt) has_td_joint = true;
  }
  CHECK(has_adapt);
  CHECK(has_td_joint);

  auto post_adapt = evaluate_on(rig.model, split.td, split.td.val_ids, "td-val");
  if (post_adapt.acc < pre_adapt.acc) {
    WARN_MESSAGE(false, "TD accuracy did not improve after adaptation (flagged, not failed): pre=",
                 pre_adapt.acc, " post=", post_adapt.acc);
  }
  // ctx data view restored
  CHECK(rig.ctx.data.ds == &rig.ds);
}

TEST_CASE("evaluate_on is pure and deterministic") {
  Rig rig(8, 95);
  auto a = evaluate_on(rig.model, rig.ds, rig.ds.val_ids, "sd-val");
  uint64_t h = rig.model.params().value_hash("sh") ^ rig.model.params().value_hash("c") ^
               rig.model.params().value_hash("sg");
  auto b = evaluate_on(rig.model, rig.ds, rig.ds.val_ids, "sd-val");
  CHECK(a.bleu4 == b.bleu4);
  CHECK(a.cider == b.cider);
  CHECK(a.acc == b.acc);
  CHECK(a.map == b.map);
  CHECK(a.recall == b.recall);
  uint64_t h2 = rig.model.params().value_hash("sh") ^ rig.model.params().value_hash("c") ^
                rig.model.params().value_hash("sg");
  CHECK(h == h2);
}
