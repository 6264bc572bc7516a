#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtl/curriculum.hpp"
#include "mtl/losses.hpp"
#include "mtl/metrics.hpp"
#include "mtl/models.hpp"
#include "mtl/synthdata.hpp"

namespace mtl::train {

enum class Regime { MTL_FT, MTL_V, MTL_KD, MTL_KD_FT };
enum class Protocol { UDA, FEW };

std::string regime_name(Regime r);
std::string protocol_name(Protocol p);
Regime parse_regime(const std::string& s);
Protocol parse_protocol(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::MTL_FT;
  Protocol protocol = Protocol::UDA;

  int pretrain_epochs = 15;
  int pretrain_batch = 16;
  double pretrain_lr = 1e-3;

  int caption_epochs = 40;
  int caption_batch = 8;
  int caption_warmup = 200;
  double caption_lr_factor = 1.0;

  int graph_epochs = 60;
  int graph_batch = 8;
  double graph_lr = 1e-3;

  int joint_epochs = 20;
  int joint_batch = 4;
  double joint_lr = 3e-4;

  int teacher_caption_epochs = 25;
  int teacher_graph_epochs = 30;

  double adapt_scale = 0.5;  // epoch-budget multiplier for few-shot adaptation

  int patience = 10;
  double min_delta = 1e-4;
  int eval_every = 1;
  double max_grad_norm = 5.0;

  double tau = 0.07;
  double incre_temperature = 2.0;
  double kd_temperature = 1.0;
  losses::LossWeights weights;

  uint64_t seed = 7;
};

struct ConvergencePolicy {
  std::string metric = "loss";
  bool maximize = false;
  int patience = 10;
  double min_delta = 1e-4;
};

// True once the tracked metric has not improved by >= min_delta for
// `patience` consecutive evaluations.
bool check_convergence(const std::vector<double>& history, const ConvergencePolicy& policy);

struct MetricRecord {
  std::string phase;
  int epoch = 0;
  std::string split;  // train | sd-val | td-val
  std::string metric;
  double value = 0.0;
  double sigma = 0.0;
  double wallclock = 0.0;
};

struct PhaseInfo {
  std::string name;
  int epochs_run = 0;
  int steps = 0;
  bool grads_zero_at_entry = false;
  bool converged_early = false;
};

struct TrainLog {
  std::vector<MetricRecord> records;
  std::vector<PhaseInfo> phases;

  void add(MetricRecord r) { records.push_back(std::move(r)); }
  std::vector<double> series(const std::string& phase, const std::string& metric) const;
  double epoch_value(const std::string& phase, int epoch, const std::string& metric) const;
};

struct StepInfo {
  std::string phase;
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
  double caption_part = 0.0;
  double graph_part = 0.0;
};

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(models::ParamStore& store, double lr, double max_grad_norm);
  bool has_state(const Node* n) const { return state_.count(n) > 0; }
  size_t n_states() const { return state_.size(); }

 private:
  struct State {
    Tensor m, v;
    int64_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::map<const Node*, State> state_;
};

double noam_lr(int step, int d_model, int warmup, double factor);

struct DataView {
  const synth::SceneDataset* ds = nullptr;
  std::vector<int> train_ids;
  std::vector<int> val_ids;
  std::string val_split_name = "sd-val";
};

struct TrainerContext {
  models::MtlModel* model = nullptr;
  TrainConfig cfg;
  curriculum::CurriculumSchedule sched;
  int global_epoch = 0;  // drives the sigma schedule across phases
  DataView data;
  TrainLog log;
  std::filesystem::path ckpt_dir;  // empty -> keep snapshots in memory only

  std::function<void(const StepInfo&)> on_step;

  struct BestTracker {
    bool has = false;
    double value = -1e300;
    int epoch = -1;
    std::map<std::string, Tensor> weights;
    std::filesystem::path path;
  };
  BestTracker best_caption;  // BC, by validation bleu4
  BestTracker best_graph;    // BG, by validation acc

  double started_at = 0.0;
  double now() const;
};

// evaluation (identity curriculum, no weight mutation)
metrics::MetricsReport evaluate_on(const models::MtlModel& model, const synth::SceneDataset& ds,
                                   const std::vector<int>& ids, const std::string& split_tag);

// CICL pretraining of the shared extractor + classifier on node crops.
// old_model, when present, supplies old-class logits for the incremental term.
void pretrain_cicl(TrainerContext& ctx, const models::MtlModel* old_model = nullptr);

// Alg-1 steps 1-4: caption phase (W_sh, W_sg frozen) then scene-graph phase
// (W_sh, W_c frozen), each with early stopping.
void train_task_aware(TrainerContext& ctx);

// Alg-1 step 5: joint fine-tuning on 0.5*(caption + graph).
void finetune_joint(TrainerContext& ctx);

// full joint training from pretrained extractor (Eq 5)
void train_vanilla(TrainerContext& ctx);

// Alg-2: joint training with distillation against frozen single-task teachers.
void train_kd(TrainerContext& ctx, const models::MtlModel& teacher_caption,
              const models::MtlModel& teacher_graph);

void train_kd_ft(TrainerContext& ctx, const models::MtlModel& teacher_caption,
                 const models::MtlModel& teacher_graph);

// single-task teachers trained with the same module code
std::pair<models::MtlModel, models::MtlModel> train_teachers(const TrainerContext& ctx);

// continues regime-specific training on the TD few-shot split; resets the
// best trackers so BG/BC reflect the adapted model
void adapt_few_shot(TrainerContext& ctx, const synth::SceneDataset& td,
                    const models::MtlModel* teacher_caption = nullptr,
                    const models::MtlModel* teacher_graph = nullptr);

// snapshot helpers
std::map<std::string, Tensor> snapshot_params(const models::ParamStore& store);
void restore_params(models::ParamStore& store, const std::map<std::string, Tensor>& snap);

}  // namespace mtl::train
