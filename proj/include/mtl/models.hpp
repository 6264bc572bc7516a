#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/curriculum.hpp"
#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

namespace mtl::models {

using curriculum::CurriculumFilter;

struct ModelConfig {
  int crop_size = 32;
  int in_channels = 3;
  int stage_channels[3] = {16, 32, 64};  // feature_dim = stage_channels[2]
  int d_model = 64;
  int n_heads = 2;
  int memory_slots = 4;
  int enc_blocks = 3;
  int dec_blocks = 3;
  int ffn_dim = 128;
  int vocab_size = 32;
  int max_caption_len = 16;
  int semantic_dim = 16;
  int graph_hidden = 64;
  int k_int = 5;
  int k_classes = 7;  // classifier rows at construction
  bool region_pos_encoding = false;
  enum class AttnNorm { PerDestination, PerEdgePair };
  AttnNorm attn_norm = AttnNorm::PerDestination;

  int feature_dim() const { return stage_channels[2]; }
  std::string canonical_string() const;
  void validate() const;
};

struct Param {
  std::string group;  // sh | cls | c | sg
  std::string name;
  VarPtr node;
};

class ParamStore {
 public:
  VarPtr create(const std::string& group, const std::string& name, Tensor init);
  const std::vector<Param>& all() const { return params_; }
  std::vector<Param>& all() { return params_; }
  std::vector<VarPtr> group(const std::string& g) const;
  VarPtr find(const std::string& group, const std::string& name) const;
  void replace_value(const std::string& group, const std::string& name, Tensor v);

  void freeze(const std::string& group);
  void unfreeze(const std::string& group);
  bool frozen(const std::string& group) const;

  void zero_grads();
  double grad_abs_sum(const std::string& group) const;
  uint64_t value_hash(const std::string& group) const;  // bitwise fingerprint
  int64_t n_scalars() const;

 private:
  std::vector<Param> params_;
};

// Graph head input: one batched (block-diagonal) bipartite scene graph.
struct GraphInput {
  VarPtr visual;                           // [N, D]
  Tensor semantic;                         // [N, S]
  std::vector<std::pair<int, int>> edges;  // (tissue node, instrument node)
  Tensor spatial;                          // [E, 12]
};

class MtlModel {
 public:
  MtlModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  uint64_t arch_hash() const;

  // shared extractor: 3 stride-2 conv stages with the curriculum filter
  // after each stage, then global average pooling
  VarPtr extract_features(Tensor crops_nchw, const CurriculumFilter& f) const;

  VarPtr classify(const VarPtr& features) const;
  void expand_classifier_head(int n_new, uint64_t seed);

  // caption head; regions packed as [B, Rmax, D] with per-sample row counts
  VarPtr caption_forward(const VarPtr& packed_regions, const std::vector<int64_t>& region_counts,
                         const std::vector<std::vector<int64_t>>& tokens,
                         const CurriculumFilter& f) const;
  std::vector<std::vector<int64_t>> caption_generate(const VarPtr& packed_regions,
                                                     const std::vector<int64_t>& region_counts,
                                                     int max_len) const;

  VarPtr scenegraph_forward(const GraphInput& g, const CurriculumFilter& f) const;

  MtlModel clone() const;
  void copy_values_from(const MtlModel& other);

  void save(const std::filesystem::path& dir, const std::map<std::string, std::string>& meta) const;
  static MtlModel load(const std::filesystem::path& dir);
  static std::map<std::string, std::string> read_meta(const std::filesystem::path& dir);

 private:
  void build_params(uint64_t seed);
  VarPtr encode_regions(const VarPtr& packed_regions, const std::vector<int64_t>& region_counts,
                        const CurriculumFilter& f, std::vector<VarPtr>& enc_levels) const;
  VarPtr decode_tokens(const std::vector<std::vector<int64_t>>& tokens,
                       const std::vector<VarPtr>& enc_levels,
                       const std::vector<int64_t>& region_counts) const;

  ModelConfig cfg_;
  ParamStore store_;
  Tensor pos_encoding_;  // [max_caption_len, d_model]
};

}  // namespace mtl::models
