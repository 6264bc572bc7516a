#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

namespace mtl::synth {

enum class Role { Tissue, Instrument };

struct Box {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct Node {
  int class_id = 0;
  Role role = Role::Instrument;
  Box bbox;
};

struct Edge {
  int tissue_idx = 0;
  int instrument_idx = 0;
  std::vector<uint8_t> interactions;  // multi-hot, length K_int
};

struct SceneInstance {
  Tensor image;  // H x W x C in [0,1]
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::vector<int> caption;  // token ids, BOS ... EOS
};

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> tokens;
  std::map<std::string, int> ids;

  int id(const std::string& tok) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens.size()); }
};

Vocabulary build_vocabulary(int k_cls, int k_int);
std::string class_name(int class_id);
std::string interaction_name(int interaction_id);

struct DatasetConfig {
  int n_frames = 128;
  int k_cls = 9;  // class 0 is the tissue
  int k_int = 5;
  int height = 64;
  int width = 64;
  int channels = 3;
  int min_instruments = 1;
  int max_instruments = 2;
  int max_caption_len = 16;

  void validate() const;
  std::string canonical_string() const;
};

struct DomainShiftSpec {
  double brightness_delta = 0.0;
  double contrast_scale = 1.0;
  double hue_rotation_degrees = 0.0;
  std::set<int> novel_class_ids;
  double td_train_fraction = 0.23;

  bool is_identity_intensity() const {
    return brightness_delta == 0.0 && contrast_scale == 1.0 && hue_rotation_degrees == 0.0;
  }
};

struct SceneDataset {
  DatasetConfig config;
  Vocabulary vocab;
  std::string domain = "base";  // base | sd | td
  uint64_t seed = 0;
  std::vector<SceneInstance> frames;
  std::vector<int> train_ids;
  std::vector<int> val_ids;

  std::set<int> class_set() const;
};

SceneDataset generate_dataset(const DatasetConfig& config, uint64_t seed);

struct DomainSplit {
  SceneDataset sd;
  SceneDataset td;
};

DomainSplit split_domains(const SceneDataset& ds, const DomainShiftSpec& shift, uint64_t seed);

// [cxa, cya, wa, ha, cxb, cyb, wb, hb, dcx, dcy, area_a, area_b], all
// normalized by the image dimensions.
std::vector<double> encode_spatial_feature(const Box& box_a, const Box& box_b, int image_w,
                                           int image_h);

// Deterministic unit pseudo-embedding standing in for word vectors.
Tensor semantic_embedding(int class_id, int dim);

Tensor apply_intensity_shift(const Tensor& image, const DomainShiftSpec& shift);

// Rendering/crop plumbing shared with the trainers.
Tensor crop_resize(const Tensor& image_hwc, const Box& box, int out_size);  // -> [C, s, s]
Tensor augment_crop(const Tensor& crop_chw, Rng& rng);

void save_dataset(const SceneDataset& ds, const std::filesystem::path& dir);
SceneDataset load_dataset(const std::filesystem::path& dir);

bool datasets_bitwise_equal(const SceneDataset& a, const SceneDataset& b);

}  // namespace mtl::synth
