#include "mtl/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mtl/io.hpp"

namespace mtl::models {

namespace {

constexpr double kMaskValue = -1e30;

Tensor normal_init(Shape s, double sd, Rng& rng) {
  Tensor t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sd);
  return t;
}

struct AttnParams {
  VarPtr wq, bq, wk, bk, wv, bv, wo, bo;
  VarPtr mem_k, mem_v;  // optional memory slots appended to keys/values
};

// addmask is [B*h, Lq, S'] where S' includes memory columns when present
VarPtr mha(const AttnParams& p, const VarPtr& q_in, const VarPtr& kv_in, Tensor addmask,
           int heads) {
  int64_t b = q_in->val.size(0), lq = q_in->val.size(1), d = q_in->val.size(2);
  int64_t dh = d / heads;
  auto q = linear(q_in, p.wq, p.bq);
  auto k = linear(kv_in, p.wk, p.bk);
  auto v = linear(kv_in, p.wv, p.bv);
  if (p.mem_k) {
    k = concat({k, tile_rows(p.mem_k, b)}, 1);
    v = concat({v, tile_rows(p.mem_v, b)}, 1);
  }
  int64_t s = k->val.size(1);
  auto split = [&](const VarPtr& x, int64_t len) {
    return reshape(permute(reshape(x, {b, len, heads, dh}), {0, 2, 1, 3}), {b * heads, len, dh});
  };
  auto qh = split(q, lq), kh = split(k, s), vh = split(v, s);
  auto scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = add_constt(scores, std::move(addmask));
  auto ctx = matmul(softmax_lastdim(scores), vh);
  auto merged = reshape(permute(reshape(ctx, {b, heads, lq, dh}), {0, 2, 1, 3}), {b, lq, d});
  return linear(merged, p.wo, p.bo);
}

Tensor key_padding_mask(int64_t b, int heads, int64_t lq, int64_t n_regions, int64_t n_extra,
                        const std::vector<int64_t>& counts) {
  Tensor m({b * heads, lq, n_regions + n_extra});
  for (int64_t ib = 0; ib < b; ++ib)
    for (int h = 0; h < heads; ++h)
      for (int64_t i = 0; i < lq; ++i)
        for (int64_t j = 0; j < n_regions; ++j)
          if (j >= counts[static_cast<size_t>(ib)])
            m[((ib * heads + h) * lq + i) * (n_regions + n_extra) + j] = kMaskValue;
  return m;
}

Tensor causal_mask(int64_t b, int heads, int64_t l) {
  Tensor m({b * heads, l, l});
  for (int64_t r = 0; r < b * heads; ++r)
    for (int64_t i = 0; i < l; ++i)
      for (int64_t j = i + 1; j < l; ++j) m[(r * l + i) * l + j] = kMaskValue;
  return m;
}

}  // namespace

std::string ModelConfig::canonical_string() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "crop=%d;inch=%d;st=%d,%d,%d;d=%d;heads=%d;mem=%d;enc=%d;dec=%d;ffn=%d;vocab=%d;"
                "maxlen=%d;sem=%d;gh=%d;kint=%d;kcls=%d;rpe=%d;anorm=%d",
                crop_size, in_channels, stage_channels[0], stage_channels[1], stage_channels[2],
                d_model, n_heads, memory_slots, enc_blocks, dec_blocks, ffn_dim, vocab_size,
                max_caption_len, semantic_dim, graph_hidden, k_int, k_classes,
                region_pos_encoding ? 1 : 0, attn_norm == AttnNorm::PerDestination ? 0 : 1);
  return buf;
}

void ModelConfig::validate() const {
  if (d_model % n_heads != 0) throw std::invalid_argument("model: d_model must be divisible by n_heads");
  if (crop_size < 8) throw std::invalid_argument("model: crop_size must be >= 8");
  if (vocab_size < 5) throw std::invalid_argument("model: vocabulary too small");
  if (k_classes < 2) throw std::invalid_argument("model: k_classes must be >= 2");
  if (k_int < 1) throw std::invalid_argument("model: k_int must be >= 1");
  auto is_square = [](int v) {
    int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
    return r * r == v;
  };
  if (!is_square(d_model) || !is_square(graph_hidden))
    throw std::invalid_argument("model: d_model and graph_hidden must be perfect squares "
                                "(curriculum filtering views head features as square maps)");
}

VarPtr ParamStore::create(const std::string& group, const std::string& name, Tensor init) {
  for (const auto& p : params_)
    if (p.group == group && p.name == name)
      throw std::logic_error("param already exists: " + group + "/" + name);
  auto node = leaf(std::move(init), true);
  node->name = group + "/" + name;
  params_.push_back({group, name, node});
  return node;
}

std::vector<VarPtr> ParamStore::group(const std::string& g) const {
  std::vector<VarPtr> out;
  for (const auto& p : params_)
    if (p.group == g) out.push_back(p.node);
  if (out.empty()) throw std::invalid_argument("unknown param group: " + g);
  return out;
}

VarPtr ParamStore::find(const std::string& group, const std::string& name) const {
  for (const auto& p : params_)
    if (p.group == group && p.name == name) return p.node;
  throw std::logic_error("missing param: " + group + "/" + name);
}

void ParamStore::replace_value(const std::string& group, const std::string& name, Tensor v) {
  auto node = find(group, name);
  node->val = std::move(v);
  node->grad = Tensor();
}

void ParamStore::freeze(const std::string& group) {
  for (auto& p : params_)
    if (p.group == group) p.node->requires_grad = false;
}

void ParamStore::unfreeze(const std::string& group) {
  for (auto& p : params_)
    if (p.group == group) p.node->requires_grad = true;
}

bool ParamStore::frozen(const std::string& group) const {
  bool any = false;
  for (const auto& p : params_)
    if (p.group == group) {
      any = true;
      if (p.node->requires_grad) return false;
    }
  if (!any) throw std::invalid_argument("unknown param group: " + group);
  return true;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.node->zero_grad();
}

double ParamStore::grad_abs_sum(const std::string& g) const {
  double s = 0.0;
  for (const auto& p : params_)
    if (p.group == g && p.node->grad.numel() > 0)
      for (int64_t i = 0; i < p.node->grad.numel(); ++i) s += std::fabs(p.node->grad[i]);
  return s;
}

uint64_t ParamStore::value_hash(const std::string& g) const {
  uint64_t h = fnv1a_str(g);
  for (const auto& p : params_)
    if (p.group == g)
      h = fnv1a(p.node->val.data(), sizeof(double) * static_cast<size_t>(p.node->val.numel()), h);
  return h;
}

int64_t ParamStore::n_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.node->val.numel();
  return n;
}

MtlModel::MtlModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build_params(seed);
  pos_encoding_ = Tensor({cfg_.max_caption_len, cfg_.d_model});
  for (int p = 0; p < cfg_.max_caption_len; ++p)
    for (int i = 0; i < cfg_.d_model / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * i / cfg_.d_model);
      pos_encoding_[p * cfg_.d_model + 2 * i] = stable_sin(p * freq);
      pos_encoding_[p * cfg_.d_model + 2 * i + 1] = stable_cos(p * freq);
    }
}

void MtlModel::build_params(uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a_str("model-init")));
  int d = cfg_.d_model, f = cfg_.ffn_dim, v = cfg_.vocab_size;
  int dd = cfg_.feature_dim(), gh = cfg_.graph_hidden, sdim = cfg_.semantic_dim;

  auto lin = [&](const std::string& g, const std::string& n, int in, int out) {
    store_.create(g, n + "_w", normal_init({in, out}, std::sqrt(1.0 / in), rng));
    store_.create(g, n + "_b", Tensor({out}));
  };
  auto lnorm = [&](const std::string& g, const std::string& n, int width) {
    store_.create(g, n + "_g", Tensor({width}, 1.0));
    store_.create(g, n + "_b", Tensor({width}));
  };

  // shared extractor
  int chans[4] = {cfg_.in_channels, cfg_.stage_channels[0], cfg_.stage_channels[1],
                  cfg_.stage_channels[2]};
  for (int s = 0; s < 3; ++s) {
    double sd = std::sqrt(2.0 / (chans[s] * 9.0));
    store_.create("sh", "conv" + std::to_string(s + 1) + "_w",
                  normal_init({chans[s + 1], chans[s], 3, 3}, sd, rng));
    store_.create("sh", "conv" + std::to_string(s + 1) + "_b", Tensor({chans[s + 1]}));
  }

  // classifier head (CICL pretraining)
  store_.create("cls", "w", normal_init({dd, cfg_.k_classes}, std::sqrt(1.0 / dd), rng));
  store_.create("cls", "b", Tensor({cfg_.k_classes}));

  // caption head
  store_.create("c", "token_emb", normal_init({v, d}, 0.02, rng));
  lin("c", "region_proj", dd, d);
  for (int e = 0; e < cfg_.enc_blocks; ++e) {
    std::string p = "e" + std::to_string(e) + "_";
    for (const char* nm : {"attq", "attk", "attv", "atto"}) lin("c", p + nm, d, d);
    store_.create("c", p + "mem_k", normal_init({cfg_.memory_slots, d}, std::sqrt(1.0 / d), rng));
    store_.create("c", p + "mem_v", normal_init({cfg_.memory_slots, d}, std::sqrt(1.0 / d), rng));
    lnorm("c", p + "ln1", d);
    lin("c", p + "ffn1", d, f);
    lin("c", p + "ffn2", f, d);
    lnorm("c", p + "ln2", d);
  }
  for (int e = 0; e < cfg_.dec_blocks; ++e) {
    std::string p = "d" + std::to_string(e) + "_";
    for (const char* nm : {"selfq", "selfk", "selfv", "selfo"}) lin("c", p + nm, d, d);
    lnorm("c", p + "ln1", d);
    for (const char* nm : {"crossq", "crossk", "crossv", "crosso"}) lin("c", p + nm, d, d);
    for (int l = 0; l < cfg_.enc_blocks; ++l) lin("c", p + "gate" + std::to_string(l), 2 * d, d);
    lnorm("c", p + "lnx", d);
    lin("c", p + "ffn1", d, f);
    lin("c", p + "ffn2", f, d);
    lnorm("c", p + "ln2", d);
  }
  lin("c", "out", d, v);

  // scene graph head
  lin("sg", "vis", dd, gh);
  lin("sg", "sem", sdim, gh);
  lin("sg", "fuse", 2 * gh, gh);
  lin("sg", "self", gh, gh);
  lin("sg", "msg", gh, gh);
  store_.create("sg", "attn_a", normal_init({2 * gh, 1}, std::sqrt(1.0 / (2 * gh)), rng));
  lin("sg", "edge1", 2 * gh + 12, gh);
  lin("sg", "edge2", gh, cfg_.k_int);
}

uint64_t MtlModel::arch_hash() const {
  uint64_t h = fnv1a_str(cfg_.canonical_string());
  for (const auto& p : store_.all()) {
    h = fnv1a_str(p.group + "/" + p.name, h);
    for (int i = 0; i < p.node->val.ndim(); ++i) {
      int64_t s = p.node->val.size(i);
      h = fnv1a(&s, sizeof(s), h);
    }
  }
  return h;
}

VarPtr MtlModel::extract_features(Tensor crops_nchw, const CurriculumFilter& f) const {
  if (crops_nchw.ndim() != 4 || crops_nchw.size(1) != cfg_.in_channels)
    throw std::invalid_argument("extract_features: wrong channel count");
  auto x = leaf(std::move(crops_nchw));
  // the filter gates the features entering each stage; deeper outputs are
  // smaller than the kernel, inputs are not
  for (int s = 1; s <= 3; ++s) {
    auto w = store_.find("sh", "conv" + std::to_string(s) + "_w");
    auto b = store_.find("sh", "conv" + std::to_string(s) + "_b");
    x = curriculum::apply_curriculum(x, f);
    x = relu(conv2d(x, w, b, 2, 1));
  }
  return global_avg_pool(x);
}

VarPtr MtlModel::classify(const VarPtr& features) const {
  return linear(features, store_.find("cls", "w"), store_.find("cls", "b"));
}

void MtlModel::expand_classifier_head(int n_new, uint64_t seed) {
  if (n_new < 1) throw std::invalid_argument("expand_classifier_head: n_new must be >= 1");
  int dd = cfg_.feature_dim();
  int k_old = cfg_.k_classes;
  Rng rng(mix_seed(seed, fnv1a_str("expand-head") + static_cast<uint64_t>(k_old)));
  const Tensor& w_old = store_.find("cls", "w")->val;
  const Tensor& b_old = store_.find("cls", "b")->val;
  Tensor w_new({dd, k_old + n_new});
  Tensor b_new({k_old + n_new});
  for (int r = 0; r < dd; ++r)
    for (int c = 0; c < k_old; ++c) w_new[r * (k_old + n_new) + c] = w_old[r * k_old + c];
  for (int c = 0; c < k_old; ++c) b_new[c] = b_old[c];
  for (int c = k_old; c < k_old + n_new; ++c) {
    for (int r = 0; r < dd; ++r) w_new[r * (k_old + n_new) + c] = rng.normal(0.0, 0.01);
    b_new[c] = rng.normal(0.0, 0.01);
  }
  store_.replace_value("cls", "w", std::move(w_new));
  store_.replace_value("cls", "b", std::move(b_new));
  cfg_.k_classes = k_old + n_new;
}

VarPtr MtlModel::encode_regions(const VarPtr& packed_regions,
                                const std::vector<int64_t>& region_counts,
                                const CurriculumFilter& f, std::vector<VarPtr>& enc_levels) const {
  int64_t b = packed_regions->val.size(0), r = packed_regions->val.size(1);
  int d = cfg_.d_model;
  auto x = relu(linear(packed_regions, store_.find("c", "region_proj_w"),
                       store_.find("c", "region_proj_b")));
  if (!f.identity) {
    x = reshape(curriculum::apply_curriculum_rows(reshape(x, {b * r, d}), f), {b, r, d});
  }
  if (cfg_.region_pos_encoding) {
    Tensor pe({r, d});
    for (int64_t i = 0; i < std::min<int64_t>(r, cfg_.max_caption_len); ++i)
      for (int j = 0; j < d; ++j) pe[i * d + j] = pos_encoding_[i * d + j];
    x = add_bcast(x, constant(std::move(pe)));
  }
  for (int e = 0; e < cfg_.enc_blocks; ++e) {
    std::string p = "e" + std::to_string(e) + "_";
    AttnParams ap{store_.find("c", p + "attq_w"), store_.find("c", p + "attq_b"),
                  store_.find("c", p + "attk_w"), store_.find("c", p + "attk_b"),
                  store_.find("c", p + "attv_w"), store_.find("c", p + "attv_b"),
                  store_.find("c", p + "atto_w"), store_.find("c", p + "atto_b"),
                  store_.find("c", p + "mem_k"),  store_.find("c", p + "mem_v")};
    auto mask = key_padding_mask(b, cfg_.n_heads, r, r, cfg_.memory_slots, region_counts);
    auto att = mha(ap, x, x, std::move(mask), cfg_.n_heads);
    x = layer_norm(add(x, att), store_.find("c", p + "ln1_g"), store_.find("c", p + "ln1_b"));
    auto ff = linear(relu(linear(x, store_.find("c", p + "ffn1_w"), store_.find("c", p + "ffn1_b"))),
                     store_.find("c", p + "ffn2_w"), store_.find("c", p + "ffn2_b"));
    x = layer_norm(add(x, ff), store_.find("c", p + "ln2_g"), store_.find("c", p + "ln2_b"));
    enc_levels.push_back(x);
  }
  return x;
}

VarPtr MtlModel::decode_tokens(const std::vector<std::vector<int64_t>>& tokens,
                               const std::vector<VarPtr>& enc_levels,
                               const std::vector<int64_t>& region_counts) const {
  int64_t b = static_cast<int64_t>(tokens.size());
  int64_t l = static_cast<int64_t>(tokens.front().size());
  int d = cfg_.d_model;
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(b * l));
  for (const auto& seq : tokens) {
    if (static_cast<int64_t>(seq.size()) != l)
      throw std::invalid_argument("decode_tokens: ragged token batch");
    flat.insert(flat.end(), seq.begin(), seq.end());
  }
  auto y = scale(embedding(store_.find("c", "token_emb"), flat, {b, l}),
                 std::sqrt(static_cast<double>(d)));
  Tensor pe({l, d});
  for (int64_t i = 0; i < l; ++i)
    for (int j = 0; j < d; ++j) pe[i * d + j] = pos_encoding_[i * d + j];
  y = add_bcast(y, constant(std::move(pe)));

  int64_t r = enc_levels.front()->val.size(1);
  for (int e = 0; e < cfg_.dec_blocks; ++e) {
    std::string p = "d" + std::to_string(e) + "_";
    AttnParams self_ap{store_.find("c", p + "selfq_w"), store_.find("c", p + "selfq_b"),
                       store_.find("c", p + "selfk_w"), store_.find("c", p + "selfk_b"),
                       store_.find("c", p + "selfv_w"), store_.find("c", p + "selfv_b"),
                       store_.find("c", p + "selfo_w"), store_.find("c", p + "selfo_b"),
                       nullptr,
                       nullptr};
    auto self_att = mha(self_ap, y, y, causal_mask(b, cfg_.n_heads, l), cfg_.n_heads);
    y = layer_norm(add(y, self_att), store_.find("c", p + "ln1_g"), store_.find("c", p + "ln1_b"));

    AttnParams cross_ap{store_.find("c", p + "crossq_w"), store_.find("c", p + "crossq_b"),
                        store_.find("c", p + "crossk_w"), store_.find("c", p + "crossk_b"),
                        store_.find("c", p + "crossv_w"), store_.find("c", p + "crossv_b"),
                        store_.find("c", p + "crosso_w"), store_.find("c", p + "crosso_b"),
                        nullptr,
                        nullptr};
    VarPtr mesh;
    for (int lev = 0; lev < cfg_.enc_blocks; ++lev) {
      auto mask = key_padding_mask(b, cfg_.n_heads, l, r, 0, region_counts);
      auto c = mha(cross_ap, y, enc_levels[static_cast<size_t>(lev)], std::move(mask), cfg_.n_heads);
      auto gate_in = concat({y, c}, -1);
      auto g = sigmoid(linear(gate_in, store_.find("c", p + "gate" + std::to_string(lev) + "_w"),
                              store_.find("c", p + "gate" + std::to_string(lev) + "_b")));
      auto contrib = mul(g, c);
      mesh = mesh ? add(mesh, contrib) : contrib;
    }
    y = layer_norm(add(y, mesh), store_.find("c", p + "lnx_g"), store_.find("c", p + "lnx_b"));
    auto ff = linear(relu(linear(y, store_.find("c", p + "ffn1_w"), store_.find("c", p + "ffn1_b"))),
                     store_.find("c", p + "ffn2_w"), store_.find("c", p + "ffn2_b"));
    y = layer_norm(add(y, ff), store_.find("c", p + "ln2_g"), store_.find("c", p + "ln2_b"));
  }
  return linear(y, store_.find("c", "out_w"), store_.find("c", "out_b"));
}

VarPtr MtlModel::caption_forward(const VarPtr& packed_regions,
                                 const std::vector<int64_t>& region_counts,
                                 const std::vector<std::vector<int64_t>>& tokens,
                                 const CurriculumFilter& f) const {
  if (packed_regions->val.ndim() != 3)
    throw std::invalid_argument("caption_forward: regions must be [B,R,D]");
  if (tokens.empty() || static_cast<int64_t>(tokens.size()) != packed_regions->val.size(0))
    throw std::invalid_argument("caption_forward: token batch size mismatch");
  if (static_cast<int>(tokens.front().size()) > cfg_.max_caption_len)
    throw std::invalid_argument("caption_forward: sequence longer than max_caption_len");
  for (int64_t c : region_counts)
    if (c < 1) throw std::invalid_argument("caption_forward: every sample needs >= 1 region");
  std::vector<VarPtr> levels;
  encode_regions(packed_regions, region_counts, f, levels);
  return decode_tokens(tokens, levels, region_counts);
}

std::vector<std::vector<int64_t>> MtlModel::caption_generate(
    const VarPtr& packed_regions, const std::vector<int64_t>& region_counts, int max_len) const {
  constexpr int64_t kBos = 1, kEos = 2, kPad = 0;
  int64_t b = packed_regions->val.size(0);
  if (max_len < 2 || max_len > cfg_.max_caption_len)
    throw std::invalid_argument("caption_generate: max_len out of range");
  std::vector<VarPtr> levels;
  encode_regions(packed_regions, region_counts, CurriculumFilter::off(), levels);

  std::vector<std::vector<int64_t>> seqs(static_cast<size_t>(b), {kBos});
  std::vector<char> done(static_cast<size_t>(b), 0);
  for (int step = 1; step < max_len; ++step) {
    auto logits = decode_tokens(seqs, levels, region_counts);
    int64_t l = static_cast<int64_t>(seqs.front().size());
    int64_t v = cfg_.vocab_size;
    for (int64_t i = 0; i < b; ++i) {
      if (done[static_cast<size_t>(i)]) {
        seqs[static_cast<size_t>(i)].push_back(kPad);
        continue;
      }
      const double* row = logits->val.data() + (i * l + (l - 1)) * v;
      int64_t best = 0;
      for (int64_t c = 1; c < v; ++c)
        if (row[c] > row[best]) best = c;
      seqs[static_cast<size_t>(i)].push_back(best);
      if (best == kEos) done[static_cast<size_t>(i)] = 1;
    }
    bool all_done = true;
    for (char dn : done) all_done = all_done && dn;
    if (all_done) break;
  }
  for (auto& s : seqs) {
    auto it = std::find(s.begin(), s.end(), kEos);
    if (it != s.end()) s.erase(it + 1, s.end());
  }
  return seqs;
}

VarPtr MtlModel::scenegraph_forward(const GraphInput& g, const CurriculumFilter& f) const {
  if (g.edges.empty()) throw std::invalid_argument("scenegraph_forward: graph with no edges");
  int64_t n = g.visual->val.size(0);
  if (g.semantic.size(0) != n || g.semantic.size(1) != cfg_.semantic_dim)
    throw std::invalid_argument("scenegraph_forward: semantic feature shape mismatch");
  int64_t ne = static_cast<int64_t>(g.edges.size());
  if (g.spatial.size(0) != ne || g.spatial.size(1) != 12)
    throw std::invalid_argument("scenegraph_forward: spatial feature shape mismatch");
  for (auto [t, i] : g.edges)
    if (t < 0 || t >= n || i < 0 || i >= n || t == i)
      throw std::invalid_argument("scenegraph_forward: bad edge endpoints");

  auto hv = relu(linear(g.visual, store_.find("sg", "vis_w"), store_.find("sg", "vis_b")));
  auto hs = relu(linear(constant(g.semantic), store_.find("sg", "sem_w"), store_.find("sg", "sem_b")));
  auto h0 = relu(linear(concat({hv, hs}, -1), store_.find("sg", "fuse_w"), store_.find("sg", "fuse_b")));
  h0 = curriculum::apply_curriculum_rows(h0, f);

  auto self_h = linear(h0, store_.find("sg", "self_w"), store_.find("sg", "self_b"));
  auto msg = linear(h0, store_.find("sg", "msg_w"), store_.find("sg", "msg_b"));

  std::vector<int64_t> tissue_idx, inst_idx;
  for (auto [t, i] : g.edges) {
    tissue_idx.push_back(t);
    inst_idx.push_back(i);
  }

  VarPtr h_t, h_i;  // per-edge endpoint embeddings
  if (cfg_.attn_norm == ModelConfig::AttnNorm::PerDestination) {
    // undirected message passing over the labeled edges, softmax per destination
    std::vector<int64_t> dst = tissue_idx, src = inst_idx;
    dst.insert(dst.end(), inst_idx.begin(), inst_idx.end());
    src.insert(src.end(), tissue_idx.begin(), tissue_idx.end());
    auto pair_feat = concat({gather_rows(msg, dst), gather_rows(msg, src)}, -1);
    auto scores = reshape(matmul(pair_feat, store_.find("sg", "attn_a")), {static_cast<int64_t>(dst.size())});
    auto alpha = segment_softmax(leaky_relu(scores, 0.2), dst, n);
    auto agg = scatter_add_rows(mul_rows(gather_rows(msg, src), alpha), dst, n);
    auto h1 = leaky_relu(add(self_h, agg), 0.2);
    h_t = gather_rows(h1, tissue_idx);
    h_i = gather_rows(h1, inst_idx);
  } else {
    // per-edge-pair: each edge aggregates only its own counterpart
    h_t = leaky_relu(add(gather_rows(self_h, tissue_idx), gather_rows(msg, inst_idx)), 0.2);
    h_i = leaky_relu(add(gather_rows(self_h, inst_idx), gather_rows(msg, tissue_idx)), 0.2);
  }

  auto edge_feat = concat({h_t, h_i, constant(g.spatial)}, -1);
  auto hidden = relu(linear(edge_feat, store_.find("sg", "edge1_w"), store_.find("sg", "edge1_b")));
  return linear(hidden, store_.find("sg", "edge2_w"), store_.find("sg", "edge2_b"));
}

MtlModel MtlModel::clone() const {
  MtlModel m(cfg_, 0);
  m.copy_values_from(*this);
  return m;
}

void MtlModel::copy_values_from(const MtlModel& other) {
  const auto& src = other.store_.all();
  auto& dst = store_.all();
  if (src.size() != dst.size()) throw std::logic_error("copy_values_from: param count mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].group != dst[i].group || src[i].name != dst[i].name)
      throw std::logic_error("copy_values_from: param order mismatch");
    dst[i].node->val = src[i].node->val;
    dst[i].node->grad = Tensor();
  }
}

void MtlModel::save(const std::filesystem::path& dir,
                    const std::map<std::string, std::string>& meta) const {
  std::filesystem::create_directories(dir);
  std::map<std::string, Tensor> tensors;
  for (const auto& p : store_.all()) tensors[p.group + "/" + p.name] = p.node->val;
  io::write_tensor_map(dir / "params.bin", tensors);
  io::json j;
  j["arch_hash"] = arch_hash();
  j["config"] = {{"crop_size", cfg_.crop_size},
                 {"in_channels", cfg_.in_channels},
                 {"stage_channels", {cfg_.stage_channels[0], cfg_.stage_channels[1], cfg_.stage_channels[2]}},
                 {"d_model", cfg_.d_model},
                 {"n_heads", cfg_.n_heads},
                 {"memory_slots", cfg_.memory_slots},
                 {"enc_blocks", cfg_.enc_blocks},
                 {"dec_blocks", cfg_.dec_blocks},
                 {"ffn_dim", cfg_.ffn_dim},
                 {"vocab_size", cfg_.vocab_size},
                 {"max_caption_len", cfg_.max_caption_len},
                 {"semantic_dim", cfg_.semantic_dim},
                 {"graph_hidden", cfg_.graph_hidden},
                 {"k_int", cfg_.k_int},
                 {"k_classes", cfg_.k_classes},
                 {"region_pos_encoding", cfg_.region_pos_encoding},
                 {"attn_norm", cfg_.attn_norm == ModelConfig::AttnNorm::PerDestination ? "dest" : "pair"}};
  j["meta"] = meta;
  io::write_json_atomic(dir / "manifest.json", j);
}

MtlModel MtlModel::load(const std::filesystem::path& dir) {
  auto j = io::read_json(dir / "manifest.json");
  const auto& c = j.at("config");
  ModelConfig cfg;
  cfg.crop_size = c.at("crop_size").get<int>();
  cfg.in_channels = c.at("in_channels").get<int>();
  auto st = c.at("stage_channels").get<std::vector<int>>();
  cfg.stage_channels[0] = st[0];
  cfg.stage_channels[1] = st[1];
  cfg.stage_channels[2] = st[2];
  cfg.d_model = c.at("d_model").get<int>();
  cfg.n_heads = c.at("n_heads").get<int>();
  cfg.memory_slots = c.at("memory_slots").get<int>();
  cfg.enc_blocks = c.at("enc_blocks").get<int>();
  cfg.dec_blocks = c.at("dec_blocks").get<int>();
  cfg.ffn_dim = c.at("ffn_dim").get<int>();
  cfg.vocab_size = c.at("vocab_size").get<int>();
  cfg.max_caption_len = c.at("max_caption_len").get<int>();
  cfg.semantic_dim = c.at("semantic_dim").get<int>();
  cfg.graph_hidden = c.at("graph_hidden").get<int>();
  cfg.k_int = c.at("k_int").get<int>();
  cfg.k_classes = c.at("k_classes").get<int>();
  cfg.region_pos_encoding = c.at("region_pos_encoding").get<bool>();
  cfg.attn_norm = c.at("attn_norm").get<std::string>() == "dest"
                      ? ModelConfig::AttnNorm::PerDestination
                      : ModelConfig::AttnNorm::PerEdgePair;
  MtlModel m(cfg, 0);
  auto tensors = io::read_tensor_map(dir / "params.bin");
  for (auto& p : m.store_.all()) {
    auto it = tensors.find(p.group + "/" + p.name);
    if (it == tensors.end())
      throw std::runtime_error("checkpoint missing parameter " + p.group + "/" + p.name);
    if (!it->second.same_shape(p.node->val))
      throw std::runtime_error("checkpoint shape mismatch for " + p.group + "/" + p.name);
    p.node->val = std::move(it->second);
  }
  if (j.at("arch_hash").get<uint64_t>() != m.arch_hash())
    throw std::runtime_error("checkpoint architecture hash mismatch");
  return m;
}

std::map<std::string, std::string> MtlModel::read_meta(const std::filesystem::path& dir) {
  auto j = io::read_json(dir / "manifest.json");
  return j.at("meta").get<std::map<std::string, std::string>>();
}

}  // namespace mtl::models
