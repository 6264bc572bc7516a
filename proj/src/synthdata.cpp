#include "mtl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mtl/io.hpp"

namespace mtl::synth {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double fract(double v) { return v - std::floor(v); }

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  double h6 = fract(h) * 6.0;
  int i = static_cast<int>(std::floor(h6)) % 6;
  double f = h6 - std::floor(h6);
  double p = v * (1.0 - s), q = v * (1.0 - f * s), t = v * (1.0 - (1.0 - f) * s);
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Rgb class_palette(int class_id) {
  double hue = fract(0.618033988749895 * (class_id + 1) + 0.11);
  return hsv_to_rgb(hue, 0.78, 0.92);
}

double box_cx(const Box& b) { return 0.5 * (b.x1 + b.x2); }
double box_cy(const Box& b) { return 0.5 * (b.y1 + b.y2); }

void paint_tissue(Tensor& img, const Box& box, int class_id, int h, int w, int c) {
  Rgb col = class_palette(class_id);
  double base[3] = {col.r, col.g, col.b};
  double cx = box_cx(box), cy = box_cy(box);
  double ax = 0.5 * (box.x2 - box.x1), ay = 0.5 * (box.y2 - box.y1);
  for (int y = box.y1; y < box.y2; ++y)
    for (int x = box.x1; x < box.x2; ++x) {
      double dx = (x + 0.5 - cx) / ax, dy = (y + 0.5 - cy) / ay;
      if (dx * dx + dy * dy > 1.0) continue;
      double tex = 0.85 + 0.15 * stable_sin(0.17 * x + 0.23 * y);
      for (int ch = 0; ch < c; ++ch)
        img[(static_cast<int64_t>(y) * w + x) * c + ch] = clamp01(base[ch % 3] * tex);
    }
}

void paint_instrument(Tensor& img, const Box& box, int class_id, int w, int c) {
  Rgb col = class_palette(class_id);
  double base[3] = {col.r, col.g, col.b};
  double omega = 0.45 + 0.22 * class_id;
  double theta = 0.7 * class_id;
  double fx = omega * stable_cos(theta), fy = omega * stable_sin(theta);
  for (int y = box.y1; y < box.y2; ++y)
    for (int x = box.x1; x < box.x2; ++x) {
      double stripe = stable_sin(fx * x + fy * y + 0.31 * class_id);
      double factor = stripe > 0.0 ? 1.0 : 0.42;
      for (int ch = 0; ch < c; ++ch)
        img[(static_cast<int64_t>(y) * w + x) * c + ch] = clamp01(base[ch % 3] * factor);
    }
}

Tensor render_frame(const std::vector<Node>& nodes, const DatasetConfig& cfg, Rng& rng) {
  int h = cfg.height, w = cfg.width, c = cfg.channels;
  Tensor img({h, w, c});
  double bg_hue = rng.uniform(0.0, 1.0);
  double phase = rng.uniform(0.0, 6.28);
  Rgb bg = hsv_to_rgb(bg_hue, 0.3, 0.32);
  double base[3] = {bg.r, bg.g, bg.b};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double grad = 0.10 * (static_cast<double>(y) / h);
      double tex = 0.02 * stable_sin(0.2 * x + phase);
      for (int ch = 0; ch < c; ++ch)
        img[(static_cast<int64_t>(y) * w + x) * c + ch] = clamp01(base[ch % 3] + grad + tex);
    }
  for (const auto& n : nodes)
    if (n.role == Role::Tissue) paint_tissue(img, n.bbox, n.class_id, h, w, c);
  for (const auto& n : nodes)
    if (n.role == Role::Instrument) paint_instrument(img, n.bbox, n.class_id, w, c);
  return img;
}

Box random_box(Rng& rng, int w, int h, double lo, double hi) {
  int bw = std::max(8, static_cast<int>(std::lround(rng.uniform(lo, hi) * w)));
  int bh = std::max(8, static_cast<int>(std::lround(rng.uniform(lo, hi) * h)));
  bw = std::min(bw, w - 1);
  bh = std::min(bh, h - 1);
  int x1 = static_cast<int>(rng.below(w - bw));
  int y1 = static_cast<int>(rng.below(h - bh));
  return {x1, y1, x1 + bw, y1 + bh};
}

Box tissue_box(Rng& rng, int w, int h) {
  int bw = static_cast<int>(std::lround(rng.uniform(0.45, 0.62) * w));
  int bh = static_cast<int>(std::lround(rng.uniform(0.45, 0.62) * h));
  int cx = w / 2 + static_cast<int>(std::lround(rng.uniform(-0.06, 0.06) * w));
  int cy = h / 2 + static_cast<int>(std::lround(rng.uniform(-0.06, 0.06) * h));
  int x1 = std::max(0, cx - bw / 2), y1 = std::max(0, cy - bh / 2);
  int x2 = std::min(w, x1 + bw), y2 = std::min(h, y1 + bh);
  return {x1, y1, x2, y2};
}

int primary_interaction(int instrument_class, int k_int) { return (instrument_class - 1) % k_int; }

}  // namespace

int Vocabulary::id(const std::string& tok) const {
  auto it = ids.find(tok);
  return it == ids.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary: token id out of range");
  return tokens[static_cast<size_t>(id)];
}

std::string class_name(int class_id) {
  return class_id == 0 ? std::string("tissue") : "tool" + std::to_string(class_id);
}

std::string interaction_name(int interaction_id) { return "act" + std::to_string(interaction_id); }

Vocabulary build_vocabulary(int k_cls, int k_int) {
  Vocabulary v;
  v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>", "is", "being", "by", "and"};
  for (int c = 0; c < k_cls; ++c) v.tokens.push_back(class_name(c));
  for (int i = 0; i < k_int; ++i) v.tokens.push_back(interaction_name(i));
  for (size_t i = 0; i < v.tokens.size(); ++i) v.ids[v.tokens[i]] = static_cast<int>(i);
  return v;
}

void DatasetConfig::validate() const {
  if (k_cls < 2) throw std::invalid_argument("dataset: k_cls must be >= 2");
  if (n_frames < 1) throw std::invalid_argument("dataset: n_frames must be >= 1");
  if (height < 32 || width < 32) throw std::invalid_argument("dataset: image must be at least 32x32");
  if (channels != 3) throw std::invalid_argument("dataset: channels must be 3");
  if (k_int < 1) throw std::invalid_argument("dataset: k_int must be >= 1");
  if (min_instruments < 1 || max_instruments < min_instruments)
    throw std::invalid_argument("dataset: bad instrument count range");
  if (max_instruments > k_cls - 1)
    throw std::invalid_argument("dataset: max_instruments exceeds instrument class count");
  int needed = 2 + 4 + 3 * (max_instruments - 1) + 1;
  if (max_caption_len < needed)
    throw std::invalid_argument("dataset: max_caption_len too small for the caption grammar");
}

std::string DatasetConfig::canonical_string() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "n=%d;kc=%d;ki=%d;h=%d;w=%d;c=%d;mi=%d;ma=%d;mcl=%d", n_frames,
                k_cls, k_int, height, width, channels, min_instruments, max_instruments,
                max_caption_len);
  return buf;
}

std::set<int> SceneDataset::class_set() const {
  std::set<int> s;
  for (const auto& f : frames)
    for (const auto& n : f.nodes) s.insert(n.class_id);
  return s;
}

SceneDataset generate_dataset(const DatasetConfig& config, uint64_t seed) {
  config.validate();
  SceneDataset ds;
  ds.config = config;
  ds.vocab = build_vocabulary(config.k_cls, config.k_int);
  ds.seed = seed;
  ds.domain = "base";
  Rng rng(mix_seed(seed, fnv1a_str("synthdata-generate")));

  // stratified class cycle so every instrument class keeps appearing
  std::vector<int> cycle;
  for (int c = 1; c < config.k_cls; ++c) cycle.push_back(c);
  rng.shuffle(cycle);
  size_t ptr = 0;
  auto next_class = [&]() {
    if (ptr == cycle.size()) {
      rng.shuffle(cycle);
      ptr = 0;
    }
    return cycle[ptr++];
  };

  const Vocabulary& v = ds.vocab;
  for (int fi = 0; fi < config.n_frames; ++fi) {
    SceneInstance frame;
    int n_inst = config.min_instruments +
                 static_cast<int>(rng.below(config.max_instruments - config.min_instruments + 1));
    std::vector<int> classes;
    while (static_cast<int>(classes.size()) < n_inst) {
      int c = next_class();
      if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
    }

    Node tissue;
    tissue.class_id = 0;
    tissue.role = Role::Tissue;
    tissue.bbox = tissue_box(rng, config.width, config.height);
    frame.nodes.push_back(tissue);
    for (int c : classes) {
      Node inst;
      inst.class_id = c;
      inst.role = Role::Instrument;
      inst.bbox = random_box(rng, config.width, config.height, 0.17, 0.28);
      frame.nodes.push_back(inst);
    }

    for (size_t ni = 1; ni < frame.nodes.size(); ++ni) {
      const Node& inst = frame.nodes[ni];
      Edge e;
      e.tissue_idx = 0;
      e.instrument_idx = static_cast<int>(ni);
      e.interactions.assign(static_cast<size_t>(config.k_int), 0);
      int p = primary_interaction(inst.class_id, config.k_int);
      e.interactions[static_cast<size_t>(p)] = 1;
      if (box_cx(inst.bbox) < box_cx(tissue.bbox))
        e.interactions[static_cast<size_t>((p + 1) % config.k_int)] = 1;
      frame.edges.push_back(e);
    }

    // caption clauses ordered by instrument class id
    std::vector<int> order(classes);
    std::sort(order.begin(), order.end());
    frame.caption = {Vocabulary::kBos, v.id(class_name(0)), v.id("is"), v.id("being")};
    for (size_t i = 0; i < order.size(); ++i) {
      if (i > 0) frame.caption.push_back(v.id("and"));
      frame.caption.push_back(v.id(interaction_name(primary_interaction(order[i], config.k_int))));
      frame.caption.push_back(v.id("by"));
      frame.caption.push_back(v.id(class_name(order[i])));
    }
    frame.caption.push_back(Vocabulary::kEos);
    if (static_cast<int>(frame.caption.size()) > config.max_caption_len)
      throw std::logic_error("generated caption exceeds max_caption_len");

    frame.image = render_frame(frame.nodes, config, rng);
    ds.frames.push_back(std::move(frame));
  }
  return ds;
}

Tensor apply_intensity_shift(const Tensor& image, const DomainShiftSpec& shift) {
  if (shift.is_identity_intensity()) return image;
  Tensor out = image;
  int64_t h = image.size(0), w = image.size(1), c = image.size(2);
  bool do_hue = shift.hue_rotation_degrees != 0.0 && c == 3;
  double rot[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  if (do_hue) {
    // rotation about the gray axis (1,1,1)/sqrt(3)
    double th = shift.hue_rotation_degrees * 3.14159265358979323846 / 180.0;
    double cs = stable_cos(th), sn = stable_sin(th);
    double a = 1.0 / std::sqrt(3.0);
    double k[3] = {a, a, a};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) rot[i][j] = (i == j ? cs : 0.0) + (1.0 - cs) * k[i] * k[j];
    rot[0][1] += -sn * k[2];
    rot[0][2] += sn * k[1];
    rot[1][0] += sn * k[2];
    rot[1][2] += -sn * k[0];
    rot[2][0] += -sn * k[1];
    rot[2][1] += sn * k[0];
  }
  for (int64_t p = 0; p < h * w; ++p) {
    double px[3] = {0, 0, 0};
    for (int64_t ch = 0; ch < c; ++ch) px[ch] = out[p * c + ch];
    if (do_hue) {
      double rr = rot[0][0] * px[0] + rot[0][1] * px[1] + rot[0][2] * px[2];
      double gg = rot[1][0] * px[0] + rot[1][1] * px[1] + rot[1][2] * px[2];
      double bb = rot[2][0] * px[0] + rot[2][1] * px[1] + rot[2][2] * px[2];
      px[0] = rr;
      px[1] = gg;
      px[2] = bb;
    }
    for (int64_t ch = 0; ch < c; ++ch)
      out[p * c + ch] = clamp01(0.5 + shift.contrast_scale * (px[ch] - 0.5) + shift.brightness_delta);
  }
  return out;
}

DomainSplit split_domains(const SceneDataset& ds, const DomainShiftSpec& shift, uint64_t seed) {
  if (shift.contrast_scale <= 0.0) throw std::invalid_argument("split_domains: contrast_scale must be > 0");
  if (shift.td_train_fraction <= 0.0 || shift.td_train_fraction > 1.0)
    throw std::invalid_argument("split_domains: td_train_fraction must be in (0,1]");
  for (int c : shift.novel_class_ids)
    if (c < 1 || c >= ds.config.k_cls)
      throw std::invalid_argument("split_domains: novel class id outside instrument range");

  auto has_novel = [&](const SceneInstance& f) {
    for (const auto& n : f.nodes)
      if (shift.novel_class_ids.count(n.class_id)) return true;
    return false;
  };

  std::vector<char> to_td(ds.frames.size(), 0);
  for (size_t i = 0; i < ds.frames.size(); ++i)
    if (has_novel(ds.frames[i])) to_td[i] = 1;
  // shifted copies of source-style frames keep the shared classes in TD
  size_t plain_seen = 0;
  for (size_t i = 0; i < ds.frames.size(); ++i) {
    if (to_td[i]) continue;
    if (plain_seen % 3 == 2) to_td[i] = 1;
    ++plain_seen;
  }

  auto classes_of = [&](bool td_side) {
    std::set<int> s;
    for (size_t i = 0; i < ds.frames.size(); ++i)
      if ((to_td[i] != 0) == td_side)
        for (const auto& n : ds.frames[i].nodes) s.insert(n.class_id);
    return s;
  };

  std::vector<int> sd_idx, td_idx;
  for (size_t i = 0; i < ds.frames.size(); ++i) (to_td[i] ? td_idx : sd_idx).push_back(static_cast<int>(i));

  // class-coverage repair by copying source frames (additions only, so the
  // repair terminates): TD must cover every class left in SD, and SD must
  // cover every non-novel class that ended up in TD
  auto frame_has = [&](int i, int cls) {
    for (const auto& n : ds.frames[static_cast<size_t>(i)].nodes)
      if (n.class_id == cls) return true;
    return false;
  };
  auto classes_of_idx = [&](const std::vector<int>& v) {
    std::set<int> s;
    for (int i : v)
      for (const auto& n : ds.frames[static_cast<size_t>(i)].nodes) s.insert(n.class_id);
    return s;
  };
  for (int pass = 0; pass < 2 * ds.config.k_cls; ++pass) {
    auto sd_classes = classes_of_idx(sd_idx);
    auto td_classes = classes_of_idx(td_idx);
    int fix = -1;
    bool into_td = false;
    for (int c : sd_classes)
      if (!td_classes.count(c)) {
        fix = c;
        into_td = true;
        break;
      }
    if (fix < 0)
      for (int c : td_classes)
        if (!sd_classes.count(c) && !shift.novel_class_ids.count(c)) {
          fix = c;
          break;
        }
    if (fix < 0) break;
    bool added = false;
    for (size_t i = 0; i < ds.frames.size() && !added; ++i) {
      int fi = static_cast<int>(i);
      if (!frame_has(fi, fix)) continue;
      if (into_td) {
        td_idx.push_back(fi);
        added = true;
      } else if (!has_novel(ds.frames[i])) {
        sd_idx.push_back(fi);
        added = true;
      }
    }
    if (!added)
      throw std::runtime_error("split_domains: class " + std::to_string(fix) +
                               " appears only alongside novel classes; cannot cover SD");
  }

  DomainSplit out;
  out.sd.config = ds.config;
  out.sd.vocab = ds.vocab;
  out.sd.seed = ds.seed;
  out.sd.domain = "sd";
  out.td.config = ds.config;
  out.td.vocab = ds.vocab;
  out.td.seed = ds.seed;
  out.td.domain = "td";
  for (int i : sd_idx) out.sd.frames.push_back(ds.frames[static_cast<size_t>(i)]);
  for (int i : td_idx) {
    SceneInstance f = ds.frames[static_cast<size_t>(i)];
    f.image = apply_intensity_shift(f.image, shift);
    out.td.frames.push_back(std::move(f));
  }
  if (out.td.frames.empty()) throw std::runtime_error("split_domains: empty target-domain split");
  if (out.sd.frames.empty()) throw std::runtime_error("split_domains: empty source-domain split");

  auto sd_classes = out.sd.class_set();
  for (int c : shift.novel_class_ids)
    if (sd_classes.count(c)) throw std::logic_error("split_domains: novel class leaked into SD");
  auto td_classes = out.td.class_set();
  for (int c : td_classes)
    if (!sd_classes.count(c) && !shift.novel_class_ids.count(c))
      throw std::logic_error("split_domains: TD holds a class absent from SD and not novel");

  // few-shot training split for TD, 20% validation split for SD
  int n_td = static_cast<int>(out.td.frames.size());
  int n_train = static_cast<int>(std::ceil(shift.td_train_fraction * n_td));
  auto perm = shuffled_indices(n_td, mix_seed(seed, fnv1a_str("td-train-split")));
  out.td.train_ids.assign(perm.begin(), perm.begin() + n_train);
  out.td.val_ids.assign(perm.begin() + n_train, perm.end());
  std::sort(out.td.train_ids.begin(), out.td.train_ids.end());
  std::sort(out.td.val_ids.begin(), out.td.val_ids.end());
  if (out.td.val_ids.empty()) {
    out.td.val_ids = out.td.train_ids;  // degenerate tiny split: validate on the train frames
  }

  int n_sd = static_cast<int>(out.sd.frames.size());
  int n_val = std::max(1, static_cast<int>(std::ceil(0.2 * n_sd)));
  auto sperm = shuffled_indices(n_sd, mix_seed(seed, fnv1a_str("sd-val-split")));
  out.sd.val_ids.assign(sperm.begin(), sperm.begin() + n_val);
  out.sd.train_ids.assign(sperm.begin() + n_val, sperm.end());
  std::sort(out.sd.train_ids.begin(), out.sd.train_ids.end());
  std::sort(out.sd.val_ids.begin(), out.sd.val_ids.end());
  return out;
}

std::vector<double> encode_spatial_feature(const Box& a, const Box& b, int image_w, int image_h) {
  auto validate = [&](const Box& bx) {
    if (!(0 <= bx.x1 && bx.x1 < bx.x2 && bx.x2 <= image_w && 0 <= bx.y1 && bx.y1 < bx.y2 &&
          bx.y2 <= image_h))
      throw std::invalid_argument("encode_spatial_feature: invalid or zero-area box");
  };
  validate(a);
  validate(b);
  double w = image_w, h = image_h;
  double wa = (a.x2 - a.x1) / w, ha = (a.y2 - a.y1) / h;
  double wb = (b.x2 - b.x1) / w, hb = (b.y2 - b.y1) / h;
  double cxa = box_cx(a) / w, cya = box_cy(a) / h;
  double cxb = box_cx(b) / w, cyb = box_cy(b) / h;
  return {cxa, cya, wa, ha, cxb, cyb, wb, hb, cxa - cxb, cya - cyb, wa * ha, wb * hb};
}

Tensor semantic_embedding(int class_id, int dim) {
  if (class_id < 0) throw std::invalid_argument("semantic_embedding: class_id must be >= 0");
  if (dim < 1) throw std::invalid_argument("semantic_embedding: dim must be >= 1");
  Rng rng(mix_seed(fnv1a_str("semantic-embedding"), static_cast<uint64_t>(class_id)));
  Tensor v({dim});
  double norm2 = 0.0;
  for (int i = 0; i < dim; ++i) {
    v[i] = rng.normal();
    norm2 += v[i] * v[i];
  }
  double nr = std::sqrt(norm2);
  for (int i = 0; i < dim; ++i) v[i] /= nr;
  return v;
}

Tensor crop_resize(const Tensor& image_hwc, const Box& box, int out_size) {
  int64_t h = image_hwc.size(0), w = image_hwc.size(1), c = image_hwc.size(2);
  Tensor out({c, out_size, out_size});
  double bw = box.x2 - box.x1, bh = box.y2 - box.y1;
  for (int oy = 0; oy < out_size; ++oy)
    for (int ox = 0; ox < out_size; ++ox) {
      double sy = box.y1 + (oy + 0.5) * bh / out_size - 0.5;
      double sx = box.x1 + (ox + 0.5) * bw / out_size - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(sy)), x0 = static_cast<int64_t>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      y0 = std::max<int64_t>(0, std::min(y0, h - 1));
      x0 = std::max<int64_t>(0, std::min(x0, w - 1));
      for (int64_t ch = 0; ch < c; ++ch) {
        double v00 = image_hwc[(y0 * w + x0) * c + ch], v01 = image_hwc[(y0 * w + x1) * c + ch];
        double v10 = image_hwc[(y1 * w + x0) * c + ch], v11 = image_hwc[(y1 * w + x1) * c + ch];
        double top = v00 * (1.0 - fx) + v01 * fx;
        double bot = v10 * (1.0 - fx) + v11 * fx;
        out[(ch * out_size + oy) * out_size + ox] = top * (1.0 - fy) + bot * fy;
      }
    }
  return out;
}

Tensor augment_crop(const Tensor& crop_chw, Rng& rng) {
  int64_t c = crop_chw.size(0), s = crop_chw.size(1);
  double bright = rng.uniform(-0.1, 0.1);
  double contrast = rng.uniform(0.9, 1.1);
  bool flip = rng.uniform() < 0.5;
  Tensor out(crop_chw.shape());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        int64_t sx = flip ? s - 1 - x : x;
        double v = crop_chw[(ch * s + y) * s + sx];
        out[(ch * s + y) * s + x] = clamp01(0.5 + contrast * (v - 0.5) + bright);
      }
  return out;
}

void save_dataset(const SceneDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  io::json manifest;
  manifest["format_version"] = 1;
  manifest["domain"] = ds.domain;
  manifest["seed"] = ds.seed;
  manifest["config"] = {{"n_frames", ds.config.n_frames}, {"k_cls", ds.config.k_cls},
                        {"k_int", ds.config.k_int},       {"height", ds.config.height},
                        {"width", ds.config.width},       {"channels", ds.config.channels},
                        {"min_instruments", ds.config.min_instruments},
                        {"max_instruments", ds.config.max_instruments},
                        {"max_caption_len", ds.config.max_caption_len}};
  manifest["config_hash"] = fnv1a_str(ds.config.canonical_string());
  manifest["n_stored_frames"] = ds.frames.size();
  manifest["vocab"] = ds.vocab.tokens;
  manifest["train_ids"] = ds.train_ids;
  manifest["val_ids"] = ds.val_ids;
  io::write_json_atomic(dir / "manifest.json", manifest);

  char name[32];
  for (size_t i = 0; i < ds.frames.size(); ++i) {
    const auto& f = ds.frames[i];
    std::snprintf(name, sizeof(name), "%05zu", i);
    io::write_tensor(dir / "frames" / (std::string(name) + ".img"), f.image);
    io::json side;
    side["caption"] = f.caption;
    side["nodes"] = io::json::array();
    for (const auto& n : f.nodes)
      side["nodes"].push_back({{"class_id", n.class_id},
                               {"role", n.role == Role::Tissue ? "tissue" : "instrument"},
                               {"bbox", {n.bbox.x1, n.bbox.y1, n.bbox.x2, n.bbox.y2}}});
    side["edges"] = io::json::array();
    for (const auto& e : f.edges)
      side["edges"].push_back({{"a", e.tissue_idx}, {"b", e.instrument_idx}, {"hot", e.interactions}});
    io::write_json_atomic(dir / "frames" / (std::string(name) + ".json"), side);
  }
}

SceneDataset load_dataset(const std::filesystem::path& dir) {
  auto manifest = io::read_json(dir / "manifest.json");
  SceneDataset ds;
  ds.domain = manifest.at("domain").get<std::string>();
  ds.seed = manifest.at("seed").get<uint64_t>();
  const auto& c = manifest.at("config");
  ds.config.n_frames = c.at("n_frames").get<int>();
  ds.config.k_cls = c.at("k_cls").get<int>();
  ds.config.k_int = c.at("k_int").get<int>();
  ds.config.height = c.at("height").get<int>();
  ds.config.width = c.at("width").get<int>();
  ds.config.channels = c.at("channels").get<int>();
  ds.config.min_instruments = c.at("min_instruments").get<int>();
  ds.config.max_instruments = c.at("max_instruments").get<int>();
  ds.config.max_caption_len = c.at("max_caption_len").get<int>();
  ds.vocab.tokens = manifest.at("vocab").get<std::vector<std::string>>();
  for (size_t i = 0; i < ds.vocab.tokens.size(); ++i) ds.vocab.ids[ds.vocab.tokens[i]] = static_cast<int>(i);
  ds.train_ids = manifest.at("train_ids").get<std::vector<int>>();
  ds.val_ids = manifest.at("val_ids").get<std::vector<int>>();
  if (manifest.at("config_hash").get<uint64_t>() != fnv1a_str(ds.config.canonical_string()))
    throw std::runtime_error("load_dataset: manifest config hash mismatch");

  size_t n = manifest.at("n_stored_frames").get<size_t>();
  char name[32];
  for (size_t i = 0; i < n; ++i) {
    std::snprintf(name, sizeof(name), "%05zu", i);
    SceneInstance f;
    f.image = io::read_tensor(dir / "frames" / (std::string(name) + ".img"));
    auto side = io::read_json(dir / "frames" / (std::string(name) + ".json"));
    f.caption = side.at("caption").get<std::vector<int>>();
    for (const auto& nj : side.at("nodes")) {
      Node nd;
      nd.class_id = nj.at("class_id").get<int>();
      nd.role = nj.at("role").get<std::string>() == "tissue" ? Role::Tissue : Role::Instrument;
      auto bb = nj.at("bbox").get<std::vector<int>>();
      nd.bbox = {bb[0], bb[1], bb[2], bb[3]};
      f.nodes.push_back(nd);
    }
    for (const auto& ej : side.at("edges")) {
      Edge e;
      e.tissue_idx = ej.at("a").get<int>();
      e.instrument_idx = ej.at("b").get<int>();
      e.interactions = ej.at("hot").get<std::vector<uint8_t>>();
      f.edges.push_back(e);
    }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

bool datasets_bitwise_equal(const SceneDataset& a, const SceneDataset& b) {
  if (a.domain != b.domain || a.seed != b.seed) return false;
  if (a.config.canonical_string() != b.config.canonical_string()) return false;
  if (a.vocab.tokens != b.vocab.tokens) return false;
  if (a.train_ids != b.train_ids || a.val_ids != b.val_ids) return false;
  if (a.frames.size() != b.frames.size()) return false;
  for (size_t i = 0; i < a.frames.size(); ++i) {
    const auto& fa = a.frames[i];
    const auto& fb = b.frames[i];
    if (!bitwise_equal(fa.image, fb.image)) return false;
    if (fa.caption != fb.caption) return false;
    if (fa.nodes.size() != fb.nodes.size() || fa.edges.size() != fb.edges.size()) return false;
    for (size_t j = 0; j < fa.nodes.size(); ++j) {
      const auto& na = fa.nodes[j];
      const auto& nb = fb.nodes[j];
      if (na.class_id != nb.class_id || na.role != nb.role || na.bbox.x1 != nb.bbox.x1 ||
          na.bbox.y1 != nb.bbox.y1 || na.bbox.x2 != nb.bbox.x2 || na.bbox.y2 != nb.bbox.y2)
        return false;
    }
    for (size_t j = 0; j < fa.edges.size(); ++j) {
      const auto& ea = fa.edges[j];
      const auto& eb = fb.edges[j];
      if (ea.tissue_idx != eb.tissue_idx || ea.instrument_idx != eb.instrument_idx ||
          ea.interactions != eb.interactions)
        return false;
    }
  }
  return true;
}

}  // namespace mtl::synth
