#include "pyrec/model.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "pyrec/errors.hpp"
#include "pyrec/rng.hpp"

namespace pyrec {

namespace {

Tensor normal_param(Shape shape, float stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (float& v : t.mutable_data()) v = stddev * rng.gauss();
  return t;
}

Tensor xavier_param(int fan_in, int fan_out, Rng& rng) {
  const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
  return normal_param({fan_in, fan_out}, stddev, rng);
}

}  // namespace

void ModelConfig::validate() const {
  if (d <= 0 || layers <= 0 || heads <= 0 || scales <= 0 || patch <= 0 || channels <= 0 ||
      vocab <= 0 || text_len < 0 || image <= 0)
    throw ConfigError("model config: nonpositive extent");
  if (d % heads != 0)
    throw ConfigError("model config: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const int div = patch << (scales - 1);
  if (image % div != 0)
    throw ConfigError("model config: image side " + std::to_string(image) +
                      " must be divisible by patch*2^(S-1) = " + std::to_string(div));
  if (split < 1 || split > layers || (split == layers && scales > 1))
    throw ConfigError("model config: encoder split must leave layers on both sides");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d = 768;
  c.layers = 12;
  c.heads = 12;
  c.scales = 3;
  c.patch = 32;
  c.text_len = 40;
  c.vocab = 30522;
  c.image = 640;
  c.split = 6;
  return c;
}

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(seed);
  m.emb = EmbeddingTables::init(cfg.d, cfg.vocab, cfg.text_len, cfg.patch_dim(), rng);
  m.layers.resize(static_cast<size_t>(cfg.layers));
  for (auto& lp : m.layers) {
    lp.ln1_g = Tensor::full({cfg.d}, 1.0f, true);
    lp.ln1_b = Tensor::zeros({cfg.d}, true);
    lp.wq = xavier_param(cfg.d, cfg.d, rng);
    lp.bq = Tensor::zeros({cfg.d}, true);
    lp.wk = xavier_param(cfg.d, cfg.d, rng);
    lp.bk = Tensor::zeros({cfg.d}, true);
    lp.wv = xavier_param(cfg.d, cfg.d, rng);
    lp.bv = Tensor::zeros({cfg.d}, true);
    lp.wo = xavier_param(cfg.d, cfg.d, rng);
    lp.bo = Tensor::zeros({cfg.d}, true);
    lp.ln2_g = Tensor::full({cfg.d}, 1.0f, true);
    lp.ln2_b = Tensor::zeros({cfg.d}, true);
    lp.ffn_w1 = xavier_param(cfg.d, 4 * cfg.d, rng);
    lp.ffn_b1 = Tensor::zeros({4 * cfg.d}, true);
    lp.ffn_w2 = xavier_param(4 * cfg.d, cfg.d, rng);
    lp.ffn_b2 = Tensor::zeros({cfg.d}, true);
  }
  m.sel_heads.resize(static_cast<size_t>(cfg.scales - 1));
  for (auto& sh : m.sel_heads) {
    sh.w = normal_param({cfg.d, 4}, 0.02f, rng);
    sh.b = Tensor::zeros({4}, true);
  }
  m.box_head.w1 = xavier_param(cfg.d, cfg.d, rng);
  m.box_head.b1 = Tensor::zeros({cfg.d}, true);
  m.box_head.w2 = xavier_param(cfg.d, cfg.d, rng);
  m.box_head.b2 = Tensor::zeros({cfg.d}, true);
  m.box_head.w3 = xavier_param(cfg.d, 4, rng);
  m.box_head.b3 = Tensor::zeros({4}, true);
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto put = [&out](const std::string& name, const Tensor& t) { out.emplace_back(name, t); };
  put("embed.word", emb.word);
  put("embed.cls", emb.cls);
  put("embed.text_pos", emb.text_pos);
  put("embed.text_type", emb.text_type);
  put("embed.patch_proj", emb.patch_proj);
  put("embed.image_type", emb.image_type);
  put("embed.reg", emb.reg);
  put("embed.constant", emb.constant);
  put("embed.pse_w1", emb.pse_w1);
  put("embed.pse_b1", emb.pse_b1);
  put("embed.pse_w2", emb.pse_w2);
  put("embed.pse_b2", emb.pse_b2);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    const auto& lp = layers[i];
    put(p + "ln1_g", lp.ln1_g);
    put(p + "ln1_b", lp.ln1_b);
    put(p + "wq", lp.wq);
    put(p + "bq", lp.bq);
    put(p + "wk", lp.wk);
    put(p + "bk", lp.bk);
    put(p + "wv", lp.wv);
    put(p + "bv", lp.bv);
    put(p + "wo", lp.wo);
    put(p + "bo", lp.bo);
    put(p + "ln2_g", lp.ln2_g);
    put(p + "ln2_b", lp.ln2_b);
    put(p + "ffn_w1", lp.ffn_w1);
    put(p + "ffn_b1", lp.ffn_b1);
    put(p + "ffn_w2", lp.ffn_w2);
    put(p + "ffn_b2", lp.ffn_b2);
  }
  for (size_t l = 0; l < sel_heads.size(); ++l) {
    const std::string p = "select" + std::to_string(l) + ".";
    put(p + "w", sel_heads[l].w);
    put(p + "b", sel_heads[l].b);
  }
  put("box.w1", box_head.w1);
  put("box.b1", box_head.b1);
  put("box.w2", box_head.w2);
  put("box.b2", box_head.b2);
  put("box.w3", box_head.w3);
  put("box.b3", box_head.b3);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Model::zero_grad() const {
  for (Tensor t : parameters()) t.zero_grad();
}

float ScaleTrace::mean_factor() const {
  if (factors.empty()) return 0.0f;
  float acc = 0.0f;
  for (const auto& f : factors) acc += f.s;
  return acc / static_cast<float>(factors.size());
}

std::vector<std::array<float, 4>> ScanState::boxes() const {
  std::vector<std::array<float, 4>> out;
  out.reserve(scales.size());
  for (const auto& tr : scales) out.push_back(tr.box);
  return out;
}

Tensor predict_box(const BoxHead& head, const Tensor& reg_feat) {
  Tensor h1 = gelu(add_row(matmul(reg_feat, head.w1), head.b1));
  Tensor h2 = gelu(add_row(matmul(h1, head.w2), head.b2));
  return sigmoid(add_row(matmul(h2, head.w3), head.b3));
}

// ---------------------------------------------------------------------------
// Scanner

Scanner::Scanner(const Model& model, const ScanOptions& opts)
    : m_(model), opts_(opts), outer_counter_(mac_counter()) {
  m_.cfg.validate();
  state_.cache = KVCache(m_.cfg.layers);
  state_.flops.scale_macs.assign(static_cast<size_t>(m_.cfg.scales), 0);
}

LayerIO encoder_layer(const LayerParams& lp, const Tensor& x, const KVCache& cache,
                      int layer_index, std::span<const float> cur_mult, int heads) {
  LayerIO io;
  Tensor xn = layer_norm(x, lp.ln1_g, lp.ln1_b);
  Tensor q = add_row(matmul(xn, lp.wq), lp.bq);
  io.keys = add_row(matmul(xn, lp.wk), lp.bk);
  io.values = add_row(matmul(xn, lp.wv), lp.bv);
  auto segs = attend_list(cache, layer_index,
                          AttnSegment{io.keys, io.values,
                                      std::vector<float>(cur_mult.begin(), cur_mult.end())});
  Tensor attn =
      multihead_attention(q, std::span<const AttnSegment>(segs.data(), segs.size()), heads);
  Tensor mid = add(x, add_row(matmul(attn, lp.wo), lp.bo));
  Tensor x2n = layer_norm(mid, lp.ln2_g, lp.ln2_b);
  Tensor h = gelu(add_row(matmul(x2n, lp.ffn_w1), lp.ffn_b1));
  io.out = add(mid, add_row(matmul(h, lp.ffn_w2), lp.ffn_b2));
  return io;
}

Tensor Scanner::run_layers(Tensor x, int segment_index, int const_row, float const_mult,
                           Tensor* enc1_out) {
  const auto& cfg = m_.cfg;
  const int n = x.rows();
  std::vector<float> cur_mult;
  if (const_row >= 0) {
    cur_mult.assign(static_cast<size_t>(n), 1.0f);
    cur_mult[static_cast<size_t>(const_row)] = const_mult;
  }
  for (int i = 0; i < cfg.layers; ++i) {
    const auto& lp = m_.layers[static_cast<size_t>(i)];
    LayerIO io = encoder_layer(lp, x, state_.cache, i,
                               std::span<const float>(cur_mult.data(), cur_mult.size()),
                               cfg.heads);
    x = io.out;
    Tensor ck = io.keys, cv = io.values;
    if (opts_.cache_grads == CacheGrads::kCut && grad_enabled()) {
      ck = ck.detach();
      cv = cv.detach();
    }
    CacheSegment seg;
    if (const_row >= 0) {
      seg.const_key = slice_rows(ck, const_row, 1);
      seg.const_value = slice_rows(cv, const_row, 1);
      seg.const_mult = const_mult;
      if (const_row == 0) {
        seg.keys = slice_rows(ck, 1, n - 1);
        seg.values = slice_rows(cv, 1, n - 1);
      } else if (const_row == n - 1) {
        seg.keys = slice_rows(ck, 0, n - 1);
        seg.values = slice_rows(cv, 0, n - 1);
      } else {
        seg.keys = concat_rows({slice_rows(ck, 0, const_row),
                                slice_rows(ck, const_row + 1, n - 1 - const_row)});
        seg.values = concat_rows({slice_rows(cv, 0, const_row),
                                  slice_rows(cv, const_row + 1, n - 1 - const_row)});
      }
    } else {
      seg.keys = ck;
      seg.values = cv;
    }
    state_.cache.append_segment(i, segment_index, std::move(seg));
    if (i + 1 == cfg.split && enc1_out) *enc1_out = x;
  }
  return x;
}

void Scanner::forward_text(const std::vector<int>& ids) {
  if (state_.cache.completed(0) != 0)
    throw ContractError("forward_text: cache is not empty");
  std::optional<NoGradGuard> ng;
  if (opts_.mode == ScanMode::kEval) ng.emplace();
  MacCounter mc;
  {
    MacCounterScope scope(&mc);
    std::vector<int> clean;
    clean.reserve(ids.size());
    for (int id : ids)
      if (id != ModelConfig::kPadId) clean.push_back(id);  // pads never reach attention
    TokenSequence seq = embed_text(m_.emb, clean);
    run_layers(seq.feats, /*segment_index=*/0, /*const_row=*/-1, 0.0f, nullptr);
    state_.text_tokens = seq.size();
  }
  state_.flops.text_macs = mc.macs;
  if (outer_counter_) outer_counter_->macs += mc.macs;
}

Scanner::ScaleOut Scanner::forward_scale(int level, const ImagePyramid& pyr,
                                         const LevelFactors& factors) {
  const auto& cfg = m_.cfg;
  if (level < 0 || level >= cfg.scales) throw ContractError("forward_scale: bad level");
  if (state_.cache.completed(0) != level + 1)
    throw ContractError("forward_scale: scale " + std::to_string(level) +
                        " out of order (have " + std::to_string(state_.cache.completed(0)) +
                        " segments)");
  if (pyr.scales() != cfg.scales) throw ConfigError("forward_scale: pyramid scale count mismatch");
  const Image& img = pyr.levels[static_cast<size_t>(level)];
  if (img.h != cfg.level_side(level) || img.w != cfg.level_side(level))
    throw ConfigError("forward_scale: level image side mismatch");

  std::optional<NoGradGuard> ng;
  if (opts_.mode == ScanMode::kEval) ng.emplace();
  MacCounter mc;
  ScaleOut out;
  {
    MacCounterScope scope(&mc);
    PatchSet ps = patchify(img, cfg.patch, level);
    const int total = ps.grid.count();
    if (static_cast<int>(factors.records.size()) != total)
      throw ContractError("forward_scale: factor count mismatch");

    const bool eval = opts_.mode == ScanMode::kEval;
    int const_row = -1;
    float mult = 0.0f;
    std::vector<int> kept_rows;   // grid indices that stay physical content
    std::vector<int> parent_rows; // grid index per selectable row of x
    Tensor x;
    Tensor reg_row = add(m_.emb.reg, m_.emb.image_type);

    if (level == 0 || !eval) {
      // every patch materialized; blend with factors above level 0
      TokenSequence seq = embed_patches(m_.emb, ps);
      Tensor body = seq.feats;
      if (level > 0) {
        Tensor s = factors.s;
        if (eval) {
          std::vector<float> sv(static_cast<size_t>(total));
          for (int i = 0; i < total; ++i) sv[static_cast<size_t>(i)] = factors.keep[static_cast<size_t>(i)] ? 1.0f : 0.0f;
          s = Tensor::from({total}, std::move(sv));
        }
        body = replace_tokens(body, s, const_token(m_.emb));
      }
      x = concat_rows({body, reg_row});
      parent_rows.resize(static_cast<size_t>(total));
      std::iota(parent_rows.begin(), parent_rows.end(), 0);
      if (eval && level > 0) {
        for (int i = 0; i < total; ++i)
          if (factors.keep[static_cast<size_t>(i)]) kept_rows.push_back(i);
      } else {
        kept_rows = parent_rows;
      }
    } else {
      // merged evaluation: physical rows are the kept patches, one shared
      // representative stands for every replaced token
      for (int i = 0; i < total; ++i)
        if (factors.keep[static_cast<size_t>(i)]) kept_rows.push_back(i);
      const int kc = static_cast<int>(kept_rows.size());
      const int n_c = total - kc;
      PatchSet sub;
      sub.level = level;
      sub.grid = ps.grid;
      sub.patch = ps.patch;
      sub.channels = ps.channels;
      const int width = ps.flat.cols();
      std::vector<float> flat(static_cast<size_t>(kc) * width);
      sub.coords.resize(static_cast<size_t>(kc));
      for (int i = 0; i < kc; ++i) {
        const int src = kept_rows[static_cast<size_t>(i)];
        std::copy_n(ps.flat.data().data() + size_t(src) * width, width,
                    flat.data() + size_t(i) * width);
        sub.coords[static_cast<size_t>(i)] = ps.coords[static_cast<size_t>(src)];
      }
      sub.flat = Tensor::from({kc, width}, std::move(flat));
      TokenSequence seq = embed_patches(m_.emb, sub);
      std::vector<Tensor> parts;
      if (kc > 0) parts.push_back(seq.feats);
      if (n_c > 0) {
        parts.push_back(const_token(m_.emb));
        const_row = kc;
        mult = static_cast<float>(n_c);
      }
      parts.push_back(reg_row);
      x = concat_rows(std::span<const Tensor>(parts.data(), parts.size()));
      parent_rows = kept_rows;
    }

    Tensor enc1;
    Tensor xf = run_layers(x, level + 1, const_row, mult, &enc1);
    Tensor box_t = predict_box(m_.box_head, slice_rows(xf, xf.rows() - 1, 1));

    ScaleTrace tr;
    tr.box = {box_t.at(static_cast<size_t>(0)), box_t.at(static_cast<size_t>(1)),
              box_t.at(static_cast<size_t>(2)), box_t.at(static_cast<size_t>(3))};
    if (!eval) tr.box_tensor = box_t;
    tr.factors = factors.records;
    if (!eval && level > 0) tr.factor_tensor = factors.s;
    tr.total = total;
    tr.kept = static_cast<int>(kept_rows.size());
    tr.replaced = eval ? total - tr.kept : 0;
    tr.kept_rows = kept_rows;
    state_.scales.push_back(std::move(tr));

    out.box = box_t;
    if (level + 1 < cfg.scales) {
      ChildLogits cl;
      cl.child_grid = cfg.level_grid(level + 1);
      Tensor parent_feats = slice_rows(enc1, 0, static_cast<int>(parent_rows.size()));
      cl.rows = child_logit_rows(parent_feats, m_.sel_heads[static_cast<size_t>(level)]);
      cl.index_map = child_index_map(ps.grid, cl.child_grid,
                                     std::span<const int>(parent_rows.data(), parent_rows.size()));
      cl.flat.assign(static_cast<size_t>(cl.child_grid.count()), 0.0f);
      for (int c = 0; c < cl.child_grid.count(); ++c) {
        const int at = cl.index_map[static_cast<size_t>(c)];
        if (at >= 0) cl.flat[static_cast<size_t>(c)] = cl.rows.at(static_cast<size_t>(at));
      }
      out.children = std::move(cl);
    }
  }
  state_.flops.scale_macs[static_cast<size_t>(level)] = mc.macs;
  if (outer_counter_) outer_counter_->macs += mc.macs;
  return out;
}

LevelFactors Scanner::ones_factors(int level) const {
  const int n = m_.cfg.level_tokens(level);
  LevelFactors f;
  f.all_ones = true;
  f.records.resize(static_cast<size_t>(n));
  for (auto& r : f.records) {
    r.logit = 0.0f;
    r.noise = 0.0f;
    r.branch_draw = 0.0f;
    r.soft = 1.0f;
    r.hard = 1.0f;
    r.s = 1.0f;
    r.used_hard = true;
  }
  f.keep.assign(static_cast<size_t>(n), 1);
  return f;
}

LevelFactors Scanner::next_factors(int level, const ChildLogits& children,
                                   const LevelFactors& parent) {
  const auto& cfg = m_.cfg;
  if (level + 1 >= cfg.scales)
    throw ContractError("next_factors: the finest level has no children");
  const GridShape pgrid = cfg.level_grid(level);
  const GridShape cgrid = children.child_grid;
  const int n_child = cgrid.count();

  auto parent_of = [&](int c) {
    const int row = c / cgrid.cols, col = c % cgrid.cols;
    return (row / 2) * pgrid.cols + col / 2;
  };

  LevelFactors f;
  if (opts_.mode == ScanMode::kEval) {
    f.keep.assign(static_cast<size_t>(n_child), 0);
    f.records.resize(static_cast<size_t>(n_child));
    for (int c = 0; c < n_child; ++c) {
      auto& rec = f.records[static_cast<size_t>(c)];
      const int pidx = parent_of(c);
      const bool parent_kept = parent.all_ones || parent.keep[static_cast<size_t>(pidx)] != 0;
      const int at = children.index_map[static_cast<size_t>(c)];
      if (!parent_kept || at < 0) {
        rec = SelectionFactor{};  // dropped without consulting its logit
        rec.used_hard = true;
        continue;
      }
      const float r = children.flat[static_cast<size_t>(c)];
      rec.logit = r;
      rec.soft = sharp_sigmoid_value(r);
      rec.hard = r >= 0.0f ? 1.0f : 0.0f;
      rec.s = rec.hard;
      rec.used_hard = true;
      f.keep[static_cast<size_t>(c)] = rec.hard > 0.0f ? 1 : 0;
    }
    return f;
  }

  // training path: arrange the [P x 4] block into child order, sample, gate
  std::vector<int> gather_ids(static_cast<size_t>(n_child));
  for (int c = 0; c < n_child; ++c) {
    const int at = children.index_map[static_cast<size_t>(c)];
    if (at < 0) throw ContractError("next_factors: missing parent row in training mode");
    gather_ids[static_cast<size_t>(c)] = at;
  }
  Tensor flat_col = reshape(children.rows, {children.rows.rows() * 4, 1});
  Tensor arranged = reshape(gather_rows(flat_col, std::move(gather_ids)), {n_child});
  NoiseSource noise{opts_.noise_seed};
  SelectionSample samp = sample_selection(arranged, opts_.mode, noise, level + 1, opts_.force);

  Tensor s = samp.s;
  if (!parent.all_ones) {
    std::vector<int> pids(static_cast<size_t>(n_child));
    for (int c = 0; c < n_child; ++c) pids[static_cast<size_t>(c)] = parent_of(c);
    Tensor pcol = reshape(parent.s, {static_cast<int>(parent.s.numel()), 1});
    Tensor pg = reshape(gather_rows(pcol, std::move(pids)), {n_child});
    s = mul(s, pg);
    for (int c = 0; c < n_child; ++c)
      samp.records[static_cast<size_t>(c)].s *=
          parent.records[static_cast<size_t>(parent_of(c))].s;
  }
  f.records = std::move(samp.records);
  f.s = s;
  return f;
}

ScanState scan_pyramid(const Model& model, const ImagePyramid& pyr,
                       const std::vector<int>& text_ids, const ScanOptions& opts) {
  Scanner sc(model, opts);
  sc.forward_text(text_ids);
  LevelFactors factors = sc.ones_factors(0);
  for (int l = 0; l < model.cfg.scales; ++l) {
    auto out = sc.forward_scale(l, pyr, factors);
    if (l + 1 < model.cfg.scales) factors = sc.next_factors(l, *out.children, factors);
  }
  return sc.finish();
}

ScanState scan(const Model& model, const Image& image, const std::vector<int>& text_ids,
               const ScanOptions& opts) {
  if (image.h != model.cfg.image || image.w != model.cfg.image ||
      image.c != model.cfg.channels)
    throw ConfigError("scan: image extents do not match the model configuration");
  ImagePyramid pyr = build_pyramid(image, model.cfg.scales);
  return scan_pyramid(model, pyr, text_ids, opts);
}

}  // namespace pyrec
