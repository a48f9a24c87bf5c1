#include <algorithm>
#include <cmath>

#include "stpnet/blocks.hpp"

namespace stpnet {

void validate(const StpnetConfig& cfg) {
  require(cfg.in_channels >= 1, Status::InvalidArgument, "config: in_channels >= 1");
  require(cfg.image_size >= 16 && cfg.image_size % 16 == 0, Status::InvalidArgument,
          "config: image_size must be a positive multiple of 16");
  require(cfg.L >= 1 && cfg.D >= 1, Status::InvalidArgument, "config: L, D >= 1");
  require(cfg.heads >= 1, Status::InvalidArgument, "config: heads >= 1");
  for (int64_t c : cfg.base_channels)
    require(c >= 1, Status::InvalidArgument, "config: channels >= 1");
  for (int stage = std::max(2, cfg.utrans_from_stage); stage <= 4; ++stage)
    require(cfg.base_channels[size_t(stage)] % cfg.heads == 0, Status::InvalidArgument,
            "config: attention-stage channels must divide by heads");
  for (int d : cfg.dilations)
    require(d >= 1, Status::InvalidArgument, "config: dilations >= 1");
  require(cfg.tau > 0.0, Status::InvalidArgument, "config: tau > 0");
  require(cfg.gamma >= 0.0, Status::InvalidArgument, "config: gamma >= 0");
  require(cfg.utrans_from_stage >= 2, Status::InvalidArgument,
          "config: utrans_from_stage >= 2 (stage-1 token count is unbounded)");
  require(cfg.domain == "lung" || cfg.domain == "polyp", Status::InvalidArgument,
          "config: unknown domain");
}

template <typename T>
EnBlock<T> EnBlock<T>::create(ParamStore<T>& ps, const std::string& name, int64_t ci,
                              int64_t co, uint64_t seed) {
  EnBlock b;
  b.conv1 = Conv2dLayer<T>::create(ps, name + ".conv1", ci, co, 3, 1, 1, 1, 1, false,
                                   seed);
  b.bn1 = BatchNorm2dLayer<T>::create(ps, name + ".bn1", co);
  b.conv2 = Conv2dLayer<T>::create(ps, name + ".conv2", co, co, 3, 1, 1, 1, 1, false,
                                   seed);
  b.bn2 = BatchNorm2dLayer<T>::create(ps, name + ".bn2", co);
  return b;
}

template <typename T>
Var EnBlock<T>::forward(Ctx<T>& ctx, Var x) const {
  x = ctx.tape.relu(bn1.forward(ctx, conv1.forward(ctx, x)));
  return ctx.tape.relu(bn2.forward(ctx, conv2.forward(ctx, x)));
}

template <typename T>
MTBlock<T> MTBlock<T>::create(ParamStore<T>& ps, const std::string& name, int64_t ci,
                              int64_t co, uint64_t seed) {
  MTBlock b;
  b.bn = BatchNorm2dLayer<T>::create(ps, name + ".bn", ci + 1);
  b.conv = Conv2dLayer<T>::create(ps, name + ".conv", ci + 1, co, 3, 1, 1, 1, 1, false,
                                  seed);
  return b;
}

template <typename T>
Var MTBlock<T>::forward(Ctx<T>& ctx, Var x, Var ftext) const {
  Tape<T>& tp = ctx.tape;
  const Tensor<T>& xv = tp.val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "mtblock: want [B,C,H,W]");
  require(xv.shape[2] % 2 == 0 && xv.shape[3] % 2 == 0, Status::InvalidArgument,
          "mtblock: H and W must be even");
  const Tensor<T>& fv = tp.val(ftext);
  require(fv.shape.size() == 3 && fv.shape[0] == xv.shape[0], Status::InvalidArgument,
          "mtblock: text grid must be [B,L,D]");
  Var means = tp.mean_per_row(ftext);  // [B] scalar text summary
  Var cmap = tp.broadcast_rows_to_maps(means, xv.shape[2], xv.shape[3]);
  Var mixed = tp.concat({x, cmap}, 1);  // C+1 channels
  Var pooled = tp.maxpool2d(mixed, 2, 2);
  Var normed = bn.forward(ctx, pooled);
  return tp.relu(conv.forward(ctx, normed));
}

template <typename T>
SSMBlock<T> SSMBlock<T>::create(ParamStore<T>& ps, const std::string& name, int64_t c,
                                const std::array<int, 3>& dilations, uint64_t seed) {
  SSMBlock b;
  b.in_proj =
      Conv2dLayer<T>::create(ps, name + ".in", c, c, 1, 1, 0, 1, 1, true, seed);
  b.sp_dw = Conv2dLayer<T>::create(ps, name + ".sp_dw", c, c, 3, 1, 1, 1, int(c),
                                   true, seed);
  b.sp_pw =
      Conv2dLayer<T>::create(ps, name + ".sp_pw", c, c, 1, 1, 0, 1, 1, true, seed);
  const char* dn[3] = {".dil0", ".dil1", ".dil2"};
  Conv2dLayer<T>* dc[3] = {&b.d0, &b.d1, &b.d2};
  for (int i = 0; i < 3; ++i)
    *dc[i] = Conv2dLayer<T>::create(ps, name + dn[i], c, c, 3, 1, dilations[size_t(i)],
                                    dilations[size_t(i)], 1, true, seed);
  b.ms_dw = Conv2dLayer<T>::create(ps, name + ".ms_dw", c, c, 3, 1, 1, 1, int(c), true,
                                   seed);
  b.out_proj =
      Conv2dLayer<T>::create(ps, name + ".out", 2 * c, c, 1, 1, 0, 1, 1, true, seed);
  // zero merge projection -> the block starts as an exact identity
  Tensor<T>& w = ps.value(name + ".out.w");
  std::fill(w.data.begin(), w.data.end(), T(0));
  return b;
}

template <typename T>
Var SSMBlock<T>::forward(Ctx<T>& ctx, Var x) const {
  Tape<T>& tp = ctx.tape;
  Var xp = in_proj.forward(ctx, x);
  Var gate = tp.sigmoid(sp_pw.forward(ctx, sp_dw.forward(ctx, xp)));
  Var f_sp = tp.mul(xp, gate);
  Var msa = tp.add(tp.add(d0.forward(ctx, xp), d1.forward(ctx, xp)),
                   d2.forward(ctx, xp));
  Var f_ms = tp.mul(xp, ms_dw.forward(ctx, msa));
  Var merged = out_proj.forward(ctx, tp.concat({f_sp, f_ms}, 1));
  return tp.add(x, merged);
}

template <typename T>
UTransBlock<T> UTransBlock<T>::create(ParamStore<T>& ps, const std::string& name,
                                      int64_t c, int64_t n_tokens, int64_t d,
                                      int heads, uint64_t seed) {
  require(c % heads == 0, Status::InvalidArgument,
          "utrans: channels must divide by heads");
  UTransBlock b;
  b.name = name;
  b.heads = heads;
  b.n_tokens = n_tokens;
  ps.add(name + ".pos",
         normal_init<T>({n_tokens, c}, T(0.02), fnv1a64(name + ".pos") ^ seed), true);
  ps.add(name + ".ln1.g", Tensor<T>::full({c}, T(1)), true);
  ps.add(name + ".ln1.b", Tensor<T>::zeros({c}), true);
  ps.add(name + ".ln2.g", Tensor<T>::full({c}, T(1)), true);
  ps.add(name + ".ln2.b", Tensor<T>::zeros({c}), true);
  b.wq = LinearLayer<T>::create(ps, name + ".wq", c, c, true, seed);
  b.wk = LinearLayer<T>::create(ps, name + ".wk", c, c, true, seed);
  b.wv = LinearLayer<T>::create(ps, name + ".wv", c, c, true, seed);
  b.wo = LinearLayer<T>::create(ps, name + ".wo", c, c, true, seed);
  b.textproj = LinearLayer<T>::create(ps, name + ".textproj", d, c, true, seed);
  b.ff1 = LinearLayer<T>::create(ps, name + ".ff1", c, 4 * c, true, seed);
  b.ff2 = LinearLayer<T>::create(ps, name + ".ff2", 4 * c, c, true, seed);
  return b;
}

template <typename T>
Var UTransBlock<T>::forward(Ctx<T>& ctx, Var x, Var ftext,
                            Tensor<T>* attn_out) const {
  Tape<T>& tp = ctx.tape;
  const Tensor<T>& xv = tp.val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "utrans: want [B,C,H,W]");
  int64_t h = xv.shape[2], w = xv.shape[3], n = h * w;
  require(n == n_tokens, Status::InvalidArgument,
          "utrans: token count differs from the positional embedding size");
  Var tokens = tp.nchw_to_ntc(x);  // [B,N,C]
  Var x0 = tp.add_broadcast_rows(tokens, ctx.p(name + ".pos"));
  if (ftext.valid()) {
    Var ttok = textproj.forward(ctx, ftext);  // [B,L,C], no positional embedding
    x0 = tp.concat({x0, ttok}, 1);
  }
  Var xn = tp.layer_norm_lastdim(x0, ctx.p(name + ".ln1.g"), ctx.p(name + ".ln1.b"),
                                 T(1e-5));
  Var att = tp.scaled_dot_attention(wq.forward(ctx, xn), wk.forward(ctx, xn),
                                    wv.forward(ctx, xn), heads, attn_out);
  Var proj = wo.forward(ctx, att);
  // keep only the image-token outputs; the text-token outputs are discarded
  Var y = tp.add(tp.slice_axis(x0, 1, 0, n), tp.slice_axis(proj, 1, 0, n));
  Var yn = tp.layer_norm_lastdim(y, ctx.p(name + ".ln2.g"), ctx.p(name + ".ln2.b"),
                                 T(1e-5));
  Var z = tp.add(y, ff2.forward(ctx, tp.relu(ff1.forward(ctx, yn))));
  return tp.ntc_to_nchw(z, h, w);
}

template <typename T>
UpBlock<T> UpBlock<T>::create(ParamStore<T>& ps, const std::string& name, int64_t cx,
                              int64_t cskip, int64_t co, uint64_t seed) {
  UpBlock b;
  b.conv1 = Conv2dLayer<T>::create(ps, name + ".conv1", cx + cskip, co, 3, 1, 1, 1, 1,
                                   false, seed);
  b.bn1 = BatchNorm2dLayer<T>::create(ps, name + ".bn1", co);
  b.conv2 = Conv2dLayer<T>::create(ps, name + ".conv2", co, co, 3, 1, 1, 1, 1, false,
                                   seed);
  b.bn2 = BatchNorm2dLayer<T>::create(ps, name + ".bn2", co);
  return b;
}

template <typename T>
Var UpBlock<T>::forward(Ctx<T>& ctx, Var x, Var skip) const {
  Tape<T>& tp = ctx.tape;
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& sv = tp.val(skip);
  require(xv.shape.size() == 4 && sv.shape.size() == 4 && sv.shape[0] == xv.shape[0],
          Status::InvalidArgument, "upblock: want [B,C,H,W] pairs");
  require(sv.shape[2] == 2 * xv.shape[2] && sv.shape[3] == 2 * xv.shape[3],
          Status::InvalidArgument, "upblock: skip dims must double the input's");
  Var up = tp.upsample2x(x, UpsampleMode::Bilinear);
  Var cat = tp.concat({up, skip}, 1);
  Var a = tp.relu(bn1.forward(ctx, conv1.forward(ctx, cat)));
  return tp.relu(bn2.forward(ctx, conv2.forward(ctx, a)));
}

template <typename T>
StpnetModel<T> StpnetModel<T>::create(const StpnetConfig& cfg) {
  validate(cfg);
  StpnetModel m;
  m.cfg = cfg;
  const auto& c = cfg.base_channels;
  uint64_t seed = cfg.seed;
  m.en = EnBlock<T>::create(m.ps, "seg.en", cfg.in_channels, c[0], seed);
  for (int i = 0; i < 4; ++i) {
    std::string si = std::to_string(i + 1);
    m.mt[size_t(i)] = MTBlock<T>::create(m.ps, "seg.mt" + si, c[size_t(i)],
                                         c[size_t(i) + 1], seed);
    m.ssm[size_t(i)] =
        SSMBlock<T>::create(m.ps, "seg.ssm" + si, c[size_t(i) + 1], cfg.dilations,
                            seed);
  }
  for (int stage = 2; stage <= 4; ++stage) {
    int64_t side = cfg.image_size >> stage;
    m.utrans[size_t(stage - 2)] = UTransBlock<T>::create(
        m.ps, "seg.utrans" + std::to_string(stage), c[size_t(stage)], side * side,
        cfg.D, cfg.heads, seed);
  }
  m.up[0] = UpBlock<T>::create(m.ps, "seg.up1", c[4], c[3], c[3], seed);
  m.up[1] = UpBlock<T>::create(m.ps, "seg.up2", c[3], c[2], c[2], seed);
  m.up[2] = UpBlock<T>::create(m.ps, "seg.up3", c[2], c[1], c[1], seed);
  m.up[3] = UpBlock<T>::create(m.ps, "seg.up4", c[1], c[0], c[0], seed);
  m.head = Conv2dLayer<T>::create(m.ps, "seg.head", c[0], 1, 1, 1, 0, 1, 1, true,
                                  seed);
  m.retrieval = RetrievalEncoderNet<T>::create(m.ps, "retrieval", cfg.D, seed);
  m.focal = FocalHeads<T>::create(m.ps, "retrieval.focal", cfg.D, seed);
  return m;
}

template <typename T>
StpnetOutput<T> stpnet_forward(StpnetModel<T>& model, Ctx<T>& ctx,
                               const Tensor<T>& img, const EncodedBank& bank,
                               const std::vector<CategoryLabels>* force_labels) {
  const StpnetConfig& cfg = model.cfg;
  require(img.shape.size() == 4 && img.shape[1] == cfg.in_channels &&
              img.shape[2] == cfg.image_size && img.shape[3] == cfg.image_size,
          Status::InvalidArgument, "stpnet_forward: image shape mismatch");
  require(bank.D == cfg.D && bank.L == cfg.L, Status::InvalidArgument,
          "stpnet_forward: bank dims differ from model config");
  Tape<T>& tp = ctx.tape;
  int64_t b = img.shape[0];

  StpnetOutput<T> out;
  Var img_v = tp.leaf(img, false);
  out.fv = model.retrieval.forward(ctx, img_v);

  // retrieval itself is detached: phrase choice must not leak gradient
  require(!force_labels || int64_t(force_labels->size()) == b,
          Status::InvalidArgument,
          "stpnet_forward: forced labels must cover the batch");
  const Tensor<T>& fvv = tp.val(out.fv);
  out.retrievals.reserve(size_t(b));
  for (int64_t i = 0; i < b; ++i) {
    std::vector<double> q(size_t(cfg.D));
    for (int64_t d = 0; d < cfg.D; ++d) q[size_t(d)] = double(fvv[i * cfg.D + d]);
    RetrievalResult r = retrieve(q, bank, cfg.tau);
    if (force_labels) {
      const CategoryLabels& lab = (*force_labels)[size_t(i)];
      for (int cat = 0; cat < 4; ++cat) {
        const auto& feats = bank.features[size_t(cat)];
        require(lab[size_t(cat)] >= 0 &&
                    size_t(lab[size_t(cat)]) < feats.size(),
                Status::InvalidArgument,
                "stpnet_forward: forced label out of range");
        r.cats[size_t(cat)].j_star = lab[size_t(cat)];
        r.cats[size_t(cat)].f_t = feats[size_t(lab[size_t(cat)])];
      }
    }
    recombine(r, cfg.swap_loc_order);
    out.retrievals.push_back(std::move(r));
  }
  for (int gi = 0; gi < 4; ++gi) {
    Tensor<T> grid = Tensor<T>::zeros({b, cfg.L, cfg.D});
    if (cfg.use_text)
      for (int64_t i = 0; i < b; ++i) {
        const Tensor<double>& rec = out.retrievals[size_t(i)].recombined[size_t(gi)];
        for (int64_t k = 0; k < cfg.L * cfg.D; ++k)
          grid[i * cfg.L * cfg.D + k] = T(rec[k]);
      }
    out.ftext[size_t(gi)] = tp.leaf(std::move(grid), false);
  }

  Var f1 = model.en.forward(ctx, img_v);
  Var s = f1;
  std::array<Var, 4> stage_out;
  for (int i = 0; i < 4; ++i) {
    s = model.mt[size_t(i)].forward(ctx, s, out.ftext[size_t(i)]);
    if (cfg.use_ssm) s = model.ssm[size_t(i)].forward(ctx, s);
    int stage = i + 1;
    if (stage >= 2 && stage >= cfg.utrans_from_stage) {
      int ti = std::min(stage + 1, 4) - 1;
      Var tokens = (cfg.use_text && cfg.use_utrans_text)
                       ? out.ftext[size_t(ti)]
                       : Var{};
      s = model.utrans[size_t(stage - 2)].forward(ctx, s, tokens);
    }
    stage_out[size_t(i)] = s;
  }
  Var d = stage_out[3];
  d = model.up[0].forward(ctx, d, stage_out[2]);
  out.up_out[0] = d;
  d = model.up[1].forward(ctx, d, stage_out[1]);
  out.up_out[1] = d;
  d = model.up[2].forward(ctx, d, stage_out[0]);
  out.up_out[2] = d;
  d = model.up[3].forward(ctx, d, f1);
  out.up_out[3] = d;
  out.logits = model.head.forward(ctx, d);
  return out;
}

#define STPNET_INSTANTIATE_BLOCKS(T)                                            \
  template struct EnBlock<T>;                                                   \
  template struct MTBlock<T>;                                                   \
  template struct SSMBlock<T>;                                                  \
  template struct UTransBlock<T>;                                               \
  template struct UpBlock<T>;                                                   \
  template struct StpnetModel<T>;                                               \
  template StpnetOutput<T> stpnet_forward<T>(                                   \
      StpnetModel<T>&, Ctx<T>&, const Tensor<T>&, const EncodedBank&,           \
      const std::vector<CategoryLabels>*);

STPNET_INSTANTIATE_BLOCKS(float)
STPNET_INSTANTIATE_BLOCKS(double)

}  // namespace stpnet
