#pragma once

#include <array>
#include <string>
#include <vector>

#include "stpnet/losses.hpp"
#include "stpnet/nn.hpp"
#include "stpnet/retrieval.hpp"

namespace stpnet {

struct StpnetConfig {
  int64_t in_channels = 1;
  std::array<int64_t, 5> base_channels{16, 32, 64, 128, 256};
  int64_t image_size = 64;
  int64_t L = 8;
  int64_t D = 32;
  int heads = 4;
  std::array<int, 3> dilations{6, 12, 18};
  double tau = 0.07;
  double gamma = 2.0;
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  uint64_t seed = 0;
  bool use_text = true;         // false zeroes every injected text grid (ablation)
  bool use_ssm = true;          // false bypasses the multi-scale residual blocks
  bool use_utrans_text = true;  // false runs attention without text tokens
  bool swap_loc_order = false;  // swap LeftLoc/RightLoc accumulation order
  int utrans_from_stage = 2;    // attention at encoder stages >= this (5 = none)
  std::string domain = "lung";
};

void validate(const StpnetConfig& cfg);

// Two conv3x3+BN+ReLU layers, no downsampling.
template <typename T>
struct EnBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2dLayer<T> bn1, bn2;
  static EnBlock create(ParamStore<T>& ps, const std::string& name, int64_t ci,
                        int64_t co, uint64_t seed);
  Var forward(Ctx<T>& ctx, Var x) const;
};

// Injects the scalar mean of the text grid as a constant extra channel, then
// maxpool 2x2 -> BN -> conv3x3 -> ReLU, in that literal order.
template <typename T>
struct MTBlock {
  Conv2dLayer<T> conv;
  BatchNorm2dLayer<T> bn;
  static MTBlock create(ParamStore<T>& ps, const std::string& name, int64_t ci,
                        int64_t co, uint64_t seed);
  // x [B,C,H,W], ftext [B,L,D] -> [B,C',H/2,W/2]
  Var forward(Ctx<T>& ctx, Var x, Var ftext) const;
};

// Residual multi-scale module: a gated spatial branch plus a sum of three
// dilated conv branches, merged by a 1x1 projection that starts at zero so the
// whole block is an exact identity at initialization.
template <typename T>
struct SSMBlock {
  Conv2dLayer<T> in_proj, sp_dw, sp_pw, d0, d1, d2, ms_dw, out_proj;
  static SSMBlock create(ParamStore<T>& ps, const std::string& name, int64_t c,
                         const std::array<int, 3>& dilations, uint64_t seed);
  Var forward(Ctx<T>& ctx, Var x) const;
};

// Transformer encoder block over image tokens plus projected text tokens;
// only the image token outputs are kept and reshaped back to a feature map.
template <typename T>
struct UTransBlock {
  std::string name;
  int heads = 1;
  int64_t n_tokens = 0;  // image token count (H*W) the pos embedding is sized for
  LinearLayer<T> wq, wk, wv, wo, textproj, ff1, ff2;
  static UTransBlock create(ParamStore<T>& ps, const std::string& name, int64_t c,
                            int64_t n_tokens, int64_t d, int heads, uint64_t seed);
  // x [B,C,H,W]; ftext [B,L,D] or invalid Var for no text tokens
  Var forward(Ctx<T>& ctx, Var x, Var ftext, Tensor<T>* attn_out = nullptr) const;
};

// Bilinear upsample2x -> concat skip -> two conv3x3+BN+ReLU.
template <typename T>
struct UpBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2dLayer<T> bn1, bn2;
  static UpBlock create(ParamStore<T>& ps, const std::string& name, int64_t cx,
                        int64_t cskip, int64_t co, uint64_t seed);
  Var forward(Ctx<T>& ctx, Var x, Var skip) const;
};

template <typename T>
struct StpnetModel {
  StpnetConfig cfg;
  ParamStore<T> ps;
  RetrievalEncoderNet<T> retrieval;
  EnBlock<T> en;
  std::array<MTBlock<T>, 4> mt;
  std::array<SSMBlock<T>, 4> ssm;
  std::array<UTransBlock<T>, 3> utrans;  // stages 2..4
  std::array<UpBlock<T>, 4> up;
  Conv2dLayer<T> head;
  FocalHeads<T> focal;  // per-category classification heads on the query
  static StpnetModel create(const StpnetConfig& cfg);
};

template <typename T>
struct StpnetOutput {
  Var logits;                               // [B,1,S,S]
  Var fv;                                   // [B,D] retrieval queries
  std::vector<RetrievalResult> retrievals;  // per sample, detached
  std::array<Var, 4> ftext;                 // constant [B,L,D] leaves
  std::array<Var, 4> up_out;                // decoder activations (for saliency)
};

// One full pass: retrieval query, detached per-sample phrase retrieval and
// recombination, encoder with text injection, decoder, mask logits. When
// force_labels is given (one row per sample), the injected phrases are the
// ground-truth candidates instead of the retrieved argmax (the scores and
// query in the output still describe what retrieval would have done).
template <typename T>
StpnetOutput<T> stpnet_forward(StpnetModel<T>& model, Ctx<T>& ctx,
                               const Tensor<T>& img, const EncodedBank& bank,
                               const std::vector<CategoryLabels>* force_labels =
                                   nullptr);

}  // namespace stpnet
