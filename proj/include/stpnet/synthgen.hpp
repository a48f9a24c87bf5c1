#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stpnet/common.hpp"
#include "stpnet/tensor.hpp"

namespace stpnet {

// Procedural lesion benchmark: grayscale images whose masks deterministically
// induce the four text labels (infection side, lesion count, per-field
// vertical location).
struct GenConfig {
  int64_t image_size = 64;
  int k_min = 1;              // lesions per sample, drawn uniformly
  int k_max = 3;
  double radius_min = 3.0;    // ellipse semi-axis range, pixels
  double radius_max = 12.0;
  double delta = 0.4;         // lesion intensity bump at its center
  double amp = 0.1;           // background texture amplitude
  double sigma = 0.02;        // additive Gaussian noise scale
};

void validate(const GenConfig& cfg);

struct SegSample {
  Tensor<float> image;        // [1,S,S], values clamped to [0,1]
  std::vector<uint8_t> mask;  // S*S row-major, {0,1}
  CategoryLabels labels;      // infection, count, left location, right location
  uint64_t seed = 0;
};

// Labels from mask geometry alone. Components counted with 8-connectivity;
// fields are the column halves; vertical thirds split rows at (S+1)/3 and
// (2S+1)/3. Per-field occupancy maps to the 8-phrase index in the order
// none, U, M, L, UL, UM, ML, UML. Empty masks are rejected.
CategoryLabels derive_text_labels(const std::vector<uint8_t>& mask,
                                  int64_t image_size);

// Fully determined by (seed, cfg). Every lesion lies in exactly one
// horizontal field; the mask is the union of the lesion supports and is
// never empty.
SegSample generate_sample(uint64_t seed, const GenConfig& cfg = {});

struct Dataset {
  std::vector<SegSample> samples;
};

// Samples for global indices [first, first+count); per-index seed is
// master_seed ^ index, so splits built from disjoint index ranges are
// themselves disjoint and reproducible.
Dataset generate_range(uint64_t master_seed, int64_t first, int64_t count,
                       const GenConfig& cfg = {});

struct DataSplits {
  Dataset train, val, test;
};

DataSplits generate_split(uint64_t master_seed, int64_t n_train, int64_t n_val,
                          int64_t n_test, const GenConfig& cfg = {});

// Binary container, fixed to 64x64 samples: magic "STPD1", little-endian
// u32 count, then per sample 4096 float32 image values, 4096 mask bytes,
// 4 label bytes, and the u64 sample seed.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Value counts per category (rows: infection, count, left, right; unused
// tail entries stay zero).
std::array<std::array<int64_t, 8>, 4> label_marginals(const Dataset& ds);

}  // namespace stpnet
