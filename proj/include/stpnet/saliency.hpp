#pragma once

#include <string>
#include <vector>

#include "stpnet/blocks.hpp"

namespace stpnet {

// Channel-mean absolute activation of a single-sample map [1,C,H,W], min-max
// scaled to [0,255] (a constant map scales to all zeros), then nearest-
// neighbor resized to out_size x out_size.
std::vector<uint8_t> saliency_map(const Tensor<float>& activation,
                                  int64_t out_size);

// Binary (P5) grayscale image, maxval 255. Write failure -> io error.
void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels,
               int64_t width, int64_t height);

// One eval-mode forward on a single image [1,1,S,S]; writes the four decoder
// activation maps as {prefix}_up1..4.pgm (in decoder order, coarsest first)
// plus the thresholded prediction as {prefix}_mask.pgm (0/255). Returns the
// file paths written.
std::vector<std::string> export_saliency(StpnetModel<float>& model,
                                         const EncodedBank& bank,
                                         const Tensor<float>& image,
                                         const std::string& prefix);

}  // namespace stpnet
