#include "stpnet/saliency.hpp"

#include <cmath>
#include <fstream>

#include "stpnet/losses.hpp"

namespace stpnet {

std::vector<uint8_t> saliency_map(const Tensor<float>& activation,
                                  int64_t out_size) {
  require(activation.shape.size() == 4 && activation.shape[0] == 1,
          Status::InvalidArgument, "saliency: expected a [1,C,H,W] map");
  require(out_size >= 1, Status::InvalidArgument,
          "saliency: output size must be positive");
  int64_t c = activation.shape[1], h = activation.shape[2],
          w = activation.shape[3];

  std::vector<double> mean(size_t(h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < h * w; ++i)
      mean[size_t(i)] += std::abs(double(activation[ch * h * w + i]));
  double lo = mean[0], hi = mean[0];
  for (double v : mean) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span = hi - lo;

  std::vector<uint8_t> out(size_t(out_size * out_size), 0);
  if (span > 0) {
    for (int64_t y = 0; y < out_size; ++y) {
      int64_t sy = y * h / out_size;
      for (int64_t x = 0; x < out_size; ++x) {
        int64_t sx = x * w / out_size;
        double v = (mean[size_t(sy * w + sx)] - lo) / span;
        out[size_t(y * out_size + x)] = uint8_t(std::lround(v * 255.0));
      }
    }
  }
  return out;
}

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels,
               int64_t width, int64_t height) {
  require(int64_t(pixels.size()) == width * height, Status::InvalidArgument,
          "pgm: pixel count differs from the stated size");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), Status::Io, "pgm: cannot open for writing: " + path);
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           std::streamsize(pixels.size()));
  os.flush();
  require(bool(os), Status::Io, "pgm: write failed: " + path);
}

std::vector<std::string> export_saliency(StpnetModel<float>& model,
                                         const EncodedBank& bank,
                                         const Tensor<float>& image,
                                         const std::string& prefix) {
  int64_t s = model.cfg.image_size;
  require(image.shape == Shape{1, 1, s, s}, Status::InvalidArgument,
          "saliency: expected one [1,1,S,S] image matching the model");
  Tape<float> tape;
  Ctx<float> ctx(tape, model.ps, /*training=*/false);
  StpnetOutput<float> out = stpnet_forward(model, ctx, image, bank);

  std::vector<std::string> written;
  for (int k = 0; k < 4; ++k) {
    std::vector<uint8_t> map =
        saliency_map(tape.val(out.up_out[size_t(k)]), s);
    std::string path = prefix + "_up" + std::to_string(k + 1) + ".pgm";
    write_pgm(path, map, s, s);
    written.push_back(path);
  }
  std::vector<uint8_t> pred = binarize_logits(tape.val(out.logits));
  for (uint8_t& p : pred) p = p ? 255 : 0;
  std::string mask_path = prefix + "_mask.pgm";
  write_pgm(mask_path, pred, s, s);
  written.push_back(mask_path);
  return written;
}

}  // namespace stpnet
