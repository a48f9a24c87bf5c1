#include "stpnet/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace stpnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

// occupancy bitmask (U=1, M=2, L=4) -> phrase index in the order
// none, U, M, L, UL, UM, ML, UML
constexpr int kOccupancyToPhrase[8] = {0, 1, 2, 5, 3, 4, 6, 7};

struct Thirds {
  int64_t b1, b2;  // row boundaries: upper [0,b1), middle [b1,b2), lower [b2,S)
};

Thirds thirds_of(int64_t s) { return {(s + 1) / 3, (2 * s + 1) / 3}; }

}  // namespace

void validate(const GenConfig& cfg) {
  require(cfg.image_size >= 8, Status::InvalidArgument,
          "gen: image size too small");
  require(cfg.k_min >= 1 && cfg.k_max >= cfg.k_min, Status::InvalidArgument,
          "gen: lesion count range invalid");
  require(cfg.radius_min >= 1 && cfg.radius_max >= cfg.radius_min,
          Status::InvalidArgument, "gen: radius range invalid");
  // a rotated ellipse needs its full extent inside one column field
  double field = double(cfg.image_size / 2 - 1);
  require(2 * cfg.radius_max <= field, Status::InvalidArgument,
          "gen: lesion radius exceeds the horizontal field");
  require(cfg.delta >= 0 && cfg.amp >= 0 && cfg.sigma >= 0,
          Status::InvalidArgument, "gen: intensity knobs must be nonnegative");
}

CategoryLabels derive_text_labels(const std::vector<uint8_t>& mask,
                                  int64_t s) {
  require(int64_t(mask.size()) == s * s, Status::InvalidArgument,
          "labels: mask size mismatch");
  bool any = false;
  for (uint8_t v : mask) any = any || v;
  require(any, Status::InvalidArgument, "labels: empty mask");

  // component count, 8-connectivity
  std::vector<uint8_t> seen(mask.size(), 0);
  std::vector<int64_t> stack;
  int components = 0;
  for (int64_t i = 0; i < s * s; ++i) {
    if (!mask[size_t(i)] || seen[size_t(i)]) continue;
    ++components;
    stack.assign(1, i);
    seen[size_t(i)] = 1;
    while (!stack.empty()) {
      int64_t at = stack.back();
      stack.pop_back();
      int64_t r = at / s, c = at % s;
      for (int64_t dr = -1; dr <= 1; ++dr)
        for (int64_t dc = -1; dc <= 1; ++dc) {
          int64_t nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= s || nc < 0 || nc >= s) continue;
          int64_t ni = nr * s + nc;
          if (mask[size_t(ni)] && !seen[size_t(ni)]) {
            seen[size_t(ni)] = 1;
            stack.push_back(ni);
          }
        }
    }
  }

  Thirds t = thirds_of(s);
  int occ[2] = {0, 0};
  for (int64_t r = 0; r < s; ++r)
    for (int64_t c = 0; c < s; ++c) {
      if (!mask[size_t(r * s + c)]) continue;
      int field = c < s / 2 ? 0 : 1;
      int bit = r < t.b1 ? 1 : (r < t.b2 ? 2 : 4);
      occ[field] |= bit;
    }

  CategoryLabels out;
  out[0] = (occ[0] != 0 && occ[1] != 0) ? 1 : 0;  // bilateral?
  out[1] = components == 1 ? 0 : 1;               // multiple areas?
  out[2] = kOccupancyToPhrase[occ[0]];
  out[3] = kOccupancyToPhrase[occ[1]];
  return out;
}

SegSample generate_sample(uint64_t seed, const GenConfig& cfg) {
  validate(cfg);
  const int64_t s = cfg.image_size;
  Rng rng(seed);

  SegSample out;
  out.seed = seed;
  out.mask.assign(size_t(s * s), 0);
  std::vector<double> bump(size_t(s * s), 0.0);

  int k = rng.uniform_int(cfg.k_min, cfg.k_max);
  for (int lesion = 0; lesion < k; ++lesion) {
    bool left = rng.uniform_int(0, 1) == 0;
    double a = rng.uniform(cfg.radius_min, cfg.radius_max);
    double b = rng.uniform(cfg.radius_min, cfg.radius_max);
    double th = rng.uniform(0, kPi);
    double ct = std::cos(th), st = std::sin(th);
    // axis-aligned half extents of the rotated ellipse
    double hx = std::sqrt(a * a * ct * ct + b * b * st * st);
    double hy = std::sqrt(a * a * st * st + b * b * ct * ct);
    double x0 = left ? 0 : double(s / 2);
    double x1 = left ? double(s / 2 - 1) : double(s - 1);
    double cx = rng.uniform(x0 + hx, x1 - hx);
    double cy = rng.uniform(hy, double(s - 1) - hy);

    int64_t rlo = std::max<int64_t>(0, int64_t(std::floor(cy - hy)) - 1);
    int64_t rhi = std::min<int64_t>(s - 1, int64_t(std::ceil(cy + hy)) + 1);
    int64_t clo = std::max<int64_t>(0, int64_t(std::floor(cx - hx)) - 1);
    int64_t chi = std::min<int64_t>(s - 1, int64_t(std::ceil(cx + hx)) + 1);
    for (int64_t r = rlo; r <= rhi; ++r)
      for (int64_t c = clo; c <= chi; ++c) {
        double dx = double(c) - cx, dy = double(r) - cy;
        double u = (dx * ct + dy * st) / a;
        double v = (-dx * st + dy * ct) / b;
        double q = u * u + v * v;
        if (q <= 1.0) {
          out.mask[size_t(r * s + c)] = 1;
          bump[size_t(r * s + c)] =
              std::max(bump[size_t(r * s + c)], cfg.delta * (1.0 - 0.5 * q));
        }
      }
  }

  // smooth background: a few low-frequency plaid components around 0.3
  double fx[3], fy[3], ph[3];
  for (int i = 0; i < 3; ++i) {
    fx[i] = rng.uniform(0.5, 2.0) / double(s);
    fy[i] = rng.uniform(0.5, 2.0) / double(s);
    ph[i] = rng.uniform(0, 2 * kPi);
  }
  out.image = Tensor<float>::zeros({1, s, s});
  for (int64_t r = 0; r < s; ++r)
    for (int64_t c = 0; c < s; ++c) {
      double tex = 0;
      for (int i = 0; i < 3; ++i)
        tex += std::sin(2 * kPi * (fx[i] * double(c) + fy[i] * double(r)) + ph[i]);
      double val = 0.3 + cfg.amp * tex / 3.0 + bump[size_t(r * s + c)] +
                   cfg.sigma * rng.normal();
      out.image[r * s + c] = float(std::clamp(val, 0.0, 1.0));
    }

  out.labels = derive_text_labels(out.mask, s);
  return out;
}

Dataset generate_range(uint64_t master_seed, int64_t first, int64_t count,
                       const GenConfig& cfg) {
  require(first >= 0 && count >= 0, Status::InvalidArgument,
          "gen: invalid index range");
  Dataset ds;
  ds.samples.reserve(size_t(count));
  for (int64_t i = first; i < first + count; ++i)
    ds.samples.push_back(generate_sample(master_seed ^ uint64_t(i), cfg));
  return ds;
}

DataSplits generate_split(uint64_t master_seed, int64_t n_train, int64_t n_val,
                          int64_t n_test, const GenConfig& cfg) {
  require(n_train > 0 && n_val > 0 && n_test > 0, Status::InvalidArgument,
          "gen: split sizes must be positive");
  DataSplits sp;
  sp.train = generate_range(master_seed, 0, n_train, cfg);
  sp.val = generate_range(master_seed, n_train, n_val, cfg);
  sp.test = generate_range(master_seed, n_train + n_val, n_test, cfg);
  return sp;
}

namespace {

constexpr char kMagic[5] = {'S', 'T', 'P', 'D', '1'};
constexpr int64_t kFileSide = 64;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, uint32_t(v));
  write_u32(os, uint32_t(v >> 32));
}

uint64_t read_u64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  return lo | hi << 32;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), Status::Io, "dataset: cannot open for writing: " + path);
  os.write(kMagic, 5);
  write_u32(os, uint32_t(ds.samples.size()));
  for (const SegSample& smp : ds.samples) {
    require(smp.image.shape == Shape{1, kFileSide, kFileSide},
            Status::InvalidArgument, "dataset: file format is fixed at 64x64");
    require(int64_t(smp.mask.size()) == kFileSide * kFileSide,
            Status::InvalidArgument, "dataset: mask size mismatch");
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(smp.image.data.data()),
             std::streamsize(smp.image.size() * 4));
    os.write(reinterpret_cast<const char*>(smp.mask.data()),
             std::streamsize(smp.mask.size()));
    unsigned char lab[4];
    for (int i = 0; i < 4; ++i) {
      require(smp.labels[size_t(i)] >= 0 && smp.labels[size_t(i)] < 256,
              Status::InvalidArgument, "dataset: label out of byte range");
      lab[i] = (unsigned char)smp.labels[size_t(i)];
    }
    os.write(reinterpret_cast<const char*>(lab), 4);
    write_u64(os, smp.seed);
  }
  require(bool(os), Status::Io, "dataset: write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), Status::Io, "dataset: cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  require(bool(is) && std::memcmp(magic, kMagic, 5) == 0, Status::Integrity,
          "dataset: bad magic: " + path);
  uint32_t count = read_u32(is);
  Dataset ds;
  ds.samples.resize(count);
  for (SegSample& smp : ds.samples) {
    smp.image = Tensor<float>::zeros({1, kFileSide, kFileSide});
    is.read(reinterpret_cast<char*>(smp.image.data.data()),
            std::streamsize(smp.image.size() * 4));
    smp.mask.resize(size_t(kFileSide * kFileSide));
    is.read(reinterpret_cast<char*>(smp.mask.data()),
            std::streamsize(smp.mask.size()));
    unsigned char lab[4];
    is.read(reinterpret_cast<char*>(lab), 4);
    for (int i = 0; i < 4; ++i) smp.labels[size_t(i)] = lab[i];
    smp.seed = read_u64(is);
    require(bool(is), Status::Integrity, "dataset: truncated file: " + path);
  }
  is.peek();
  require(is.eof(), Status::Integrity, "dataset: trailing bytes: " + path);
  return ds;
}

std::array<std::array<int64_t, 8>, 4> label_marginals(const Dataset& ds) {
  std::array<std::array<int64_t, 8>, 4> m{};
  for (const SegSample& smp : ds.samples)
    for (int cat = 0; cat < 4; ++cat) {
      int v = smp.labels[size_t(cat)];
      require(v >= 0 && v < 8, Status::InvalidArgument,
              "marginals: label out of range");
      ++m[size_t(cat)][size_t(v)];
    }
  return m;
}

}  // namespace stpnet
