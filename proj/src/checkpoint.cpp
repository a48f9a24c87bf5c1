#include "stpnet/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

#include "stpnet/config.hpp"

namespace stpnet {

namespace {

constexpr char kMagic[5] = {'S', 'T', 'P', 'N', '1'};
constexpr uint32_t kFormatVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  const char* take(size_t n) {
    require(at_ + n <= bytes_.size(), Status::Integrity,
            "checkpoint: truncated file: " + path_);
    const char* p = bytes_.data() + at_;
    at_ += n;
    return p;
  }
  uint16_t u16() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(2));
    return uint16_t(p[0] | p[1] << 8);
  }
  uint32_t u32() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
           uint32_t(p[3]) << 24;
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | hi << 32;
  }
  size_t at() const { return at_; }
  size_t remaining() const { return bytes_.size() - at_; }

 private:
  const std::string& bytes_;
  std::string path_;
  size_t at_ = 0;
};

}  // namespace

void checkpoint_save(const StpnetModel<float>& model, const std::string& path) {
  std::string head;
  head.append(kMagic, 5);
  put_u32(head, kFormatVersion);
  std::string cfg_text = serialize_model_config(model.cfg);
  put_u32(head, uint32_t(cfg_text.size()));
  head += cfg_text;

  const auto& entries = model.ps.entries();
  put_u32(head, uint32_t(entries.size()));
  uint64_t offset = 0;
  for (const auto& e : entries) {
    require(e.name.size() <= 0xffff, Status::InvalidArgument,
            "checkpoint: parameter name too long");
    put_u16(head, uint16_t(e.name.size()));
    head += e.name;
    require(e.value.shape.size() <= 0xff, Status::InvalidArgument,
            "checkpoint: parameter rank too large");
    head.push_back(char(e.value.shape.size()));
    for (int64_t d : e.value.shape) put_u64(head, uint64_t(d));
    put_u64(head, offset);
    offset += uint64_t(e.value.size());
  }
  put_u64(head, offset);

  std::string payload;
  payload.reserve(size_t(offset) * 4);
  static_assert(sizeof(float) == 4);
  for (const auto& e : entries) {
    size_t at = payload.size();
    payload.resize(at + size_t(e.value.size()) * 4);
    std::memcpy(payload.data() + at, e.value.data.data(),
                size_t(e.value.size()) * 4);
  }
  uint32_t crc = uint32_t(
      ::crc32(0, reinterpret_cast<const unsigned char*>(payload.data()),
              uInt(payload.size())));
  std::string tail;
  put_u32(tail, crc);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), Status::Io, "checkpoint: cannot open for writing: " + path);
  os.write(head.data(), std::streamsize(head.size()));
  os.write(payload.data(), std::streamsize(payload.size()));
  os.write(tail.data(), std::streamsize(tail.size()));
  os.flush();
  require(bool(os), Status::Io, "checkpoint: write failed: " + path);
}

StpnetModel<float> checkpoint_load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), Status::Io, "checkpoint: cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  Reader r(bytes, path);

  const char* magic = r.take(5);
  require(std::memcmp(magic, kMagic, 5) == 0, Status::Integrity,
          "checkpoint: bad magic: " + path);
  uint32_t version = r.u32();
  require(version == kFormatVersion, Status::Version,
          "checkpoint: unsupported format version " + std::to_string(version));
  uint32_t cfg_len = r.u32();
  std::string cfg_text(r.take(cfg_len), cfg_len);
  StpnetConfig cfg = parse_model_config(cfg_text);
  StpnetModel<float> model = StpnetModel<float>::create(cfg);

  auto& entries = model.ps.entries();
  uint32_t count = r.u32();
  require(count == entries.size(), Status::Integrity,
          "checkpoint: manifest count differs from model parameter count");
  std::vector<uint64_t> offsets(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = r.u16();
    std::string name(r.take(name_len), name_len);
    require(name == entries[i].name, Status::Integrity,
            "checkpoint: manifest name mismatch at tensor " +
                std::to_string(i));
    uint8_t rank = uint8_t(*r.take(1));
    Shape shape(rank);
    for (uint8_t d = 0; d < rank; ++d) shape[d] = int64_t(r.u64());
    require(shape == entries[i].value.shape, Status::Integrity,
            "checkpoint: shape mismatch for " + name);
    offsets[i] = r.u64();
  }
  uint64_t total = r.u64();

  require(r.remaining() == size_t(total) * 4 + 4, Status::Integrity,
          "checkpoint: payload size mismatch: " + path);
  const char* payload = r.take(size_t(total) * 4);
  uint32_t crc_stored = r.u32();
  uint32_t crc = uint32_t(::crc32(
      0, reinterpret_cast<const unsigned char*>(payload), uInt(total * 4)));
  require(crc == crc_stored, Status::Integrity,
          "checkpoint: payload checksum mismatch: " + path);

  for (uint32_t i = 0; i < count; ++i) {
    auto& e = entries[i];
    require(offsets[i] + uint64_t(e.value.size()) <= total, Status::Integrity,
            "checkpoint: tensor offset out of range for " + e.name);
    std::memcpy(e.value.data.data(), payload + offsets[i] * 4,
                size_t(e.value.size()) * 4);
  }
  return model;
}

}  // namespace stpnet
