#pragma once

#include <string>

#include "stpnet/blocks.hpp"

namespace stpnet {

// Single-file model snapshot. Layout, all little-endian:
//   magic "STPN1", u32 format version,
//   u32 config length + architecture config text,
//   u32 tensor count, then per tensor: u16 name length, name bytes,
//     u8 rank, i64 dims, u64 float offset into the payload,
//   u64 total float count, raw float32 payload,
//   u32 CRC-32 of the payload bytes.
// Loading rebuilds the model from the embedded config and overwrites every
// parameter (including the normalization running statistics), so eval-mode
// forwards after a round trip are bit-identical.
void checkpoint_save(const StpnetModel<float>& model, const std::string& path);
StpnetModel<float> checkpoint_load(const std::string& path);

}  // namespace stpnet
