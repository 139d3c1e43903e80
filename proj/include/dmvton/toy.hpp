#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dmvton/dataset.hpp"

// Synthetic try-on pairs for desk-scale training and tests. Each person is a
// flat-shaded figure whose torso wears a striped garment; the matching
// garment image shows the same garment centred on a zero background, so the
// warp has a per-record translation to learn.
namespace dmvton::toy {

struct ToyOptions {
  int64_t count = 32;
  Size2 size{64, 48};
  uint64_t seed = 0;
  int seg_channels = kDefaultSegChannels;
};

std::vector<DatasetRecord> make_records(const ToyOptions& opt);

// Writes PNGs, pose JSON, parser maps and manifest.json under `dir`.
Manifest write_dataset(const std::filesystem::path& dir, const ToyOptions& opt);

}  // namespace dmvton::toy
