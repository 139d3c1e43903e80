#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dmvton/tensor.hpp"

namespace dmvton {

using NamedTensors = std::map<std::string, Tensor>;

// Element encoding inside the blob. Both are little-endian IEEE-754.
enum class DType { kF32, kF64 };
const char* dtype_name(DType d);
DType dtype_from_name(const std::string& s);
int64_t dtype_size(DType d);

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  int64_t byte_offset = 0;

  int64_t byte_size() const { return numel_of(shape) * dtype_size(dtype); }
};

// Named-tensor container: a manifest of (name, dtype, shape, offset) and a
// raw blob. Stored either as a directory (manifest.json + weights.bin) or as
// one file: "DMVTONW1" | u64 LE manifest length | manifest JSON | blob.
class WeightArchive {
 public:
  static constexpr char kMagic[9] = "DMVTONW1";

  static WeightArchive pack(const NamedTensors& tensors, DType dtype = DType::kF32);
  // Validates names, dtypes, offsets and the blob size.
  WeightArchive(std::vector<ArchiveEntry> entries, std::vector<uint8_t> blob);

  NamedTensors unpack() const;

  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  const std::vector<uint8_t>& blob() const { return blob_; }
  int64_t element_count() const;

  std::vector<uint8_t> to_bytes() const;
  static WeightArchive from_bytes(std::span<const uint8_t> bytes);

  void save_dir(const std::filesystem::path& dir) const;
  void save_file(const std::filesystem::path& file) const;
  // Directory or single container file.
  static WeightArchive load(const std::filesystem::path& location);

 private:
  std::vector<ArchiveEntry> entries_;
  std::vector<uint8_t> blob_;
};

std::vector<uint8_t> save_weights(const NamedTensors& tensors, DType dtype = DType::kF32);
NamedTensors load_weights(std::span<const uint8_t> bytes);

}  // namespace dmvton
