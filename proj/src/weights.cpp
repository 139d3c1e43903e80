#include "dmvton/weights.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "dmvton/errors.hpp"
#include "dmvton/image.hpp"

static_assert(std::endian::native == std::endian::little, "weight archives assume a little-endian host");

namespace dmvton {

namespace fs = std::filesystem;

const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  fail(Errc::kData, "unknown dtype in weight manifest: " + s);
}

int64_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }

WeightArchive WeightArchive::pack(const NamedTensors& tensors, DType dtype) {
  std::vector<ArchiveEntry> entries;
  int64_t off = 0;
  for (const auto& [name, t] : tensors) {
    if (t.is_meta()) fail(Errc::kShape, "cannot archive meta tensor " + name);
    ArchiveEntry e{name, dtype, t.shape(), off};
    off += e.byte_size();
    entries.push_back(std::move(e));
  }
  std::vector<uint8_t> blob(static_cast<size_t>(off));
  size_t i = 0;
  for (const auto& [name, t] : tensors) {
    uint8_t* dst = blob.data() + entries[i++].byte_offset;
    if (dtype == DType::kF64) {
      std::memcpy(dst, t.data(), static_cast<size_t>(t.numel()) * 8);
    } else {
      for (int64_t k = 0; k < t.numel(); ++k) {
        const float f = static_cast<float>(t[k]);
        std::memcpy(dst + k * 4, &f, 4);
      }
    }
  }
  return WeightArchive(std::move(entries), std::move(blob));
}

WeightArchive::WeightArchive(std::vector<ArchiveEntry> entries, std::vector<uint8_t> blob)
    : entries_(std::move(entries)), blob_(std::move(blob)) {
  std::set<std::string> names;
  int64_t total = 0;
  std::vector<std::pair<int64_t, int64_t>> spans;
  for (const auto& e : entries_) {
    if (e.name.empty()) fail(Errc::kData, "weight archive: empty tensor name");
    if (!names.insert(e.name).second) fail(Errc::kData, "weight archive: duplicate tensor name " + e.name);
    if (e.byte_offset < 0) fail(Errc::kData, "weight archive: negative offset for " + e.name);
    spans.emplace_back(e.byte_offset, e.byte_offset + e.byte_size());
    total += e.byte_size();
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) fail(Errc::kData, "weight archive: overlapping tensor offsets");
  if (!spans.empty() && spans.back().second > static_cast<int64_t>(blob_.size()))
    fail(Errc::kData, "weight archive: tensor extends past end of blob");
  if (total != static_cast<int64_t>(blob_.size()))
    fail(Errc::kData, "weight archive: manifest describes " + std::to_string(total) + " bytes but blob has " +
                          std::to_string(blob_.size()));
}

NamedTensors WeightArchive::unpack() const {
  NamedTensors out;
  for (const auto& e : entries_) {
    const int64_t n = numel_of(e.shape);
    std::vector<double> d(static_cast<size_t>(n));
    const uint8_t* src = blob_.data() + e.byte_offset;
    if (e.dtype == DType::kF64) {
      std::memcpy(d.data(), src, static_cast<size_t>(n) * 8);
    } else {
      for (int64_t k = 0; k < n; ++k) {
        float f;
        std::memcpy(&f, src + k * 4, 4);
        d[static_cast<size_t>(k)] = f;
      }
    }
    out.emplace(e.name, Tensor(e.shape, std::move(d)));
  }
  return out;
}

int64_t WeightArchive::element_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += numel_of(e.shape);
  return n;
}

namespace {

nlohmann::json manifest_json(const std::vector<ArchiveEntry>& entries, size_t blob_size) {
  nlohmann::json ts = nlohmann::json::array();
  for (const auto& e : entries)
    ts.push_back({{"name", e.name}, {"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"offset", e.byte_offset}});
  return {{"tensors", ts}, {"blob_size", blob_size}};
}

std::vector<ArchiveEntry> parse_manifest(const std::string& text) {
  std::vector<ArchiveEntry> entries;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& t : j.at("tensors")) {
      ArchiveEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = dtype_from_name(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<Shape>();
      e.byte_offset = t.at("offset").get<int64_t>();
      entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kData, std::string("malformed weight manifest: ") + e.what());
  }
  return entries;
}

}  // namespace

std::vector<uint8_t> WeightArchive::to_bytes() const {
  const std::string man = manifest_json(entries_, blob_.size()).dump();
  const uint64_t len = man.size();
  std::vector<uint8_t> out(16 + man.size() + blob_.size());
  std::memcpy(out.data(), kMagic, 8);
  std::memcpy(out.data() + 8, &len, 8);
  std::memcpy(out.data() + 16, man.data(), man.size());
  if (!blob_.empty()) std::memcpy(out.data() + 16 + man.size(), blob_.data(), blob_.size());
  return out;
}

WeightArchive WeightArchive::from_bytes(std::span<const uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    fail(Errc::kData, "not a weight archive (missing DMVTONW1 header)");
  uint64_t len;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (len > bytes.size() - 16) fail(Errc::kData, "weight archive: manifest length exceeds file");
  const std::string man(reinterpret_cast<const char*>(bytes.data() + 16), len);
  std::vector<uint8_t> blob(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len), bytes.end());
  return WeightArchive(parse_manifest(man), std::move(blob));
}

void WeightArchive::save_dir(const fs::path& dir) const {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) fail(Errc::kData, "cannot write " + (dir / "manifest.json").string());
    out << manifest_json(entries_, blob_.size()).dump(2) << '\n';
  }
  write_file_bytes(dir / "weights.bin", blob_);
}

void WeightArchive::save_file(const fs::path& file) const {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  write_file_bytes(file, to_bytes());
}

WeightArchive WeightArchive::load(const fs::path& location) {
  if (!fs::exists(location)) fail(Errc::kData, "missing weights: " + location.string());
  if (fs::is_directory(location)) {
    const auto man = read_file_bytes(location / "manifest.json");
    return WeightArchive(parse_manifest(std::string(man.begin(), man.end())),
                         read_file_bytes(location / "weights.bin"));
  }
  return from_bytes(read_file_bytes(location));
}

std::vector<uint8_t> save_weights(const NamedTensors& tensors, DType dtype) {
  return WeightArchive::pack(tensors, dtype).to_bytes();
}

NamedTensors load_weights(std::span<const uint8_t> bytes) { return WeightArchive::from_bytes(bytes).unpack(); }

}  // namespace dmvton
