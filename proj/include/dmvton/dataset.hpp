#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmvton/image.hpp"
#include "dmvton/pose.hpp"
#include "dmvton/tensor.hpp"

namespace dmvton {

// Default parser layout: background, hair, face, upper-clothes, left arm,
// right arm, lower-body.
inline constexpr int kDefaultSegChannels = 7;
inline constexpr int kUpperClothesLabel = 3;

// Parser one-hot map + pose heatmaps (+ optional dense-pose channels).
class HumanRepresentation {
 public:
  // labels: H*W class ids in [0, seg_channels).
  static HumanRepresentation build(std::span<const int> labels, Size2 size, int seg_channels,
                                   const PoseKeypoints& pose,
                                   std::optional<Tensor> densepose = std::nullopt);

  int seg_channels() const { return static_cast<int>(parser_map_.dim(0)); }
  int64_t channels() const;
  Size2 size() const { return {parser_map_.dim(1), parser_map_.dim(2)}; }
  const Tensor& parser_map() const { return parser_map_; }      // [K,H,W]
  const Tensor& pose_heatmaps() const { return pose_heatmaps_; }  // [17,H,W]
  const std::optional<Tensor>& densepose() const { return densepose_; }

  // [1, K + 17 (+ D), H, W]
  Tensor stacked() const;
  // One channel of the parser map as [1, 1, H, W].
  Tensor parser_channel(int label) const;

 private:
  Tensor parser_map_;
  Tensor pose_heatmaps_;
  std::optional<Tensor> densepose_;
};

// Gaussian heatmap sigma used for a given image height.
double heatmap_sigma(int64_t height);

enum class Origin { kReal, kSynthesized };
const char* origin_name(Origin o);
Origin origin_from_name(const std::string& s);

struct DatasetRecord {
  std::string id;
  ImageTensor person;
  ImageTensor garment;
  MaskTensor garment_mask;
  PoseKeypoints pose;
  std::optional<HumanRepresentation> human_rep;
  Origin origin = Origin::kReal;
};

// Manifest entry with paths resolved against the manifest directory.
struct RecordDescriptor {
  std::string id;
  std::filesystem::path person;
  std::filesystem::path garment;
  std::filesystem::path garment_mask;
  std::filesystem::path pose;
  std::optional<std::filesystem::path> parser_map;
  Origin origin = Origin::kReal;

  // Loads and resizes every member to `size`. The person, mask and parser
  // files must share one native resolution.
  DatasetRecord load(Size2 size, int seg_channels = kDefaultSegChannels) const;
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.json
  std::vector<RecordDescriptor> records;
};

// `location` is either a directory containing manifest.json or the file itself.
Manifest read_manifest(const std::filesystem::path& location);
// Writes root/manifest.json with paths relative to root.
void write_manifest(const Manifest& manifest);

std::vector<DatasetRecord> load_all(const Manifest& manifest, Size2 size,
                                    int seg_channels = kDefaultSegChannels);

}  // namespace dmvton
