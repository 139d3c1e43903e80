#include "dmvton/dataset.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "dmvton/errors.hpp"

namespace dmvton {

namespace fs = std::filesystem;

double heatmap_sigma(int64_t height) { return std::max(1.0, static_cast<double>(height) / 48.0); }

HumanRepresentation HumanRepresentation::build(std::span<const int> labels, Size2 size, int seg_channels,
                                               const PoseKeypoints& pose, std::optional<Tensor> densepose) {
  if (seg_channels < 2) fail(Errc::kConfig, "seg_channels must be at least 2");
  const int64_t hw = size.height * size.width;
  if (static_cast<int64_t>(labels.size()) != hw) fail(Errc::kShape, "label map size mismatch");
  HumanRepresentation r;
  r.parser_map_ = Tensor({seg_channels, size.height, size.width}, 0.0);
  for (int64_t i = 0; i < hw; ++i) {
    const int l = labels[static_cast<size_t>(i)];
    if (l < 0 || l >= seg_channels)
      fail(Errc::kData, "parser label " + std::to_string(l) + " outside [0, " + std::to_string(seg_channels) + ")");
    r.parser_map_[l * hw + i] = 1.0;
  }
  r.pose_heatmaps_ = Tensor({kNumKeypoints, size.height, size.width}, 0.0);
  const double sigma = heatmap_sigma(size.height);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int k = 0; k < kNumKeypoints; ++k) {
    if (!pose.visible(k)) continue;
    const auto& p = pose[k];
    for (int64_t y = 0; y < size.height; ++y)
      for (int64_t x = 0; x < size.width; ++x) {
        const double dx = static_cast<double>(x) - p.x, dy = static_cast<double>(y) - p.y;
        r.pose_heatmaps_[k * hw + y * size.width + x] = std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
  }
  if (densepose) {
    if (densepose->rank() != 3 || densepose->dim(1) != size.height || densepose->dim(2) != size.width)
      fail(Errc::kShape, "densepose channels must be [D,H,W] at the person size");
    r.densepose_ = std::move(densepose);
  }
  return r;
}

int64_t HumanRepresentation::channels() const {
  return parser_map_.dim(0) + pose_heatmaps_.dim(0) + (densepose_ ? densepose_->dim(0) : 0);
}

Tensor HumanRepresentation::stacked() const {
  const Size2 s = size();
  std::vector<double> d;
  d.reserve(static_cast<size_t>(channels() * s.height * s.width));
  d.insert(d.end(), parser_map_.vec().begin(), parser_map_.vec().end());
  d.insert(d.end(), pose_heatmaps_.vec().begin(), pose_heatmaps_.vec().end());
  if (densepose_) d.insert(d.end(), densepose_->vec().begin(), densepose_->vec().end());
  return Tensor({1, channels(), s.height, s.width}, std::move(d));
}

Tensor HumanRepresentation::parser_channel(int label) const {
  if (label < 0 || label >= seg_channels()) fail(Errc::kConfig, "parser label out of range");
  const Size2 s = size();
  const int64_t hw = s.height * s.width;
  std::vector<double> d(parser_map_.data() + label * hw, parser_map_.data() + (label + 1) * hw);
  return Tensor({1, 1, s.height, s.width}, std::move(d));
}

const char* origin_name(Origin o) { return o == Origin::kReal ? "real" : "synthesized"; }

Origin origin_from_name(const std::string& s) {
  if (s == "real") return Origin::kReal;
  if (s == "synthesized") return Origin::kSynthesized;
  fail(Errc::kData, "unknown record origin: " + s);
}

DatasetRecord RecordDescriptor::load(Size2 size, int seg_channels) const {
  const RasterU8 person_raw = read_raster(person, 3);
  const RasterU8 mask_raw = read_raster(garment_mask, 1);
  auto same = [&](const RasterU8& r) { return r.width == person_raw.width && r.height == person_raw.height; };
  if (!same(mask_raw))
    fail(Errc::kData, "record " + id + ": spatial-size mismatch between person and garment_mask");

  DatasetRecord rec{id,
                    resize_image(raster_to_image(person_raw), size),
                    load_image(garment, size),
                    load_mask(garment_mask, size),
                    load_pose(pose),
                    std::nullopt,
                    origin};
  // Keypoints are stored in native person pixels; rescale to `size`.
  const double sx = static_cast<double>(size.width) / static_cast<double>(person_raw.width);
  const double sy = static_cast<double>(size.height) / static_cast<double>(person_raw.height);
  if (sx != 1.0 || sy != 1.0) {
    KeypointArray pts = rec.pose.points();
    for (auto& p : pts) {
      p.x *= sx;
      p.y *= sy;
    }
    rec.pose = PoseKeypoints(pts, rec.pose.bbox_area() * sx * sy);
  }
  if (parser_map) {
    const RasterU8 parser_raw = read_raster(*parser_map, 1);
    if (!same(parser_raw))
      fail(Errc::kData, "record " + id + ": spatial-size mismatch between person and parser_map");
    rec.human_rep = HumanRepresentation::build(load_label_map(*parser_map, size), size, seg_channels, rec.pose);
  }
  if (rec.origin == Origin::kSynthesized && !rec.human_rep)
    fail(Errc::kData, "record " + id + ": synthesized records must carry a parser map");
  return rec;
}

Manifest read_manifest(const fs::path& location) {
  const fs::path file = fs::is_directory(location) ? location / "manifest.json" : location;
  if (!fs::exists(file)) fail(Errc::kData, "missing manifest: " + file.string());
  nlohmann::json j;
  try {
    std::ifstream in(file);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kData, "malformed manifest " + file.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("records") || !j["records"].is_array())
    fail(Errc::kData, "manifest " + file.string() + " needs a 'records' array");

  Manifest m;
  m.root = file.parent_path();
  std::set<std::string> ids;
  for (const auto& e : j["records"]) {
    if (!e.is_object() || !e.contains("id") || !e["id"].is_string())
      fail(Errc::kData, "manifest record without a string id");
    const std::string id = e["id"].get<std::string>();
    if (!ids.insert(id).second) fail(Errc::kData, "duplicate record id: " + id);
    auto path_field = [&](const char* key) -> fs::path {
      if (!e.contains(key) || !e[key].is_string())
        fail(Errc::kData, "record " + id + ": missing field '" + key + "'");
      const fs::path p = m.root / e[key].get<std::string>();
      if (!fs::exists(p)) fail(Errc::kData, "record " + id + ": dangling path " + p.string());
      return p;
    };
    RecordDescriptor d;
    d.id = id;
    d.person = path_field("person");
    d.garment = path_field("garment");
    d.garment_mask = path_field("garment_mask");
    d.pose = path_field("pose");
    if (e.contains("parser_map") && !e["parser_map"].is_null()) d.parser_map = path_field("parser_map");
    d.origin = origin_from_name(e.value("origin", std::string("real")));
    if (d.origin == Origin::kSynthesized && !d.parser_map)
      fail(Errc::kData, "record " + id + ": synthesized records must carry a parser map");
    m.records.push_back(std::move(d));
  }
  return m;
}

void write_manifest(const Manifest& manifest) {
  nlohmann::json recs = nlohmann::json::array();
  auto rel = [&](const fs::path& p) { return fs::relative(p, manifest.root).generic_string(); };
  for (const auto& d : manifest.records) {
    nlohmann::json e = {{"id", d.id},
                        {"person", rel(d.person)},
                        {"garment", rel(d.garment)},
                        {"garment_mask", rel(d.garment_mask)},
                        {"pose", rel(d.pose)},
                        {"origin", origin_name(d.origin)}};
    if (d.parser_map) e["parser_map"] = rel(*d.parser_map);
    recs.push_back(std::move(e));
  }
  fs::create_directories(manifest.root);
  std::ofstream out(manifest.root / "manifest.json");
  if (!out) fail(Errc::kData, "cannot write manifest in " + manifest.root.string());
  out << nlohmann::json{{"records", recs}}.dump(2) << '\n';
}

std::vector<DatasetRecord> load_all(const Manifest& manifest, Size2 size, int seg_channels) {
  std::vector<DatasetRecord> out;
  out.reserve(manifest.records.size());
  for (const auto& d : manifest.records) out.push_back(d.load(size, seg_channels));
  return out;
}

}  // namespace dmvton
