#include "dmvton/pose.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "dmvton/errors.hpp"

namespace dmvton {

namespace {

void validate_points(const KeypointArray& points) {
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) fail(Errc::kData, "keypoint coordinates must be finite");
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0))
      fail(Errc::kData, "keypoint confidence must lie in [0, 1]");
  }
}

}  // namespace

double tight_bbox_area(const KeypointArray& points) {
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
  double x1 = -x0, y1 = -x0;
  bool any = false;
  for (const auto& p : points) {
    if (p.confidence <= kMinKeypointConfidence) continue;
    any = true;
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return any ? (x1 - x0) * (y1 - y0) : 0.0;
}

PoseKeypoints::PoseKeypoints(const KeypointArray& points)
    : PoseKeypoints(points, tight_bbox_area(points)) {}

PoseKeypoints::PoseKeypoints(const KeypointArray& points, double bbox_area)
    : points_(points), bbox_area_(bbox_area) {
  validate_points(points_);
  if (!(bbox_area_ > 0) || !std::isfinite(bbox_area_))
    fail(Errc::kData, "pose bbox_area must be positive");
}

nlohmann::json pose_to_json(const PoseKeypoints& pose) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& p : pose.points()) kps.push_back({p.x, p.y, p.confidence});
  return {{"keypoints", kps}, {"bbox_area", pose.bbox_area()}};
}

PoseKeypoints pose_from_json(const nlohmann::json& j) {
  if (!j.contains("keypoints") || !j["keypoints"].is_array() || j["keypoints"].size() != kNumKeypoints)
    fail(Errc::kData, "pose JSON needs 17 keypoints");
  KeypointArray pts;
  for (size_t i = 0; i < kNumKeypoints; ++i) {
    const auto& k = j["keypoints"][i];
    if (!k.is_array() || k.size() != 3) fail(Errc::kData, "keypoint must be [x, y, confidence]");
    pts[i] = {k[0].get<double>(), k[1].get<double>(), k[2].get<double>()};
  }
  if (j.contains("bbox_area")) return PoseKeypoints(pts, j["bbox_area"].get<double>());
  return PoseKeypoints(pts);
}

PoseKeypoints load_pose(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::kData, "missing pose file: " + path.string());
  try {
    return pose_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kData, "malformed pose file " + path.string() + ": " + e.what());
  }
}

void save_pose(const std::filesystem::path& path, const PoseKeypoints& pose) {
  std::ofstream out(path);
  if (!out) fail(Errc::kData, "cannot write pose file: " + path.string());
  out << pose_to_json(pose).dump(2) << '\n';
}

}  // namespace dmvton
