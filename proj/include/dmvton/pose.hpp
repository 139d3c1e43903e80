#pragma once

#include <array>
#include <filesystem>

#include <nlohmann/json.hpp>

namespace dmvton {

inline constexpr int kNumKeypoints = 17;

// COCO ordering.
enum Keypoint : int {
  kNose = 0, kLeftEye, kRightEye, kLeftEar, kRightEar,
  kLeftShoulder, kRightShoulder, kLeftElbow, kRightElbow, kLeftWrist, kRightWrist,
  kLeftHip, kRightHip, kLeftKnee, kRightKnee, kLeftAnkle, kRightAnkle,
};

// Shoulders, elbows, wrists.
inline constexpr std::array<int, 6> kArmKeypoints = {5, 6, 7, 8, 9, 10};

// Keypoints at or below this confidence are treated as missing.
inline constexpr double kMinKeypointConfidence = 0.05;

struct KeypointXYC {
  double x = 0;
  double y = 0;
  double confidence = 0;
  bool operator==(const KeypointXYC&) const = default;
};

using KeypointArray = std::array<KeypointXYC, kNumKeypoints>;

class PoseKeypoints {
 public:
  // bbox_area taken as the tight box over confident keypoints.
  explicit PoseKeypoints(const KeypointArray& points);
  PoseKeypoints(const KeypointArray& points, double bbox_area);

  const KeypointArray& points() const { return points_; }
  const KeypointXYC& operator[](int i) const { return points_[static_cast<size_t>(i)]; }
  double bbox_area() const { return bbox_area_; }
  bool visible(int i) const { return points_[static_cast<size_t>(i)].confidence > kMinKeypointConfidence; }

  bool operator==(const PoseKeypoints&) const = default;

 private:
  KeypointArray points_;
  double bbox_area_ = 0;
};

// Area of the tight axis-aligned box over keypoints with confidence > 0.05.
double tight_bbox_area(const KeypointArray& points);

nlohmann::json pose_to_json(const PoseKeypoints& pose);
PoseKeypoints pose_from_json(const nlohmann::json& j);
PoseKeypoints load_pose(const std::filesystem::path& path);
void save_pose(const std::filesystem::path& path, const PoseKeypoints& pose);

}  // namespace dmvton
