#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmvton/dataset.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/pose.hpp"

// Pose-guided data synthesis: find frames whose try-on result distorts the
// arm pose ("hard poses"), synthesise new training persons in those poses,
// double-check them with OKS and append them to a dataset manifest.
namespace dmvton::vtpds {

// COCO keypoint-evaluation sigmas, nose to ankles.
inline constexpr std::array<double, kNumKeypoints> kCocoSigmas = {
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089};

struct OksParams {
  std::array<double, kNumKeypoints> k = kCocoSigmas;
  double threshold = 0.9;
  std::vector<int> subset{kArmKeypoints.begin(), kArmKeypoints.end()};

  void validate() const;
};

// (1/|P|) sum_{i in P} exp(-d_i^2 / (2 s^2 k_i^2)) with s^2 the reference
// bbox area. Keypoints missing (confidence <= 0.05) on either pose are left
// out of P; nullopt when nothing in P is left.
std::optional<double> try_oks(const PoseKeypoints& reference, const PoseKeypoints& candidate, const OksParams& params);
// As try_oks, but a comparison without shared keypoints is a kData error.
double oks(const PoseKeypoints& reference, const PoseKeypoints& candidate, const OksParams& params);

// ---------------------------------------------------------------------------
// Adapter seams

class PoseEstimator {
 public:
  virtual ~PoseEstimator() = default;
  virtual std::optional<PoseKeypoints> estimate(const ImageTensor& image) const = 0;
  virtual std::string name() const = 0;
};

class PersonSynthesizer {
 public:
  virtual ~PersonSynthesizer() = default;
  // Returns an image at the input resolution.
  virtual ImageTensor synthesize(const ImageTensor& person, const PoseKeypoints& target, std::mt19937_64& rng) const = 0;
  virtual std::string name() const = 0;
};

// Body parser: class id per pixel (H*W), same layout as the dataset parser maps.
class ParserAdapter {
 public:
  virtual ~ParserAdapter() = default;
  virtual std::vector<int> parse(const ImageTensor& person, const PoseKeypoints& pose) const = 0;
  virtual std::string name() const = 0;
};

// (person, garment) -> try-on image.
using TryOnFn = std::function<ImageTensor(const ImageTensor& person, const ImageTensor& garment)>;

// Runs the student network at batch size 1 without building a graph.
TryOnFn student_tryon(const nets::StudentNet& student);

// ---------------------------------------------------------------------------
// Pipeline steps

struct HardPoseRecord {
  std::string frame_id;
  PoseKeypoints input_pose;
  PoseKeypoints output_pose;
  double score = 0;
  std::string garment_id;
};

struct Detection {
  std::optional<HardPoseRecord> hard;
  std::optional<double> score;     // unset when the output pose was not found
  bool output_pose_missing = false;
};

// Fails with kData when the estimator finds no pose on the input frame.
Detection detect_hard_pose(const std::string& frame_id, const ImageTensor& frame, const std::string& garment_id,
                           const ImageTensor& garment, const TryOnFn& tryon, const PoseEstimator& estimator,
                           const OksParams& params);

struct SynthesisResult {
  bool accepted = false;
  std::optional<double> score;  // unset when no pose was found on the synthetic image
  ImageTensor image;
  std::optional<PoseKeypoints> pose;  // re-estimated pose of the synthetic image
  std::vector<int> labels;            // parser output; filled only when accepted
};

SynthesisResult synthesize_for_pose(const ImageTensor& person, const PoseKeypoints& target,
                                    const PersonSynthesizer& synthesizer, const PoseEstimator& estimator,
                                    const ParserAdapter& parser, const OksParams& params, std::mt19937_64& rng);

// Arm keypoints relative to the shoulder midpoint, scaled by 1/sqrt(area).
std::vector<double> pose_feature(const PoseKeypoints& pose);

struct ClusterResult {
  std::vector<int> assignments;
  std::vector<std::vector<double>> centroids;
  std::vector<int64_t> histogram;  // cluster sizes
  std::vector<double> inertia;     // within-cluster sum of squares per iteration
  int iterations = 0;
};

struct KMeansOptions {
  int max_iterations = 300;
  double tolerance = 1e-6;  // stop once no centroid moves further (squared)
};

// k-means++ seeding followed by Lloyd iterations.
ClusterResult kmeans(const std::vector<std::vector<double>>& points, int k, uint64_t seed, KMeansOptions opt = {});
ClusterResult cluster_poses(const std::vector<PoseKeypoints>& poses, int k, uint64_t seed, KMeansOptions opt = {});

// Per-cluster sizes and the first `examples` pose ids of every cluster.
struct ClusterReport {
  ClusterResult result;
  std::vector<std::vector<std::string>> examples;

  nlohmann::json to_json() const;
};

ClusterReport cluster_report(const std::vector<std::string>& ids, const std::vector<PoseKeypoints>& poses, int k,
                             uint64_t seed, int examples = 3);

// Pose files for clustering: every *.json pose in a directory (id = stem),
// or a hard_poses.jsonl log (id = frame_id, pose = input_pose).
std::vector<std::pair<std::string, PoseKeypoints>> load_pose_set(const std::filesystem::path& location);

struct Adapters {
  const PoseEstimator* estimator = nullptr;
  const PersonSynthesizer* synthesizer = nullptr;
  const ParserAdapter* parser = nullptr;
  TryOnFn tryon;
};

struct EnrichmentReport {
  int64_t frames_scanned = 0;
  int64_t frames_unreadable = 0;
  int64_t input_pose_missing = 0;
  int64_t output_pose_missing = 0;
  int64_t hard_poses = 0;
  int64_t synth_attempted = 0;
  int64_t synth_accepted = 0;
  int64_t synth_rejected = 0;
  int64_t synth_failed = 0;  // synthesizer raised an error
  int64_t base_records = 0;
  int64_t output_records = 0;
  std::vector<HardPoseRecord> hard;

  nlohmann::json to_json() const;
};

struct EnrichOptions {
  std::filesystem::path frames_dir;
  std::filesystem::path base_manifest;
  std::filesystem::path out_dir;  // receives manifest.json, synth/, report.json, logs
  Size2 size{64, 48};
  int seg_channels = kDefaultSegChannels;
  OksParams params;
  uint64_t seed = 0;
};

// Writes out_dir/manifest.json (base records first, unchanged, then one
// synthesized record per accepted sample), out_dir/report.json,
// out_dir/rejections.jsonl and out_dir/hard_poses.jsonl.
EnrichmentReport enrich_dataset(const EnrichOptions& opt, const Adapters& adapters);

// ---------------------------------------------------------------------------
// Deterministic mock adapters for offline use and tests.
namespace mock {

// Marker colour of each keypoint (RGB in [-1, 1]).
std::array<std::array<double, 3>, kNumKeypoints> marker_colors();

// Stick figure on a plain background: grey limbs plus one 3x3 coloured
// marker per confident keypoint, drawn at the rounded position.
ImageTensor render_stick_figure(const PoseKeypoints& pose, Size2 size);

// Reads the markers back: centroid of the pixels matching each colour.
class MarkerEstimator : public PoseEstimator {
 public:
  std::optional<PoseKeypoints> estimate(const ImageTensor& image) const override;
  std::string name() const override { return "marker-estimator"; }
};

// Renders the target pose exactly.
class StickFigureSynthesizer : public PersonSynthesizer {
 public:
  ImageTensor synthesize(const ImageTensor& person, const PoseKeypoints& target, std::mt19937_64& rng) const override;
  std::string name() const override { return "stick-figure"; }
};

// Renders the target with every keypoint pushed `noise_px` pixels in a
// random direction (clamped to the image).
class CorruptingSynthesizer : public PersonSynthesizer {
 public:
  explicit CorruptingSynthesizer(double noise_px = 50.0) : noise_(noise_px) {}
  ImageTensor synthesize(const ImageTensor& person, const PoseKeypoints& target, std::mt19937_64& rng) const override;
  std::string name() const override { return "corrupting"; }

 private:
  double noise_;
};

// Paints body regions from the skeleton: face disc, torso (upper clothes),
// arms, lower body.
class SkeletonParser : public ParserAdapter {
 public:
  explicit SkeletonParser(int seg_channels = kDefaultSegChannels) : seg_channels_(seg_channels) {}
  std::vector<int> parse(const ImageTensor& person, const PoseKeypoints& pose) const override;
  std::string name() const override { return "skeleton-parser"; }

 private:
  int seg_channels_;
};

// Try-on stand-in that cannot raise arms: whenever a wrist is above its
// shoulder, the arm is redrawn hanging down. Other frames pass unchanged.
TryOnFn arm_dropping_tryon(Size2 size);

// Canonical arms-down pose for a 64x48 frame, and the same pose with both
// arms raised.
PoseKeypoints standing_pose();
PoseKeypoints raised_arms_pose();

// Five stick-figure frames (frame0..frame4.png); frames 1 and 3 raise
// their arms. Returns the frame poses in file order.
std::vector<PoseKeypoints> write_frame_fixture(const std::filesystem::path& dir, Size2 size = {64, 48});

// Two planted pose groups for clustering: `n_down` jittered standing poses
// ("down_XXX") then `n_up` jittered raised-arm poses ("up_XXX"). Jitter is
// uniform within +-jitter_px on every keypoint.
std::vector<std::pair<std::string, PoseKeypoints>> separable_poses(int n_down, int n_up, uint64_t seed,
                                                                   double jitter_px = 1.5);
// Writes each pose as {id}.json under dir.
void write_pose_fixture(const std::filesystem::path& dir, const std::vector<std::pair<std::string, PoseKeypoints>>& poses);

}  // namespace mock

}  // namespace dmvton::vtpds
