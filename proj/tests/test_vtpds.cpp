#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dmvton/errors.hpp"
#include "dmvton/image.hpp"
#include "dmvton/toy.hpp"
#include "dmvton/vtpds.hpp"
#include "test_util.hpp"

using namespace dmvton;
using namespace dmvton::vtpds;
using testutil::TempDir;

namespace {

PoseKeypoints with_point(const PoseKeypoints& p, int i, double dx, double dy, std::optional<double> area = {}) {
  KeypointArray k = p.points();
  k[static_cast<size_t>(i)].x += dx;
  k[static_cast<size_t>(i)].y += dy;
  return PoseKeypoints(k, area.value_or(p.bbox_area()));
}

PoseKeypoints transformed(const PoseKeypoints& p, double scale, double tx, double ty) {
  KeypointArray k = p.points();
  for (auto& q : k) {
    q.x = q.x * scale + tx;
    q.y = q.y * scale + ty;
  }
  return PoseKeypoints(k, p.bbox_area() * scale * scale);
}

OksParams single(int keypoint) {
  OksParams p;
  p.subset = {keypoint};
  return p;
}

// Returns a fixed pose for images carrying a marker pixel and the reference
// pose otherwise; lets a test decide exactly what the "try-on" looks like.
class TaggedEstimator : public PoseEstimator {
 public:
  TaggedEstimator(PoseKeypoints input, PoseKeypoints output) : in_(std::move(input)), out_(std::move(output)) {}
  std::optional<PoseKeypoints> estimate(const ImageTensor& image) const override {
    return image.at(0, 0, 0) == kTag ? out_ : in_;
  }
  std::string name() const override { return "tagged"; }
  static constexpr double kTag = 0.625;

 private:
  PoseKeypoints in_, out_;
};

ImageTensor tagged_tryon(const ImageTensor& person, const ImageTensor&) {
  ImageTensor out = person;
  out.at(0, 0, 0) = TaggedEstimator::kTag;
  return out;
}

}  // namespace

TEST_CASE("oks identity and limits") {
  const PoseKeypoints p = mock::standing_pose();
  const OksParams params;
  CHECK(oks(p, p, params) == 1.0);
  CHECK(oks(mock::raised_arms_pose(), mock::raised_arms_pose(), params) == 1.0);
  PoseKeypoints far = p;
  for (int i : kArmKeypoints) far = with_point(far, i, 1e6, 0);
  CHECK(oks(p, far, params) < 1e-12);
}

TEST_CASE("single-keypoint worked example") {
  // Left wrist, k = 0.062, s^2 = 10000.
  const double k = 0.062, s2 = 10000;
  KeypointArray pts{};
  for (auto& q : pts) q = {50, 50, 1.0};
  const PoseKeypoints ref(pts, s2);
  // d^2 = 10 gives the quoted score of about 0.878.
  const PoseKeypoints c1 = with_point(ref, kLeftWrist, 3, 1);
  const double e1 = std::exp(-10.0 / (2 * s2 * k * k));
  CHECK(std::abs(oks(ref, c1, single(kLeftWrist)) - e1) <= 1e-9);
  CHECK(e1 == doctest::Approx(0.878).epsilon(1e-3));
  // d = 10 evaluates the same formula to about 0.272.
  const PoseKeypoints c2 = with_point(ref, kLeftWrist, 6, 8);
  const double e2 = std::exp(-100.0 / (2 * s2 * k * k));
  CHECK(std::abs(oks(ref, c2, single(kLeftWrist)) - e2) <= 1e-9);
  CHECK(e2 == doctest::Approx(0.2724).epsilon(1e-3));
}

TEST_CASE("oks decreases strictly in each distance") {
  const PoseKeypoints p = mock::standing_pose();
  const OksParams params;
  for (int i : kArmKeypoints) {
    CAPTURE(i);
    double prev = 1.0;
    // Stay where each term is still representable next to the others.
    for (double d = 0.25; d <= 6; d += 0.25) {
      const double s = oks(p, with_point(p, i, d * 0.6, -d * 0.8), params);
      REQUIRE(s < prev);
      prev = s;
    }
  }
  // Keypoints outside the subset do not count.
  CHECK(oks(p, with_point(p, kNose, 10, 10), params) == 1.0);
}

TEST_CASE("oks translation and scale invariance") {
  const PoseKeypoints ref = mock::standing_pose();
  const PoseKeypoints cand = with_point(with_point(ref, kLeftElbow, 2, -1), kRightWrist, -3, 2);
  const OksParams params;
  const double base = oks(ref, cand, params);
  CHECK(oks(transformed(ref, 1, 13.5, -7), transformed(cand, 1, 13.5, -7), params) == doctest::Approx(base).epsilon(1e-12));
  CHECK(oks(transformed(ref, 2.5, 3, 4), transformed(cand, 2.5, 3, 4), params) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("missing keypoints and invalid parameters") {
  const PoseKeypoints p = mock::standing_pose();
  KeypointArray k = p.points();
  for (int i : kArmKeypoints) k[static_cast<size_t>(i)].confidence = 0.0;
  const PoseKeypoints hidden(k, p.bbox_area());
  CHECK_FALSE(try_oks(p, hidden, {}).has_value());
  CHECK_THROWS_AS(oks(p, hidden, {}), Error);
  k = p.points();
  k[kLeftWrist].confidence = 0.01;
  // The occluded wrist drops out; the rest match.
  CHECK(oks(p, with_point(PoseKeypoints(k, p.bbox_area()), kLeftWrist, 30, 0), {}) == 1.0);
  OksParams bad;
  bad.subset.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.k[5] = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(oks(PoseKeypoints(p.points(), 0.0), p, {}), Error);
}

TEST_CASE("hard-pose detection") {
  const PoseKeypoints in = mock::standing_pose();
  const OksParams params;
  const ImageTensor frame = mock::render_stick_figure(in, {64, 48});
  const ImageTensor garment(3, 64, 48);

  SUBCASE("identity try-on: no hard pose") {
    const mock::MarkerEstimator est;
    const auto d = detect_hard_pose("f", frame, "g", garment,
                                    [](const ImageTensor& p, const ImageTensor&) { return p; }, est, params);
    CHECK_FALSE(d.hard);
    REQUIRE(d.score);
    CHECK(*d.score == 1.0);
  }

  SUBCASE("score 0.85 < 0.9 is a hard pose") {
    // One of six arm keypoints scoring 0.1 gives (5 + 0.1) / 6 = 0.85.
    const double k = kCocoSigmas[kLeftWrist];
    const double d = std::sqrt(-std::log(0.1) * 2 * in.bbox_area() * k * k);
    const TaggedEstimator est(in, with_point(in, kLeftWrist, d, 0));
    const auto det = detect_hard_pose("frame7", frame, "g1", garment, tagged_tryon, est, params);
    REQUIRE(det.hard);
    CHECK(det.hard->score == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(det.hard->frame_id == "frame7");
    CHECK(det.hard->garment_id == "g1");
    CHECK(det.hard->input_pose == in);

    OksParams zero = params;
    zero.threshold = 0.0;  // scores are always positive, so nothing is ever hard
    CHECK_FALSE(detect_hard_pose("f", frame, "g", garment, tagged_tryon, est, zero).hard);
    zero.threshold = 1.5;
    CHECK_THROWS_AS(zero.validate(), Error);
    OksParams low = params;
    low.threshold = 0.85;  // not strictly below
    CHECK_FALSE(detect_hard_pose("f", frame, "g", garment, tagged_tryon, est, low).hard);
    low.threshold = 1e-9;
    CHECK_FALSE(detect_hard_pose("f", frame, "g", garment, tagged_tryon, est, low).hard);
  }

  SUBCASE("no pose on the input frame is an error; none on the output is counted") {
    const mock::MarkerEstimator est;
    const ImageTensor blank(3, 64, 48);
    CHECK_THROWS_AS(detect_hard_pose("f", blank, "g", garment, tagged_tryon, est, params), Error);
    const auto d = detect_hard_pose("f", frame, "g", garment,
                                    [&](const ImageTensor&, const ImageTensor&) { return blank; }, est, params);
    CHECK(d.output_pose_missing);
    CHECK_FALSE(d.hard);
  }
}

TEST_CASE("synthesis double-check") {
  const mock::MarkerEstimator est;
  const mock::SkeletonParser parser;
  const OksParams params;
  const ImageTensor person(3, 64, 48);
  const PoseKeypoints target = mock::raised_arms_pose();

  std::mt19937_64 rng(1);
  const auto good = synthesize_for_pose(person, target, mock::StickFigureSynthesizer(), est, parser, params, rng);
  CHECK(good.accepted);
  REQUIRE(good.score);
  CHECK(*good.score == 1.0);
  CHECK(good.labels.size() == 64 * 48);
  CHECK(good.image.size() == Size2{64, 48});

  for (uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 r1(seed), r2(seed);
    const auto bad = synthesize_for_pose(person, target, mock::CorruptingSynthesizer(), est, parser, params, r1);
    CHECK_FALSE(bad.accepted);
    CHECK(bad.labels.empty());
    if (bad.score) CHECK(*bad.score < 0.9);
    const auto again = synthesize_for_pose(person, target, mock::CorruptingSynthesizer(), est, parser, params, r2);
    CHECK(again.accepted == bad.accepted);
    CHECK(again.score == bad.score);
  }
}

TEST_CASE("k-means") {
  SUBCASE("k = 1: one cluster at the mean") {
    const std::vector<std::vector<double>> pts{{0, 0}, {2, 0}, {4, 6}};
    const auto r = kmeans(pts, 1, 0);
    CHECK(r.histogram == std::vector<int64_t>{3});
    CHECK(r.centroids[0][0] == doctest::Approx(2.0));
    CHECK(r.centroids[0][1] == doctest::Approx(2.0));
  }
  SUBCASE("planted split, determinism, monotone objective") {
    const auto poses = mock::separable_poses(12, 8, 3);
    std::vector<PoseKeypoints> ps;
    for (const auto& [id, p] : poses) ps.push_back(p);
    const auto r = cluster_poses(ps, 2, 7);
    for (size_t i = 1; i < 12; ++i) CHECK(r.assignments[i] == r.assignments[0]);
    for (size_t i = 13; i < 20; ++i) CHECK(r.assignments[i] == r.assignments[12]);
    CHECK(r.assignments[0] != r.assignments[12]);
    const auto again = cluster_poses(ps, 2, 7);
    CHECK(again.assignments == r.assignments);
    for (size_t i = 1; i < r.inertia.size(); ++i) CHECK(r.inertia[i] <= r.inertia[i - 1] + 1e-12);
    const auto rep = cluster_report([&] {
      std::vector<std::string> ids;
      for (const auto& [id, p] : poses) ids.push_back(id);
      return ids;
    }(), ps, 2, 7, 2);
    const auto j = rep.to_json();
    CHECK(j["k"] == 2);
    CHECK(j["clusters"].size() == 2);
    std::vector<int64_t> sizes{j["clusters"][0]["size"], j["clusters"][1]["size"]};
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<int64_t>{8, 12});
    CHECK(j["clusters"][0]["examples"].size() == 2);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(kmeans({{0.0}}, 2, 0), Error);
    CHECK_THROWS_AS(kmeans({{0.0}}, 0, 0), Error);
  }
}

TEST_CASE("pose feature normalises translation and scale") {
  const PoseKeypoints p = mock::raised_arms_pose();
  const auto a = pose_feature(p);
  const auto b = pose_feature(transformed(p, 3.0, 20, -5));
  REQUIRE(a.size() == b.size());
  CHECK(a.size() == 2 * kArmKeypoints.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("pose sets load from a directory or a hard-pose log") {
  TempDir dir("poses");
  const auto poses = mock::separable_poses(2, 1, 1);
  mock::write_pose_fixture(dir / "set", poses);
  const auto loaded = load_pose_set(dir / "set");
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].first == "down_000");
  CHECK(loaded[2].first == "up_000");
  {
    std::ofstream log(dir / "hard_poses.jsonl");
    for (const auto& [id, p] : poses)
      log << nlohmann::json{{"frame", id}, {"input_pose", pose_to_json(p)}}.dump() << '\n';
  }
  const auto from_log = load_pose_set(dir / "hard_poses.jsonl");
  REQUIRE(from_log.size() == 3);
  CHECK(from_log[1].first == "down_001");
  CHECK_THROWS_AS(load_pose_set(dir / "missing"), Error);
}

TEST_CASE("enrichment end to end with mock adapters") {
  TempDir dir("enrich");
  toy::ToyOptions topt;
  topt.count = 3;
  const Manifest base = toy::write_dataset(dir / "base", topt);
  const auto frame_poses = mock::write_frame_fixture(dir / "frames");
  REQUIRE(frame_poses.size() == 5);

  const mock::MarkerEstimator est;
  const mock::SkeletonParser parser;
  const mock::StickFigureSynthesizer good;
  const mock::CorruptingSynthesizer bad;

  auto run = [&](const std::string& name, const PersonSynthesizer& synth, const std::filesystem::path& frames) {
    EnrichOptions o;
    o.frames_dir = frames;
    o.base_manifest = dir / "base";
    o.out_dir = dir / name;
    o.seed = 4;
    Adapters a{&est, &synth, &parser, mock::arm_dropping_tryon({64, 48})};
    return enrich_dataset(o, a);
  };

  SUBCASE("accepting synthesizer grows the manifest") {
    const auto r = run("good", good, dir / "frames");
    CHECK(r.frames_scanned == 5);
    CHECK(r.hard_poses == 2);
    CHECK(r.synth_attempted == 2);
    CHECK(r.synth_accepted == 2);
    CHECK(r.synth_rejected == 0);
    REQUIRE(r.hard.size() == 2);
    CHECK(r.hard[0].frame_id == "frame1");
    CHECK(r.hard[1].frame_id == "frame3");
    const Manifest out = read_manifest(dir / "good");
    REQUIRE(out.records.size() == base.records.size() + 2);
    const Manifest base_again = read_manifest(dir / "base");
    for (size_t i = 0; i < base_again.records.size(); ++i) {
      CHECK(out.records[i].id == base_again.records[i].id);
      CHECK(std::filesystem::equivalent(out.records[i].person, base_again.records[i].person));
      CHECK(out.records[i].origin == Origin::kReal);
    }
    for (size_t i = base.records.size(); i < out.records.size(); ++i) {
      CHECK(out.records[i].origin == Origin::kSynthesized);
      CHECK(out.records[i].parser_map.has_value());
    }
    // The synthesized records load like any other.
    CHECK(load_all(out, {64, 48}).size() == out.records.size());
    CHECK(std::filesystem::exists(dir / "good/report.json"));
    CHECK(std::filesystem::exists(dir / "good/hard_poses.jsonl"));
  }

  SUBCASE("rejecting synthesizer leaves the base unchanged") {
    const auto r = run("bad", bad, dir / "frames");
    CHECK(r.hard_poses == 2);
    CHECK(r.synth_attempted == 2);
    CHECK(r.synth_accepted == 0);
    CHECK(r.synth_rejected + r.synth_failed == 2);
    CHECK(read_manifest(dir / "bad").records.size() == base.records.size());
  }

  SUBCASE("empty frames directory") {
    std::filesystem::create_directories(dir / "none");
    const auto r = run("empty", good, dir / "none");
    CHECK(r.frames_scanned == 0);
    CHECK(r.hard_poses == 0);
    CHECK(r.synth_attempted == 0);
    CHECK(read_manifest(dir / "empty").records.size() == base.records.size());
  }

  SUBCASE("unreadable frames are skipped and counted") {
    std::filesystem::copy(dir / "frames", dir / "frames2");
    std::ofstream(dir / "frames2" / "broken.png") << "junk";
    const auto r = run("skip", good, dir / "frames2");
    CHECK(r.frames_unreadable == 1);
    CHECK(r.hard_poses == 2);
  }
}
