#include "dmvton/vtpds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"

namespace dmvton::vtpds {

namespace fs = std::filesystem;
using nlohmann::json;

void OksParams::validate() const {
  for (double v : k)
    if (!(v > 0) || !std::isfinite(v)) fail(Errc::kConfig, "OKS constants k_i must be positive");
  if (!(threshold >= 0 && threshold <= 1)) fail(Errc::kConfig, "OKS threshold must lie in [0, 1]");
  if (subset.empty()) fail(Errc::kConfig, "OKS keypoint subset is empty");
  for (int i : subset)
    if (i < 0 || i >= kNumKeypoints) fail(Errc::kConfig, "OKS subset index " + std::to_string(i) + " out of range");
}

std::optional<double> try_oks(const PoseKeypoints& reference, const PoseKeypoints& candidate, const OksParams& params) {
  params.validate();
  const double area = reference.bbox_area();
  if (!(area > 0)) fail(Errc::kData, "OKS reference pose has zero area");
  double sum = 0;
  int n = 0;
  for (int i : params.subset) {
    if (!reference.visible(i) || !candidate.visible(i)) continue;
    const double dx = reference[i].x - candidate[i].x;
    const double dy = reference[i].y - candidate[i].y;
    const double ki = params.k[static_cast<size_t>(i)];
    sum += std::exp(-(dx * dx + dy * dy) / (2.0 * area * ki * ki));
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

double oks(const PoseKeypoints& reference, const PoseKeypoints& candidate, const OksParams& params) {
  const auto s = try_oks(reference, candidate, params);
  if (!s) fail(Errc::kData, "OKS: no keypoint of the subset is visible on both poses");
  return *s;
}

TryOnFn student_tryon(const nets::StudentNet& student) {
  return [&student](const ImageTensor& person, const ImageTensor& garment) {
    ag::NoGradGuard ng;
    const auto out = student.run(ops::constant(person.batched()), ops::constant(garment.batched()));
    return ImageTensor::from_tensor(out.gen.tryon.value());
  };
}

Detection detect_hard_pose(const std::string& frame_id, const ImageTensor& frame, const std::string& garment_id,
                           const ImageTensor& garment, const TryOnFn& tryon, const PoseEstimator& estimator,
                           const OksParams& params) {
  params.validate();
  const auto input = estimator.estimate(frame);
  if (!input) fail(Errc::kData, "pose estimator found no person in frame " + frame_id);
  Detection d;
  const auto output = estimator.estimate(tryon(frame, garment));
  if (output) d.score = try_oks(*input, *output, params);
  if (!d.score) {
    d.output_pose_missing = true;
    return d;
  }
  if (*d.score < params.threshold) d.hard = HardPoseRecord{frame_id, *input, *output, *d.score, garment_id};
  return d;
}

SynthesisResult synthesize_for_pose(const ImageTensor& person, const PoseKeypoints& target,
                                    const PersonSynthesizer& synthesizer, const PoseEstimator& estimator,
                                    const ParserAdapter& parser, const OksParams& params, std::mt19937_64& rng) {
  params.validate();
  SynthesisResult r;
  r.image = synthesizer.synthesize(person, target, rng);
  if (r.image.size() != person.size() || r.image.channels() != person.channels())
    fail(Errc::kShape, "synthesizer " + synthesizer.name() + " changed the image resolution");
  r.pose = estimator.estimate(r.image);
  if (r.pose) r.score = try_oks(target, *r.pose, params);
  r.accepted = r.score && *r.score >= params.threshold;
  if (r.accepted) {
    r.labels = parser.parse(r.image, *r.pose);
    if (static_cast<int64_t>(r.labels.size()) != person.height() * person.width())
      fail(Errc::kShape, "parser " + parser.name() + " returned the wrong number of labels");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Clustering

std::vector<double> pose_feature(const PoseKeypoints& pose) {
  const double mx = 0.5 * (pose[kLeftShoulder].x + pose[kRightShoulder].x);
  const double my = 0.5 * (pose[kLeftShoulder].y + pose[kRightShoulder].y);
  const double inv = 1.0 / std::sqrt(pose.bbox_area());
  std::vector<double> f;
  for (int i : kArmKeypoints) {
    f.push_back((pose[i].x - mx) * inv);
    f.push_back((pose[i].y - my) * inv);
  }
  return f;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Nearest centroid (lowest index on ties) and the summed squared distance.
double assign(const std::vector<std::vector<double>>& pts, const std::vector<std::vector<double>>& c,
              std::vector<int>& out) {
  double inertia = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (size_t j = 0; j < c.size(); ++j) {
      const double d = sq_dist(pts[i], c[j]);
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    out[i] = arg;
    inertia += best;
  }
  return inertia;
}

}  // namespace

ClusterResult kmeans(const std::vector<std::vector<double>>& points, int k, uint64_t seed, KMeansOptions opt) {
  if (k < 1) fail(Errc::kConfig, "k must be at least 1");
  if (points.size() < static_cast<size_t>(k))
    fail(Errc::kData, "cannot form " + std::to_string(k) + " clusters from " + std::to_string(points.size()) + " poses");
  const size_t dim = points[0].size();
  for (const auto& p : points)
    if (p.size() != dim) fail(Errc::kShape, "k-means points differ in dimension");
  if (opt.max_iterations < 1) fail(Errc::kConfig, "k-means needs at least one iteration");

  std::mt19937_64 rng(seed);
  ClusterResult r;
  std::uniform_int_distribution<size_t> first(0, points.size() - 1);
  r.centroids.push_back(points[first(rng)]);
  std::vector<double> d2(points.size());
  while (r.centroids.size() < static_cast<size_t>(k)) {
    double total = 0;
    for (size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : r.centroids) d2[i] = std::min(d2[i], sq_dist(points[i], c));
      total += d2[i];
    }
    size_t pick = first(rng);
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (size_t i = 0; i < points.size(); ++i) {
        pick = i;
        if ((u -= d2[i]) < 0 && d2[i] > 0) break;
      }
    }
    r.centroids.push_back(points[pick]);
  }

  r.assignments.assign(points.size(), 0);
  for (int it = 0; it < opt.max_iterations; ++it) {
    r.inertia.push_back(assign(points, r.centroids, r.assignments));
    std::vector<std::vector<double>> sum(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int64_t> count(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < points.size(); ++i) {
      const auto c = static_cast<size_t>(r.assignments[i]);
      ++count[c];
      for (size_t d = 0; d < dim; ++d) sum[c][d] += points[i][d];
    }
    double shift = 0;
    for (size_t c = 0; c < static_cast<size_t>(k); ++c) {
      if (count[c] == 0) continue;  // an empty cluster keeps its centroid
      for (double& v : sum[c]) v /= static_cast<double>(count[c]);
      shift = std::max(shift, sq_dist(sum[c], r.centroids[c]));
      r.centroids[c] = std::move(sum[c]);
    }
    r.iterations = it + 1;
    if (shift <= opt.tolerance) break;
  }
  r.inertia.push_back(assign(points, r.centroids, r.assignments));
  r.histogram.assign(static_cast<size_t>(k), 0);
  for (int a : r.assignments) ++r.histogram[static_cast<size_t>(a)];
  return r;
}

ClusterResult cluster_poses(const std::vector<PoseKeypoints>& poses, int k, uint64_t seed, KMeansOptions opt) {
  std::vector<std::vector<double>> feats;
  feats.reserve(poses.size());
  for (const auto& p : poses) feats.push_back(pose_feature(p));
  if (k >= 1 && feats.size() < static_cast<size_t>(k))
    fail(Errc::kData, "cannot form " + std::to_string(k) + " clusters from " + std::to_string(poses.size()) + " poses");
  return kmeans(feats, k, seed, opt);
}

json ClusterReport::to_json() const {
  json clusters = json::array();
  for (size_t c = 0; c < result.histogram.size(); ++c)
    clusters.push_back({{"cluster", c}, {"size", result.histogram[c]}, {"examples", examples[c]}});
  return {{"k", result.histogram.size()},
          {"poses", result.assignments.size()},
          {"iterations", result.iterations},
          {"inertia", result.inertia.empty() ? json(nullptr) : json(result.inertia.back())},
          {"clusters", clusters},
          {"assignments", result.assignments}};
}

ClusterReport cluster_report(const std::vector<std::string>& ids, const std::vector<PoseKeypoints>& poses, int k,
                             uint64_t seed, int examples) {
  if (ids.size() != poses.size()) fail(Errc::kShape, "cluster report: ids and poses differ in count");
  if (examples < 0) fail(Errc::kConfig, "cluster report: examples must be >= 0");
  ClusterReport rep;
  rep.result = cluster_poses(poses, k, seed);
  rep.examples.assign(rep.result.histogram.size(), {});
  for (size_t i = 0; i < ids.size(); ++i) {
    auto& ex = rep.examples[static_cast<size_t>(rep.result.assignments[i])];
    if (static_cast<int>(ex.size()) < examples) ex.push_back(ids[i]);
  }
  return rep;
}

std::vector<std::pair<std::string, PoseKeypoints>> load_pose_set(const fs::path& location) {
  std::vector<std::pair<std::string, PoseKeypoints>> out;
  if (fs::is_directory(location)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(location))
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.emplace_back(f.stem().string(), load_pose(f));
  } else if (fs::is_regular_file(location)) {
    std::ifstream in(location);
    std::string line;
    int64_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const json j = json::parse(line);
        out.emplace_back(j.at("frame").get<std::string>(), pose_from_json(j.at("input_pose")));
      } catch (const json::exception& e) {
        fail(Errc::kData, location.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  } else {
    fail(Errc::kData, "pose set " + location.string() + " not found");
  }
  if (out.empty()) fail(Errc::kData, "pose set " + location.string() + " holds no poses");
  return out;
}

// ---------------------------------------------------------------------------
// Enrichment

json EnrichmentReport::to_json() const {
  json hp = json::array();
  for (const auto& h : hard)
    hp.push_back({{"frame", h.frame_id}, {"garment", h.garment_id}, {"score", h.score}});
  return {{"frames_scanned", frames_scanned},
          {"frames_unreadable", frames_unreadable},
          {"input_pose_missing", input_pose_missing},
          {"output_pose_missing", output_pose_missing},
          {"hard_poses", hard_poses},
          {"synth_attempted", synth_attempted},
          {"synth_accepted", synth_accepted},
          {"synth_rejected", synth_rejected},
          {"synth_failed", synth_failed},
          {"base_records", base_records},
          {"output_records", output_records},
          {"hard", hp}};
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::mt19937_64 frame_rng(uint64_t seed, uint64_t frame) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(frame),
                    static_cast<uint32_t>(frame >> 32)};
  return std::mt19937_64(seq);
}

RecordDescriptor absolute(RecordDescriptor d) {
  d.person = fs::absolute(d.person);
  d.garment = fs::absolute(d.garment);
  d.garment_mask = fs::absolute(d.garment_mask);
  d.pose = fs::absolute(d.pose);
  if (d.parser_map) d.parser_map = fs::absolute(*d.parser_map);
  return d;
}

}  // namespace

EnrichmentReport enrich_dataset(const EnrichOptions& opt, const Adapters& a) {
  if (!a.estimator || !a.synthesizer || !a.parser || !a.tryon)
    fail(Errc::kConfig, "enrichment needs an estimator, a synthesizer, a parser and a try-on model");
  opt.params.validate();
  if (!fs::is_directory(opt.frames_dir)) fail(Errc::kData, "frames directory " + opt.frames_dir.string() + " not found");

  const Manifest base = read_manifest(opt.base_manifest);
  const fs::path out = fs::absolute(opt.out_dir);
  fs::create_directories(out / "synth");
  std::ofstream rejections(out / "rejections.jsonl", std::ios::trunc);
  std::ofstream hard_log(out / "hard_poses.jsonl", std::ios::trunc);
  if (!rejections || !hard_log) fail(Errc::kData, "cannot write logs in " + out.string());
  auto reject = [&](const std::string& frame, const std::string& stage, std::optional<double> score,
                    const std::string& reason) {
    json j{{"frame", frame}, {"stage", stage}, {"reason", reason}};
    j["score"] = score ? json(*score) : json(nullptr);
    rejections << j.dump() << '\n';
  };

  std::vector<fs::path> frames;
  for (const auto& e : fs::directory_iterator(opt.frames_dir))
    if (e.is_regular_file() && is_image_file(e.path())) frames.push_back(e.path());
  std::sort(frames.begin(), frames.end());
  if (!frames.empty() && base.records.empty())
    fail(Errc::kData, "base manifest has no records to draw garments and persons from");

  EnrichmentReport rep;
  rep.base_records = static_cast<int64_t>(base.records.size());
  Manifest result{out, {}};
  for (const auto& d : base.records) result.records.push_back(absolute(d));

  for (size_t fi = 0; fi < frames.size(); ++fi) {
    const std::string id = frames[fi].stem().string();
    auto rng = frame_rng(opt.seed, fi);
    std::uniform_int_distribution<size_t> pick(0, base.records.size() - 1);
    ++rep.frames_scanned;
    ImageTensor frame;
    try {
      frame = load_image(frames[fi], opt.size);
    } catch (const Error& e) {
      ++rep.frames_unreadable;
      reject(id, "read", std::nullopt, e.what());
      continue;
    }
    const RecordDescriptor& garment_src = base.records[pick(rng)];
    const DatasetRecord garment_rec = garment_src.load(opt.size, opt.seg_channels);

    Detection det;
    try {
      det = detect_hard_pose(id, frame, garment_src.id, garment_rec.garment, a.tryon, *a.estimator, opt.params);
    } catch (const Error& e) {
      if (e.code() != Errc::kData) throw;
      ++rep.input_pose_missing;
      reject(id, "input-pose", std::nullopt, e.what());
      continue;
    }
    if (det.output_pose_missing) {
      ++rep.output_pose_missing;
      reject(id, "output-pose", std::nullopt, "no pose found on the try-on result");
      continue;
    }
    if (!det.hard) continue;
    ++rep.hard_poses;
    rep.hard.push_back(*det.hard);
    hard_log << json{{"frame", id},
                     {"garment", det.hard->garment_id},
                     {"score", det.hard->score},
                     {"input_pose", pose_to_json(det.hard->input_pose)},
                     {"output_pose", pose_to_json(det.hard->output_pose)}}
                    .dump()
             << '\n';

    const RecordDescriptor& person_src = base.records[pick(rng)];
    const DatasetRecord person_rec = person_src.load(opt.size, opt.seg_channels);
    ++rep.synth_attempted;
    SynthesisResult syn;
    try {
      syn = synthesize_for_pose(person_rec.person, det.hard->input_pose, *a.synthesizer, *a.estimator, *a.parser,
                                opt.params, rng);
    } catch (const Error& e) {
      ++rep.synth_failed;
      reject(id, "synthesize", std::nullopt, e.what());
      continue;
    }
    if (!syn.accepted) {
      ++rep.synth_rejected;
      reject(id, "double-check", syn.score,
             syn.score ? "OKS below threshold" : "no pose found on the synthesized image");
      continue;
    }
    ++rep.synth_accepted;

    const std::string rid = "synth_" + id;
    const fs::path dir = out / "synth";
    std::vector<double> mask(syn.labels.size());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = syn.labels[i] == kUpperClothesLabel ? 1.0 : 0.0;
    RecordDescriptor d;
    d.id = rid;
    d.person = dir / (rid + "_person.png");
    d.garment = fs::absolute(person_src.garment);
    d.garment_mask = dir / (rid + "_mask.png");
    d.pose = dir / (rid + "_pose.json");
    d.parser_map = dir / (rid + "_parser.png");
    d.origin = Origin::kSynthesized;
    save_image(d.person, syn.image);
    save_mask(d.garment_mask, MaskTensor(opt.size.height, opt.size.width, std::move(mask)));
    save_pose(d.pose, *syn.pose);
    save_label_map(*d.parser_map, opt.size, syn.labels);
    result.records.push_back(std::move(d));
  }

  rep.output_records = static_cast<int64_t>(result.records.size());
  write_manifest(result);
  json j = rep.to_json();
  j["adapters"] = {{"estimator", a.estimator->name()},
                   {"synthesizer", a.synthesizer->name()},
                   {"parser", a.parser->name()}};
  j["threshold"] = opt.params.threshold;
  std::ofstream(out / "report.json") << j.dump(2) << '\n';
  return rep;
}

// ---------------------------------------------------------------------------
// Mock adapters

namespace mock {

namespace {

constexpr double kBackground = -0.6;
constexpr double kLimb = 0.2;
constexpr double kColorTolerance = 0.05;

constexpr std::array<std::pair<int, int>, 16> kSkeleton = {{{0, 1},
                                                            {0, 2},
                                                            {1, 3},
                                                            {2, 4},
                                                            {5, 6},
                                                            {5, 7},
                                                            {7, 9},
                                                            {6, 8},
                                                            {8, 10},
                                                            {5, 11},
                                                            {6, 12},
                                                            {11, 12},
                                                            {11, 13},
                                                            {13, 15},
                                                            {12, 14},
                                                            {14, 16}}};

void draw_line(ImageTensor& img, double x0, double y0, double x1, double y1, double value) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const auto x = static_cast<int64_t>(std::lround(x0 + t * (x1 - x0)));
    const auto y = static_cast<int64_t>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
    for (int64_t c = 0; c < img.channels(); ++c) img.at(c, y, x) = value;
  }
}

template <class F>
void paint(std::vector<int>& labels, Size2 size, F&& inside, int label) {
  for (int64_t y = 0; y < size.height; ++y)
    for (int64_t x = 0; x < size.width; ++x)
      if (inside(static_cast<double>(x), static_cast<double>(y))) labels[static_cast<size_t>(y * size.width + x)] = label;
}

double seg_dist(double px, double py, const KeypointXYC& a, const KeypointXYC& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = a.x + t * vx - px, dy = a.y + t * vy - py;
  return std::sqrt(dx * dx + dy * dy);
}

KeypointArray drop_arm(KeypointArray k, int shoulder, int elbow, int wrist, double mid_x) {
  const auto& s = k[static_cast<size_t>(shoulder)];
  const double side = s.x >= mid_x ? 1.0 : -1.0;
  k[static_cast<size_t>(elbow)] = {s.x + 2 * side, s.y + 10, 1.0};
  k[static_cast<size_t>(wrist)] = {s.x + 3 * side, s.y + 20, 1.0};
  return k;
}

}  // namespace

std::array<std::array<double, 3>, kNumKeypoints> marker_colors() {
  std::array<std::array<double, 3>, kNumKeypoints> out{};
  const uint8_t levels[3] = {0, 128, 255};
  size_t n = 0;
  for (int r = 0; r < 3 && n < out.size(); ++r)
    for (int g = 0; g < 3 && n < out.size(); ++g)
      for (int b = 0; b < 3 && n < out.size(); ++b) {
        if (r == g && g == b) continue;  // greys are reserved for background and limbs
        out[n++] = {u8_to_unit(levels[r]), u8_to_unit(levels[g]), u8_to_unit(levels[b])};
      }
  return out;
}

ImageTensor render_stick_figure(const PoseKeypoints& pose, Size2 size) {
  ImageTensor img(3, size.height, size.width, kBackground);
  for (const auto& [a, b] : kSkeleton)
    if (pose.visible(a) && pose.visible(b)) draw_line(img, pose[a].x, pose[a].y, pose[b].x, pose[b].y, kLimb);
  const auto colors = marker_colors();
  for (int i = 0; i < kNumKeypoints; ++i) {
    if (!pose.visible(i)) continue;
    const auto cx = static_cast<int64_t>(std::lround(pose[i].x));
    const auto cy = static_cast<int64_t>(std::lround(pose[i].y));
    for (int64_t y = cy - 1; y <= cy + 1; ++y)
      for (int64_t x = cx - 1; x <= cx + 1; ++x) {
        if (x < 0 || y < 0 || x >= size.width || y >= size.height) continue;
        for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = colors[static_cast<size_t>(i)][static_cast<size_t>(c)];
      }
  }
  return img;
}

std::optional<PoseKeypoints> MarkerEstimator::estimate(const ImageTensor& image) const {
  if (image.channels() != 3) return std::nullopt;
  const auto colors = marker_colors();
  std::array<double, kNumKeypoints> sx{}, sy{};
  std::array<int64_t, kNumKeypoints> n{};
  for (int64_t y = 0; y < image.height(); ++y)
    for (int64_t x = 0; x < image.width(); ++x)
      for (int i = 0; i < kNumKeypoints; ++i) {
        const auto& col = colors[static_cast<size_t>(i)];
        bool match = true;
        for (int64_t c = 0; c < 3 && match; ++c)
          match = std::abs(image.at(c, y, x) - col[static_cast<size_t>(c)]) <= kColorTolerance;
        if (!match) continue;
        sx[static_cast<size_t>(i)] += static_cast<double>(x);
        sy[static_cast<size_t>(i)] += static_cast<double>(y);
        ++n[static_cast<size_t>(i)];
        break;
      }
  KeypointArray k{};
  for (size_t i = 0; i < k.size(); ++i)
    if (n[i] > 0) k[i] = {sx[i] / static_cast<double>(n[i]), sy[i] / static_cast<double>(n[i]), 1.0};
  if (tight_bbox_area(k) <= 0) return std::nullopt;
  return PoseKeypoints(k);
}

ImageTensor StickFigureSynthesizer::synthesize(const ImageTensor& person, const PoseKeypoints& target,
                                               std::mt19937_64&) const {
  return render_stick_figure(target, person.size());
}

ImageTensor CorruptingSynthesizer::synthesize(const ImageTensor& person, const PoseKeypoints& target,
                                              std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  KeypointArray k = target.points();
  for (auto& p : k) {
    const double a = angle(rng);
    p.x = std::clamp(p.x + noise_ * std::cos(a), 1.0, static_cast<double>(person.width() - 2));
    p.y = std::clamp(p.y + noise_ * std::sin(a), 1.0, static_cast<double>(person.height() - 2));
  }
  const double area = tight_bbox_area(k);
  return render_stick_figure(area > 0 ? PoseKeypoints(k) : target, person.size());
}

std::vector<int> SkeletonParser::parse(const ImageTensor& person, const PoseKeypoints& pose) const {
  if (seg_channels_ <= kUpperClothesLabel) fail(Errc::kConfig, "parser needs an upper-clothes channel");
  const Size2 size = person.size();
  std::vector<int> labels(static_cast<size_t>(size.height * size.width), 0);
  auto limb = [&](int a, int b, double r) {
    return [&, a, b, r](double x, double y) { return seg_dist(x, y, pose[a], pose[b]) <= r; };
  };
  auto box = [&](std::initializer_list<int> ids) {
    double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
    for (int i : ids) {
      x0 = std::min(x0, pose[i].x);
      x1 = std::max(x1, pose[i].x);
      y0 = std::min(y0, pose[i].y);
      y1 = std::max(y1, pose[i].y);
    }
    return [=](double x, double y) { return x >= x0 && x <= x1 && y >= y0 && y <= y1; };
  };
  const auto& nose = pose[kNose];
  paint(labels, size, box({kLeftHip, kRightHip, kLeftAnkle, kRightAnkle}), 6);
  paint(labels, size, box({kLeftShoulder, kRightShoulder, kLeftHip, kRightHip}), kUpperClothesLabel);
  paint(labels, size, limb(kLeftShoulder, kLeftElbow, 2.0), 4);
  paint(labels, size, limb(kLeftElbow, kLeftWrist, 2.0), 4);
  paint(labels, size, limb(kRightShoulder, kRightElbow, 2.0), 5);
  paint(labels, size, limb(kRightElbow, kRightWrist, 2.0), 5);
  paint(labels, size, [&](double x, double y) { return std::hypot(x - nose.x, y - nose.y + 4) <= 3.0; }, 1);
  paint(labels, size, [&](double x, double y) { return std::hypot(x - nose.x, y - nose.y) <= 3.0; }, 2);
  for (int& l : labels)
    if (l >= seg_channels_) l = 0;
  return labels;
}

TryOnFn arm_dropping_tryon(Size2 size) {
  return [size](const ImageTensor& person, const ImageTensor&) {
    const auto pose = MarkerEstimator().estimate(person);
    if (!pose) return person;
    KeypointArray k = pose->points();
    const double mid_x = 0.5 * (k[kLeftShoulder].x + k[kRightShoulder].x);
    bool changed = false;
    for (auto [s, e, w] : {std::array<int, 3>{kLeftShoulder, kLeftElbow, kLeftWrist},
                           std::array<int, 3>{kRightShoulder, kRightElbow, kRightWrist}}) {
      if (pose->visible(s) && pose->visible(w) && k[static_cast<size_t>(w)].y < k[static_cast<size_t>(s)].y) {
        k = drop_arm(k, s, e, w, mid_x);
        changed = true;
      }
    }
    return changed ? render_stick_figure(PoseKeypoints(k), size) : person;
  };
}

PoseKeypoints standing_pose() {
  KeypointArray k{};
  const double xy[kNumKeypoints][2] = {{24, 10}, {27, 7},  {21, 7},  {30, 9},  {18, 9},  {32, 16},
                                       {16, 16}, {35, 26}, {13, 26}, {37, 36}, {11, 36}, {29, 38},
                                       {19, 38}, {29, 49}, {19, 49}, {29, 60}, {19, 60}};
  for (size_t i = 0; i < k.size(); ++i) k[i] = {xy[i][0], xy[i][1], 1.0};
  return PoseKeypoints(k);
}

PoseKeypoints raised_arms_pose() {
  KeypointArray k = standing_pose().points();
  k[kLeftElbow] = {38, 9, 1.0};
  k[kLeftWrist] = {42, 3, 1.0};
  k[kRightElbow] = {10, 9, 1.0};
  k[kRightWrist] = {6, 3, 1.0};
  return PoseKeypoints(k);
}

std::vector<PoseKeypoints> write_frame_fixture(const fs::path& dir, Size2 size) {
  fs::create_directories(dir);
  const double shifts[5] = {0, 2, -2, -1, 1};
  std::vector<PoseKeypoints> poses;
  for (int f = 0; f < 5; ++f) {
    KeypointArray k = (f == 1 || f == 3 ? raised_arms_pose() : standing_pose()).points();
    for (auto& p : k) p.x += shifts[f];
    poses.emplace_back(k);
    save_image(dir / ("frame" + std::to_string(f) + ".png"), render_stick_figure(poses.back(), size));
  }
  return poses;
}

std::vector<std::pair<std::string, PoseKeypoints>> separable_poses(int n_down, int n_up, uint64_t seed,
                                                                   double jitter_px) {
  if (n_down < 0 || n_up < 0) fail(Errc::kConfig, "pose group sizes must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-jitter_px, jitter_px);
  std::vector<std::pair<std::string, PoseKeypoints>> out;
  auto add = [&](const PoseKeypoints& base, const std::string& prefix, int n) {
    for (int i = 0; i < n; ++i) {
      KeypointArray k = base.points();
      for (auto& p : k) {
        p.x += u(rng);
        p.y += u(rng);
      }
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03d", prefix.c_str(), i);
      out.emplace_back(id, PoseKeypoints(k));
    }
  };
  add(standing_pose(), "down", n_down);
  add(raised_arms_pose(), "up", n_up);
  return out;
}

void write_pose_fixture(const fs::path& dir, const std::vector<std::pair<std::string, PoseKeypoints>>& poses) {
  fs::create_directories(dir);
  for (const auto& [id, pose] : poses) save_pose(dir / (id + ".json"), pose);
}

}  // namespace mock

}  // namespace dmvton::vtpds
