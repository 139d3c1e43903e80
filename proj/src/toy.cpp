#include "dmvton/toy.hpp"

#include <array>
#include <cmath>
#include <random>

#include "dmvton/errors.hpp"

namespace dmvton::toy {

namespace fs = std::filesystem;

namespace {

using Rgb = std::array<double, 3>;

constexpr int kBackground = 0, kHair = 1, kFace = 2, kUpper = 3, kLeftArm = 4, kRightArm = 5, kLower = 6;

const std::array<Rgb, 8> kPalette = {{{0.8, -0.6, -0.5},
                                      {-0.5, 0.6, -0.4},
                                      {-0.6, -0.3, 0.8},
                                      {0.8, 0.7, -0.6},
                                      {0.6, -0.5, 0.7},
                                      {-0.6, 0.7, 0.7},
                                      {0.9, 0.2, -0.7},
                                      {-0.2, -0.7, 0.3}}};
const Rgb kSkin = {0.7, 0.3, 0.05};
const Rgb kHairColor = {-0.7, -0.75, -0.8};
const Rgb kPants = {-0.75, -0.7, -0.3};

struct Canvas {
  int64_t h, w;
  ImageTensor img;
  std::vector<int> labels;
  Canvas(int64_t h_, int64_t w_, Rgb bg)
      : h(h_), w(w_), img(3, h_, w_), labels(static_cast<size_t>(h_ * w_), kBackground) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = bg[static_cast<size_t>(c)];
  }
  void put(int64_t y, int64_t x, const Rgb& c, int label) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    for (int k = 0; k < 3; ++k) img.at(k, y, x) = c[static_cast<size_t>(k)];
    labels[static_cast<size_t>(y * w + x)] = label;
  }
};

// Striped garment colour at a position relative to the garment's top-left.
Rgb garment_color(int garment, double gy, double gx, double stripe) {
  const Rgb base = kPalette[static_cast<size_t>(garment) % kPalette.size()];
  const bool vertical = (garment / static_cast<int>(kPalette.size())) % 2 == 1;
  const double coord = vertical ? gx : gy;
  const bool light = static_cast<int64_t>(std::floor(coord / stripe)) % 2 == 0;
  Rgb c = base;
  if (light)
    for (double& v : c) v = 0.5 * v + 0.45;
  return c;
}

struct Figure {
  double cx, top, torso_w, torso_h;
  KeypointArray kp;
};

void draw_segment(Canvas& cv, double x0, double y0, double x1, double y1, double radius, const Rgb& c, int label) {
  const int64_t xmin = static_cast<int64_t>(std::floor(std::min(x0, x1) - radius));
  const int64_t xmax = static_cast<int64_t>(std::ceil(std::max(x0, x1) + radius));
  const int64_t ymin = static_cast<int64_t>(std::floor(std::min(y0, y1) - radius));
  const int64_t ymax = static_cast<int64_t>(std::ceil(std::max(y0, y1) + radius));
  const double dx = x1 - x0, dy = y1 - y0, len2 = dx * dx + dy * dy;
  for (int64_t y = ymin; y <= ymax; ++y)
    for (int64_t x = xmin; x <= xmax; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = px - (x0 + t * dx), ey = py - (y0 + t * dy);
      if (ex * ex + ey * ey <= radius * radius) cv.put(y, x, c, label);
    }
}

}  // namespace

std::vector<DatasetRecord> make_records(const ToyOptions& opt) {
  if (opt.count < 1) fail(Errc::kConfig, "toy dataset needs at least one record");
  if (opt.size.height < 16 || opt.size.width < 12) fail(Errc::kConfig, "toy images must be at least 16x12");
  if (opt.seg_channels <= kLower) fail(Errc::kConfig, "toy parser maps need at least 7 classes");
  const double H = static_cast<double>(opt.size.height), W = static_cast<double>(opt.size.width);
  const double s = H / 64.0;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };

  std::vector<DatasetRecord> out;
  for (int64_t i = 0; i < opt.count; ++i) {
    const int garment = static_cast<int>(i % 16);
    const double stripe = std::round(uni(3.0, 5.0) * s);
    const double torso_w = std::round(0.42 * W), torso_h = std::round(0.34 * H);
    const double dx = std::round(uni(-5.0, 5.0) * s), dy = std::round(uni(-4.0, 4.0) * s);
    const double left = std::round((W - torso_w) / 2 + dx), top = std::round(0.30 * H + dy);
    const double cx = left + torso_w / 2;
    const Rgb bg = {uni(0.35, 0.6), uni(0.35, 0.6), uni(0.4, 0.65)};
    Canvas person(opt.size.height, opt.size.width, bg);

    KeypointArray kp{};
    auto set = [&](int k, double x, double y) {
      kp[static_cast<size_t>(k)] = {std::clamp(x, 0.0, W - 1), std::clamp(y, 0.0, H - 1), 1.0};
    };
    const double head_r = 0.085 * H, head_y = top - head_r - 1.0 * s;
    const double sx_l = left + 1, sx_r = left + torso_w - 2;
    set(kLeftShoulder, sx_l, top + 1);
    set(kRightShoulder, sx_r, top + 1);
    const double arm_len = 0.17 * H;
    const double a_l = uni(0.15, 1.2), a_r = uni(0.15, 1.2);  // radians away from vertical
    const double b_l = a_l + uni(-0.5, 0.5), b_r = a_r + uni(-0.5, 0.5);
    set(kLeftElbow, sx_l - arm_len * std::sin(a_l), top + 1 + arm_len * std::cos(a_l));
    set(kRightElbow, sx_r + arm_len * std::sin(a_r), top + 1 + arm_len * std::cos(a_r));
    set(kLeftWrist, kp[kLeftElbow].x - arm_len * std::sin(b_l), kp[kLeftElbow].y + arm_len * std::cos(b_l));
    set(kRightWrist, kp[kRightElbow].x + arm_len * std::sin(b_r), kp[kRightElbow].y + arm_len * std::cos(b_r));
    set(kNose, cx, head_y + 0.2 * head_r);
    set(kLeftEye, cx - 0.35 * head_r, head_y - 0.15 * head_r);
    set(kRightEye, cx + 0.35 * head_r, head_y - 0.15 * head_r);
    set(kLeftEar, cx - 0.9 * head_r, head_y);
    set(kRightEar, cx + 0.9 * head_r, head_y);
    const double hip_y = top + torso_h - 1;
    set(kLeftHip, left + 0.25 * torso_w, hip_y);
    set(kRightHip, left + 0.75 * torso_w, hip_y);
    set(kLeftKnee, left + 0.22 * torso_w, hip_y + 0.14 * H);
    set(kRightKnee, left + 0.78 * torso_w, hip_y + 0.14 * H);
    set(kLeftAnkle, left + 0.2 * torso_w, hip_y + 0.28 * H);
    set(kRightAnkle, left + 0.8 * torso_w, hip_y + 0.28 * H);

    // Lower body, torso (garment), arms, head.
    for (int64_t y = static_cast<int64_t>(hip_y); y < opt.size.height; ++y)
      for (int64_t x = static_cast<int64_t>(left + 0.1 * torso_w); x < static_cast<int64_t>(left + 0.9 * torso_w); ++x)
        person.put(y, x, kPants, kLower);
    for (int64_t y = static_cast<int64_t>(top); y < static_cast<int64_t>(top + torso_h); ++y)
      for (int64_t x = static_cast<int64_t>(left); x < static_cast<int64_t>(left + torso_w); ++x)
        person.put(y, x, garment_color(garment, static_cast<double>(y) - top, static_cast<double>(x) - left, stripe),
                   kUpper);
    const double arm_r = std::max(1.0, 1.6 * s);
    draw_segment(person, kp[kLeftShoulder].x - arm_r, kp[kLeftShoulder].y, kp[kLeftElbow].x, kp[kLeftElbow].y, arm_r,
                 kSkin, kLeftArm);
    draw_segment(person, kp[kLeftElbow].x, kp[kLeftElbow].y, kp[kLeftWrist].x, kp[kLeftWrist].y, arm_r, kSkin,
                 kLeftArm);
    draw_segment(person, kp[kRightShoulder].x + arm_r, kp[kRightShoulder].y, kp[kRightElbow].x, kp[kRightElbow].y,
                 arm_r, kSkin, kRightArm);
    draw_segment(person, kp[kRightElbow].x, kp[kRightElbow].y, kp[kRightWrist].x, kp[kRightWrist].y, arm_r, kSkin,
                 kRightArm);
    for (int64_t y = 0; y < opt.size.height; ++y)
      for (int64_t x = 0; x < opt.size.width; ++x) {
        const double ex = static_cast<double>(x) - cx, ey = static_cast<double>(y) - head_y;
        if (ex * ex + ey * ey <= head_r * head_r) person.put(y, x, ey < -0.3 * head_r ? kHairColor : kSkin,
                                                              ey < -0.3 * head_r ? kHair : kFace);
      }

    // Garment image: same garment at the canonical (unshifted) position.
    ImageTensor garment_img(3, opt.size.height, opt.size.width, 0.0);
    const double g_left = std::round((W - torso_w) / 2), g_top = std::round(0.30 * H);
    for (int64_t y = static_cast<int64_t>(g_top); y < static_cast<int64_t>(g_top + torso_h); ++y)
      for (int64_t x = static_cast<int64_t>(g_left); x < static_cast<int64_t>(g_left + torso_w); ++x) {
        const Rgb c = garment_color(garment, static_cast<double>(y) - g_top, static_cast<double>(x) - g_left, stripe);
        for (int k = 0; k < 3; ++k) garment_img.at(k, y, x) = c[static_cast<size_t>(k)];
      }

    std::vector<double> mask(person.labels.size());
    for (size_t k = 0; k < mask.size(); ++k) mask[k] = person.labels[k] == kUpper ? 1.0 : 0.0;
    PoseKeypoints pose(kp);
    DatasetRecord rec{"toy" + std::to_string(i),
                      person.img,
                      garment_img,
                      MaskTensor(opt.size.height, opt.size.width, std::move(mask)),
                      pose,
                      HumanRepresentation::build(person.labels, opt.size, opt.seg_channels, pose),
                      Origin::kReal};
    out.push_back(std::move(rec));
  }
  return out;
}

Manifest write_dataset(const fs::path& dir, const ToyOptions& opt) {
  const auto records = make_records(opt);
  Manifest m;
  m.root = dir;
  fs::create_directories(dir / "person");
  fs::create_directories(dir / "garment");
  fs::create_directories(dir / "mask");
  fs::create_directories(dir / "pose");
  fs::create_directories(dir / "parser");
  for (const auto& r : records) {
    RecordDescriptor d;
    d.id = r.id;
    d.person = dir / "person" / (r.id + ".png");
    d.garment = dir / "garment" / (r.id + ".png");
    d.garment_mask = dir / "mask" / (r.id + ".png");
    d.pose = dir / "pose" / (r.id + ".json");
    d.parser_map = dir / "parser" / (r.id + ".png");
    d.origin = r.origin;
    save_image(d.person, r.person);
    save_image(d.garment, r.garment);
    save_mask(d.garment_mask, r.garment_mask);
    save_pose(d.pose, r.pose);
    const Tensor& pm = r.human_rep->parser_map();
    const int64_t hw = opt.size.height * opt.size.width;
    std::vector<int> labels(static_cast<size_t>(hw), 0);
    for (int64_t c = 0; c < pm.dim(0); ++c)
      for (int64_t i = 0; i < hw; ++i)
        if (pm[c * hw + i] > 0.5) labels[static_cast<size_t>(i)] = static_cast<int>(c);
    save_label_map(*d.parser_map, opt.size, labels);
    m.records.push_back(std::move(d));
  }
  write_manifest(m);
  return m;
}

}  // namespace dmvton::toy
