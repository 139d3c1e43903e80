#include <cmath>

#include "doctest.h"
#include "dmvton/errors.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/optim.hpp"
#include "test_util.hpp"

using namespace dmvton;
using namespace dmvton::nets;
using ag::Var;
using testutil::uniform;

namespace {

int64_t conv_params(int64_t in, int64_t out, int64_t k, int64_t groups = 1, bool bias = true) {
  return out * (in / groups) * k * k + (bias ? out : 0);
}

int64_t ir_params(int64_t in, int64_t out, int64_t expansion) {
  const int64_t hidden = in * expansion;
  return (expansion != 1 ? conv_params(in, hidden, 1) : 0) + conv_params(hidden, hidden, 3, hidden) +
         conv_params(hidden, out, 1);
}

// Stem, one stride-2 inverted residual per level, laterals and smoothing convs.
int64_t mobile_fpn_params(int64_t in, const NetConfig& cfg) {
  const int64_t p = cfg.pyramid_width();
  int64_t total = conv_params(in, cfg.channels[0], 3);
  int64_t prev = cfg.channels[0];
  for (int64_t c : cfg.channels) {
    total += ir_params(prev, c, cfg.expansion) + conv_params(c, p, 1) + conv_params(p, p, 3);
    prev = c;
  }
  return total;
}

bool all_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("presets") {
  const NetConfig t = NetConfig::tiny();
  CHECK(t.levels == 3);
  CHECK(t.channels == std::vector<int64_t>{8, 16, 24});
  CHECK(t.image_size() == Size2{64, 48});
  const NetConfig p = NetConfig::paper();
  CHECK(p.levels == 5);
  CHECK(p.channels == std::vector<int64_t>{32, 64, 128, 256, 256});
  CHECK(p.image_size() == Size2{256, 192});
  CHECK(NetConfig::from_preset("paper").levels == 5);
  CHECK_THROWS_AS(NetConfig::from_preset("huge"), Error);
  NetConfig bad = t;
  bad.height = 60;  // not divisible by 2^(N-1)... nor by the encoder's 2^N
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = t;
  bad.channels = {8, 16};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("mobile feature pyramid shapes, determinism and parameter count") {
  const NetConfig cfg = NetConfig::tiny();
  FeaturePyramidNet fpn(3, cfg, FeaturePyramidNet::Kind::kMobile);
  fpn.reset_parameters(1);
  std::mt19937_64 rng(1);
  const Var x(uniform({1, 3, 64, 48}, rng));
  const auto a = fpn.forward(x);
  REQUIRE(a.size() == 3);
  CHECK(a[0].shape() == Shape{1, 24, 8, 6});
  CHECK(a[1].shape() == Shape{1, 24, 16, 12});
  CHECK(a[2].shape() == Shape{1, 24, 32, 24});
  for (int i = 0; i < 3; ++i) CHECK(cfg.level_size(i) == Size2{a[i].shape()[2], a[i].shape()[3]});
  const auto b = fpn.forward(x);
  for (size_t i = 0; i < a.size(); ++i) CHECK(all_equal(a[i].value(), b[i].value()));
  CHECK(fpn.parameter_count() == mobile_fpn_params(3, cfg));
  CHECK(fpn.parameter_count() == 24992);
}

TEST_CASE("inverted residual skip rule") {
  std::mt19937_64 rng(2);
  const Tensor x = uniform({1, 4, 6, 6}, rng);
  auto zero_branch = [](nn::InvertedResidual& ir) {
    for (auto& p : ir.parameters())
      if (p.name.rfind("project.", 0) == 0) p.var.mutable_value().fill(0.0);
  };
  SUBCASE("stride 1, equal channels: zeroed branch gives the input back") {
    nn::InvertedResidual ir({4, 4, 1, 6});
    ir.reset_parameters(3);
    CHECK(ir.uses_residual());
    zero_branch(ir);
    CHECK(all_equal(ir.forward(Var(x)).value(), x));
  }
  SUBCASE("stride 2: no skip") {
    nn::InvertedResidual ir({4, 4, 2, 6});
    ir.reset_parameters(3);
    CHECK_FALSE(ir.uses_residual());
    zero_branch(ir);
    const Tensor y = ir.forward(Var(x)).value();
    CHECK(y.shape() == Shape{1, 4, 3, 3});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
  }
  SUBCASE("channel change: no skip") {
    nn::InvertedResidual ir({4, 6, 1, 6});
    ir.reset_parameters(3);
    CHECK_FALSE(ir.uses_residual());
    zero_branch(ir);
    const Tensor y = ir.forward(Var(x)).value();
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
  }
  SUBCASE("stride 1 with live branch: output = branch + input") {
    nn::InvertedResidual ir({4, 4, 1, 6});
    ir.reset_parameters(4);
    const Tensor y = ir.forward(Var(x)).value();
    auto p = [&](const char* n) { return ir.parameter(n); };
    Var h = ops::relu6(ops::conv2d(Var(x), p("expand.weight"), p("expand.bias"), {}));
    h = ops::relu6(ops::conv2d(h, p("depthwise.weight"), p("depthwise.bias"), {1, 1, 24}));
    const Tensor branch = ops::conv2d(h, p("project.weight"), p("project.bias"), {}).value();
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(branch[i] + x[i]).epsilon(1e-14));
  }
}

TEST_CASE("modulated conv with all-ones style reduces to a plain conv") {
  std::mt19937_64 rng(5);
  const int64_t style_dim = 3, in = 4, out = 5;
  const Tensor x = uniform({2, in, 5, 4}, rng);
  for (bool demod : {false, true}) {
    CAPTURE(demod);
    ModulatedConv2d mc(style_dim, in, out, 3, demod);
    mc.reset_parameters(6);
    // Affine weight 0, bias 1: every input channel gets scale exactly 1.
    mc.set_parameter("style.weight", Tensor({in, style_dim}));
    Tensor ones({in});
    ones.fill(1.0);
    mc.set_parameter("style.bias", ones);
    Tensor bias = uniform({out}, rng);
    mc.set_parameter("bias", bias);
    const Var style(uniform({2, style_dim}, rng));
    const Tensor s = mc.modulation(style).value();
    for (int64_t i = 0; i < s.numel(); ++i) REQUIRE(s[i] == 1.0);

    Tensor w = mc.parameter("weight").value();
    if (demod) {
      // Each output filter divided by its L2 norm (the demodulation constant).
      const int64_t per = in * 9;
      for (int64_t o = 0; o < out; ++o) {
        double ss = 0;
        for (int64_t i = 0; i < per; ++i) ss += w[o * per + i] * w[o * per + i];
        const double k = 1.0 / std::sqrt(ss + 1e-8);
        for (int64_t i = 0; i < per; ++i) w[o * per + i] *= k;
      }
    }
    const Tensor plain = ops::conv2d(Var(x), Var(w), Var(bias), {1, 1, 1}).value();
    const Tensor got = mc.forward(Var(x), style).value();
    for (int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(plain[i]).epsilon(1e-12));
  }
}

TEST_CASE("student shapes, range and determinism") {
  const NetConfig cfg = NetConfig::tiny();
  StudentNet net(cfg);
  net.init(7);
  std::mt19937_64 rng(8);
  const Var person(uniform({2, 3, 64, 48}, rng));
  const Var garment(uniform({2, 3, 64, 48}, rng));
  const StudentOutput o = net.run(person, garment);
  REQUIRE(o.warp.flows.levels.size() == 3);
  CHECK(o.warp.flows.levels[0].shape() == Shape{2, 2, 8, 6});
  CHECK(o.warp.flows.levels[1].shape() == Shape{2, 2, 16, 12});
  CHECK(o.warp.flows.levels[2].shape() == Shape{2, 2, 32, 24});
  CHECK(o.warp.warped.shape() == Shape{2, 3, 64, 48});
  CHECK(o.gen.tryon.shape() == Shape{2, 3, 64, 48});
  CHECK(o.gen.mask.shape() == Shape{2, 1, 64, 48});
  for (double v : std::span(o.gen.tryon.value().data(), o.gen.tryon.value().numel())) {
    REQUIRE(v >= -1.0);
    REQUIRE(v <= 1.0);
  }
  for (double v : std::span(o.gen.mask.value().data(), o.gen.mask.value().numel())) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  const StudentOutput again = net.run(person, garment);
  CHECK(all_equal(o.gen.tryon.value(), again.gen.tryon.value()));
  // The packed single-input path is the same computation.
  CHECK(all_equal(net.forward(ops::concat_channels({person, garment})).value(), o.gen.tryon.value()));
  CHECK_THROWS_AS(net.run(Var(Tensor({1, 3, 32, 48})), Var(Tensor({1, 3, 32, 48}))), Error);
}

TEST_CASE("garment features drive the flow") {
  StudentNet net(NetConfig::tiny());
  net.init(9);
  std::mt19937_64 rng(10);
  const Var person(uniform({1, 3, 64, 48}, rng));
  const Tensor g1 = uniform({1, 3, 64, 48}, rng);
  const Tensor g2 = uniform({1, 3, 64, 48}, rng);
  const Tensor f1 = net.warp(person, Var(g1)).flows.levels.back().value();
  const Tensor f2 = net.warp(person, Var(g2)).flows.levels.back().value();
  CHECK_FALSE(all_equal(f1, f2));
}

TEST_CASE("zero flow heads and a forced mask give the garment back") {
  NetConfig cfg = NetConfig::tiny();
  cfg.zero_flow_heads = true;
  std::mt19937_64 rng(11);
  const Tensor garment = uniform({1, 3, 64, 48}, rng);
  SUBCASE("student") {
    StudentNet net(cfg);
    net.init(12);
    const StudentOutput o = net.run(Var(uniform({1, 3, 64, 48}, rng)), Var(garment));
    for (const auto& f : o.warp.flows.levels)
      for (int64_t i = 0; i < f.value().numel(); ++i) REQUIRE(f.value()[i] == 0.0);
    CHECK(all_equal(o.warp.warped.value(), garment));
    net.force_mask_one();
    const StudentOutput m = net.run(Var(uniform({1, 3, 64, 48}, rng)), Var(garment));
    CHECK(all_equal(m.gen.tryon.value(), garment));
  }
  SUBCASE("teacher") {
    TeacherNet net(cfg);
    net.init(13);
    const Var rep(uniform({1, cfg.human_rep_channels(), 64, 48}, rng, 0, 1));
    const TeacherOutput o = net.run(rep, Var(garment), Var(uniform({1, 3, 64, 48}, rng)));
    for (const auto& f : o.warp.flows.levels)
      for (int64_t i = 0; i < f.value().numel(); ++i) REQUIRE(f.value()[i] == 0.0);
    CHECK(all_equal(o.warp.warped.value(), garment));
    CHECK(o.gen.tryon.shape() == Shape{1, 3, 64, 48});
    CHECK_THROWS_AS(net.run(Var(), Var(garment), Var(garment)), Error);
  }
}

TEST_CASE("preserved region removes the upper-clothes label") {
  std::mt19937_64 rng(14);
  const Tensor person = uniform({1, 3, 2, 2}, rng);
  Tensor rep({1, 7 + 17, 2, 2});
  rep.at(0, kUpperClothesLabel, 0, 1) = 1.0;
  rep.at(0, 0, 0, 0) = 1.0;
  const Tensor out = preserved_region(Var(person), Var(rep), 7).value();
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(out.at(0, c, 0, 1) == 0.0);
    CHECK(out.at(0, c, 0, 0) == person.at(0, c, 0, 0));
    CHECK(out.at(0, c, 1, 1) == person.at(0, c, 1, 1));
  }
}

TEST_CASE("student is smaller than teacher; weights carry their network prefix") {
  for (const char* preset : {"tiny", "paper"}) {
    CAPTURE(preset);
    const NetConfig cfg = NetConfig::from_preset(preset);
    StudentNet s(cfg);
    TeacherNet t(cfg);
    CHECK(s.parameter_count() < t.parameter_count());
  }
  StudentNet s(NetConfig::tiny());
  s.init(1);
  const NamedTensors w = s.export_weights();
  for (const auto& [name, _] : w) {
    CHECK(name.rfind("student.", 0) == 0);
    CHECK(std::count(name.begin(), name.end(), '.') >= 3);  // network.stage.layer.param
  }
  CHECK(weights_kind(w) == "student");
  auto loaded = load_network(w, NetConfig::tiny());
  CHECK(std::string(loaded->name()) == "student");
  try {
    load_network(w, NetConfig::paper());
    FAIL("expected kConfig");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kConfig);
  }
  NamedTensors mixed = w;
  mixed.emplace("teacher.x.y.z", Tensor({1}));
  CHECK_THROWS_AS(weights_kind(mixed), Error);
}

TEST_CASE("init is reproducible and export/import round-trips") {
  StudentNet a(NetConfig::tiny()), b(NetConfig::tiny()), c(NetConfig::tiny());
  a.init(21);
  b.init(21);
  c.init(22);
  const NamedTensors wa = a.export_weights(), wb = b.export_weights(), wc = c.export_weights();
  bool any_diff = false;
  for (const auto& [name, t] : wa) {
    REQUIRE(all_equal(t, wb.at(name)));
    any_diff |= !all_equal(t, wc.at(name));
  }
  CHECK(any_diff);
  c.import_weights(wa);
  for (const auto& [name, t] : c.export_weights()) REQUIRE(all_equal(t, wa.at(name)));
}

TEST_CASE("one optimisation step moves every parameter") {
  const NetConfig cfg = NetConfig::tiny();
  std::mt19937_64 rng(15);
  const Var person(uniform({1, 3, 64, 48}, rng));
  const Var garment(uniform({1, 3, 64, 48}, rng));
  const Var target = ops::constant(uniform({1, 3, 64, 48}, rng));
  auto check_all_move = [](const TryOnNet& net, const NamedTensors& before) {
    for (const auto& p : net.named_parameters()) {
      CAPTURE(p.name);
      CHECK_FALSE(all_equal(p.var.value(), before.at(p.name)));
    }
  };
  SUBCASE("student") {
    StudentNet net(cfg);
    net.init(16);
    const NamedTensors before = net.export_weights();
    optim::Adam adam(net.named_parameters(), {});
    const StudentOutput o = net.run(person, garment);
    ag::backward(ops::mean_abs_diff(o.gen.tryon, target));
    adam.step();
    check_all_move(net, before);
  }
  SUBCASE("teacher") {
    TeacherNet net(cfg);
    net.init(17);
    const NamedTensors before = net.export_weights();
    optim::Adam adam(net.named_parameters(), {});
    const Var rep(uniform({1, cfg.human_rep_channels(), 64, 48}, rng, 0, 1));
    const TeacherOutput o = net.run(rep, garment, person);
    ag::backward(ops::mean_abs_diff(o.gen.tryon, target));
    adam.step();
    check_all_move(net, before);
  }
}

TEST_CASE("other valid sizes keep the shape contract") {
  NetConfig cfg = NetConfig::tiny();
  cfg.height = 32;
  cfg.width = 32;
  StudentNet net(cfg);
  net.init(18);
  std::mt19937_64 rng(19);
  const StudentOutput o = net.run(Var(uniform({1, 3, 32, 32}, rng)), Var(uniform({1, 3, 32, 32}, rng)));
  CHECK(o.warp.flows.levels.back().shape() == Shape{1, 2, 16, 16});
  CHECK(o.gen.tryon.shape() == Shape{1, 3, 32, 32});
}
