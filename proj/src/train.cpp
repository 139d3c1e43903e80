#include "dmvton/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/optim.hpp"

namespace dmvton::train {

namespace fs = std::filesystem;
using ag::Var;
using nlohmann::json;

int64_t TrainConfig::stage1_steps() const { return warp_steps < 0 ? (steps + 1) / 2 : warp_steps; }

void TrainConfig::validate() const {
  net.validate();
  weights.validate();
  if (steps <= 0) fail(Errc::kConfig, "steps must be positive");
  if (warp_steps > steps) fail(Errc::kConfig, "warp_steps cannot exceed steps");
  if (batch_size <= 0) fail(Errc::kConfig, "batch_size must be positive");
  if (!(lr > 0) || !std::isfinite(lr)) fail(Errc::kConfig, "learning rate must be positive");
  if (checkpoint_every < 0) fail(Errc::kConfig, "checkpoint_every must be >= 0");
  if (resume_from && out_dir.empty()) fail(Errc::kConfig, "resuming requires an output directory");
}

std::vector<double> moving_average(const std::vector<double>& xs, size_t window) {
  if (window == 0) fail(Errc::kConfig, "moving average window must be positive");
  std::vector<double> out(xs.size());
  double acc = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

namespace {

// Independent random streams keyed by (seed, purpose, index).
enum Stream : uint64_t { kTeacherBatches = 1, kStudentBatches = 2, kDistillPairs = 3 };

std::mt19937_64 stream_rng(uint64_t seed, Stream stream, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(stream),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// Epoch-wise shuffled sampling; step k (0-based) always sees the same batch,
// so a resumed run draws exactly what an uninterrupted one would.
class Sampler {
 public:
  Sampler(size_t n, int64_t batch, uint64_t seed, Stream stream) : n_(n), batch_(batch), seed_(seed), stream_(stream) {}

  std::vector<size_t> batch(int64_t step) {
    std::vector<size_t> out;
    for (int64_t j = 0; j < batch_; ++j) {
      const uint64_t pos = static_cast<uint64_t>(step * batch_ + j);
      out.push_back(permutation(pos / n_)[pos % n_]);
    }
    return out;
  }

 private:
  const std::vector<size_t>& permutation(uint64_t epoch) {
    auto it = perms_.find(epoch);
    if (it != perms_.end()) return it->second;
    std::vector<size_t> p(n_);
    std::iota(p.begin(), p.end(), size_t{0});
    auto rng = stream_rng(seed_, stream_, epoch);
    std::shuffle(p.begin(), p.end(), rng);
    if (perms_.size() > 4) perms_.clear();
    return perms_.emplace(epoch, std::move(p)).first->second;
  }

  size_t n_;
  int64_t batch_;
  uint64_t seed_;
  Stream stream_;
  std::map<uint64_t, std::vector<size_t>> perms_;
};

// Per-record network inputs as [1, C, H, W] tensors.
struct Sample {
  Tensor person, garment, mask, human_rep;
};

std::vector<Sample> prepare(const std::vector<DatasetRecord>& data, const nets::NetConfig& net, bool need_human_rep) {
  if (data.empty()) fail(Errc::kData, "training set is empty");
  const Size2 size = net.image_size();
  std::vector<Sample> out;
  for (const auto& r : data) {
    if (r.person.size() != size || r.garment.size() != size || r.garment_mask.size() != size)
      fail(Errc::kData, "record " + r.id + " is not at the " + std::to_string(size.height) + "x" +
                            std::to_string(size.width) + " training resolution");
    Sample s{r.person.batched(), r.garment.batched(), r.garment_mask.batched(), {}};
    if (r.human_rep) {
      s.human_rep = r.human_rep->stacked();
      if (s.human_rep.dim(1) != net.human_rep_channels() || r.human_rep->size() != size)
        fail(Errc::kData, "record " + r.id + " has a human representation of shape " +
                              shape_str(s.human_rep.shape()) + ", expected " +
                              std::to_string(net.human_rep_channels()) + " channels");
    } else if (need_human_rep) {
      fail(Errc::kData, "record " + r.id + " has no human representation (parser map)");
    }
    out.push_back(std::move(s));
  }
  return out;
}

Var stack(const std::vector<const Tensor*>& parts) {
  std::vector<Var> vs;
  for (const Tensor* t : parts) vs.push_back(ops::constant(*t));
  return ops::concat_batch(vs);
}

template <class F>
Var gather(const std::vector<Sample>& samples, const std::vector<size_t>& idx, F&& member) {
  std::vector<const Tensor*> parts;
  for (size_t i : idx) parts.push_back(&member(samples[i]));
  return stack(parts);
}

double mean_abs(const Var& a, const Var& b) {
  ag::NoGradGuard ng;
  return ops::mean_abs_diff(a, b).value()[0];
}

void require_finite_weights(const nets::TryOnNet& net, const std::string& phase, int64_t step) {
  for (const auto& p : net.named_parameters())
    if (!p.var.value().all_finite())
      fail(Errc::kNumeric, phase + " step " + std::to_string(step) + ": parameter " + p.name + " became non-finite");
}

void record_components(StepLog& row, const std::string& prefix, const losses::LossBreakdown& b) {
  for (const auto& [k, v] : b.components) {
    if (k == "gate") {
      row.gate = v;
      continue;
    }
    row.components[prefix + k] = v;
  }
}

json row_json(const std::string& phase, const StepLog& r) {
  json j{{"phase", phase}, {"step", r.step},           {"stage", r.stage},
         {"loss", r.loss}, {"warp_loss", r.warp_loss}, {"gen_loss", r.gen_loss},
         {"components", r.components}};
  if (r.tryon_l1) j["tryon_l1"] = *r.tryon_l1;
  if (r.gate) j["gate"] = *r.gate;
  return j;
}

// Shared loop state: the network, its two optimizers, and the output files.
class Phase {
 public:
  Phase(std::string name, nets::TryOnNet& net, const TrainConfig& cfg)
      : name_(std::move(name)),
        net_(net),
        cfg_(cfg),
        warp_opt_(net.warp_parameters(), {cfg.lr}),
        gen_opt_(net.generator_parameters(), {cfg.lr}) {
    if (!cfg.out_dir.empty()) dir_ = cfg.out_dir / name_;
  }

  int64_t start() {
    int64_t first = 0;
    if (cfg_.resume_from) first = resume(*cfg_.resume_from);
    if (!dir_.empty()) {
      fs::create_directories(dir_);
      log_.open(dir_ / "log.jsonl", first > 0 ? std::ios::app : std::ios::trunc);
      if (!log_) fail(Errc::kData, "cannot write training log in " + dir_.string());
    }
    return first;
  }

  // Backpropagates, updates the optimizers active in this stage, and
  // checks the result.
  void update(const Var& total, bool joint, int64_t step) {
    if (!std::isfinite(total.value()[0]))
      fail(Errc::kNumeric, name_ + " step " + std::to_string(step) + ": loss is non-finite");
    warp_opt_.zero_grad();
    gen_opt_.zero_grad();
    ag::backward(total);
    warp_opt_.step();
    if (joint) gen_opt_.step();
    require_finite_weights(net_, name_, step);
  }

  void finish_step(const StepLog& row, TrainReport& report) {
    report.log.push_back(row);
    if (log_.is_open()) log_ << row_json(name_, row).dump() << '\n' << std::flush;
    if (!dir_.empty() && cfg_.checkpoint_every > 0 && row.step % cfg_.checkpoint_every == 0) checkpoint(row.step);
  }

  void finish(TrainReport& report, std::chrono::steady_clock::time_point t0) {
    report.phase = name_;
    report.weights = net_.export_weights();
    double gate_sum = 0;
    int64_t gate_n = 0;
    for (const auto& r : report.log)
      if (r.gate) {
        gate_sum += *r.gate;
        ++gate_n;
      }
    if (gate_n > 0) report.gate_mean = gate_sum / static_cast<double>(gate_n);
    if (!dir_.empty()) {
      const fs::path w = dir_ / "final" / "weights";
      WeightArchive::pack(report.weights, DType::kF32).save_dir(w);
      report.weights_path = w;
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!dir_.empty()) {
      json j{{"phase", name_},
             {"start_step", report.start_step},
             {"steps", cfg_.steps},
             {"rows", report.log.size()},
             {"wall_seconds", report.wall_seconds},
             {"weights", report.weights_path->string()},
             {"teacher_synth_calls", report.teacher_synth_calls},
             {"teacher_feature_calls", report.teacher_feature_calls}};
      if (!report.log.empty()) j["final_loss"] = report.log.back().loss;
      if (report.gate_mean) j["gate_mean"] = *report.gate_mean;
      std::ofstream(dir_ / "report.json") << j.dump(2) << '\n';
    }
  }

 private:
  void checkpoint(int64_t step) {
    NamedTensors t = net_.export_weights();
    t.merge(warp_opt_.state("optim.warp."));
    t.merge(gen_opt_.state("optim.gen."));
    t.emplace("train.step", Tensor::scalar(static_cast<double>(step)));
    t.emplace("train.warp_steps", Tensor::scalar(static_cast<double>(cfg_.stage1_steps())));
    WeightArchive::pack(t, DType::kF64).save_dir(dir_ / std::to_string(step) / "weights");
  }

  int64_t resume(const fs::path& where) {
    const NamedTensors t = WeightArchive::load(where).unpack();
    auto scalar = [&](const std::string& key) {
      auto it = t.find(key);
      if (it == t.end()) fail(Errc::kData, where.string() + " is not a training checkpoint (no " + key + ")");
      return static_cast<int64_t>(it->second[0]);
    };
    const int64_t step = scalar("train.step");
    if (scalar("train.warp_steps") != cfg_.stage1_steps())
      fail(Errc::kConfig, "checkpoint was written with a different warp-stage length");
    if (step > cfg_.steps) fail(Errc::kConfig, "checkpoint step " + std::to_string(step) + " exceeds steps");
    net_.import_weights(t);
    warp_opt_.load_state(t, "optim.warp.");
    gen_opt_.load_state(t, "optim.gen.");
    return step;
  }

  std::string name_;
  nets::TryOnNet& net_;
  const TrainConfig& cfg_;
  optim::Adam warp_opt_, gen_opt_;
  fs::path dir_;
  std::ofstream log_;
};

// Uniform choice among candidates whose garment differs from `own`.
template <class Get>
size_t pick_other(const ImageTensor& own, size_t n, Get&& get, std::mt19937_64& rng, const std::string& id) {
  std::vector<size_t> ok;
  for (size_t k = 0; k < n; ++k)
    if (!(get(k) == own)) ok.push_back(k);
  if (ok.empty()) fail(Errc::kData, "garment pool holds no garment other than the one of record " + id);
  std::uniform_int_distribution<size_t> pick(0, ok.size() - 1);
  return ok[pick(rng)];
}

}  // namespace

TrainReport train_teacher(const std::vector<DatasetRecord>& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto samples = prepare(data, cfg.net, true);
  losses::LossWeights w = cfg.weights;
  w.dis = 0;  // nothing above the teacher to distil from
  const losses::RandomConvExtractor phi(cfg.extractor_seed);

  nets::TeacherNet teacher(cfg.net);
  teacher.init(cfg.seed);
  Phase phase("teacher", teacher, cfg);
  TrainReport report;
  report.start_step = phase.start();
  Sampler sampler(samples.size(), cfg.batch_size, cfg.seed, kTeacherBatches);

  for (int64_t k = report.start_step; k < cfg.steps; ++k) {
    const int64_t step = k + 1;
    const bool joint = k >= cfg.stage1_steps();
    const auto idx = sampler.batch(k);
    const Var hr = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.human_rep; });
    const Var g = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.garment; });
    const Var p = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.person; });
    const Var m = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.mask; });

    StepLog row;
    row.step = step;
    row.stage = joint ? "joint" : "warp";
    Var total;
    if (!joint) {
      const nets::WarpOutput out = teacher.warp(hr, g);
      const auto wl = losses::warp_stage_loss(out.warped, p, m, out.flows, nullptr, w, phi, cfg.warp_options);
      record_components(row, "warp.", wl);
      row.warp_loss = wl.total_value();
      total = wl.total;
    } else {
      const nets::TeacherOutput out = teacher.run(hr, g, p);
      const auto wl = losses::warp_stage_loss(out.warp.warped, p, m, out.warp.flows, nullptr, w, phi, cfg.warp_options);
      const auto gl = losses::gen_loss(out.gen.tryon, p, phi, w);
      record_components(row, "warp.", wl);
      record_components(row, "gen.", gl);
      row.warp_loss = wl.total_value();
      row.gen_loss = gl.total_value();
      row.tryon_l1 = mean_abs(out.gen.tryon, p);
      total = ops::add(wl.total, gl.total);
    }
    row.loss = total.value()[0];
    phase.update(total, joint, step);
    phase.finish_step(row, report);
  }
  phase.finish(report, t0);
  return report;
}

DistillPair make_distill_pair(const nets::TeacherNet& teacher, const DatasetRecord& record,
                              const std::vector<ImageTensor>& garment_pool, std::mt19937_64& rng) {
  if (!record.human_rep) fail(Errc::kData, "record " + record.id + " has no human representation");
  if (garment_pool.empty()) fail(Errc::kData, "garment pool is empty");
  const size_t k = pick_other(
      record.garment, garment_pool.size(), [&](size_t i) -> const ImageTensor& { return garment_pool[i]; }, rng,
      record.id);
  ag::NoGradGuard ng;
  const auto out = teacher.run(ops::constant(record.human_rep->stacked()), ops::constant(garment_pool[k].batched()),
                               ops::constant(record.person.batched()));
  return {ImageTensor::from_tensor(out.gen.tryon.value()), record.garment, record.person, k};
}

TrainReport train_student(const std::vector<DatasetRecord>& data, const NamedTensors& teacher_weights,
                          const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto samples = prepare(data, cfg.net, true);
  const losses::LossWeights& w = cfg.weights;
  const bool distil = w.dis > 0;
  const losses::RandomConvExtractor phi(cfg.extractor_seed);

  nets::TeacherNet teacher(cfg.net);
  try {
    teacher.import_weights(teacher_weights);
  } catch (const Error& e) {
    fail(Errc::kConfig, std::string("teacher weights do not fit the '") + cfg.net.preset + "' configuration: " + e.what());
  }

  nets::StudentNet student(cfg.net);
  student.init(cfg.seed);
  Phase phase("student", student, cfg);
  TrainReport report;
  report.start_step = phase.start();
  Sampler sampler(samples.size(), cfg.batch_size, cfg.seed, kStudentBatches);

  // Teacher outputs never change, so they are computed once per key.
  std::map<std::pair<size_t, size_t>, Tensor> synth_cache;  // (record, other garment) -> synthetic person
  struct TeacherView {
    Tensor tryon;
    std::vector<Tensor> features;
  };
  std::map<size_t, TeacherView> view_cache;

  auto synthetic = [&](size_t i, size_t j) -> const Tensor& {
    auto it = synth_cache.find({i, j});
    if (it != synth_cache.end()) return it->second;
    ag::NoGradGuard ng;
    ++report.teacher_synth_calls;
    const auto out = teacher.run(ops::constant(samples[i].human_rep), ops::constant(samples[j].garment),
                                 ops::constant(samples[i].person));
    return synth_cache.emplace(std::make_pair(i, j), out.gen.tryon.value()).first->second;
  };
  auto teacher_view = [&](size_t i) -> const TeacherView& {
    auto it = view_cache.find(i);
    if (it != view_cache.end()) return it->second;
    ag::NoGradGuard ng;
    ++report.teacher_feature_calls;
    const auto out = teacher.run(ops::constant(samples[i].human_rep), ops::constant(samples[i].garment),
                                 ops::constant(samples[i].person));
    TeacherView v{out.gen.tryon.value(), {}};
    for (const auto& f : out.warp.person_features) v.features.push_back(f.value());
    return view_cache.emplace(i, std::move(v)).first->second;
  };

  for (int64_t k = report.start_step; k < cfg.steps; ++k) {
    const int64_t step = k + 1;
    const bool joint = k >= cfg.stage1_steps();
    const auto idx = sampler.batch(k);

    // The other garment comes from the rest of the batch when possible,
    // otherwise from the whole set.
    auto rng = stream_rng(cfg.seed, kDistillPairs, static_cast<uint64_t>(k));
    std::vector<const Tensor*> synth;
    for (size_t b = 0; b < idx.size(); ++b) {
      const size_t i = idx[b];
      std::vector<size_t> pool;
      for (size_t c = 0; c < idx.size(); ++c)
        if (c != b && !(data[idx[c]].garment == data[i].garment)) pool.push_back(idx[c]);
      if (pool.empty()) {
        pool.resize(data.size());
        std::iota(pool.begin(), pool.end(), size_t{0});
      }
      const size_t j = pool[pick_other(
          data[i].garment, pool.size(), [&](size_t q) -> const ImageTensor& { return data[pool[q]].garment; }, rng,
          data[i].id)];
      synth.push_back(&synthetic(i, j));
    }
    const Var t_img = stack(synth);
    const Var g = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.garment; });
    const Var p = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.person; });
    const Var m = gather(samples, idx, [](const Sample& s) -> const Tensor& { return s.mask; });

    StepLog row;
    row.step = step;
    row.stage = joint ? "joint" : "warp";

    nets::WarpOutput wo = student.warp(t_img, g);
    nets::GeneratorOutput go;
    if (joint) {
      go = student.generate(wo.warped, t_img);
    } else if (distil) {
      ag::NoGradGuard ng;  // only needed for the gate
      go = student.generate(wo.warped, t_img);
    }

    losses::DistillationInputs dist;
    if (distil) {
      std::vector<const Tensor*> t_parts;
      std::vector<std::vector<const Tensor*>> f_parts(static_cast<size_t>(cfg.net.levels));
      for (size_t i : idx) {
        const TeacherView& v = teacher_view(i);
        t_parts.push_back(&v.tryon);
        for (size_t l = 0; l < v.features.size(); ++l) f_parts[l].push_back(&v.features[l]);
      }
      for (const auto& parts : f_parts) dist.teacher_feats.push_back(stack(parts));
      dist.student_feats = wo.person_features;
      dist.t = stack(t_parts);
      dist.s = ops::detach(go.tryon);
      dist.p = p;
    }

    const auto wl = losses::warp_stage_loss(wo.warped, p, m, wo.flows, distil ? &dist : nullptr, w, phi,
                                            cfg.warp_options);
    record_components(row, "warp.", wl);
    row.warp_loss = wl.total_value();
    Var total = wl.total;
    if (joint) {
      const auto gl = losses::gen_loss(go.tryon, p, phi, w);
      record_components(row, "gen.", gl);
      row.gen_loss = gl.total_value();
      row.tryon_l1 = mean_abs(go.tryon, p);
      total = ops::add(total, gl.total);
    }
    row.loss = total.value()[0];
    phase.update(total, joint, step);
    phase.finish_step(row, report);
  }
  phase.finish(report, t0);
  return report;
}

}  // namespace dmvton::train
