#include "dmvton/commands.hpp"

#include <algorithm>
#include <map>

#include "dmvton/errors.hpp"
#include "dmvton/metrics.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/toy.hpp"
#include "dmvton/train.hpp"
#include "dmvton/vtpds.hpp"
#include "dmvton/weights.hpp"

namespace dmvton::commands {

namespace fs = std::filesystem;
using config::CommandSchema;
using config::OptionSpec;
using config::OptionType;
using config::RunConfig;
using nlohmann::json;

namespace {

OptionSpec opt(std::string key, OptionType type, json def, std::string help) {
  return {std::move(key), type, std::move(def), false, std::move(help)};
}

OptionSpec req(std::string key, OptionType type, std::string help) {
  return {std::move(key), type, nullptr, true, std::move(help)};
}

constexpr auto kInt = OptionType::kInt;
constexpr auto kFloat = OptionType::kFloat;
constexpr auto kBool = OptionType::kBool;
constexpr auto kString = OptionType::kString;
constexpr auto kPath = OptionType::kPath;

std::vector<OptionSpec> training_options(bool student) {
  const losses::LossWeights w;
  std::vector<OptionSpec> o{
      req("data", kPath, "dataset manifest (file or directory holding manifest.json)"),
      req("out", kPath, "output directory"),
      opt("preset", kString, "tiny", "network preset: tiny or paper"),
      opt("steps", kInt, 200, "total optimisation steps"),
      opt("warp_steps", kInt, -1, "steps of the warp-only stage (-1: half of steps, rounded up)"),
      opt("batch_size", kInt, 4, "samples per step"),
      opt("lr", kFloat, 1e-4, "Adam learning rate"),
      opt("seed", kInt, 0, "seed for initialisation and sampling"),
      opt("checkpoint_every", kInt, 0, "write a resumable checkpoint every N steps (0: never)"),
      opt("resume", kPath, nullptr, "checkpoint directory to continue from"),
      opt("extractor_seed", kInt, static_cast<int64_t>(losses::RandomConvExtractor::kDefaultSeed),
          "seed of the perceptual feature extractor"),
      opt("l_warp", kFloat, w.l_warp, "weight of the warped-garment L1 term"),
      opt("per_warp", kFloat, w.per_warp, "weight of the warped-garment perceptual term"),
      opt("sec", kFloat, w.sec, "weight of the second-order flow smoothness term"),
      opt("l_gen", kFloat, w.l_gen, "weight of the try-on L1 term"),
      opt("per_gen", kFloat, w.per_gen, "weight of the try-on perceptual term"),
  };
  if (student) {
    o.insert(o.begin() + 1, req("teacher", kPath, "trained teacher weights"));
    o.push_back(opt("dis", kFloat, w.dis, "weight of the gated distillation term"));
  }
  return o;
}

std::map<std::string, CommandSchema> build_schemas() {
  std::map<std::string, CommandSchema> m;
  auto add = [&](CommandSchema s) { m.emplace(s.name, std::move(s)); };
  add({"make-toy",
       "write a synthetic fixture: dataset, frames, poses or assets",
       {req("out", kPath, "output directory"),
        opt("kind", kString, "dataset", "dataset | frames | poses | assets"),
        opt("count", kInt, 32, "records (dataset, assets) or poses per group (poses)"),
        opt("preset", kString, "tiny", "preset whose resolution the images use"),
        opt("seed", kInt, 0, "generator seed")}});
  add({"init",
       "write freshly initialised network weights",
       {req("out", kPath, "weight archive directory"),
        opt("kind", kString, "student", "student | teacher"),
        opt("preset", kString, "tiny", "network preset"),
        opt("seed", kInt, 0, "initialisation seed"),
        opt("zero_flow", kBool, false, "start every flow head at exactly zero")}});
  add({"train-teacher", "train the parser-based teacher", training_options(false)});
  add({"train-student", "distil the parser-free student from a trained teacher", training_options(true)});
  add({"infer",
       "run one try-on and write the result as PNG",
       {req("person", kPath, "person image"),
        req("garment", kPath, "garment image"),
        req("weights", kPath, "student or teacher weights"),
        req("out", kPath, "output PNG"),
        opt("warped_out", kPath, nullptr, "also write the warped garment here"),
        opt("pose", kPath, nullptr, "person pose JSON (teacher weights only)"),
        opt("parser", kPath, nullptr, "person label map PNG (teacher weights only)"),
        opt("preset", kString, "tiny", "network preset")}});
  add({"enrich",
       "mine hard poses in video frames and add synthesized persons to a dataset",
       {req("frames", kPath, "directory of frame images"),
        req("base", kPath, "base dataset manifest"),
        req("out", kPath, "output directory for the enriched dataset"),
        opt("weights", kPath, nullptr, "student weights for the try-on step"),
        opt("tryon", kString, "student", "try-on used for detection: student | arm-drop"),
        opt("synthesizer", kString, "stick-figure", "person synthesizer: stick-figure | corrupting"),
        opt("threshold", kFloat, 0.9, "OKS threshold below which a pose is hard"),
        opt("preset", kString, "tiny", "preset whose resolution the pipeline uses"),
        opt("seed", kInt, 0, "seed for garment choice and synthesis")}});
  add({"profile",
       "parameters, FLOPs, latency and memory of the student and teacher",
       {opt("preset", kString, "tiny", "network preset"),
        opt("batch", kInt, 1, "batch size of the profiled input"),
        opt("warmup", kInt, 1, "untimed forward passes"),
        opt("iters", kInt, 5, "timed forward passes (0: skip latency)"),
        opt("seed", kInt, 0, "seed for weights and inputs"),
        opt("student_weights", kPath, nullptr, "profile these student weights"),
        opt("teacher_weights", kPath, nullptr, "profile these teacher weights"),
        opt("fid", kFloat, nullptr, "FID value to include in the quality block"),
        opt("lpips", kFloat, nullptr, "LPIPS value to include in the quality block"),
        opt("out", kPath, nullptr, "write the JSON report here")}});
  add({"eval",
       "FID and LPIPS-style distance between two image directories",
       {req("real", kPath, "directory of reference images"),
        req("fake", kPath, "directory of generated images"),
        opt("preset", kString, "tiny", "preset whose resolution images are resized to"),
        opt("extractor_seed", kInt, static_cast<int64_t>(losses::RandomConvExtractor::kDefaultSeed),
            "seed of the feature extractor"),
        opt("lpips", kBool, true, "also average LPIPS over images paired by sorted name"),
        opt("out", kPath, nullptr, "write the JSON result here")}});
  add({"cluster-report",
       "k-means over arm poses: cluster sizes and example ids",
       {req("poses", kPath, "directory of pose JSON files or a hard_poses.jsonl log"),
        req("k", kInt, "number of clusters"),
        opt("seed", kInt, 0, "k-means++ seed"),
        opt("examples", kInt, 3, "example ids listed per cluster"),
        opt("out", kPath, nullptr, "write the JSON report here")}});
  add({"serve",
       "HTTP try-on service",
       {req("weights", kPath, "student weights"),
        req("assets", kPath, "catalog directory with people/ and garments/"),
        opt("preset", kString, "tiny", "network preset"),
        opt("host", kString, "127.0.0.1", "bind address"),
        opt("port", kInt, 8080, "bind port (0: any free port)"),
        opt("workers", kInt, 1, "inference threads"),
        opt("queue", kInt, static_cast<int64_t>(serve::kDefaultQueueDepth), "inference queue depth before 429"),
        opt("http_threads", kInt, 8, "HTTP handler threads"),
        opt("static_dir", kPath, nullptr, "directory served at /"),
        opt("auto_levels", kBool, false, "stretch uploaded person images to the full range")}});
  return m;
}

const std::map<std::string, CommandSchema>& schemas() {
  static const auto m = build_schemas();
  return m;
}

// ---------------------------------------------------------------------------

nets::NetConfig preset_of(const RunConfig& c) { return nets::NetConfig::from_preset(c.get_string("preset")); }

void require_positive(const RunConfig& c, const std::string& key) {
  if (c.get_int(key) < 1) fail(Errc::kConfig, "--" + key + " must be >= 1");
}

void ensure_parent(const fs::path& file) {
  const fs::path dir = file.parent_path();
  if (!dir.empty() && !fs::is_directory(dir)) fail(Errc::kData, "output directory " + dir.string() + " does not exist");
}

void maybe_write(const RunConfig& c, const json& j) {
  if (const auto out = c.find_path("out")) {
    ensure_parent(*out);
    write_file_bytes(*out, std::span(reinterpret_cast<const uint8_t*>(j.dump(2).data()), j.dump(2).size()));
  }
}

json cmd_make_toy(const RunConfig& c) {
  const auto cfg = preset_of(c);
  const fs::path out = c.get_path("out");
  const std::string kind = c.get_string("kind");
  const auto seed = static_cast<uint64_t>(c.get_int("seed"));
  require_positive(c, "count");
  const int64_t count = c.get_int("count");
  if (kind == "dataset") {
    toy::ToyOptions o;
    o.count = count;
    o.size = cfg.image_size();
    o.seed = seed;
    o.seg_channels = static_cast<int>(cfg.seg_channels);
    const auto m = toy::write_dataset(out, o);
    return {{"kind", kind}, {"manifest", (out / "manifest.json").string()}, {"records", m.records.size()}};
  }
  if (kind == "frames") {
    const auto poses = vtpds::mock::write_frame_fixture(out, cfg.image_size());
    return {{"kind", kind}, {"dir", out.string()}, {"frames", poses.size()}};
  }
  if (kind == "poses") {
    const auto poses = vtpds::mock::separable_poses(static_cast<int>(count), static_cast<int>(count), seed);
    vtpds::mock::write_pose_fixture(out, poses);
    return {{"kind", kind}, {"dir", out.string()}, {"poses", poses.size()}, {"groups", {count, count}}};
  }
  if (kind == "assets") {
    toy::ToyOptions o;
    o.count = count;
    o.size = cfg.image_size();
    o.seed = seed;
    o.seg_channels = static_cast<int>(cfg.seg_channels);
    const auto records = toy::make_records(o);
    fs::create_directories(out / "people");
    fs::create_directories(out / "garments");
    for (const auto& r : records) {
      save_image(out / "people" / (r.id + ".png"), r.person);
      save_image(out / "garments" / (r.id + ".png"), r.garment);
    }
    return {{"kind", kind}, {"dir", out.string()}, {"people", records.size()}, {"garments", records.size()}};
  }
  fail(Errc::kConfig, "--kind must be dataset, frames, poses or assets (got '" + kind + "')");
}

json cmd_init(const RunConfig& c) {
  auto cfg = preset_of(c);
  cfg.zero_flow_heads = c.get_bool("zero_flow");
  const std::string kind = c.get_string("kind");
  std::unique_ptr<nets::TryOnNet> net;
  if (kind == "student")
    net = std::make_unique<nets::StudentNet>(cfg);
  else if (kind == "teacher")
    net = std::make_unique<nets::TeacherNet>(cfg);
  else
    fail(Errc::kConfig, "--kind must be student or teacher (got '" + kind + "')");
  net->init(static_cast<uint64_t>(c.get_int("seed")));
  const auto archive = WeightArchive::pack(net->export_weights(), DType::kF32);
  archive.save_dir(c.get_path("out"));
  return {{"kind", kind},
          {"preset", cfg.preset},
          {"weights", c.get_path("out").string()},
          {"tensors", archive.entries().size()},
          {"params", archive.element_count()}};
}

train::TrainConfig training_config(const RunConfig& c, bool student) {
  train::TrainConfig t;
  t.net = preset_of(c);
  t.steps = c.get_int("steps");
  t.warp_steps = c.get_int("warp_steps");
  t.batch_size = c.get_int("batch_size");
  t.lr = c.get_float("lr");
  t.seed = static_cast<uint64_t>(c.get_int("seed"));
  t.checkpoint_every = c.get_int("checkpoint_every");
  t.extractor_seed = static_cast<uint64_t>(c.get_int("extractor_seed"));
  t.out_dir = c.get_path("out");
  t.resume_from = c.find_path("resume");
  t.weights.l_warp = c.get_float("l_warp");
  t.weights.per_warp = c.get_float("per_warp");
  t.weights.sec = c.get_float("sec");
  t.weights.l_gen = c.get_float("l_gen");
  t.weights.per_gen = c.get_float("per_gen");
  t.weights.dis = student ? c.get_float("dis") : 0.0;
  t.validate();
  return t;
}

json report_json(const train::TrainReport& r) {
  json j{{"phase", r.phase},
         {"start_step", r.start_step},
         {"rows", r.log.size()},
         {"wall_seconds", r.wall_seconds},
         {"teacher_synth_calls", r.teacher_synth_calls},
         {"teacher_feature_calls", r.teacher_feature_calls}};
  if (r.weights_path) j["weights"] = r.weights_path->string();
  if (!r.log.empty()) {
    j["first_loss"] = r.log.front().loss;
    j["final_loss"] = r.log.back().loss;
  }
  if (r.gate_mean) j["gate_mean"] = *r.gate_mean;
  return j;
}

std::vector<DatasetRecord> load_training_data(const RunConfig& c, const nets::NetConfig& net) {
  const Manifest m = read_manifest(c.get_path("data"));
  if (m.records.empty()) fail(Errc::kData, "manifest " + c.get_path("data").string() + " has no records");
  return load_all(m, net.image_size(), static_cast<int>(net.seg_channels));
}

json cmd_train_teacher(const RunConfig& c) {
  const auto t = training_config(c, false);
  const auto data = load_training_data(c, t.net);
  return report_json(train::train_teacher(data, t));
}

json cmd_train_student(const RunConfig& c) {
  const auto t = training_config(c, true);
  const NamedTensors teacher = WeightArchive::load(c.get_path("teacher")).unpack();
  if (nets::weights_kind(teacher) != "teacher")
    fail(Errc::kConfig, c.get_path("teacher").string() + " does not hold teacher weights");
  const auto data = load_training_data(c, t.net);
  return report_json(train::train_student(data, teacher, t));
}

json cmd_infer(const RunConfig& c) {
  const auto cfg = preset_of(c);
  const fs::path out = c.get_path("out");
  ensure_parent(out);
  if (const auto w = c.find_path("warped_out")) ensure_parent(*w);
  const auto net = nets::load_network(WeightArchive::load(c.get_path("weights")).unpack(), cfg);
  const ImageTensor person = load_image(c.get_path("person"), cfg.image_size());
  const ImageTensor garment = load_image(c.get_path("garment"), cfg.image_size());
  ag::NoGradGuard ng;
  ag::Var tryon, warped;
  std::string kind = net->name();
  if (kind == "student") {
    if (c.has("pose") || c.has("parser")) fail(Errc::kConfig, "--pose and --parser apply to teacher weights only");
    const auto& s = static_cast<const nets::StudentNet&>(*net);
    const auto r = s.run(ops::constant(person.batched()), ops::constant(garment.batched()));
    tryon = r.gen.tryon;
    warped = r.warp.warped;
  } else {
    if (!c.has("pose") || !c.has("parser")) fail(Errc::kConfig, "teacher inference needs --pose and --parser");
    const auto& t = static_cast<const nets::TeacherNet&>(*net);
    const auto labels = load_label_map(c.get_path("parser"), cfg.image_size());
    const auto rep = HumanRepresentation::build(labels, cfg.image_size(), static_cast<int>(cfg.seg_channels),
                                                load_pose(c.get_path("pose")));
    const auto r = t.run(ops::constant(rep.stacked()), ops::constant(garment.batched()), ops::constant(person.batched()));
    tryon = r.gen.tryon;
    warped = r.warp.warped;
  }
  const ImageTensor result = ImageTensor::from_tensor(tryon.value());
  if (!result.all_finite()) fail(Errc::kNumeric, "try-on output is non-finite");
  save_image(out, result);
  json j{{"kind", kind}, {"out", out.string()}, {"height", result.height()}, {"width", result.width()}};
  if (const auto w = c.find_path("warped_out")) {
    save_image(*w, ImageTensor::from_tensor(warped.value()));
    j["warped_out"] = w->string();
  }
  return j;
}

json cmd_enrich(const RunConfig& c) {
  const auto cfg = preset_of(c);
  vtpds::EnrichOptions o;
  o.frames_dir = c.get_path("frames");
  o.base_manifest = c.get_path("base");
  o.out_dir = c.get_path("out");
  o.size = cfg.image_size();
  o.seg_channels = static_cast<int>(cfg.seg_channels);
  o.params.threshold = c.get_float("threshold");
  o.seed = static_cast<uint64_t>(c.get_int("seed"));
  o.params.validate();

  const vtpds::mock::MarkerEstimator estimator;
  const vtpds::mock::SkeletonParser parser(o.seg_channels);
  const vtpds::mock::StickFigureSynthesizer stick;
  const vtpds::mock::CorruptingSynthesizer corrupting;
  vtpds::Adapters a;
  a.estimator = &estimator;
  a.parser = &parser;
  const std::string synth = c.get_string("synthesizer");
  if (synth == "stick-figure")
    a.synthesizer = &stick;
  else if (synth == "corrupting")
    a.synthesizer = &corrupting;
  else
    fail(Errc::kConfig, "--synthesizer must be stick-figure or corrupting (got '" + synth + "')");

  std::unique_ptr<nets::TryOnNet> net;
  const std::string tryon = c.get_string("tryon");
  if (tryon == "student") {
    if (!c.has("weights")) fail(Errc::kConfig, "--tryon student needs --weights");
    net = nets::load_network(WeightArchive::load(c.get_path("weights")).unpack(), cfg);
    if (std::string(net->name()) != "student") fail(Errc::kConfig, "enrichment try-on needs student weights");
    a.tryon = vtpds::student_tryon(static_cast<const nets::StudentNet&>(*net));
  } else if (tryon == "arm-drop") {
    a.tryon = vtpds::mock::arm_dropping_tryon(o.size);
  } else {
    fail(Errc::kConfig, "--tryon must be student or arm-drop (got '" + tryon + "')");
  }
  json j = vtpds::enrich_dataset(o, a).to_json();
  j["manifest"] = (fs::absolute(o.out_dir) / "manifest.json").string();
  return j;
}

json cmd_profile(const RunConfig& c) {
  const auto cfg = preset_of(c);
  require_positive(c, "batch");
  const int64_t batch = c.get_int("batch");
  const auto seed = static_cast<uint64_t>(c.get_int("seed"));
  const int iters = static_cast<int>(c.get_int("iters"));
  const int warmup = static_cast<int>(c.get_int("warmup"));
  if (iters != 0 && iters < 3) fail(Errc::kConfig, "--iters must be 0 or >= 3");
  if (iters != 0 && warmup < 1) fail(Errc::kConfig, "--warmup must be >= 1");

  nets::StudentNet student(cfg);
  nets::TeacherNet teacher(cfg);
  json archives = json::object();
  auto prepare = [&](nets::TryOnNet& net, const char* key) {
    if (const auto p = c.find_path(key)) {
      const WeightArchive a = WeightArchive::load(*p);
      const auto loaded = nets::load_network(a.unpack(), cfg);
      if (std::string(loaded->name()) != net.name())
        fail(Errc::kConfig, "--" + std::string(key) + " holds " + loaded->name() + " weights");
      net.import_weights(a.unpack());
      archives[net.name()] = a.element_count();
    } else {
      net.init(seed);
    }
  };
  prepare(student, "student_weights");
  prepare(teacher, "teacher_weights");

  std::vector<metrics::ProfileRow> rows;
  const auto h = cfg.height, w = cfg.width;
  rows.push_back(metrics::profile_model("student", student, {batch, student.packed_channels(), h, w}, warmup, iters, seed));
  rows.push_back(metrics::profile_model("teacher", teacher, {batch, teacher.packed_channels(), h, w}, warmup, iters, seed));
  std::optional<metrics::QualityBlock> q;
  if (c.has("fid") || c.has("lpips")) {
    q.emplace();
    if (c.has("fid")) q->fid = c.get_float("fid");
    if (c.has("lpips")) q->lpips = c.get_float("lpips");
  }
  auto rep = metrics::comparison_report(rows, q, std::string("teacher"));
  rep.json["preset"] = cfg.preset;
  rep.json["input"] = {{"batch", batch}, {"height", h}, {"width", w}};
  if (!archives.empty()) rep.json["archive_elements"] = archives;
  maybe_write(c, rep.json);
  json j = rep.json;
  j["text"] = rep.text;
  return j;
}

json cmd_eval(const RunConfig& c) {
  const auto cfg = preset_of(c);
  const auto real = metrics::load_image_dir(c.get_path("real"), cfg.image_size());
  const auto fake = metrics::load_image_dir(c.get_path("fake"), cfg.image_size());
  if (real.empty()) fail(Errc::kData, "no images in " + c.get_path("real").string());
  if (fake.empty()) fail(Errc::kData, "no images in " + c.get_path("fake").string());
  const losses::RandomConvExtractor phi(static_cast<uint64_t>(c.get_int("extractor_seed")));
  const auto fid = metrics::fid_score(real, fake, phi);
  json j{{"fid", fid.value}, {"feature_dim", fid.dim}, {"extractor", phi.name()},
         {"real", real.size()}, {"fake", fake.size()}};
  if (fid.warning) j["warning"] = *fid.warning;
  if (c.get_bool("lpips")) {
    if (real.size() != fake.size())
      fail(Errc::kData, "LPIPS pairs images by name; the directories hold " + std::to_string(real.size()) + " and " +
                            std::to_string(fake.size()) + " images");
    double sum = 0;
    for (size_t i = 0; i < real.size(); ++i) sum += metrics::lpips_like(real[i], fake[i], phi);
    j["lpips"] = sum / static_cast<double>(real.size());
  }
  maybe_write(c, j);
  return j;
}

json cmd_cluster_report(const RunConfig& c) {
  const auto set = vtpds::load_pose_set(c.get_path("poses"));
  std::vector<std::string> ids;
  std::vector<PoseKeypoints> poses;
  for (const auto& [id, p] : set) {
    ids.push_back(id);
    poses.push_back(p);
  }
  const auto rep = vtpds::cluster_report(ids, poses, static_cast<int>(c.get_int("k")),
                                         static_cast<uint64_t>(c.get_int("seed")), static_cast<int>(c.get_int("examples")));
  json j = rep.to_json();
  j["ids"] = ids;
  maybe_write(c, j);
  return j;
}

}  // namespace

std::vector<std::string> command_names() {
  std::vector<std::string> names;
  for (const auto& [n, _] : schemas()) names.push_back(n);
  return names;
}

const CommandSchema& schema(const std::string& command) {
  auto it = schemas().find(command);
  if (it == schemas().end()) fail(Errc::kConfig, "unknown command '" + command + "'");
  return it->second;
}

json run(const std::string& command, const RunConfig& c) {
  if (command == "make-toy") return cmd_make_toy(c);
  if (command == "init") return cmd_init(c);
  if (command == "train-teacher") return cmd_train_teacher(c);
  if (command == "train-student") return cmd_train_student(c);
  if (command == "infer") return cmd_infer(c);
  if (command == "enrich") return cmd_enrich(c);
  if (command == "profile") return cmd_profile(c);
  if (command == "eval") return cmd_eval(c);
  if (command == "cluster-report") return cmd_cluster_report(c);
  if (command == "serve") fail(Errc::kConfig, "serve runs through the server interface, not run()");
  fail(Errc::kConfig, "unknown command '" + command + "'");
}

json run(const std::string& command, const std::optional<fs::path>& config_file, const json& flags) {
  return run(command, RunConfig::merge(schema(command), config_file, flags));
}

serve::ServeOptions serve_options(const RunConfig& c) {
  serve::ServeOptions o;
  o.weights = c.get_path("weights");
  o.assets = c.get_path("assets");
  o.preset = c.get_string("preset");
  o.host = c.get_string("host");
  o.port = static_cast<int>(c.get_int("port"));
  o.workers = static_cast<int>(c.get_int("workers"));
  const int64_t q = c.get_int("queue");
  if (q < 1) fail(Errc::kConfig, "--queue must be >= 1");
  o.queue_depth = static_cast<size_t>(q);
  o.http_threads = static_cast<int>(c.get_int("http_threads"));
  o.static_dir = c.find_path("static_dir");
  if (c.get_bool("auto_levels")) o.person_hook = serve::auto_levels;
  return o;
}

}  // namespace dmvton::commands
