#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmvton/dataset.hpp"
#include "dmvton/losses.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/weights.hpp"

// Training phases. Each phase runs `steps` optimisation steps: the first
// `warp_steps` update only the warping branch (stage 1), the rest update
// warping and generator together (stage 2).
//
// Output layout under out_dir:
//   {phase}/log.jsonl                 one JSON object per step
//   {phase}/{step}/weights/           f64 checkpoint incl. optimizer state
//   {phase}/final/weights/            f32 export of the network weights
namespace dmvton::train {

struct TrainConfig {
  nets::NetConfig net;
  int64_t steps = 200;
  int64_t warp_steps = -1;  // -1: ceil(steps / 2)
  int64_t batch_size = 4;
  double lr = 1e-4;
  uint64_t seed = 0;
  losses::LossWeights weights;
  losses::WarpLossOptions warp_options;
  uint64_t extractor_seed = losses::RandomConvExtractor::kDefaultSeed;
  int64_t checkpoint_every = 0;  // 0: no intermediate checkpoints
  std::filesystem::path out_dir;  // empty: nothing is written
  // Checkpoint directory ({phase}/{step}/weights) to continue from.
  std::optional<std::filesystem::path> resume_from;

  int64_t stage1_steps() const;
  void validate() const;
};

struct StepLog {
  int64_t step = 0;  // 1-based
  std::string stage;  // "warp" or "joint"
  double loss = 0;
  double warp_loss = 0;
  double gen_loss = 0;
  std::map<std::string, double> components;  // "warp.l1", "gen.perceptual", ...
  std::optional<double> tryon_l1;  // mean |try-on - target|, joint stage only
  std::optional<double> gate;  // fraction of the batch with an open gate
};

struct TrainReport {
  std::string phase;
  int64_t start_step = 0;  // steps already done before this run (resume)
  std::vector<StepLog> log;
  double wall_seconds = 0;
  std::optional<std::filesystem::path> weights_path;
  NamedTensors weights;  // final network weights
  int64_t teacher_synth_calls = 0;
  int64_t teacher_feature_calls = 0;
  // Mean over logged steps of the gate fraction (student phase only).
  std::optional<double> gate_mean;
};

TrainReport train_teacher(const std::vector<DatasetRecord>& data, const TrainConfig& cfg);

// Student training triple built from a frozen teacher.
struct DistillPair {
  ImageTensor synthetic;  // person re-dressed in another garment by the teacher
  ImageTensor garment;    // the record's own garment
  ImageTensor target;     // the record's person image
  size_t other_index = 0;  // index into the pool of the garment used
};

// Picks a pool garment that differs from the record's own one and lets the
// teacher dress the person in it. Fails when no such garment exists.
DistillPair make_distill_pair(const nets::TeacherNet& teacher, const DatasetRecord& record,
                              const std::vector<ImageTensor>& garment_pool, std::mt19937_64& rng);

TrainReport train_student(const std::vector<DatasetRecord>& data, const NamedTensors& teacher_weights,
                          const TrainConfig& cfg);

// Moving average with the given window (shorter at the start).
std::vector<double> moving_average(const std::vector<double>& xs, size_t window);

}  // namespace dmvton::train
