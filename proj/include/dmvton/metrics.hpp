#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmvton/image.hpp"
#include "dmvton/losses.hpp"
#include "dmvton/nn.hpp"

// Image-quality distances and model cost profiling.
namespace dmvton::metrics {

struct GaussianStats {
  std::vector<double> mean;  // D
  std::vector<double> cov;   // D x D, row-major

  int64_t dim() const { return static_cast<int64_t>(mean.size()); }
  // Sample mean and unbiased covariance of row vectors.
  static GaussianStats fit(const std::vector<std::vector<double>>& samples);
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The trace of the
// square root is taken from the eigenvalues of S_a^(1/2) S_b S_a^(1/2);
// eigenvalues above -1e-6 are clamped to zero, lower ones are an error.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Final-stage features, globally average-pooled, one D-vector per image.
std::vector<std::vector<double>> embed(const std::vector<ImageTensor>& images, const losses::PerceptualExtractor& phi);

struct FidResult {
  double value = 0;
  int64_t dim = 0;
  // Set when a set has no more images than feature dimensions, so its
  // covariance is rank deficient.
  std::optional<std::string> warning;
};

FidResult fid_score(const std::vector<ImageTensor>& a, const std::vector<ImageTensor>& b,
                    const losses::PerceptualExtractor& phi);

// Sum_i w_i * spatial mean of sum_c (a_hat - b_hat)^2, where features are
// unit-normalised over channels at every location. Empty weights mean 1
// per stage.
double lpips_like(const ImageTensor& a, const ImageTensor& b, const losses::PerceptualExtractor& phi,
                  const std::vector<double>& stage_weights = {});

// Every PNG/JPEG in a directory (sorted by name), resized to `size`.
std::vector<ImageTensor> load_image_dir(const std::filesystem::path& dir, Size2 size);

// ---------------------------------------------------------------------------
// Profiling

// Traced forward on a meta input; kUnsupported names an op without a cost rule.
int64_t count_flops(const nn::Layer& model, const Shape& input_shape);
int64_t count_params(const nn::Module& model);
// 4 bytes per parameter plus the largest live activation set (inputs +
// output of one op) at 4 bytes per element.
int64_t memory_estimate(const nn::Layer& model, const Shape& input_shape);

struct LatencyStats {
  double mean_ms = 0;
  double median_ms = 0;
  double p95_ms = 0;
  int64_t iterations = 0;
};

// Inputs are drawn uniformly from [-1, 1] with the given seed. Warmup runs
// are not timed. Requires warmup >= 1 and iters >= 3.
LatencyStats benchmark_latency(const nn::Layer& model, const Shape& input_shape, int warmup, int iters, uint64_t seed);

struct ProfileRow {
  std::string name;
  int64_t params = 0;
  int64_t flops = 0;
  std::optional<LatencyStats> latency;
  double memory_mb = 0;
};

ProfileRow profile_model(const std::string& name, const nn::Layer& model, const Shape& input_shape, int warmup,
                         int iters, uint64_t seed);

struct QualityBlock {
  std::optional<double> fid;
  std::optional<double> lpips;
  std::string extractor;
};

struct Report {
  nlohmann::json json;
  std::string text;
};

// Rows in order; when `baseline` names a row, every row gets its FLOPs and
// parameter ratios against it.
Report comparison_report(const std::vector<ProfileRow>& rows, const std::optional<QualityBlock>& quality = std::nullopt,
                         const std::optional<std::string>& baseline = std::nullopt);

}  // namespace dmvton::metrics
