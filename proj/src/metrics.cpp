#include "dmvton/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/profile.hpp"

namespace dmvton::metrics {

namespace fs = std::filesystem;
using nlohmann::json;
using Mat = Eigen::MatrixXd;

namespace {

constexpr double kNegativeEigenTolerance = 1e-6;
constexpr double kSymmetryTolerance = 1e-8;

Mat as_matrix(const GaussianStats& s, const char* which) {
  const int64_t d = s.dim();
  if (static_cast<int64_t>(s.cov.size()) != d * d)
    fail(Errc::kShape, std::string("Gaussian ") + which + ": covariance is not " + std::to_string(d) + "x" +
                           std::to_string(d));
  Mat m(d, d);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) m(i, j) = s.cov[static_cast<size_t>(i * d + j)];
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance)
    fail(Errc::kData, std::string("Gaussian ") + which + ": covariance is not symmetric");
  return m;
}

// Eigen-decomposition with the PSD tolerance applied.
Eigen::SelfAdjointEigenSolver<Mat> psd_eigen(const Mat& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.info() != Eigen::Success) fail(Errc::kNumeric, std::string(what) + ": eigen-decomposition failed");
  if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < -kNegativeEigenTolerance)
    fail(Errc::kData, std::string(what) + " is not positive semidefinite (eigenvalue " +
                          std::to_string(es.eigenvalues().minCoeff()) + ")");
  return es;
}

Mat psd_sqrt(const Mat& m, const char* what) {
  const auto es = psd_eigen(m, what);
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

GaussianStats GaussianStats::fit(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) fail(Errc::kData, "cannot fit a Gaussian to an empty set");
  const size_t d = samples[0].size();
  const size_t n = samples.size();
  GaussianStats g;
  g.mean.assign(d, 0.0);
  for (const auto& s : samples) {
    if (s.size() != d) fail(Errc::kShape, "feature vectors differ in dimension");
    for (size_t i = 0; i < d; ++i) g.mean[i] += s[i];
  }
  for (double& m : g.mean) m /= static_cast<double>(n);
  g.cov.assign(d * d, 0.0);
  for (const auto& s : samples)
    for (size_t i = 0; i < d; ++i)
      for (size_t j = i; j < d; ++j) g.cov[i * d + j] += (s[i] - g.mean[i]) * (s[j] - g.mean[j]);
  const double denom = static_cast<double>(std::max<size_t>(n, 2) - 1);
  for (size_t i = 0; i < d; ++i)
    for (size_t j = i; j < d; ++j) {
      g.cov[i * d + j] /= denom;
      g.cov[j * d + i] = g.cov[i * d + j];
    }
  return g;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim())
    fail(Errc::kShape, "Frechet distance: dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  if (a.dim() == 0) fail(Errc::kShape, "Frechet distance: zero-dimensional statistics");
  const Mat sa = as_matrix(a, "a");
  const Mat sb = as_matrix(b, "b");
  double mean_term = 0;
  for (int64_t i = 0; i < a.dim(); ++i) {
    const double d = a.mean[static_cast<size_t>(i)] - b.mean[static_cast<size_t>(i)];
    mean_term += d * d;
  }
  const Mat ra = psd_sqrt(sa, "covariance a");
  psd_eigen(sb, "covariance b");
  const Mat m = ra * sb * ra;
  const auto es = psd_eigen(0.5 * (m + m.transpose()), "covariance product");
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

std::vector<std::vector<double>> embed(const std::vector<ImageTensor>& images, const losses::PerceptualExtractor& phi) {
  ag::NoGradGuard ng;
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    const auto feats = phi.features(ops::constant(img.batched()));
    if (feats.empty()) fail(Errc::kConfig, "extractor " + phi.name() + " produced no features");
    const Tensor pooled = ops::global_avg_pool(feats.back()).value();
    out.emplace_back(pooled.vec().begin(), pooled.vec().end());
  }
  return out;
}

FidResult fid_score(const std::vector<ImageTensor>& a, const std::vector<ImageTensor>& b,
                    const losses::PerceptualExtractor& phi) {
  if (a.empty() || b.empty()) fail(Errc::kData, "FID needs at least one image in each set");
  const auto fa = embed(a, phi);
  const auto fb = embed(b, phi);
  FidResult r;
  r.dim = static_cast<int64_t>(fa[0].size());
  r.value = frechet_distance(GaussianStats::fit(fa), GaussianStats::fit(fb));
  const size_t need = static_cast<size_t>(r.dim) + 1;
  if (a.size() < need || b.size() < need)
    r.warning = "fewer than " + std::to_string(need) + " images per set; covariance estimates are rank deficient";
  return r;
}

double lpips_like(const ImageTensor& a, const ImageTensor& b, const losses::PerceptualExtractor& phi,
                  const std::vector<double>& stage_weights) {
  if (a.channels() != b.channels() || a.size() != b.size())
    fail(Errc::kShape, "LPIPS: image shapes differ");
  ag::NoGradGuard ng;
  const auto fa = phi.features(ops::constant(a.batched()));
  const auto fb = phi.features(ops::constant(b.batched()));
  if (!stage_weights.empty() && stage_weights.size() != fa.size())
    fail(Errc::kConfig, "LPIPS: " + std::to_string(stage_weights.size()) + " weights for " +
                            std::to_string(fa.size()) + " stages");
  double total = 0;
  for (size_t s = 0; s < fa.size(); ++s) {
    const Tensor& x = fa[s].value();
    const Tensor& y = fb[s].value();
    const int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
    double acc = 0;
    for (int64_t p = 0; p < hw; ++p) {
      double nx = 0, ny = 0;
      for (int64_t k = 0; k < c; ++k) {
        nx += x[k * hw + p] * x[k * hw + p];
        ny += y[k * hw + p] * y[k * hw + p];
      }
      nx = std::sqrt(nx) + 1e-10;
      ny = std::sqrt(ny) + 1e-10;
      for (int64_t k = 0; k < c; ++k) {
        const double d = x[k * hw + p] / nx - y[k * hw + p] / ny;
        acc += d * d;
      }
    }
    total += (stage_weights.empty() ? 1.0 : stage_weights[s]) * acc / static_cast<double>(hw);
  }
  return total;
}

std::vector<ImageTensor> load_image_dir(const fs::path& dir, Size2 size) {
  if (!fs::is_directory(dir)) fail(Errc::kData, "image directory " + dir.string() + " not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ImageTensor> out;
  for (const auto& f : files) out.push_back(load_image(f, size));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

profile::Trace trace_forward(const nn::Layer& model, const Shape& input_shape) {
  profile::Trace trace;
  ag::NoGradGuard ng;
  profile::TraceScope scope(trace);
  model.forward(ag::Var(Tensor::meta(input_shape)));
  return trace;
}

}  // namespace

int64_t count_flops(const nn::Layer& model, const Shape& input_shape) {
  return trace_forward(model, input_shape).total_flops();
}

int64_t count_params(const nn::Module& model) { return model.parameter_count(); }

int64_t memory_estimate(const nn::Layer& model, const Shape& input_shape) {
  return 4 * count_params(model) + 4 * trace_forward(model, input_shape).peak_live_elems();
}

LatencyStats benchmark_latency(const nn::Layer& model, const Shape& input_shape, int warmup, int iters, uint64_t seed) {
  if (warmup < 1) fail(Errc::kConfig, "latency benchmark needs warmup >= 1");
  if (iters < 3) fail(Errc::kConfig, "latency benchmark needs iters >= 3");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor x(input_shape);
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = u(rng);
  const ag::Var in(x);
  ag::NoGradGuard ng;
  for (int i = 0; i < warmup; ++i) model.forward(in);
  std::vector<double> ms;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(in);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  LatencyStats s;
  s.iterations = iters;
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const size_t n = ms.size();
  s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_ms = ms[std::max<size_t>(rank, 1) - 1];
  return s;
}

ProfileRow profile_model(const std::string& name, const nn::Layer& model, const Shape& input_shape, int warmup,
                         int iters, uint64_t seed) {
  ProfileRow r;
  r.name = name;
  r.params = count_params(model);
  r.flops = count_flops(model, input_shape);
  r.memory_mb = static_cast<double>(memory_estimate(model, input_shape)) / (1024.0 * 1024.0);
  if (iters > 0) r.latency = benchmark_latency(model, input_shape, warmup, iters, seed);
  return r;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

Report comparison_report(const std::vector<ProfileRow>& rows, const std::optional<QualityBlock>& quality,
                         const std::optional<std::string>& baseline) {
  if (rows.empty()) fail(Errc::kConfig, "comparison report needs at least one row");
  const ProfileRow* base = nullptr;
  if (baseline) {
    for (const auto& r : rows)
      if (r.name == *baseline) base = &r;
    if (!base) fail(Errc::kConfig, "baseline row '" + *baseline + "' not found");
  }

  Report rep;
  json jrows = json::array();
  std::vector<std::string> header{"Model", "Params (M)", "FLOPs (B)", "Runtime (ms)", "Memory (MB)"};
  if (base) header.push_back("FLOPs ratio");
  std::vector<std::vector<std::string>> table{header};
  for (const auto& r : rows) {
    json j{{"name", r.name}, {"params", r.params}, {"flops", r.flops}, {"memory_mb", r.memory_mb}};
    j["latency_ms"] = r.latency ? json{{"mean", r.latency->mean_ms}, {"median", r.latency->median_ms},
                                       {"p95", r.latency->p95_ms}}
                                : json(nullptr);
    std::vector<std::string> line{r.name, fmt("%.3f", static_cast<double>(r.params) / 1e6),
                                  fmt("%.2f", static_cast<double>(r.flops) / 1e9),
                                  r.latency ? fmt("%.2f", r.latency->mean_ms) : "-", fmt("%.2f", r.memory_mb)};
    if (base) {
      const double fr = base->flops > 0 ? static_cast<double>(r.flops) / static_cast<double>(base->flops) : 0.0;
      const double pr = base->params > 0 ? static_cast<double>(r.params) / static_cast<double>(base->params) : 0.0;
      j["flops_ratio"] = fr;
      j["params_ratio"] = pr;
      line.push_back(fmt("%.3f", fr));
    }
    jrows.push_back(std::move(j));
    table.push_back(std::move(line));
  }
  rep.json = {{"rows", jrows}, {"env", {{"device", "cpu"}, {"threads", 1}}}};
  if (base) rep.json["baseline"] = base->name;
  json q = json::object();
  if (quality) {
    if (quality->fid) q["fid"] = *quality->fid;
    if (quality->lpips) q["lpips"] = *quality->lpips;
    if (!q.empty() && !quality->extractor.empty()) q["extractor"] = quality->extractor;
  }
  rep.json["quality"] = q;

  std::vector<size_t> width(header.size(), 0);
  for (const auto& line : table)
    for (size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream os;
  for (size_t i = 0; i < table.size(); ++i) {
    for (size_t c = 0; c < table[i].size(); ++c) {
      const std::string& cell = table[i][c];
      const std::string pad(width[c] - cell.size(), ' ');
      os << (c == 0 ? cell + pad : "  " + pad + cell);
    }
    os << '\n';
    if (i == 0) {
      size_t total = 0;
      for (size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 2 : 0);
      os << std::string(total, '-') << '\n';
    }
  }
  if (q.contains("fid")) os << "FID: " << fmt("%.4f", q["fid"].get<double>()) << '\n';
  if (q.contains("lpips")) os << "LPIPS: " << fmt("%.4f", q["lpips"].get<double>()) << '\n';
  if (q.contains("extractor")) os << "Extractor: " << q["extractor"].get<std::string>() << '\n';
  rep.text = os.str();
  return rep;
}

}  // namespace dmvton::metrics
