#pragma once

// Synthetic datasets, benchmark runs over fitting methods, and the meta-loss ablation.

#include "neural_descent/baselines.hpp"
#include "neural_descent/bodymodel.hpp"
#include "neural_descent/camera.hpp"
#include "neural_descent/hund.hpp"
#include "neural_descent/renderloss.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace neural_descent {

struct DatasetConfig {
  std::size_t n = 100;
  std::uint64_t seed = 0;
  double pose_scale = 0.3;
  double shape_scale = 1.0;
  double kp_noise_px = 0.0;
  double kp_dropout = 0.0;    ///< rate at which a keypoint's confidence is zeroed
  double part_dropout = 0.0;  ///< rate at which a part channel is zeroed
  std::size_t raster = 32;    ///< part map side in pixels
  double image_width = 1280.0;
  double image_height = 720.0;
  double crop_margin = 0.1;
  double crop_out = 480.0;

  void validate() const;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct Sample {
  std::size_t id = 0;
  Observation obs;
  ModelState gt;
  CropSpec crop;
  Intrinsics source;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  DatasetConfig config;
  Skeleton skeleton;
  std::vector<Sample> samples;

  std::vector<Observation> observations() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Deterministic in config.seed; each sample draws from its own stream, so `threads` does not change the result.
Dataset generate_dataset(const Skeleton& skeleton, const DatasetConfig& config, std::size_t threads = 1);

/// One JSON object per line: a header line, then one line per sample.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

enum class MethodKind { hund, gd, bfgs, hybrid };

struct Method {
  MethodKind kind = MethodKind::bfgs;
  std::size_t stages = 0;  ///< hybrid only

  std::string name() const;
  friend bool operator==(const Method&, const Method&) = default;
};

/// "hund", "gd", "bfgs", "hybrid<i>".
Method parse_method(std::string_view name);
std::vector<Method> parse_methods(std::string_view comma_list);

struct BenchConfig {
  LossWeights weights{1.0, 0.0, 1.0, 1.0, 1.0};
  RasterConfig raster{.width = 32, .height = 32};
  BfgsConfig bfgs;
  std::size_t gd_steps = 200;
  double gd_step = 1e-4;
  std::size_t threads = 1;
};

struct ReportRow {
  std::string method;
  std::size_t sample_id = 0;
  std::size_t index = 0;
  LossBreakdown loss;
  PoseErrors errors;
  std::size_t evals = 0;
};

struct BenchmarkReport {
  std::vector<ReportRow> rows;  ///< sorted by (method, sample, index)
};

/// Baselines start from the A-pose, the refiner from its encoder.
BenchmarkReport run_benchmark(const Dataset& dataset, std::span<const Method> methods, const RefinerParams* params,
                              const BenchConfig& config);

void write_report_csv(const std::filesystem::path& path, const BenchmarkReport& report);
BenchmarkReport read_report_csv(const std::filesystem::path& path);

double median(std::vector<double> values);

/// Medians over samples of each method's last row.
struct MethodSummary {
  std::string method;
  std::size_t samples = 0;
  double final_loss = 0.0;
  double mpjpe = 0.0;
  double mpjpe_pa = 0.0;
  double mpjpe_trans = 0.0;
  double evals = 0.0;
};

std::vector<MethodSummary> summarize(const BenchmarkReport& report);

/// Evaluations each method needs to reach the reference method's final loss on the same sample.
struct Crossover {
  std::string method;
  std::size_t sample_id = 0;
  double target_loss = 0.0;
  std::optional<std::size_t> evals;  ///< empty when never reached
};

std::vector<Crossover> crossover(const BenchmarkReport& report, const std::string& reference = "hund");

/// Median evaluations per method; an unreached target counts as +inf.
std::map<std::string, double> median_crossover(std::span<const Crossover> rows);

void write_crossover_csv(const std::filesystem::path& path, std::span<const Crossover> rows);

struct AblationConfig {
  std::vector<MetaLoss> kinds{MetaLoss::sum, MetaLoss::last, MetaLoss::min, MetaLoss::max, MetaLoss::oi};
  std::size_t seeds = 3;
  TrainConfig train;
  RefinerShape shape;
  LossWeights weights{1.0, 0.0, 1.0, 1.0, 1.0};
  RasterConfig raster{.width = 32, .height = 32};
};

struct AblationRun {
  MetaLoss kind = MetaLoss::last;
  std::uint64_t seed = 0;
  double mpjpe = 0.0;     ///< median over test samples
  double mpjpe_pa = 0.0;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  /// Per kind, the median over seeds.
  std::vector<AblationRun> summary;
};

/// One training run per (kind, seed); seed s trains with config.train.seed + s.
AblationResult ablate_metaloss(const Dataset& train, const Dataset& test, const AblationConfig& config,
                               const TrainProgress& progress = {});

/// Median stage-M errors of a trained refiner on a test set.
AblationRun evaluate_refiner(const Dataset& test, const RefinerParams& params, const LossWeights& weights,
                             const RasterConfig& raster);

/// Hex SHA-1 of "blob <size>\0" + bytes, as git computes object ids.
std::string git_blob_sha1(std::string_view bytes);
std::string git_blob_sha1(const std::filesystem::path& path);

}  // namespace neural_descent
