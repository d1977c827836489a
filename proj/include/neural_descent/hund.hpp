#pragma once

// Learned refinement: a context encoder proposes an initial state, then a
// gated recurrent cell repeatedly updates the state from the current unit loss.

#include "neural_descent/bodymodel.hpp"
#include "neural_descent/diffcore.hpp"
#include "neural_descent/renderloss.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace neural_descent {

/// Network dimensions. Everything else about the refiner follows from these.
struct RefinerShape {
  std::size_t joints = kDefaultJointCount;
  std::size_t parts = kPartCount;
  std::size_t state = 61;
  std::size_t pool = 8;            ///< part map is average-pooled to pool x pool
  std::size_t encoder_hidden = 256;
  std::size_t context = 128;
  std::size_t hidden = 256;
  std::size_t stages = 5;

  static RefinerShape for_skeleton(const Skeleton& skeleton);
  std::size_t feature_dims() const { return 3 * joints + pool * pool * (parts + 1) + 4; }
  std::size_t cell_input_dims() const { return state + 1 + context; }
  friend bool operator==(const RefinerShape&, const RefinerShape&) = default;
};

/// All trainable weights.
struct RefinerParams {
  RefinerShape shape;
  Array enc1_w, enc1_b;  ///< features -> encoder_hidden, tanh
  Array enc2_w, enc2_b;  ///< encoder_hidden -> context, tanh
  Array init_w, init_b;  ///< context -> initial state
  Array cell_wx, cell_wh, cell_b;  ///< gates (input, forget, candidate, output) stacked by rows
  Array out_w, out_b;    ///< hidden -> state update

  static constexpr std::size_t kTensorCount = 11;
  std::array<std::string_view, kTensorCount> names() const;
  std::array<const Array*, kTensorCount> tensors() const;
  std::array<Array*, kTensorCount> tensors();
  std::size_t parameter_count() const;
  bool finite() const;
  friend bool operator==(const RefinerParams&, const RefinerParams&) = default;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases with forget bias 1, zero update head.
RefinerParams init_params(const RefinerShape& shape, std::uint64_t seed);

/// Parameters placed on a tape.
struct ParamVars {
  RefinerShape shape;
  Var enc1_w, enc1_b, enc2_w, enc2_b, init_w, init_b, cell_wx, cell_wh, cell_b, out_w, out_b;

  std::array<Var, RefinerParams::kTensorCount> list() const;
};

ParamVars bind_params(Tape& tape, const RefinerParams& params, bool trainable);

/// Keypoints scaled to [-1, 1], confidences, pooled part map, intrinsics / crop size.
Array featurize(const Observation& obs, std::size_t pool = 8);

struct ContextVars {
  Var code;           ///< s^c
  Var initial_state;  ///< packed s_0
};

struct MemoryVars {
  Var hidden;
  Var cell;
};

ContextVars encode_context(const ParamVars& p, const Var& features);
MemoryVars zero_memory(Tape& tape, const RefinerShape& shape);

struct StepVars {
  Var state;
  MemoryVars memory;
};

/// s_next = s_prev + head(hidden) after one gated update on [s_prev, log(1 + loss), code].
StepVars refine_step(const ParamVars& p, const Var& state, const MemoryVars& memory, const Var& loss, const Var& code);

// Value forms.
struct Context {
  Array code;
  ModelState initial_state;
};
struct Memory {
  Array hidden;
  Array cell;
  friend bool operator==(const Memory&, const Memory&) = default;
};
Context encode_context(const Observation& obs, const RefinerParams& params, const Skeleton& skeleton);
std::pair<ModelState, Memory> refine_step(const ModelState& state, const Memory& memory, double loss, const Array& code,
                                          const RefinerParams& params, const Skeleton& skeleton);

/// Stage losses fed to the meta-loss.
enum class StageLoss { unit, supervised };

struct UnrolledGraph {
  std::vector<Var> states;             ///< s_0 .. s_k
  std::vector<UnitLossTerms> unit;     ///< L_u on each state
  std::vector<Var> stage_losses;       ///< meta-loss inputs for stages 1 .. k
  std::size_t evals = 0;
  bool truncated = false;              ///< a stage failed to project or went non-finite
};

UnrolledGraph unroll_graph(const ParamVars& p, const Observation& obs, const Skeleton& skeleton, std::size_t stages,
                           const LossWeights& weights, const RasterConfig& cfg, StageLoss stage_loss = StageLoss::unit);

struct Trajectory {
  std::vector<ModelState> states;    ///< s_0 .. s_M
  std::vector<LossBreakdown> losses; ///< L_u on each state; entries 1..M are the stage losses
  std::size_t eval_count = 0;
  bool truncated = false;
};

Trajectory unroll(const Observation& obs, const RefinerParams& params, const Skeleton& skeleton, std::size_t stages,
                  const LossWeights& weights, const RasterConfig& cfg);

enum class MetaLoss { sum, last, min, max, oi };

MetaLoss parse_meta_loss(std::string_view name);
std::string_view to_string(MetaLoss kind);

double meta_loss(std::span<const double> stage_losses, MetaLoss kind);
Var meta_loss(std::span<const Var> stage_losses, MetaLoss kind);

enum class Regime { ss, fs, mixed };

Regime parse_regime(std::string_view name);
std::string_view to_string(Regime regime);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const RefinerParams& params, AdamConfig config);
  void step(RefinerParams& params, const std::array<Array, RefinerParams::kTensorCount>& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::array<Array, RefinerParams::kTensorCount> m_;
  std::array<Array, RefinerParams::kTensorCount> v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  MetaLoss meta = MetaLoss::last;
  std::size_t stages = 5;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  std::size_t epochs = 50;
  Regime regime = Regime::ss;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Stops after this many optimizer steps when nonzero.
  std::size_t max_steps = 0;

  void validate() const;
};

struct TrainLogEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Regime source = Regime::ss;  ///< ss or fs for the batch
  double meta_loss = 0.0;      ///< mean over the batch
  bool skipped = false;
};

struct TrainResult {
  RefinerParams params;
  std::vector<TrainLogEntry> log;
};

/// Thrown after three consecutive non-finite steps.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TrainProgress = std::function<void(const TrainLogEntry&)>;

TrainResult train(std::span<const Observation> data, const Skeleton& skeleton, const RefinerParams& init,
                  const TrainConfig& config, const LossWeights& weights, const RasterConfig& cfg,
                  const TrainProgress& progress = {});

/// Mean meta-loss of the batch and its gradient with respect to every tensor.
struct BatchGradient {
  double loss = 0.0;
  std::array<Array, RefinerParams::kTensorCount> grads;
  bool finite = true;
};

BatchGradient batch_gradient(std::span<const Observation* const> batch, const Skeleton& skeleton,
                             const RefinerParams& params, MetaLoss meta, Regime source, const LossWeights& weights,
                             const RasterConfig& cfg, std::size_t threads);

// Checkpoints: magic, JSON header, then named little-endian float64 arrays.
struct Checkpoint {
  RefinerParams params;
  Skeleton skeleton;
};

void save_checkpoint(const std::filesystem::path& path, const RefinerParams& params, const Skeleton& skeleton);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Fails when the checkpoint's header does not match the skeleton or raster.
void check_compatible(const Checkpoint& checkpoint, const Skeleton& skeleton);

void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log);

}  // namespace neural_descent
