#include "neural_descent/hund.hpp"

#include "json_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <thread>

namespace neural_descent {

RefinerShape RefinerShape::for_skeleton(const Skeleton& skeleton) {
  RefinerShape shape;
  shape.joints = skeleton.joint_count();
  shape.parts = kPartCount;
  shape.state = skeleton.state_dims();
  return shape;
}

std::array<std::string_view, RefinerParams::kTensorCount> RefinerParams::names() const {
  return {"enc1_w", "enc1_b", "enc2_w", "enc2_b", "init_w", "init_b", "cell_wx", "cell_wh", "cell_b", "out_w", "out_b"};
}

std::array<const Array*, RefinerParams::kTensorCount> RefinerParams::tensors() const {
  return {&enc1_w, &enc1_b, &enc2_w, &enc2_b, &init_w, &init_b, &cell_wx, &cell_wh, &cell_b, &out_w, &out_b};
}

std::array<Array*, RefinerParams::kTensorCount> RefinerParams::tensors() {
  return {&enc1_w, &enc1_b, &enc2_w, &enc2_b, &init_w, &init_b, &cell_wx, &cell_wh, &cell_b, &out_w, &out_b};
}

std::size_t RefinerParams::parameter_count() const {
  std::size_t n = 0;
  for (const Array* a : tensors()) n += a->size();
  return n;
}

bool RefinerParams::finite() const {
  for (const Array* a : tensors()) {
    for (double v : a->values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

RefinerParams init_params(const RefinerShape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t rows, std::size_t cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Array a(Shape{rows, cols});
    for (double& v : a.values()) v = u(rng);
    return a;
  };
  const std::size_t H = shape.hidden;
  RefinerParams p;
  p.shape = shape;
  p.enc1_w = uniform(shape.encoder_hidden, shape.feature_dims());
  p.enc1_b = Array(Shape{shape.encoder_hidden});
  p.enc2_w = uniform(shape.context, shape.encoder_hidden);
  p.enc2_b = Array(Shape{shape.context});
  p.init_w = uniform(shape.state, shape.context);
  p.init_b = Array(Shape{shape.state});
  p.cell_wx = uniform(4 * H, shape.cell_input_dims());
  p.cell_wh = uniform(4 * H, H);
  p.cell_b = Array(Shape{4 * H});
  for (std::size_t i = H; i < 2 * H; ++i) p.cell_b[i] = 1.0;
  p.out_w = Array(Shape{shape.state, H});
  p.out_b = Array(Shape{shape.state});
  return p;
}

std::array<Var, RefinerParams::kTensorCount> ParamVars::list() const {
  return {enc1_w, enc1_b, enc2_w, enc2_b, init_w, init_b, cell_wx, cell_wh, cell_b, out_w, out_b};
}

ParamVars bind_params(Tape& tape, const RefinerParams& params, bool trainable) {
  auto bind = [&](const Array& a) { return trainable ? tape.variable(a) : tape.constant(a); };
  ParamVars v;
  v.shape = params.shape;
  v.enc1_w = bind(params.enc1_w);
  v.enc1_b = bind(params.enc1_b);
  v.enc2_w = bind(params.enc2_w);
  v.enc2_b = bind(params.enc2_b);
  v.init_w = bind(params.init_w);
  v.init_b = bind(params.init_b);
  v.cell_wx = bind(params.cell_wx);
  v.cell_wh = bind(params.cell_wh);
  v.cell_b = bind(params.cell_b);
  v.out_w = bind(params.out_w);
  v.out_b = bind(params.out_b);
  return v;
}

Array featurize(const Observation& obs, std::size_t pool) {
  if (pool == 0) throw std::invalid_argument("featurize: pool must be positive");
  if (obs.part_map.ndim() != 3) throw ShapeError("featurize", "part map " + shape_string(obs.part_map.shape()));
  const std::size_t n = obs.keypoints.dim(0);
  const std::size_t H = obs.part_map.dim(0);
  const std::size_t W = obs.part_map.dim(1);
  const std::size_t C = obs.part_map.dim(2);
  std::vector<double> f;
  f.reserve(3 * n + pool * pool * C + 4);
  // Keypoints with zero confidence carry no position.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 2; ++k) f.push_back(obs.confidences[i] * (2.0 * obs.keypoints(i, k) / obs.crop_size - 1.0));
  }
  for (std::size_t i = 0; i < n; ++i) f.push_back(obs.confidences[i]);
  for (std::size_t gy = 0; gy < pool; ++gy) {
    const std::size_t y0 = gy * H / pool;
    const std::size_t y1 = std::max((gy + 1) * H / pool, y0 + 1);
    for (std::size_t gx = 0; gx < pool; ++gx) {
      const std::size_t x0 = gx * W / pool;
      const std::size_t x1 = std::max((gx + 1) * W / pool, x0 + 1);
      const double count = static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t c = 0; c < C; ++c) {
        double total = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) total += obs.part_map[(y * W + x) * C + c];
        f.push_back(total / count);
      }
    }
  }
  const Intrinsics& K = obs.crop_intrinsics;
  for (double v : {K.fx, K.fy, K.cx, K.cy}) f.push_back(v / obs.crop_size);
  return Array::vector(std::move(f));
}

ContextVars encode_context(const ParamVars& p, const Var& features) {
  if (features.size() != p.shape.feature_dims()) {
    throw ShapeError("encode_context", "features " + shape_string(features.shape()) + ", expected " +
                                           std::to_string(p.shape.feature_dims()));
  }
  Tape& tape = features.tape();
  const Var h = tanh(matmul(p.enc1_w, features) + p.enc1_b);
  const Var code = tanh(matmul(p.enc2_w, h) + p.enc2_b);
  const Var raw = matmul(p.init_w, code) + p.init_b;
  const std::size_t n = p.shape.state;
  // Offsets put zero output at the identity rotation; depth stays above 1 m.
  Array offset(Shape{n - 1});
  offset[n - 9] = 1.0;
  offset[n - 5] = 1.0;
  const Var head = slice(raw, 0, 0, n - 1) + tape.constant(offset);
  const Var depth = softplus(slice(raw, 0, n - 1, n)) + 1.0;
  return {code, concat({head, depth}, 0)};
}

MemoryVars zero_memory(Tape& tape, const RefinerShape& shape) {
  return {tape.constant(Array(Shape{shape.hidden})), tape.constant(Array(Shape{shape.hidden}))};
}

StepVars refine_step(const ParamVars& p, const Var& state, const MemoryVars& memory, const Var& loss, const Var& code) {
  const std::size_t H = p.shape.hidden;
  const Var x = concat({state, reshape(log(loss + 1.0), {1}), code}, 0);
  const Var z = matmul(p.cell_wx, x) + matmul(p.cell_wh, memory.hidden) + p.cell_b;
  const Var in = sigmoid(slice(z, 0, 0, H));
  const Var forget = sigmoid(slice(z, 0, H, 2 * H));
  const Var candidate = tanh(slice(z, 0, 2 * H, 3 * H));
  const Var out = sigmoid(slice(z, 0, 3 * H, 4 * H));
  const Var cell = forget * memory.cell + in * candidate;
  const Var hidden = out * tanh(cell);
  return {state + matmul(p.out_w, hidden) + p.out_b, {hidden, cell}};
}

Context encode_context(const Observation& obs, const RefinerParams& params, const Skeleton& skeleton) {
  Tape tape;
  const ParamVars p = bind_params(tape, params, false);
  const ContextVars ctx = encode_context(p, tape.constant(featurize(obs, params.shape.pool)));
  return {ctx.code.value(), ModelState::unpack(skeleton, ctx.initial_state.value().values())};
}

std::pair<ModelState, Memory> refine_step(const ModelState& state, const Memory& memory, double loss, const Array& code,
                                          const RefinerParams& params, const Skeleton& skeleton) {
  Tape tape;
  const ParamVars p = bind_params(tape, params, false);
  const StepVars next = refine_step(p, tape.constant(state.pack()), {tape.constant(memory.hidden), tape.constant(memory.cell)},
                                    tape.constant(loss), tape.constant(code));
  return {ModelState::unpack(skeleton, next.state.value().values()),
          Memory{next.memory.hidden.value(), next.memory.cell.value()}};
}

UnrolledGraph unroll_graph(const ParamVars& p, const Observation& obs, const Skeleton& skeleton, std::size_t stages,
                           const LossWeights& weights, const RasterConfig& cfg, StageLoss stage_loss) {
  if (stages == 0) throw std::invalid_argument("unroll: need at least one stage");
  Tape& tape = p.enc1_w.tape();
  UnrolledGraph g;
  const ContextVars ctx = encode_context(p, tape.constant(featurize(obs, p.shape.pool)));
  MemoryVars memory = zero_memory(tape, p.shape);
  Var state = ctx.initial_state;
  try {
    g.states.push_back(state);
    g.unit.push_back(unit_loss(skeleton, state, obs, weights, cfg));
    ++g.evals;
    if (!std::isfinite(g.unit.back().total.item())) {
      g.truncated = true;
      return g;
    }
    for (std::size_t i = 1; i <= stages; ++i) {
      const StepVars next = refine_step(p, state, memory, g.unit.back().total, ctx.code);
      state = next.state;
      memory = next.memory;
      g.states.push_back(state);
      g.unit.push_back(unit_loss(skeleton, state, obs, weights, cfg));
      ++g.evals;
      const Var stage = stage_loss == StageLoss::unit ? g.unit.back().total : fs_loss(skeleton, state, obs, weights);
      if (!std::isfinite(g.unit.back().total.item()) || !std::isfinite(stage.item())) {
        g.truncated = true;
        return g;
      }
      g.stage_losses.push_back(stage);
    }
  } catch (const std::domain_error&) {
    // Projection behind the camera or a collapsed rotation.
    g.truncated = true;
  }
  return g;
}

Trajectory unroll(const Observation& obs, const RefinerParams& params, const Skeleton& skeleton, std::size_t stages,
                  const LossWeights& weights, const RasterConfig& cfg) {
  Tape tape;
  const ParamVars p = bind_params(tape, params, false);
  const UnrolledGraph g = unroll_graph(p, obs, skeleton, stages, weights, cfg);
  Trajectory t;
  t.eval_count = g.evals;
  t.truncated = g.truncated;
  for (std::size_t i = 0; i < g.unit.size(); ++i) {
    t.states.push_back(ModelState::unpack(skeleton, g.states[i].value().values()));
    t.losses.push_back(values(g.unit[i]));
  }
  return t;
}

MetaLoss parse_meta_loss(std::string_view name) {
  if (name == "sum") return MetaLoss::sum;
  if (name == "last") return MetaLoss::last;
  if (name == "min") return MetaLoss::min;
  if (name == "max") return MetaLoss::max;
  if (name == "oi") return MetaLoss::oi;
  throw std::invalid_argument("unknown meta-loss '" + std::string(name) + "'");
}

std::string_view to_string(MetaLoss kind) {
  switch (kind) {
    case MetaLoss::sum: return "sum";
    case MetaLoss::last: return "last";
    case MetaLoss::min: return "min";
    case MetaLoss::max: return "max";
    case MetaLoss::oi: return "oi";
  }
  return "?";
}

double meta_loss(std::span<const double> L, MetaLoss kind) {
  if (L.empty()) throw std::invalid_argument("meta_loss: empty stage sequence");
  switch (kind) {
    case MetaLoss::sum: {
      double total = 0.0;
      for (double v : L) total += v;
      return total;
    }
    case MetaLoss::last: return L.back();
    case MetaLoss::min: return *std::min_element(L.begin(), L.end());
    case MetaLoss::max: return *std::max_element(L.begin(), L.end());
    case MetaLoss::oi: {
      double total = 0.0;
      double best = L[0];
      for (std::size_t i = 1; i < L.size(); ++i) {
        total += std::min(L[i] - best, 0.0);
        best = std::min(best, L[i]);
      }
      return total;
    }
  }
  throw std::invalid_argument("meta_loss: unknown kind");
}

Var meta_loss(std::span<const Var> L, MetaLoss kind) {
  if (L.empty()) throw std::invalid_argument("meta_loss: empty stage sequence");
  Tape& tape = L[0].tape();
  switch (kind) {
    case MetaLoss::sum: {
      Var total = L[0];
      for (std::size_t i = 1; i < L.size(); ++i) total = total + L[i];
      return total;
    }
    case MetaLoss::last: return L.back();
    case MetaLoss::min:
    case MetaLoss::max: {
      Var acc = L[0];
      for (std::size_t i = 1; i < L.size(); ++i) acc = kind == MetaLoss::min ? minimum(acc, L[i]) : maximum(acc, L[i]);
      return acc;
    }
    case MetaLoss::oi: {
      const Var zero = tape.constant(0.0);
      Var total = zero;
      Var best = L[0];
      for (std::size_t i = 1; i < L.size(); ++i) {
        total = total + minimum(L[i] - best, zero);
        best = minimum(best, L[i]);
      }
      return total;
    }
  }
  throw std::invalid_argument("meta_loss: unknown kind");
}

Regime parse_regime(std::string_view name) {
  if (name == "ss") return Regime::ss;
  if (name == "fs") return Regime::fs;
  if (name == "fs+ss" || name == "mixed") return Regime::mixed;
  throw std::invalid_argument("unknown regime '" + std::string(name) + "'");
}

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::ss: return "ss";
    case Regime::fs: return "fs";
    case Regime::mixed: return "fs+ss";
  }
  return "?";
}

Adam::Adam(const RefinerParams& params, AdamConfig config) : config_(config) {
  const auto tensors = params.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    m_[i] = Array(tensors[i]->shape());
    v_[i] = Array(tensors[i]->shape());
  }
}

void Adam::step(RefinerParams& params, const std::array<Array, RefinerParams::kTensorCount>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  auto tensors = params.tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Array& p = *tensors[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grads[k][i];
      m_[k][i] = config_.beta1 * m_[k][i] + (1.0 - config_.beta1) * g;
      v_[k][i] = config_.beta2 * v_[k][i] + (1.0 - config_.beta2) * g * g;
      p[i] -= config_.learning_rate * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + config_.epsilon);
    }
  }
}

void TrainConfig::validate() const {
  if (stages == 0) throw std::invalid_argument("train: stages must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("train: learning rate must be >= 0");
  if (threads == 0) throw std::invalid_argument("train: threads must be positive");
}

namespace {

struct ChunkResult {
  double loss = 0.0;
  std::array<Array, RefinerParams::kTensorCount> grads;
  bool finite = true;
};

ChunkResult chunk_gradient(std::span<const Observation* const> chunk, const Skeleton& skeleton, const RefinerParams& params,
                           MetaLoss meta, StageLoss stage_loss, const LossWeights& weights, const RasterConfig& cfg) {
  ChunkResult r;
  Tape tape;
  const ParamVars p = bind_params(tape, params, true);
  Var total = tape.constant(0.0);
  for (const Observation* obs : chunk) {
    const UnrolledGraph g = unroll_graph(p, *obs, skeleton, params.shape.stages, weights, cfg, stage_loss);
    if (g.truncated) {
      r.finite = false;
      return r;
    }
    total = total + meta_loss(g.stage_losses, meta);
  }
  r.loss = total.item();
  const auto vars = p.list();
  const std::vector<Array> grads = tape.gradient(total, vars);
  for (std::size_t k = 0; k < grads.size(); ++k) r.grads[k] = grads[k];
  r.finite = std::isfinite(r.loss);
  return r;
}

}  // namespace

BatchGradient batch_gradient(std::span<const Observation* const> batch, const Skeleton& skeleton,
                             const RefinerParams& params, MetaLoss meta, Regime source, const LossWeights& weights,
                             const RasterConfig& cfg, std::size_t threads) {
  if (batch.empty()) throw std::invalid_argument("batch_gradient: empty batch");
  const StageLoss stage_loss = source == Regime::fs ? StageLoss::supervised : StageLoss::unit;
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, batch.size());
  std::vector<ChunkResult> chunks(workers);
  auto run = [&](std::size_t w) {
    const std::size_t begin = w * batch.size() / workers;
    const std::size_t end = (w + 1) * batch.size() / workers;
    chunks[w] = chunk_gradient(batch.subspan(begin, end - begin), skeleton, params, meta, stage_loss, weights, cfg);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }

  BatchGradient out;
  const double scale = 1.0 / static_cast<double>(batch.size());
  const auto tensors = params.tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) out.grads[k] = Array(tensors[k]->shape());
  for (const ChunkResult& c : chunks) {
    if (!c.finite) {
      out.finite = false;
      out.loss = std::numeric_limits<double>::quiet_NaN();
      return out;
    }
    out.loss += c.loss;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      for (std::size_t i = 0; i < out.grads[k].size(); ++i) out.grads[k][i] += c.grads[k][i];
    }
  }
  out.loss *= scale;
  for (auto& g : out.grads) {
    for (double& v : g.values()) {
      v *= scale;
      if (!std::isfinite(v)) out.finite = false;
    }
  }
  return out;
}

TrainResult train(std::span<const Observation> data, const Skeleton& skeleton, const RefinerParams& init,
                  const TrainConfig& config, const LossWeights& weights, const RasterConfig& cfg,
                  const TrainProgress& progress) {
  config.validate();
  weights.validate();
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.regime != Regime::ss) {
    for (const Observation& obs : data) {
      if (!obs.gt_joints && !obs.gt_vertices) {
        throw std::invalid_argument("train: supervised regime needs 3D ground truth on every sample");
      }
    }
  }
  TrainResult result;
  result.params = init;
  result.params.shape.stages = config.stages;
  Adam adam(result.params, AdamConfig{config.learning_rate});

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(config.seed);
  std::size_t step = 0;
  std::size_t failures = 0;
  std::vector<const Observation*> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&data[order[i]]);
      Regime source = config.regime;
      if (source == Regime::mixed) source = step % 2 == 0 ? Regime::ss : Regime::fs;

      const BatchGradient g =
          batch_gradient(batch, skeleton, result.params, config.meta, source, weights, cfg, config.threads);
      TrainLogEntry entry{step, epoch, source, g.loss, !g.finite};
      if (g.finite) {
        adam.step(result.params, g.grads);
        failures = 0;
      } else if (++failures >= 3) {
        result.log.push_back(entry);
        throw TrainingDiverged("training aborted after three consecutive non-finite steps (step " + std::to_string(step) + ")");
      }
      result.log.push_back(entry);
      if (progress) progress(entry);
      ++step;
      if (config.max_steps != 0 && step >= config.max_steps) return result;
    }
  }
  return result;
}

namespace {

constexpr char kMagic[8] = {'N', 'D', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

nlohmann::json header_json(const RefinerParams& params, const Skeleton& skeleton) {
  const RefinerShape& s = params.shape;
  nlohmann::json h;
  h["format_version"] = kFormatVersion;
  h["pose_dims"] = skeleton.pose_dims();
  h["shape_dims"] = skeleton.shape_dims();
  h["joints"] = s.joints;
  h["parts"] = s.parts;
  h["state_dims"] = s.state;
  h["pool"] = s.pool;
  h["encoder_hidden"] = s.encoder_hidden;
  h["context"] = s.context;
  h["hidden"] = s.hidden;
  h["stages"] = s.stages;
  h["skeleton"] = json_io::to_json(skeleton);
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RefinerParams& params, const Skeleton& skeleton) {
  if (params.shape.joints != skeleton.joint_count() || params.shape.state != skeleton.state_dims()) {
    throw std::invalid_argument("save_checkpoint: parameters do not match the skeleton");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string header = header_json(params, skeleton).dump();
  out.write(kMagic, sizeof kMagic);
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto names = params.names();
  const auto tensors = params.tensors();
  write_u64(out, tensors.size());
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    write_u64(out, names[k].size());
    out.write(names[k].data(), static_cast<std::streamsize>(names[k].size()));
    write_u64(out, tensors[k]->ndim());
    for (std::size_t d : tensors[k]->shape()) write_u64(out, d);
    for (double v : tensors[k]->values()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error("not a checkpoint: " + path.string());
  const std::uint64_t header_size = read_u64(in);
  if (header_size > (1u << 24)) throw std::runtime_error("checkpoint: header too large");
  std::string text(header_size, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_size))) throw std::runtime_error("checkpoint: truncated header");
  const nlohmann::json h = nlohmann::json::parse(text);
  if (h.at("format_version").get<int>() != kFormatVersion) throw std::runtime_error("checkpoint: unsupported format version");

  Checkpoint ck;
  ck.skeleton = json_io::skeleton_from_json(h.at("skeleton"));
  const std::size_t J = ck.skeleton.joint_count();

  RefinerShape s;
  s.joints = h.at("joints").get<std::size_t>();
  s.parts = h.at("parts").get<std::size_t>();
  s.state = h.at("state_dims").get<std::size_t>();
  s.pool = h.at("pool").get<std::size_t>();
  s.encoder_hidden = h.at("encoder_hidden").get<std::size_t>();
  s.context = h.at("context").get<std::size_t>();
  s.hidden = h.at("hidden").get<std::size_t>();
  s.stages = h.at("stages").get<std::size_t>();
  if (s.joints != J || s.state != ck.skeleton.state_dims() || h.at("pose_dims").get<std::size_t>() != ck.skeleton.pose_dims()) {
    throw std::runtime_error("checkpoint: header dimensions disagree with its skeleton");
  }

  ck.params = init_params(s, 0);
  const auto names = ck.params.names();
  auto tensors = ck.params.tensors();
  if (read_u64(in) != tensors.size()) throw std::runtime_error("checkpoint: wrong tensor count");
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const std::uint64_t len = read_u64(in);
    if (len > 256) throw std::runtime_error("checkpoint: bad tensor name");
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    if (name != names[k]) throw std::runtime_error("checkpoint: expected tensor " + std::string(names[k]) + ", found " + name);
    Shape shape(read_u64(in));
    for (auto& d : shape) d = read_u64(in);
    if (shape != tensors[k]->shape()) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " + shape_string(shape) + ", expected " +
                               shape_string(tensors[k]->shape()));
    }
    for (double& v : tensors[k]->values()) v = std::bit_cast<double>(read_u64(in));
  }
  return ck;
}

void check_compatible(const Checkpoint& checkpoint, const Skeleton& skeleton) {
  if (!(checkpoint.skeleton == skeleton)) {
    throw std::runtime_error("checkpoint skeleton does not match the dataset skeleton");
  }
}

void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,epoch,source,meta_loss,skipped\n";
  char buf[64];
  for (const TrainLogEntry& e : log) {
    std::snprintf(buf, sizeof buf, "%.17g", e.meta_loss);
    out << e.step << ',' << e.epoch << ',' << to_string(e.source) << ',' << buf << ',' << (e.skipped ? 1 : 0) << '\n';
  }
}

}  // namespace neural_descent
