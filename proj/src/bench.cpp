#include "neural_descent/bench.hpp"

#include "json_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace neural_descent {

namespace {

constexpr int kDatasetFormat = 1;
constexpr std::size_t kMaxResample = 100;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are rethrown in index order.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string base64_encode(std::span<const unsigned char> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text, std::size_t expected) {
  std::vector<unsigned char> out(3 * (text.size() / 4) + 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0 || static_cast<std::size_t>(n) < expected) throw std::runtime_error("dataset: malformed base64 part map");
  out.resize(expected);
  return out;
}

nlohmann::json part_map_to_json(const Array& map) {
  std::vector<unsigned char> bytes;
  bytes.reserve(4 * map.size());
  for (double v : map.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<unsigned char>(bits >> (8 * k)));
  }
  return {{"shape", map.shape()}, {"f32le_base64", base64_encode(bytes)}};
}

Array part_map_from_json(const nlohmann::json& j) {
  const Shape shape = j.at("shape").get<Shape>();
  if (shape.size() != 3) throw std::runtime_error("dataset: part map must be H x W x C");
  Array map(shape);
  const auto bytes = base64_decode(j.at("f32le_base64").get<std::string>(), 4 * map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(k)]) << (8 * k);
    map[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return map;
}

nlohmann::json config_to_json(const DatasetConfig& c) {
  return {{"n", c.n},
          {"seed", c.seed},
          {"pose_scale", c.pose_scale},
          {"shape_scale", c.shape_scale},
          {"kp_noise_px", c.kp_noise_px},
          {"kp_dropout", c.kp_dropout},
          {"part_dropout", c.part_dropout},
          {"raster", c.raster},
          {"image_width", c.image_width},
          {"image_height", c.image_height},
          {"crop_margin", c.crop_margin},
          {"crop_out", c.crop_out}};
}

DatasetConfig config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.n = j.at("n").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.pose_scale = j.at("pose_scale").get<double>();
  c.shape_scale = j.at("shape_scale").get<double>();
  c.kp_noise_px = j.at("kp_noise_px").get<double>();
  c.kp_dropout = j.at("kp_dropout").get<double>();
  c.part_dropout = j.at("part_dropout").get<double>();
  c.raster = j.at("raster").get<std::size_t>();
  c.image_width = j.at("image_width").get<double>();
  c.image_height = j.at("image_height").get<double>();
  c.crop_margin = j.at("crop_margin").get<double>();
  c.crop_out = j.at("crop_out").get<double>();
  return c;
}

nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j;
  j["id"] = s.id;
  j["keypoints"] = json_io::rows_to_json(s.obs.keypoints);
  j["confidences"] = s.obs.confidences.storage();
  j["part_map"] = part_map_to_json(s.obs.part_map);
  j["crop_intrinsics"] = json_io::to_json(s.obs.crop_intrinsics);
  j["crop_size"] = s.obs.crop_size;
  j["crop"] = json_io::to_json(s.crop);
  j["source_intrinsics"] = json_io::to_json(s.source);
  j["state"] = json_io::to_json(s.gt);
  if (s.obs.gt_joints) j["gt_joints"] = json_io::rows_to_json(*s.obs.gt_joints);
  if (s.obs.gt_vertices) j["gt_vertices"] = json_io::rows_to_json(*s.obs.gt_vertices);
  return j;
}

Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.id = j.at("id").get<std::size_t>();
  s.obs.keypoints = json_io::rows_from_json(j.at("keypoints"), 2);
  s.obs.confidences = Array::vector(j.at("confidences").get<std::vector<double>>());
  s.obs.part_map = part_map_from_json(j.at("part_map"));
  s.obs.crop_intrinsics = json_io::intrinsics_from_json(j.at("crop_intrinsics"));
  s.obs.crop_size = j.at("crop_size").get<double>();
  s.crop = json_io::crop_from_json(j.at("crop"));
  s.source = json_io::intrinsics_from_json(j.at("source_intrinsics"));
  s.gt = json_io::state_from_json(j.at("state"));
  if (j.contains("gt_joints")) s.obs.gt_joints = json_io::rows_from_json(j.at("gt_joints"), 3);
  if (j.contains("gt_vertices")) s.obs.gt_vertices = json_io::rows_from_json(j.at("gt_vertices"), 3);
  return s;
}

Sample generate_sample(const Skeleton& skeleton, const DatasetConfig& config, std::size_t id) {
  const std::uint64_t stream = splitmix(splitmix(config.seed) + id);
  SamplingConfig sampling;
  sampling.pose_scale = config.pose_scale;
  sampling.shape_scale = config.shape_scale;
  const Intrinsics C = approx_intrinsics(config.image_height, config.image_width);

  for (std::size_t attempt = 0; attempt < kMaxResample; ++attempt) {
    const ModelState state = sample_state(skeleton, sampling, splitmix(stream + attempt));
    const Mesh mesh = pose_mesh(skeleton, state);
    const Array joints = pose_joints(skeleton, state);
    bool in_front = true;
    for (std::size_t i = 0; i < mesh.vertices.dim(0); ++i) in_front = in_front && mesh.vertices(i, 2) > 0.1;
    if (!in_front) continue;

    const Array uv = project(mesh.vertices, C);
    double u0 = uv(0, 0), u1 = u0, v0 = uv(0, 1), v1 = v0;
    for (std::size_t i = 1; i < uv.dim(0); ++i) {
      u0 = std::min(u0, uv(i, 0));
      u1 = std::max(u1, uv(i, 0));
      v0 = std::min(v0, uv(i, 1));
      v1 = std::max(v1, uv(i, 1));
    }
    const double side = std::max(u1 - u0, v1 - v0) * (1.0 + 2.0 * config.crop_margin);
    Sample s;
    s.id = id;
    s.gt = state;
    s.source = C;
    s.crop = {0.5 * (u0 + u1) - 0.5 * side, 0.5 * (v0 + v1) - 0.5 * side, side, side, config.crop_out};
    s.obs.crop_intrinsics = crop_intrinsics(C, s.crop);
    s.obs.crop_size = config.crop_out;

    std::mt19937_64 rng(splitmix(stream ^ 0x5eedULL));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    s.obs.keypoints = project(joints, s.obs.crop_intrinsics);
    for (double& v : s.obs.keypoints.values()) v += config.kp_noise_px * noise(rng);
    s.obs.confidences = Array(Shape{joints.dim(0)});
    for (double& c : s.obs.confidences.values()) c = unit(rng) < config.kp_dropout ? 0.0 : 1.0;

    const Intrinsics Cr = raster_intrinsics(s.obs.crop_intrinsics, config.crop_out, config.raster, config.raster);
    s.obs.part_map = hard_rasterize(mesh, Cr, config.raster, config.raster);
    const std::size_t channels = s.obs.part_map.dim(2);
    for (std::size_t c = 0; c + 1 < channels; ++c) {
      if (unit(rng) >= config.part_dropout) continue;
      for (std::size_t p = 0; p < config.raster * config.raster; ++p) s.obs.part_map[p * channels + c] = 0.0;
    }
    for (double& v : s.obs.part_map.values()) v = static_cast<double>(static_cast<float>(v));
    s.obs.gt_joints = joints;
    s.obs.gt_vertices = mesh.vertices;
    return s;
  }
  throw std::runtime_error("generate_dataset: no visible state after " + std::to_string(kMaxResample) + " draws for sample " +
                           std::to_string(id));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(sep, start);
    out.emplace_back(text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) return out;
    start = end + 1;
  }
}

constexpr const char* kReportHeader =
    "method,sample_id,index,loss_total,loss_k,loss_b,prior,mpjpe_mm,mpjpe_pa_mm,mpjpe_trans_mm,evals";

std::vector<ReportRow> trace_rows(const std::string& method, const Sample& sample, const Skeleton& skeleton,
                                  const std::vector<ModelState>& states, const std::vector<LossBreakdown>& losses,
                                  const std::vector<std::size_t>& evals) {
  const Array gt = sample.obs.gt_joints ? *sample.obs.gt_joints : pose_joints(skeleton, sample.gt);
  std::vector<ReportRow> rows;
  for (std::size_t i = 0; i < states.size(); ++i) {
    ReportRow r;
    r.method = method;
    r.sample_id = sample.id;
    r.index = i;
    r.loss = losses[i];
    r.errors = pose_errors(pose_joints(skeleton, states[i]), gt);
    r.evals = evals[i];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

void DatasetConfig::validate() const {
  if (n == 0) throw std::invalid_argument("dataset: n must be >= 1");
  if (pose_scale < 0.0 || shape_scale < 0.0) throw std::invalid_argument("dataset: prior scales must be >= 0");
  if (kp_noise_px < 0.0) throw std::invalid_argument("dataset: kp_noise_px must be >= 0");
  if (kp_dropout < 0.0 || kp_dropout > 1.0 || part_dropout < 0.0 || part_dropout > 1.0) {
    throw std::invalid_argument("dataset: dropout rates must be in [0, 1]");
  }
  if (raster == 0 || !(image_width > 0.0) || !(image_height > 0.0) || !(crop_out > 0.0)) {
    throw std::invalid_argument("dataset: image, crop and raster sizes must be positive");
  }
  if (crop_margin < 0.0) throw std::invalid_argument("dataset: crop_margin must be >= 0");
}

std::vector<Observation> Dataset::observations() const {
  std::vector<Observation> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.obs);
  return out;
}

Dataset generate_dataset(const Skeleton& skeleton, const DatasetConfig& config, std::size_t threads) {
  config.validate();
  skeleton.validate();
  Dataset d;
  d.config = config;
  d.skeleton = skeleton;
  d.samples.resize(config.n);
  parallel_for(config.n, threads, [&](std::size_t i) { d.samples[i] = generate_sample(skeleton, config, i); });
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const nlohmann::json header = {{"kind", "header"},
                                 {"format_version", kDatasetFormat},
                                 {"config", config_to_json(dataset.config)},
                                 {"skeleton", json_io::to_json(dataset.skeleton)}};
  out << header.dump() << '\n';
  for (const Sample& s : dataset.samples) {
    nlohmann::json j = sample_to_json(s);
    j["kind"] = "sample";
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset " + path.string() + " is empty");
  Dataset d;
  try {
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("kind") != "header") throw std::runtime_error("first line is not a header");
    if (header.at("format_version").get<int>() != kDatasetFormat) throw std::runtime_error("unsupported format version");
    d.config = config_from_json(header.at("config"));
    d.skeleton = json_io::skeleton_from_json(header.at("skeleton"));
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const nlohmann::json j = nlohmann::json::parse(line);
      if (j.at("kind") != "sample") throw std::runtime_error("line " + std::to_string(line_no) + " is not a sample");
      d.samples.push_back(sample_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset " + path.string() + ": " + e.what());
  }
  return d;
}

std::string Method::name() const {
  switch (kind) {
    case MethodKind::hund: return "hund";
    case MethodKind::gd: return "gd";
    case MethodKind::bfgs: return "bfgs";
    case MethodKind::hybrid: return "hybrid" + std::to_string(stages);
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  if (name == "hund") return {MethodKind::hund, 0};
  if (name == "gd") return {MethodKind::gd, 0};
  if (name == "bfgs") return {MethodKind::bfgs, 0};
  if (name.starts_with("hybrid") && name.size() > 6) {
    const std::string digits(name.substr(6));
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }) && digits.size() < 4) {
      return {MethodKind::hybrid, static_cast<std::size_t>(std::stoul(digits))};
    }
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "' (expected hund, gd, bfgs or hybrid<i>)");
}

std::vector<Method> parse_methods(std::string_view comma_list) {
  std::vector<Method> out;
  if (comma_list.empty()) return out;
  for (const std::string& name : split(comma_list, ',')) {
    const Method m = parse_method(name);
    if (std::find(out.begin(), out.end(), m) != out.end()) throw std::invalid_argument("method listed twice: " + name);
    out.push_back(m);
  }
  return out;
}

BenchmarkReport run_benchmark(const Dataset& dataset, std::span<const Method> methods, const RefinerParams* params,
                              const BenchConfig& config) {
  for (const Method& m : methods) {
    if ((m.kind == MethodKind::hund || m.kind == MethodKind::hybrid) && params == nullptr) {
      throw std::invalid_argument("method " + m.name() + " needs a trained checkpoint");
    }
    if (m.kind == MethodKind::hybrid && m.stages > params->shape.stages) {
      throw std::invalid_argument("method " + m.name() + " asks for more stages than the checkpoint has");
    }
  }
  config.weights.validate();
  config.raster.validate();
  config.bfgs.validate();

  const Skeleton& skel = dataset.skeleton;
  const std::size_t n = dataset.samples.size();
  std::vector<std::vector<ReportRow>> slots(methods.size() * n);
  parallel_for(slots.size(), config.threads, [&](std::size_t task) {
    const Method& m = methods[task / n];
    const Sample& sample = dataset.samples[task % n];
    const Observation& obs = sample.obs;
    switch (m.kind) {
      case MethodKind::hund: {
        const Trajectory t = unroll(obs, *params, skel, params->shape.stages, config.weights, config.raster);
        std::vector<std::size_t> evals(t.states.size());
        for (std::size_t i = 0; i < evals.size(); ++i) evals[i] = i + 1;
        slots[task] = trace_rows(m.name(), sample, skel, t.states, t.losses, evals);
        break;
      }
      case MethodKind::gd: {
        const OptimizerTrace t = fit_gd(skel, obs, apose(skel), config.weights, config.raster, config.gd_steps, config.gd_step);
        slots[task] = trace_rows(m.name(), sample, skel, t.iterates, t.losses, t.evals);
        break;
      }
      case MethodKind::bfgs: {
        const OptimizerTrace t = fit_bfgs(skel, obs, apose(skel), config.weights, config.raster, config.bfgs);
        slots[task] = trace_rows(m.name(), sample, skel, t.iterates, t.losses, t.evals);
        break;
      }
      case MethodKind::hybrid: {
        const OptimizerTrace t = fit_hybrid(skel, obs, *params, m.stages, config.weights, config.raster, config.bfgs);
        slots[task] = trace_rows(m.name(), sample, skel, t.iterates, t.losses, t.evals);
        break;
      }
    }
  });

  BenchmarkReport report;
  for (auto& rows : slots) std::move(rows.begin(), rows.end(), std::back_inserter(report.rows));
  std::stable_sort(report.rows.begin(), report.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.method, a.sample_id, a.index) < std::tie(b.method, b.sample_id, b.index);
  });
  return report;
}

void write_report_csv(const std::filesystem::path& path, const BenchmarkReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kReportHeader << '\n';
  for (const ReportRow& r : report.rows) {
    out << r.method << ',' << r.sample_id << ',' << r.index << ',' << format_double(r.loss.total) << ','
        << format_double(r.loss.keypoint) << ',' << format_double(r.loss.part) << ',' << format_double(r.loss.prior) << ','
        << format_double(r.errors.mpjpe) << ',' << format_double(r.errors.mpjpe_pa) << ','
        << format_double(r.errors.mpjpe_trans) << ',' << r.evals << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

BenchmarkReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw std::runtime_error("report " + path.string() + ": bad header");
  BenchmarkReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 11) throw std::runtime_error("report " + path.string() + ": bad row '" + line + "'");
    ReportRow r;
    r.method = f[0];
    r.sample_id = std::stoul(f[1]);
    r.index = std::stoul(f[2]);
    r.loss = {std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
    r.errors = {std::stod(f[7]), std::stod(f[8]), std::stod(f[9])};
    r.evals = std::stoul(f[10]);
    report.rows.push_back(std::move(r));
  }
  return report;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<MethodSummary> summarize(const BenchmarkReport& report) {
  std::vector<MethodSummary> out;
  const auto& rows = report.rows;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    std::vector<double> loss, mpjpe, pa, trans, evals;
    while (j < rows.size() && rows[j].method == rows[i].method) {
      std::size_t k = j;
      while (k + 1 < rows.size() && rows[k + 1].method == rows[j].method && rows[k + 1].sample_id == rows[j].sample_id) ++k;
      const ReportRow& last = rows[k];
      loss.push_back(last.loss.total);
      mpjpe.push_back(last.errors.mpjpe);
      pa.push_back(last.errors.mpjpe_pa);
      trans.push_back(last.errors.mpjpe_trans);
      evals.push_back(static_cast<double>(last.evals));
      j = k + 1;
    }
    out.push_back({rows[i].method, loss.size(), median(loss), median(mpjpe), median(pa), median(trans), median(evals)});
    i = j;
  }
  return out;
}

std::vector<Crossover> crossover(const BenchmarkReport& report, const std::string& reference) {
  std::map<std::size_t, double> target;
  for (const ReportRow& r : report.rows)
    if (r.method == reference) target[r.sample_id] = r.loss.total;  // rows are index-sorted, so the last one wins
  std::vector<Crossover> out;
  for (const ReportRow& r : report.rows) {
    if (r.method == reference || !target.contains(r.sample_id)) continue;
    if (out.empty() || out.back().method != r.method || out.back().sample_id != r.sample_id) {
      out.push_back({r.method, r.sample_id, target[r.sample_id], std::nullopt});
    }
    Crossover& c = out.back();
    if (!c.evals && r.loss.total <= c.target_loss) c.evals = r.evals;
  }
  return out;
}

std::map<std::string, double> median_crossover(std::span<const Crossover> rows) {
  std::map<std::string, std::vector<double>> by_method;
  for (const Crossover& c : rows) {
    by_method[c.method].push_back(c.evals ? static_cast<double>(*c.evals) : std::numeric_limits<double>::infinity());
  }
  std::map<std::string, double> out;
  for (auto& [method, values] : by_method) out[method] = median(std::move(values));
  return out;
}

void write_crossover_csv(const std::filesystem::path& path, std::span<const Crossover> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "method,sample_id,target_loss,evals_to_reach\n";
  for (const Crossover& c : rows) {
    out << c.method << ',' << c.sample_id << ',' << format_double(c.target_loss) << ','
        << (c.evals ? std::to_string(*c.evals) : std::string("never")) << '\n';
  }
}

AblationRun evaluate_refiner(const Dataset& test, const RefinerParams& params, const LossWeights& weights,
                             const RasterConfig& raster) {
  std::vector<double> mpjpe, pa;
  for (const Sample& s : test.samples) {
    const Trajectory t = unroll(s.obs, params, test.skeleton, params.shape.stages, weights, raster);
    const Array gt = s.obs.gt_joints ? *s.obs.gt_joints : pose_joints(test.skeleton, s.gt);
    const PoseErrors e = pose_errors(pose_joints(test.skeleton, t.states.back()), gt);
    mpjpe.push_back(e.mpjpe);
    pa.push_back(e.mpjpe_pa);
  }
  AblationRun r;
  r.mpjpe = median(mpjpe);
  r.mpjpe_pa = median(pa);
  return r;
}

AblationResult ablate_metaloss(const Dataset& train_set, const Dataset& test, const AblationConfig& config,
                               const TrainProgress& progress) {
  if (config.kinds.empty()) throw std::invalid_argument("ablate: no meta-loss kinds given");
  if (config.seeds == 0) throw std::invalid_argument("ablate: seeds must be >= 1");
  if (!(train_set.skeleton == test.skeleton)) throw std::invalid_argument("ablate: train and test skeletons differ");
  RefinerShape shape = config.shape;
  shape.stages = config.train.stages;
  const std::vector<Observation> data = train_set.observations();
  AblationResult result;
  for (MetaLoss kind : config.kinds) {
    std::vector<double> mpjpe, pa;
    for (std::uint64_t s = 0; s < config.seeds; ++s) {
      TrainConfig tc = config.train;
      tc.meta = kind;
      tc.seed = config.train.seed + s;
      const TrainResult trained = train(data, train_set.skeleton, init_params(shape, tc.seed), tc, config.weights,
                                        config.raster, progress);
      AblationRun run = evaluate_refiner(test, trained.params, config.weights, config.raster);
      run.kind = kind;
      run.seed = tc.seed;
      result.runs.push_back(run);
      mpjpe.push_back(run.mpjpe);
      pa.push_back(run.mpjpe_pa);
    }
    result.summary.push_back({kind, config.train.seed, median(mpjpe), median(pa)});
  }
  return result;
}

std::string git_blob_sha1(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) && EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string git_blob_sha1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return git_blob_sha1(std::string_view(ss.str()));
}

}  // namespace neural_descent
