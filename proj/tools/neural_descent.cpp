// Command-line driver: generate, train, fit, bench, ablate.

#include "neural_descent/baselines.hpp"
#include "neural_descent/bench.hpp"
#include "neural_descent/hund.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace neural_descent;

namespace {

struct TrainOptions {
  std::string regime = "ss";
  std::string meta = "last";
  std::size_t stages = 5;
  std::size_t batch = 32;
  double lr = 1e-4;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;
  std::size_t encoder_hidden = 256;
  std::size_t context = 128;
  std::size_t hidden = 256;

  TrainConfig config(std::size_t threads) const {
    TrainConfig c;
    c.meta = parse_meta_loss(meta);
    c.regime = parse_regime(regime);
    c.stages = stages;
    c.batch_size = batch;
    c.learning_rate = lr;
    c.epochs = epochs;
    c.seed = seed;
    c.threads = threads;
    c.max_steps = max_steps;
    c.validate();
    return c;
  }

  RefinerShape shape(const Skeleton& s) const {
    RefinerShape shape = RefinerShape::for_skeleton(s);
    shape.encoder_hidden = encoder_hidden;
    shape.context = context;
    shape.hidden = hidden;
    shape.stages = stages;
    return shape;
  }
};

void add_train_options(CLI::App* cmd, TrainOptions& t) {
  cmd->add_option("--regime", t.regime, "ss, fs or mixed")->capture_default_str();
  cmd->add_option("--meta", t.meta, "meta-loss: sum, last, min, max, oi")->capture_default_str();
  cmd->add_option("--m", t.stages, "refinement stages M")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--batch", t.batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--epochs", t.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--seed", t.seed, "initialization and shuffling seed")->capture_default_str();
  cmd->add_option("--max-steps", t.max_steps, "stop after this many steps (0 = no limit)")->capture_default_str();
  cmd->add_option("--encoder-hidden", t.encoder_hidden, "context encoder width")->capture_default_str();
  cmd->add_option("--context", t.context, "context code size")->capture_default_str();
  cmd->add_option("--hidden", t.hidden, "recurrent cell width")->capture_default_str();
}

void add_loss_options(CLI::App* cmd, LossWeights& w, RasterConfig& r) {
  cmd->add_option("--lambda-k", w.lambda_k, "keypoint weight")->capture_default_str();
  cmd->add_option("--lambda-b", w.lambda_b, "part-map weight")->capture_default_str();
  cmd->add_option("--lambda-m", w.lambda_m, "supervised vertex weight")->capture_default_str();
  cmd->add_option("--lambda-3d", w.lambda_3d, "supervised joint weight")->capture_default_str();
  cmd->add_option("--lambda-prior", w.lambda_prior, "prior weight")->capture_default_str();
  cmd->add_option("--sigma", r.sigma, "soft rasterizer edge sharpness")->capture_default_str();
  cmd->add_option("--gamma", r.gamma, "soft rasterizer depth temperature")->capture_default_str();
}

fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / "dataset.jsonl" : p; }

nlohmann::json file_entry(const fs::path& p) { return {{"path", p.filename().string()}, {"sha1", git_blob_sha1(p)}}; }

void write_manifest(const fs::path& dir, const CLI::App& app, const CLI::App& cmd, const nlohmann::json& inputs,
                    const nlohmann::json& outputs) {
  nlohmann::json m;
  m["command"] = cmd.get_name();
  // Global options plus this command's, in a form --config accepts.
  std::string config;
  std::stringstream all(app.config_to_str(true, false));
  for (std::string line; std::getline(all, line);) {
    const auto eq = line.find('=');
    const auto dot = line.find('.');
    if (dot == std::string::npos || dot > eq || line.starts_with(cmd.get_name() + ".")) config += line + '\n';
  }
  m["config"] = config;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + (dir / "manifest.json").string());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_summary(const fs::path& path, const std::vector<MethodSummary>& summary, const std::map<std::string, double>& cross) {
  nlohmann::json j = nlohmann::json::array();
  for (const MethodSummary& s : summary) {
    nlohmann::json row = {{"method", s.method},          {"samples", s.samples},         {"final_loss", s.final_loss},
                          {"mpjpe_mm", s.mpjpe},         {"mpjpe_pa_mm", s.mpjpe_pa},    {"mpjpe_trans_mm", s.mpjpe_trans},
                          {"evals", s.evals}};
    if (cross.contains(s.method)) {
      const double c = cross.at(s.method);
      row["evals_to_match_hund"] = std::isfinite(c) ? nlohmann::json(c) : nlohmann::json("never");
    }
    j.push_back(row);
  }
  std::ofstream(path, std::ios::binary) << j.dump(2) << '\n';
}

void print_trace(std::ostream& out, const std::vector<ModelState>& states, const std::vector<LossBreakdown>& losses,
                 const std::vector<std::size_t>& evals) {
  out << "index,loss_total,loss_k,loss_b,prior,evals,state\n";
  for (std::size_t i = 0; i < states.size(); ++i) {
    out << i << ',' << fmt(losses[i].total) << ',' << fmt(losses[i].keypoint) << ',' << fmt(losses[i].part) << ','
        << fmt(losses[i].prior) << ',' << evals[i] << ',';
    const Array packed = states[i].pack();
    for (std::size_t k = 0; k < packed.size(); ++k) out << (k ? " " : "") << fmt(packed[k]);
    out << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned refinement of articulated body fits, with classical baselines."};
  app.set_config("--config", "", "key = value file; command-line flags override it");
  app.config_formatter(std::make_shared<CLI::ConfigINI>());
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads")
      ->envname("NEURAL_DESCENT_THREADS")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  // generate
  DatasetConfig gen;
  fs::path gen_out;
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  generate->add_option("--n", gen.n, "samples")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--seed", gen.seed, "dataset seed")->capture_default_str();
  generate->add_option("--pose-scale", gen.pose_scale, "pose prior scale")->capture_default_str();
  generate->add_option("--shape-scale", gen.shape_scale, "shape prior scale")->capture_default_str();
  generate->add_option("--kp-noise", gen.kp_noise_px, "keypoint noise std, pixels")->capture_default_str();
  generate->add_option("--kp-dropout", gen.kp_dropout, "keypoint confidence dropout rate")->capture_default_str();
  generate->add_option("--part-dropout", gen.part_dropout, "part channel dropout rate")->capture_default_str();
  generate->add_option("--raster", gen.raster, "part map side")->capture_default_str()->check(CLI::PositiveNumber);
  generate->add_option("--out", gen_out, "output directory")->required();

  // train
  TrainOptions tr;
  LossWeights train_w;
  RasterConfig train_r{.width = 32, .height = 32};
  fs::path train_data, train_out;
  auto* train_cmd = app.add_subcommand("train", "train the refiner");
  train_cmd->add_option("--data", train_data, "dataset directory or file")->required();
  train_cmd->add_option("--out", train_out, "checkpoint directory")->required();
  add_train_options(train_cmd, tr);
  add_loss_options(train_cmd, train_w, train_r);

  // fit
  fs::path fit_ckpt, fit_data, fit_out;
  std::size_t fit_sample = 0;
  std::string fit_method = "hund";
  // Fits and benchmarks default to keypoints plus prior.
  LossWeights fit_w{.lambda_b = 0.0};
  RasterConfig fit_r{.width = 32, .height = 32};
  BfgsConfig fit_bfgs_cfg;
  std::size_t fit_gd_steps = 200;
  double fit_gd_step = 1e-4;
  auto* fit = app.add_subcommand("fit", "fit one sample and print the trajectory");
  fit->add_option("--checkpoint", fit_ckpt, "checkpoint file (hund and hybrid)");
  fit->add_option("--data", fit_data, "dataset directory or file")->required();
  fit->add_option("--sample", fit_sample, "sample index")->capture_default_str();
  fit->add_option("--method", fit_method, "hund, gd, bfgs or hybrid<i>")->capture_default_str();
  fit->add_option("--out", fit_out, "write the trajectory CSV here instead of stdout");
  fit->add_option("--bfgs-iters", fit_bfgs_cfg.max_iters, "BFGS iteration cap")->capture_default_str();
  fit->add_option("--grad-tol", fit_bfgs_cfg.grad_tol, "BFGS gradient tolerance")->capture_default_str();
  fit->add_option("--gd-steps", fit_gd_steps, "gradient descent steps")->capture_default_str();
  fit->add_option("--gd-step", fit_gd_step, "gradient descent step size")->capture_default_str();
  add_loss_options(fit, fit_w, fit_r);

  // bench
  BenchConfig bench_cfg;
  fs::path bench_data, bench_ckpt, bench_out;
  std::string bench_methods = "hund,bfgs,hybrid5";
  auto* bench = app.add_subcommand("bench", "run methods over a dataset");
  bench->add_option("--data", bench_data, "dataset directory or file")->required();
  bench->add_option("--checkpoint", bench_ckpt, "checkpoint file (hund and hybrid)");
  bench->add_option("--methods", bench_methods, "comma list of hund, gd, bfgs, hybrid<i>")->capture_default_str();
  bench->add_option("--out", bench_out, "report directory")->required();
  bench->add_option("--bfgs-iters", bench_cfg.bfgs.max_iters, "BFGS iteration cap")->capture_default_str();
  bench->add_option("--grad-tol", bench_cfg.bfgs.grad_tol, "BFGS gradient tolerance")->capture_default_str();
  bench->add_option("--gd-steps", bench_cfg.gd_steps, "gradient descent steps")->capture_default_str();
  bench->add_option("--gd-step", bench_cfg.gd_step, "gradient descent step size")->capture_default_str();
  add_loss_options(bench, bench_cfg.weights, bench_cfg.raster);

  // ablate
  TrainOptions ab;
  AblationConfig ab_cfg;
  fs::path ab_train, ab_test, ab_out;
  std::string ab_kinds = "sum,last,min,max,oi";
  auto* ablate = app.add_subcommand("ablate", "train one refiner per meta-loss and seed");
  ablate->add_option("--train-data", ab_train, "training dataset")->required();
  ablate->add_option("--test-data", ab_test, "test dataset")->required();
  ablate->add_option("--kinds", ab_kinds, "comma list of meta-losses")->capture_default_str();
  ablate->add_option("--seeds", ab_cfg.seeds, "seeds per kind")->capture_default_str()->check(CLI::PositiveNumber);
  ablate->add_option("--out", ab_out, "report directory")->required();
  add_train_options(ablate, ab);
  add_loss_options(ablate, ab_cfg.weights, ab_cfg.raster);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      fs::create_directories(gen_out);
      const Dataset d = generate_dataset(Skeleton::humanoid17(), gen, threads);
      write_dataset(gen_out / "dataset.jsonl", d);
      write_manifest(gen_out, app, *generate, nlohmann::json::object(), {{"dataset", file_entry(gen_out / "dataset.jsonl")}});
      std::cerr << "wrote " << d.samples.size() << " samples to " << (gen_out / "dataset.jsonl").string() << '\n';
    } else if (*train_cmd) {
      const fs::path data_path = dataset_file(train_data);
      const Dataset d = read_dataset(data_path);
      const TrainConfig cfg = tr.config(threads);
      train_r.width = train_r.height = d.config.raster;
      const RefinerParams init = init_params(tr.shape(d.skeleton), cfg.seed);
      const std::vector<Observation> obs = d.observations();
      const TrainResult result = train(obs, d.skeleton, init, cfg, train_w, train_r, [](const TrainLogEntry& e) {
        if (e.step % 50 == 0) std::cerr << "step " << e.step << " epoch " << e.epoch << " meta " << e.meta_loss << '\n';
      });
      if (!result.params.finite()) throw std::runtime_error("training produced non-finite parameters");
      fs::create_directories(train_out);
      save_checkpoint(train_out / "model.ckpt", result.params, d.skeleton);
      write_train_log(train_out / "train_log.csv", result.log);
      write_manifest(train_out, app, *train_cmd, {{"dataset", file_entry(data_path)}},
                     {{"checkpoint", file_entry(train_out / "model.ckpt")}, {"log", file_entry(train_out / "train_log.csv")}});
    } else if (*fit) {
      const Dataset d = read_dataset(dataset_file(fit_data));
      if (fit_sample >= d.samples.size()) throw std::invalid_argument("--sample is out of range");
      const Observation& obs = d.samples[fit_sample].obs;
      fit_r.width = fit_r.height = d.config.raster;
      const Method method = parse_method(fit_method);
      std::optional<Checkpoint> ck;
      if (method.kind == MethodKind::hund || method.kind == MethodKind::hybrid) {
        if (fit_ckpt.empty()) throw std::invalid_argument("--checkpoint is required for " + fit_method);
        ck = load_checkpoint(fit_ckpt);
        check_compatible(*ck, d.skeleton);
      }
      std::ofstream file;
      if (!fit_out.empty()) {
        file.open(fit_out, std::ios::binary);
        if (!file) throw std::runtime_error("cannot write " + fit_out.string());
      }
      std::ostream& out = fit_out.empty() ? std::cout : file;
      switch (method.kind) {
        case MethodKind::hund: {
          const Trajectory t = unroll(obs, ck->params, d.skeleton, ck->params.shape.stages, fit_w, fit_r);
          std::vector<std::size_t> evals(t.states.size());
          for (std::size_t i = 0; i < evals.size(); ++i) evals[i] = i + 1;
          print_trace(out, t.states, t.losses, evals);
          if (t.truncated) throw std::runtime_error("refinement left the visible region");
          break;
        }
        case MethodKind::gd: {
          const OptimizerTrace t = fit_gd(d.skeleton, obs, apose(d.skeleton), fit_w, fit_r, fit_gd_steps, fit_gd_step);
          print_trace(out, t.iterates, t.losses, t.evals);
          break;
        }
        case MethodKind::bfgs: {
          const OptimizerTrace t = fit_bfgs(d.skeleton, obs, apose(d.skeleton), fit_w, fit_r, fit_bfgs_cfg);
          print_trace(out, t.iterates, t.losses, t.evals);
          break;
        }
        case MethodKind::hybrid: {
          const OptimizerTrace t = fit_hybrid(d.skeleton, obs, ck->params, method.stages, fit_w, fit_r, fit_bfgs_cfg);
          print_trace(out, t.iterates, t.losses, t.evals);
          break;
        }
      }
    } else if (*bench) {
      const fs::path data_path = dataset_file(bench_data);
      const std::vector<Method> methods = parse_methods(bench_methods);
      bool needs_ckpt = false;
      for (const Method& m : methods) needs_ckpt = needs_ckpt || m.kind == MethodKind::hund || m.kind == MethodKind::hybrid;
      if (needs_ckpt && bench_ckpt.empty()) throw std::invalid_argument("--checkpoint is required for " + bench_methods);
      if (needs_ckpt && !fs::exists(bench_ckpt)) throw std::invalid_argument("checkpoint " + bench_ckpt.string() + " not found");
      const Dataset d = read_dataset(data_path);
      std::optional<Checkpoint> ck;
      if (needs_ckpt) {
        ck = load_checkpoint(bench_ckpt);
        check_compatible(*ck, d.skeleton);
      }
      bench_cfg.raster.width = bench_cfg.raster.height = d.config.raster;
      bench_cfg.threads = threads;
      const BenchmarkReport report = run_benchmark(d, methods, ck ? &ck->params : nullptr, bench_cfg);
      for (const ReportRow& r : report.rows) {
        if (!std::isfinite(r.loss.total) || !std::isfinite(r.errors.mpjpe)) throw std::runtime_error("non-finite benchmark row");
      }
      fs::create_directories(bench_out);
      write_report_csv(bench_out / "report.csv", report);
      const std::vector<Crossover> cross = crossover(report);
      write_crossover_csv(bench_out / "crossover.csv", cross);
      write_summary(bench_out / "summary.json", summarize(report), median_crossover(cross));
      nlohmann::json inputs = {{"dataset", file_entry(data_path)}};
      if (ck) inputs["checkpoint"] = file_entry(bench_ckpt);
      write_manifest(bench_out, app, *bench, inputs,
                     {{"report", file_entry(bench_out / "report.csv")},
                      {"crossover", file_entry(bench_out / "crossover.csv")},
                      {"summary", file_entry(bench_out / "summary.json")}});
    } else if (*ablate) {
      const Dataset train_set = read_dataset(dataset_file(ab_train));
      const Dataset test_set = read_dataset(dataset_file(ab_test));
      ab_cfg.kinds.clear();
      std::stringstream ss(ab_kinds);
      for (std::string k; std::getline(ss, k, ',');) ab_cfg.kinds.push_back(parse_meta_loss(k));
      ab_cfg.train = ab.config(threads);
      ab_cfg.shape = ab.shape(train_set.skeleton);
      ab_cfg.raster.width = ab_cfg.raster.height = train_set.config.raster;
      const AblationResult result = ablate_metaloss(train_set, test_set, ab_cfg, [](const TrainLogEntry& e) {
        if (e.step % 100 == 0) std::cerr << "step " << e.step << " meta " << e.meta_loss << '\n';
      });
      fs::create_directories(ab_out);
      {
        std::ofstream runs(ab_out / "ablation.csv", std::ios::binary);
        runs << "kind,seed,mpjpe_mm,mpjpe_pa_mm\n";
        for (const AblationRun& r : result.runs) {
          runs << to_string(r.kind) << ',' << r.seed << ',' << fmt(r.mpjpe) << ',' << fmt(r.mpjpe_pa) << '\n';
        }
      }
      nlohmann::json summary = nlohmann::json::array();
      for (const AblationRun& r : result.summary) {
        summary.push_back({{"kind", to_string(r.kind)}, {"mpjpe_mm", r.mpjpe}, {"mpjpe_pa_mm", r.mpjpe_pa}});
      }
      std::ofstream(ab_out / "summary.json", std::ios::binary) << summary.dump(2) << '\n';
      write_manifest(ab_out, app, *ablate,
                     {{"train", file_entry(dataset_file(ab_train))}, {"test", file_entry(dataset_file(ab_test))}},
                     {{"runs", file_entry(ab_out / "ablation.csv")}, {"summary", file_entry(ab_out / "summary.json")}});
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
