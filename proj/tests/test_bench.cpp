#include "neural_descent/bench.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace neural_descent;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "nd_bench_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RefinerParams small_refiner(const Skeleton& s, std::uint64_t seed) {
  RefinerShape shape = RefinerShape::for_skeleton(s);
  shape.encoder_hidden = 16;
  shape.context = 8;
  shape.hidden = 16;
  RefinerParams p = init_params(shape, seed);
  for (std::size_t i = 0; i < p.out_w.size(); ++i) p.out_w[i] = 1e-3 * std::sin(static_cast<double>(i));
  return p;
}

DatasetConfig small_config(std::size_t n, std::uint64_t seed) {
  DatasetConfig c;
  c.n = n;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Dataset, CountsDeterminismAndRoundTrip) {
  const Skeleton s = Skeleton::humanoid17();
  const Dataset a = generate_dataset(s, small_config(7, 3));
  ASSERT_EQ(a.samples.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(a.samples[i].id, i);
  EXPECT_EQ(generate_dataset(s, small_config(7, 3), 3), a);
  EXPECT_NE(generate_dataset(s, small_config(7, 4)).samples[0].gt, a.samples[0].gt);

  write_dataset(scratch("a.jsonl"), a);
  write_dataset(scratch("b.jsonl"), generate_dataset(s, small_config(7, 3)));
  EXPECT_EQ(slurp(scratch("a.jsonl")), slurp(scratch("b.jsonl")));
  EXPECT_EQ(read_dataset(scratch("a.jsonl")), a);
  EXPECT_EQ(generate_dataset(s, small_config(100, 0)).samples.size(), 100u);

  EXPECT_THROW(generate_dataset(s, small_config(0, 3)), std::invalid_argument);
  EXPECT_THROW(read_dataset(scratch("missing.jsonl")), std::runtime_error);
  std::ofstream(scratch("bad.jsonl")) << "{\"kind\":\"sample\"}\n";
  EXPECT_THROW(read_dataset(scratch("bad.jsonl")), std::runtime_error);
}

TEST(Dataset, NoiselessUnitLossAtTruthIsPrior) {
  const Skeleton s = Skeleton::humanoid17();
  const Dataset d = generate_dataset(s, small_config(10, 5));
  const LossWeights w{1.0, 0.0, 1.0, 1.0, 1.0};
  for (const Sample& smp : d.samples) {
    const LossBreakdown b = unit_loss(s, smp.gt, smp.obs, w, {.width = 32, .height = 32});
    EXPECT_EQ(b.keypoint, 0.0);
    EXPECT_DOUBLE_EQ(b.total, prior_loss(smp.gt));
  }
}

TEST(Dataset, CropFramesTheBody) {
  const Skeleton s = Skeleton::humanoid17();
  DatasetConfig c = small_config(20, 6);
  const Dataset d = generate_dataset(s, c);
  for (const Sample& smp : d.samples) {
    EXPECT_EQ(smp.source, approx_intrinsics(720, 1280));
    EXPECT_EQ(smp.obs.crop_intrinsics, crop_intrinsics(smp.source, smp.crop));
    const Array uv = project(*smp.obs.gt_vertices, smp.obs.crop_intrinsics);
    double lo[2] = {1e9, 1e9}, hi[2] = {-1e9, -1e9};
    for (std::size_t i = 0; i < uv.dim(0); ++i)
      for (std::size_t k = 0; k < 2; ++k) {
        lo[k] = std::min(lo[k], uv(i, k));
        hi[k] = std::max(hi[k], uv(i, k));
      }
    // The longer side spans 1/1.2 of the crop and is centered.
    EXPECT_NEAR(std::max(hi[0] - lo[0], hi[1] - lo[1]), 400.0, 1e-6);
    EXPECT_NEAR(lo[0] + hi[0], 480.0, 1e-6);
    EXPECT_NEAR(lo[1] + hi[1], 480.0, 1e-6);
    double fg = 0.0;
    for (std::size_t p = 0; p < 32 * 32; ++p) fg += smp.obs.part_map[p * 16 + 15];
    EXPECT_GT(fg, 30.0);
  }
}

TEST(Dataset, NoiseAndDropout) {
  const Skeleton s = Skeleton::humanoid17();
  DatasetConfig c = small_config(40, 7);
  const Dataset clean = generate_dataset(s, c);
  c.kp_noise_px = 3.0;
  const Dataset noisy = generate_dataset(s, c);
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < clean.samples.size(); ++i) {
    EXPECT_EQ(noisy.samples[i].gt, clean.samples[i].gt);
    for (std::size_t k = 0; k < clean.samples[i].obs.keypoints.size(); ++k) {
      const double d = noisy.samples[i].obs.keypoints[k] - clean.samples[i].obs.keypoints[k];
      sq += d * d;
      ++count;
    }
  }
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(count)), 3.0, 0.2);

  c.kp_noise_px = 0.0;
  c.kp_dropout = 1.0;
  c.part_dropout = 1.0;
  const Dataset dropped = generate_dataset(s, c);
  for (std::size_t i = 0; i < dropped.samples.size(); ++i) {
    const Observation& o = dropped.samples[i].obs;
    for (double v : o.confidences.values()) EXPECT_EQ(v, 0.0);
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      for (std::size_t ch = 0; ch < 15; ++ch) EXPECT_EQ(o.part_map[p * 16 + ch], 0.0);
      EXPECT_EQ(o.part_map[p * 16 + 15], clean.samples[i].obs.part_map[p * 16 + 15]);
    }
  }
}

TEST(Methods, Parse) {
  EXPECT_EQ(parse_method("hybrid3"), (Method{MethodKind::hybrid, 3}));
  EXPECT_EQ(parse_method("hybrid3").name(), "hybrid3");
  EXPECT_EQ(parse_methods("hund,bfgs,hybrid3").size(), 3u);
  EXPECT_TRUE(parse_methods("").empty());
  EXPECT_THROW(parse_method("hybrid"), std::invalid_argument);
  EXPECT_THROW(parse_method("hybridx"), std::invalid_argument);
  EXPECT_THROW(parse_method("lbfgs"), std::invalid_argument);
  EXPECT_THROW(parse_methods("bfgs,bfgs"), std::invalid_argument);
}

TEST(Benchmark, EmptyAndMissingCheckpoint) {
  const Skeleton s = Skeleton::humanoid17();
  const Dataset d = generate_dataset(s, small_config(2, 1));
  const BenchmarkReport empty = run_benchmark(d, {}, nullptr, {});
  EXPECT_TRUE(empty.rows.empty());
  write_report_csv(scratch("empty.csv"), empty);
  EXPECT_EQ(slurp(scratch("empty.csv")),
            "method,sample_id,index,loss_total,loss_k,loss_b,prior,mpjpe_mm,mpjpe_pa_mm,mpjpe_trans_mm,evals\n");
  const auto methods = parse_methods("bfgs,hund");
  EXPECT_THROW(run_benchmark(d, methods, nullptr, {}), std::invalid_argument);
}

TEST(Benchmark, RowsCountsAndDeterminism) {
  const Skeleton s = Skeleton::humanoid17();
  const Dataset d = generate_dataset(s, small_config(3, 2));
  const RefinerParams p = small_refiner(s, 1);
  const auto methods = parse_methods("hund,bfgs,hybrid3,gd");
  BenchConfig cfg;
  cfg.bfgs.max_iters = 15;
  cfg.gd_steps = 5;
  const BenchmarkReport r = run_benchmark(d, methods, &p, cfg);

  std::size_t expected = 0;
  for (const Sample& smp : d.samples) {
    expected += unroll(smp.obs, p, s, 5, cfg.weights, cfg.raster).states.size();
    expected += fit_bfgs(s, smp.obs, apose(s), cfg.weights, cfg.raster, cfg.bfgs).iterates.size();
    expected += fit_hybrid(s, smp.obs, p, 3, cfg.weights, cfg.raster, cfg.bfgs).iterates.size();
    expected += cfg.gd_steps + 1;
  }
  EXPECT_EQ(r.rows.size(), expected);
  for (std::size_t i = 1; i < r.rows.size(); ++i) {
    const auto& a = r.rows[i - 1];
    const auto& b = r.rows[i];
    EXPECT_LT(std::tie(a.method, a.sample_id, a.index), std::tie(b.method, b.sample_id, b.index));
  }
  std::size_t hund_rows = 0;
  for (const ReportRow& row : r.rows) {
    if (row.method != "hund") continue;
    EXPECT_EQ(row.evals, row.index + 1);
    ++hund_rows;
  }
  EXPECT_EQ(hund_rows, 18u);

  cfg.threads = 3;
  write_report_csv(scratch("r1.csv"), r);
  write_report_csv(scratch("r2.csv"), run_benchmark(d, methods, &p, cfg));
  EXPECT_EQ(slurp(scratch("r1.csv")), slurp(scratch("r2.csv")));

  const BenchmarkReport back = read_report_csv(scratch("r1.csv"));
  ASSERT_EQ(back.rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].loss.total, r.rows[i].loss.total);
    EXPECT_EQ(back.rows[i].errors.mpjpe_pa, r.rows[i].errors.mpjpe_pa);
    EXPECT_EQ(back.rows[i].evals, r.rows[i].evals);
  }
  const auto online = summarize(r);
  const auto stored = summarize(back);
  ASSERT_EQ(online.size(), 4u);
  for (std::size_t i = 0; i < online.size(); ++i) {
    EXPECT_EQ(online[i].method, stored[i].method);
    EXPECT_EQ(online[i].samples, 3u);
    EXPECT_EQ(online[i].final_loss, stored[i].final_loss);
    EXPECT_EQ(online[i].mpjpe, stored[i].mpjpe);
  }
}

TEST(Benchmark, BfgsFromTruthStaysPut) {
  const Skeleton s = Skeleton::humanoid17();
  DatasetConfig c = small_config(5, 9);
  c.pose_scale = 0.0;
  c.shape_scale = 0.0;
  const Dataset d = generate_dataset(s, c);
  for (const Sample& smp : d.samples) {
    const OptimizerTrace t = fit_bfgs(s, smp.obs, smp.gt, {1.0, 0.0, 1.0, 1.0, 1.0}, {.width = 32, .height = 32}, {});
    EXPECT_LT(pose_errors(pose_joints(s, t.iterates.back()), *smp.obs.gt_joints).mpjpe, 1e-3);
  }
}

TEST(Summary, MedianAndCrossover) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);

  BenchmarkReport r;
  auto row = [](std::string m, std::size_t id, std::size_t idx, double loss, std::size_t evals) {
    ReportRow x;
    x.method = std::move(m);
    x.sample_id = id;
    x.index = idx;
    x.loss.total = loss;
    x.evals = evals;
    return x;
  };
  r.rows = {row("bfgs", 0, 0, 10, 1), row("bfgs", 0, 1, 5, 4),  row("bfgs", 0, 2, 1, 9),
            row("bfgs", 1, 0, 10, 1), row("bfgs", 1, 1, 8, 3),  row("hund", 0, 0, 9, 1),
            row("hund", 0, 1, 4, 2),  row("hund", 1, 0, 9, 1),  row("hund", 1, 1, 2, 2)};
  const auto cx = crossover(r);
  ASSERT_EQ(cx.size(), 2u);
  EXPECT_EQ(cx[0].target_loss, 4.0);
  EXPECT_EQ(cx[0].evals, 9u);
  EXPECT_FALSE(cx[1].evals.has_value());
  EXPECT_TRUE(std::isinf(median_crossover(cx).at("bfgs")));

  const auto sum = summarize(r);
  ASSERT_EQ(sum.size(), 2u);
  EXPECT_EQ(sum[0].final_loss, 4.5);
  EXPECT_EQ(sum[1].final_loss, 3.0);
  EXPECT_EQ(sum[1].evals, 2.0);
}

TEST(Ablation, SingleKindIsDeterministic) {
  const Skeleton s = Skeleton::humanoid17();
  const Dataset train_set = generate_dataset(s, small_config(8, 10));
  const Dataset test_set = generate_dataset(s, small_config(4, 11));
  AblationConfig cfg;
  cfg.kinds = {MetaLoss::last};
  cfg.seeds = 1;
  cfg.shape = RefinerShape::for_skeleton(s);
  cfg.shape.encoder_hidden = 16;
  cfg.shape.context = 8;
  cfg.shape.hidden = 16;
  cfg.train.batch_size = 4;
  cfg.train.epochs = 2;
  cfg.train.stages = 2;
  cfg.train.learning_rate = 1e-3;
  const AblationResult a = ablate_metaloss(train_set, test_set, cfg);
  ASSERT_EQ(a.runs.size(), 1u);
  ASSERT_EQ(a.summary.size(), 1u);
  EXPECT_EQ(a.summary[0].kind, MetaLoss::last);
  const AblationResult b = ablate_metaloss(train_set, test_set, cfg);
  EXPECT_EQ(a.summary[0].mpjpe, b.summary[0].mpjpe);
  EXPECT_EQ(a.summary[0].mpjpe_pa, b.summary[0].mpjpe_pa);
  cfg.kinds.clear();
  EXPECT_THROW(ablate_metaloss(train_set, test_set, cfg), std::invalid_argument);
}

TEST(Manifest, GitBlobHash) {
  EXPECT_EQ(git_blob_sha1(std::string_view("")), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1(std::string_view("hello\n")), "ce013625030ba8dba906f756967f9e9ca394464a");
  std::ofstream(scratch("hello.txt"), std::ios::binary) << "hello\n";
  EXPECT_EQ(git_blob_sha1(scratch("hello.txt")), "ce013625030ba8dba906f756967f9e9ca394464a");
}
