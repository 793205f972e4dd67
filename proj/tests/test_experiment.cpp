#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ule/config.hpp"
#include "ule/experiment.hpp"

using namespace ule;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ule_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GroupedDataset random_grouped(std::mt19937_64& rng, int classes, int attrs, Index n) {
  GroupedDataset ds;
  ds.name = "random";
  ds.sample_shape = {1};
  ds.num_classes = classes;
  ds.num_attributes = attrs;
  for (Index i = 0; i < n; ++i) {
    // First pass covers every group so none is empty.
    const int g = i < classes * attrs ? static_cast<int>(i) : static_cast<int>(rng() % static_cast<std::uint64_t>(classes * attrs));
    ds.labels.push_back(g / attrs);
    ds.attributes.push_back(g % attrs);
    ds.inputs.push_back(0.0f);
  }
  return ds;
}

GroupedDataset groupshift(Index n, std::uint64_t seed, GroupShiftSplit split) {
  GroupShiftParams p;
  p.n = n;
  p.seed = seed;
  return make_synthetic_groupshift(p, split);
}

ExperimentConfig tiny_sweep_config() {
  ExperimentConfig cfg;
  cfg.student_arch = "mlp:4:8:2";
  cfg.method = Method::ule;
  cfg.train.epochs = 3;
  cfg.train.eval_every = 1;
  cfg.train.batch_size = 50;
  cfg.sweep.lambdas = {0.2, 0.8};
  cfg.sweep.lrs = {1e-2};
  cfg.sweep.weight_decays = {1e-4};
  cfg.sweep.repeats = 2;
  cfg.sweep.seed = 7;
  return cfg;
}

Json sweep_eval(int cell, int repeat, SweepCell c, int epoch, const std::string& split, double wga) {
  return {{"type", "eval"}, {"cell", cell},     {"repeat", repeat},  {"lambda", c.lambda}, {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"epoch", epoch}, {"split", split}, {"model", "teacher"},
          {"wga", wga},     {"average", wga},  {"accuracy", wga}};
}

}  // namespace

// Metrics --------------------------------------------------------------------

TEST(GroupMetrics, WorkedExample) {
  GroupedDataset ds;
  ds.sample_shape = {1};
  ds.num_classes = 2;
  ds.num_attributes = 2;
  // Group sizes 20 each; correct counts 18, 16, 19, 14.
  const int correct[4] = {18, 16, 19, 14};
  std::vector<int> predictions;
  for (int g = 0; g < 4; ++g) {
    for (int k = 0; k < 20; ++k) {
      ds.labels.push_back(g / 2);
      ds.attributes.push_back(g % 2);
      ds.inputs.push_back(0.0f);
      predictions.push_back(k < correct[g] ? g / 2 : 1 - g / 2);
    }
  }
  const auto m = group_metrics(predictions, ds);
  EXPECT_DOUBLE_EQ(m.group_accuracy[0], 0.9);
  EXPECT_DOUBLE_EQ(m.group_accuracy[3], 0.7);
  EXPECT_NEAR(m.average, 0.8375, 1e-15);
  EXPECT_DOUBLE_EQ(m.worst, 0.7);
}

TEST(GroupMetrics, PerfectClassifier) {
  std::mt19937_64 rng(1);
  const auto ds = random_grouped(rng, 3, 2, 60);
  const auto m = group_metrics(ds.labels, ds);
  for (double a : m.group_accuracy) EXPECT_EQ(a, 1.0);
  EXPECT_EQ(m.worst, 1.0);
  EXPECT_EQ(m.average, 1.0);
}

TEST(GroupMetrics, BruteForceRecount) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + static_cast<int>(rng() % 4);
    const int attrs = 1 + static_cast<int>(rng() % 4);
    const auto ds = random_grouped(rng, classes, attrs, classes * attrs + static_cast<Index>(rng() % 200));
    std::vector<int> pred(ds.labels.size());
    for (auto& p : pred) p = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    const auto m = group_metrics(pred, ds);

    std::vector<double> oracle;
    for (int y = 0; y < classes; ++y) {
      for (int a = 0; a < attrs; ++a) {
        Index total = 0, hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
          if (ds.labels[i] == y && ds.attributes[i] == a) {
            ++total;
            hit += pred[i] == y;
          }
        }
        oracle.push_back(static_cast<double>(hit) / static_cast<double>(total));
      }
    }
    double sum = 0.0, worst = 1.0;
    for (double v : oracle) {
      sum += v;
      worst = std::min(worst, v);
    }
    ASSERT_EQ(m.group_accuracy, oracle) << "trial " << trial;
    ASSERT_EQ(m.average, sum / static_cast<double>(oracle.size())) << "trial " << trial;
    ASSERT_EQ(m.worst, worst) << "trial " << trial;
    ASSERT_GE(m.average, m.worst);
    const bool all_equal = std::all_of(oracle.begin(), oracle.end(), [&](double v) { return v == oracle[0]; });
    ASSERT_EQ(all_equal, m.average == m.worst) << "trial " << trial;
  }
}

TEST(GroupMetrics, EmptyGroupIsError) {
  GroupedDataset ds;
  ds.sample_shape = {1};
  ds.num_classes = 2;
  ds.num_attributes = 2;
  ds.labels = {0, 1, 1};
  ds.attributes = {0, 0, 1};
  ds.inputs = {0, 0, 0};
  try {
    group_metrics({0, 1, 1}, ds);
    FAIL() << "expected ArgumentError";
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("group 1 (y=0, a=1)"), std::string::npos) << e.what();
  }
  EXPECT_FALSE(evaluate_predictions({0, 1, 1}, ds).groups.has_value());
}

TEST(GroupMetrics, StoredPredictionsMatchLiveNetwork) {
  const auto dir = scratch("predictions");
  const auto test = groupshift(400, 3, GroupShiftSplit::balanced);
  auto net = build_from_arch<float>("mlp:4:8:2");
  init_params(net, 5);
  const auto live = predict(net, test);
  save_predictions((dir / "p.txt").string(), live);
  const auto stored = load_predictions((dir / "p.txt").string());
  ASSERT_EQ(stored, live);
  const auto a = group_metrics(live, test), b = group_metrics(stored, test);
  EXPECT_EQ(a.group_accuracy, b.group_accuracy);
  EXPECT_EQ(a.worst, evaluate_groups(net, test).worst);
  EXPECT_THROW(load_predictions((dir / "missing.txt").string()), IoError);
}

// Config ---------------------------------------------------------------------

TEST(Config, ParseSerializeParseIsIdentity) {
  const std::string text =
      "# top\nseed = 3\n[data]\ntrain = a.uled\n  val=b.uled  \n\n[eval]\nclean = c.uled\n; note\n[train]\nlambda = 0.5\n";
  const auto a = ConfigFile::parse(text);
  EXPECT_EQ(a.get("", "seed"), "3");
  EXPECT_EQ(a.get("data", "val"), "b.uled");
  const auto b = ConfigFile::parse(a.serialize());
  EXPECT_EQ(a, b);
  EXPECT_EQ(b.serialize(), a.serialize());
}

TEST(Config, MalformedInputNamesLine) {
  auto message = [](const std::string& text) {
    try {
      ConfigFile::parse(text, "x.cfg");
    } catch (const ArgumentError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("[a]\nkey value\n").find("x.cfg:2"), std::string::npos);
  EXPECT_NE(message("[a\n").find("unterminated"), std::string::npos);
  EXPECT_NE(message("[a]\nk = 1\nk = 2\n").find("repeated"), std::string::npos);
  EXPECT_NE(message("[a]\n[a]\n").find("twice"), std::string::npos);
}

TEST(Config, ExperimentRoundTrip) {
  ExperimentConfig c;
  c.train_path = "train.uled";
  c.eval_splits = {{"train", "train.uled"}, {"clean", "clean.uled"}};
  c.teacher_arch = "mlp:784:128:10:1x28x28";
  c.method = Method::erm;
  c.train.lambda = 0.3;
  c.train.optimizer.lr = 1e-4;
  c.train.mode = SaliencyMode::gram;
  c.train.scalarization = Scalarization::centered_logit;
  c.sweep.lambdas = {0.1, 0.7};
  c.sweep.repeats = 3;
  c.student_seed = 12345678901234ull;
  const auto file = c.to_file();
  const auto again = ExperimentConfig::from_file(ConfigFile::parse(file.serialize()));
  EXPECT_EQ(again.to_file(), file);
  EXPECT_EQ(again.train.lambda, 0.3);
  EXPECT_EQ(again.train.optimizer.lr, 1e-4);
  EXPECT_EQ(again.student_seed, 12345678901234ull);
  EXPECT_EQ(again.eval_splits, c.eval_splits);
  EXPECT_EQ(again.sweep.lambdas, c.sweep.lambdas);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(ExperimentConfig::from_file(ConfigFile::parse("[train]\nlamda = 0.5\n")), ArgumentError);
  EXPECT_THROW(ExperimentConfig::from_file(ConfigFile::parse("[trian]\n")), ArgumentError);
  EXPECT_THROW(ExperimentConfig::from_file(ConfigFile::parse("[train]\nlr = fast\n")), ArgumentError);
  EXPECT_THROW(ExperimentConfig::from_file(ConfigFile::parse("[train]\nmethod = dro\n")), ArgumentError);
  EXPECT_THROW(ExperimentConfig::from_file(ConfigFile::parse("[sweep]\nlambdas = 0.1,,0.2\n")), ArgumentError);
  EXPECT_THROW(ExperimentConfig::load("/nonexistent/x.cfg"), IoError);
}

TEST(Config, SweepDefaults) {
  const auto s = SweepSpec::defaults();
  ASSERT_EQ(s.lambdas.size(), 11u);
  EXPECT_EQ(s.lambdas.front(), 0.0);
  EXPECT_EQ(s.lambdas.back(), 1.0);
  EXPECT_EQ(s.lrs, (std::vector<double>{1e-1, 1e-2, 1e-3, 1e-4, 1e-5}));
  EXPECT_EQ(s.weight_decays.size(), 2u);
  EXPECT_EQ(s.repeats, 5);
  SweepSpec bad = s;
  bad.lrs.clear();
  EXPECT_THROW(bad.validate(), ArgumentError);
}

// Sweep selection ------------------------------------------------------------

TEST(Sweep, SingleCellWins) {
  const SweepCell c{0.5, 1e-3, 1e-4};
  const auto s = summarize_sweep({sweep_eval(0, 0, c, 1, "val", 0.4), sweep_eval(0, 0, c, 1, "test", 0.35)});
  ASSERT_EQ(s.cells.size(), 1u);
  ASSERT_TRUE(s.winner);
  EXPECT_EQ(*s.winner, 0u);
  EXPECT_EQ(s.cells[0].mean_test_wga(), 0.35);
}

TEST(Sweep, PerRepeatBestEpochThenMean) {
  const SweepCell c{0.5, 1e-3, 1e-4};
  const std::vector<Json> r{sweep_eval(0, 0, c, 1, "val", 0.4), sweep_eval(0, 0, c, 1, "test", 0.1),
                            sweep_eval(0, 0, c, 2, "val", 0.6), sweep_eval(0, 0, c, 2, "test", 0.5),
                            sweep_eval(0, 1, c, 1, "val", 0.8), sweep_eval(0, 1, c, 1, "test", 0.7),
                            sweep_eval(0, 1, c, 2, "val", 0.8), sweep_eval(0, 1, c, 2, "test", 0.2)};
  const auto s = summarize_sweep(r);
  ASSERT_EQ(s.cells[0].repeats.size(), 2u);
  EXPECT_EQ(s.cells[0].repeats[0].epoch, 2);
  EXPECT_EQ(s.cells[0].repeats[1].epoch, 1);  // tie keeps the earlier epoch
  EXPECT_DOUBLE_EQ(s.cells[0].mean_val_wga(), 0.7);
  EXPECT_DOUBLE_EQ(s.cells[0].mean_test_wga(), 0.6);
}

TEST(Sweep, TiesGoToSmallestTriple) {
  std::vector<CellSummary> cells(3);
  cells[0].cell = {0.5, 1e-2, 1e-4};
  cells[1].cell = {0.5, 1e-3, 1.0};
  cells[2].cell = {0.5, 1e-3, 1e-4};
  for (int i = 0; i < 3; ++i) {
    cells[static_cast<std::size_t>(i)].index = i;
    cells[static_cast<std::size_t>(i)].repeats = {RepeatScore{0, 1, 0.6, 0.5, 0.7}};
  }
  EXPECT_EQ(*select_winner(cells), 2u);
  cells[2].failed_repeats = 1;
  EXPECT_EQ(*select_winner(cells), 1u);
  cells[0].repeats[0].val_wga = 0.61;
  EXPECT_EQ(*select_winner(cells), 0u);
}

TEST(Sweep, FailuresCountedAndExcluded) {
  const SweepCell a{0.1, 1e-3, 1e-4}, b{0.9, 1e-3, 1e-4};
  Json fail = {{"type", "failure"}, {"cell", 1},      {"repeat", 0},       {"lambda", b.lambda},
               {"lr", b.lr},        {"weight_decay", b.weight_decay}, {"error", "diverged"}};
  const auto s = summarize_sweep({sweep_eval(0, 0, a, 1, "val", 0.3), sweep_eval(0, 0, a, 1, "test", 0.3),
                                  sweep_eval(1, 1, b, 1, "val", 0.9), sweep_eval(1, 1, b, 1, "test", 0.9), fail});
  EXPECT_EQ(s.failed_cells, 1);
  EXPECT_EQ(*s.winner, 0u);
}

TEST(Sweep, CellSeedsDistinct) {
  std::set<std::uint64_t> seen;
  for (int cell = 0; cell < 20; ++cell) {
    for (int rep = 0; rep < 5; ++rep) {
      for (int stream = 0; stream < 3; ++stream) seen.insert(cell_seed(0, cell, rep, stream));
    }
  }
  EXPECT_EQ(seen.size(), 300u);
  EXPECT_NE(cell_seed(0, 0, 0, 0), cell_seed(1, 0, 0, 0));
}

TEST(Sweep, DeterministicRecordsAndWorkerIndependent) {
  const auto dir = scratch("sweep");
  const auto train = groupshift(400, 0, GroupShiftSplit::train);
  const auto val = groupshift(200, 1, GroupShiftSplit::balanced);
  const auto test = groupshift(200, 2, GroupShiftSplit::balanced);
  auto cfg = tiny_sweep_config();
  SweepSummary first;
  for (const auto& [name, workers] : {std::pair{"a", 1}, {"b", 1}, {"c", 3}}) {
    cfg.sweep.workers = workers;
    RecordWriter writer((dir / (std::string(name) + ".jsonl")).string());
    const auto s = run_sweep<float>(cfg, train, val, test, &writer);
    if (std::string(name) == "a") first = s;
    EXPECT_EQ(s.winner, first.winner);
  }
  EXPECT_EQ(first.cells.size(), 2u);
  EXPECT_EQ(first.failed_cells, 0);
  const auto a = slurp(dir / "a.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));
  EXPECT_EQ(a, slurp(dir / "c.jsonl"));

  // The report rebuilds the same selection from the file alone.
  const auto replay = summarize_sweep(read_records((dir / "a.jsonl").string()));
  ASSERT_TRUE(replay.winner);
  EXPECT_EQ(*replay.winner, *first.winner);
  EXPECT_EQ(replay.cells[*replay.winner].mean_test_wga(), first.cells[*first.winner].mean_test_wga());
  EXPECT_EQ(lambda_rows(read_records((dir / "a.jsonl").string())).size(), 4u);
}

TEST(Sweep, DivergingCellIsMarkedFailed) {
  const auto train = groupshift(200, 0, GroupShiftSplit::train);
  const auto val = groupshift(100, 1, GroupShiftSplit::balanced);
  auto cfg = tiny_sweep_config();
  cfg.sweep.lambdas = {0.5};
  cfg.sweep.lrs = {1e-2, 1e6};
  cfg.sweep.repeats = 1;
  cfg.train.optimizer.kind = OptimizerKind::sgd;
  cfg.train.divergence_limit = 1e3;
  const auto s = run_sweep<float>(cfg, train, val, val, nullptr);
  EXPECT_EQ(s.failed_cells, 1);
  ASSERT_TRUE(s.winner);
  EXPECT_EQ(s.cells[*s.winner].cell.lr, 1e-2);
}

// Saliency images ------------------------------------------------------------

TEST(Pgm, ZeroSaliencyIsBlackAndMaxIs255) {
  std::vector<float> g(3 * 4, 0.0f);
  for (auto v : saliency_gray(g.data(), 3, 2, 2)) EXPECT_EQ(v, 0);
  g[1] = -2.0f;      // channel 0, pixel 1
  g[4 + 2] = 1.0f;   // channel 1, pixel 2
  g[8 + 2] = -0.5f;  // channel 2, pixel 2
  const auto s = saliency_gray(g.data(), 3, 2, 2);
  EXPECT_EQ(s, (std::vector<std::uint8_t>{0, 255, 128, 0}));
}

TEST(Pgm, HeaderAndPayload) {
  const auto dir = scratch("pgm");
  std::vector<std::uint8_t> px(28 * 28, 7);
  write_pgm((dir / "x.pgm").string(), 28, 28, px);
  std::ifstream in(dir / "x.pgm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 28);
  EXPECT_EQ(h, 28);
  EXPECT_EQ(maxval, 255);
  in.get();
  std::vector<char> body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(body.size(), 784u);
  EXPECT_THROW(write_pgm((dir / "missing" / "x.pgm").string(), 28, 28, px), IoError);
  EXPECT_THROW(write_pgm((dir / "y.pgm").string(), 27, 28, px), ArgumentError);
}

TEST(Pgm, ExportNamesAndPairs) {
  const auto dir = scratch("export");
  GroupedDataset ds;
  ds.name = "tiny";
  ds.sample_shape = {1, 28, 28};
  ds.num_classes = 10;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 3; ++i) {
    ds.labels.push_back(i + 4);
    ds.attributes.push_back(0);
    for (int p = 0; p < 784; ++p) ds.inputs.push_back(static_cast<float>(unit_uniform(rng)));
  }
  auto net = build_from_arch<double>("mlp:784:16:10:1x28x28");
  init_params(net, 1);
  const auto pred = predict(net, ds);
  const auto paths = export_saliency_images(net, ds, {2, 0}, dir.string());
  ASSERT_EQ(paths.size(), 4u);
  const auto expected = "sal_2_y6_p" + std::to_string(pred[2]) + ".pgm";
  EXPECT_EQ(fs::path(paths[0]).filename().string(), expected);
  EXPECT_EQ(fs::path(paths[1]).filename().string(), "pair_2_y6_p" + std::to_string(pred[2]) + ".pgm");
  std::ifstream in(paths[1], std::ios::binary);
  std::string magic;
  int w = 0, h = 0;
  in >> magic >> w >> h;
  EXPECT_EQ(w, 56);
  EXPECT_EQ(h, 28);
  const auto sal = slurp(paths[0]);
  EXPECT_NE(sal.find(static_cast<char>(255)), std::string::npos);
}

// Report ---------------------------------------------------------------------

TEST(Report, Table1LayoutAndFallback) {
  auto rec = [](const std::string& train, const std::string& split, const std::string& dataset, const std::string& model,
                int epoch, double acc) {
    return Json{{"type", "eval"}, {"train_dataset", train}, {"split", split}, {"dataset", dataset},
                {"model", model},  {"epoch", epoch},         {"accuracy", acc}};
  };
  const std::vector<Json> records{
      rec("mnist-sc", "train", "mnist-sc", "teacher", 1, 0.5), rec("mnist-sc", "train", "mnist-sc", "teacher", 2, 0.98),
      rec("mnist-sc", "train", "mnist-sc", "student", 2, 1.0), rec("mnist-sc", "test", "mnist-sc", "teacher", 2, 0.95),
      rec("mnist-sc", "test", "mnist-sc", "student", 2, 1.0),  rec("mnist-sc", "clean", "mnist", "teacher", 2, 0.95),
      rec("mnist-sc", "clean", "mnist", "student", 2, 0.85),   rec("mnist", "test", "mnist", "erm", 2, 0.99),
      rec("colored-mnist", "clean", "mnist-rgb", "erm", 2, 0.21)};
  const auto rows = table1_rows(records);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].train_dataset, "MNIST");
  EXPECT_EQ(rows[1].test_dataset, "MNIST-SC");
  EXPECT_EQ(rows[2].test_dataset, "MNIST");
  EXPECT_EQ(rows[2].erm_test, 0.85);
  EXPECT_EQ(rows[2].ule_test, 0.95);
  EXPECT_EQ(rows[2].ule_train, 0.98);
  EXPECT_EQ(rows[3].train_dataset, "ColoredMNIST");
  EXPECT_EQ(rows[3].test_dataset, "MNIST");
  EXPECT_FALSE(rows[3].ule_test);
  const auto text = render_report(records);
  EXPECT_NE(text.find("MNIST-SC      MNIST         100.0%     98.0%      85.0%      95.0%"), std::string::npos) << text;
  EXPECT_NE(table1_csv(records).find("MNIST-SC,MNIST,1.0000,0.9800,0.8500,0.9500"), std::string::npos);
}

TEST(Report, RecordsDirectoryAndErrors) {
  const auto dir = scratch("records");
  {
    RecordWriter w((dir / "b.jsonl").string());
    w.append({{"type", "loss"}, {"epoch", 2}});
  }
  {
    RecordWriter w((dir / "a.jsonl").string());
    w.append({{"type", "loss"}, {"epoch", 1}});
  }
  {
    RecordWriter w((dir / "a.jsonl").string());  // appends
    w.append({{"type", "loss"}, {"epoch", 3}});
  }
  const auto r = read_records(dir.string());
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0]["epoch"], 1);
  EXPECT_EQ(r[1]["epoch"], 3);
  EXPECT_EQ(r[2]["epoch"], 2);
  EXPECT_THROW(read_records((dir / "none.jsonl").string()), IoError);
  std::ofstream((dir / "bad.jsonl").string()) << "{not json\n";
  EXPECT_THROW(read_records(dir.string()), IoError);
}
