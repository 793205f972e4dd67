// Command-line front end: dataset preparation, training, evaluation, sweeps,
// saliency export and reporting.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ule/config.hpp"
#include "ule/experiment.hpp"

namespace fs = std::filesystem;
using namespace ule;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kConfig = 4 };

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ArgumentError(what + ": no path given");
  if (!fs::is_regular_file(path)) throw IoError(what + " '" + path + "' does not exist");
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// prepare-data ---------------------------------------------------------------

struct PrepareArgs {
  std::string kind;
  std::string mnist_dir = "data/mnist";
  std::string out = "data/prepared";
  GroupShiftParams syn;
  Index val_n = 1000;
  Index test_n = 2000;
};

void prepare(const PrepareArgs& a) {
  ensure_dir(a.out);
  auto save = [&](const std::string& file, const GroupedDataset& ds) {
    const auto path = join(a.out, file);
    save_dataset(path, ds);
    std::cout << path << "  " << ds.name << "  " << ds.size() << " samples\n";
  };
  if (a.kind == "synthetic") {
    const auto splits = make_synthetic_splits(a.syn, a.val_n, a.test_n);
    save("synthetic-train.uled", splits.train);
    save("synthetic-val.uled", splits.val);
    save("synthetic-test.uled", splits.test);
    return;
  }
  const auto load = [&](const std::string& split) {
    const auto images = join(a.mnist_dir, split + "-images-idx3-ubyte");
    const auto labels = join(a.mnist_dir, split + "-labels-idx1-ubyte");
    require_file(images, "MNIST images");
    require_file(labels, "MNIST labels");
    return load_mnist_idx(images, labels);
  };
  const auto variant = parse_mnist_variant(a.kind);
  const auto splits = make_mnist_variant(variant, load("train"), load("test"));
  save(a.kind + "-train.uled", splits.train);
  save(a.kind + "-test.uled", splits.test);
  if (variant != MnistVariant::plain) save(splits.clean.name + "-test.uled", splits.clean);
}

// train / sweep ----------------------------------------------------------------

GroupedDataset load_split(const std::string& path, const std::string& what) {
  require_file(path, what);
  return load_dataset(path);
}

std::vector<EvalSplit> load_eval_splits(const ExperimentConfig& cfg) {
  std::vector<EvalSplit> splits;
  for (const auto& [name, path] : cfg.eval_splits) splits.push_back({name, load_split(path, "eval split " + name)});
  return splits;
}

template <typename Scalar>
void train_run(const ExperimentConfig& cfg, const std::string& out) {
  const auto train = load_split(cfg.train_path, "training set");
  const auto splits = load_eval_splits(cfg);
  ensure_dir(out);
  cfg.to_file().save(join(out, "config.cfg"));
  RecordWriter writer(join(out, "records.jsonl"));
  const Json tags = {{"run", fs::path(out).filename().string()}};
  auto run = run_training<Scalar>(cfg, train, splits, tags);
  writer.append_all(run.records);
  save_checkpoint(join(out, cfg.method == Method::erm ? "erm.ckpt" : "teacher.ckpt"), run.primary);
  if (run.student) save_checkpoint(join(out, "student.ckpt"), *run.student);
  for (const auto& r : run.records) {
    if (r.value("type", "") != "eval" || r.at("epoch").template get<int>() != cfg.train.epochs) continue;
    std::cout << r.value("model", "") << ' ' << r.value("split", "") << " (" << r.value("dataset", "")
              << "): accuracy " << r.at("accuracy").template get<double>();
    if (r.contains("wga")) std::cout << ", average " << r.at("average").template get<double>() << ", WGA " << r.at("wga").template get<double>();
    std::cout << '\n';
  }
  std::cout << "records: " << join(out, "records.jsonl") << '\n';
}

template <typename Scalar>
void sweep_run(const ExperimentConfig& cfg, const std::string& out) {
  const auto train = load_split(cfg.train_path, "training set");
  const auto val = load_split(cfg.val_path, "validation set");
  const auto test = load_split(cfg.test_path, "test set");
  ensure_dir(out);
  cfg.to_file().save(join(out, "config.cfg"));
  RecordWriter writer(join(out, "records.jsonl"));
  const auto summary = run_sweep<Scalar>(cfg, train, val, test, &writer);
  std::cout << summary.cells.size() << " cells, " << summary.failed_cells << " failed\n";
  if (summary.winner) {
    const auto& w = summary.cells[*summary.winner];
    std::cout << "winner: lambda " << w.cell.lambda << ", lr " << w.cell.lr << ", weight decay " << w.cell.weight_decay
              << "; mean val WGA " << w.mean_val_wga() << "; test WGA " << w.mean_test_wga() << " +- "
              << w.std_test_wga() << '\n';
  } else {
    std::cout << "no cell completed\n";
  }
}

// eval / saliency ----------------------------------------------------------------

template <typename Scalar>
std::vector<int> predict_checkpoint(const std::string& checkpoint, const GroupedDataset& data) {
  auto net = load_checkpoint<Scalar>(checkpoint);
  return predict(net, data);
}

void print_metrics(const EvalResult& r) {
  std::cout << "samples " << r.samples << "\naccuracy " << r.accuracy << '\n';
  if (r.groups) {
    std::cout << "average " << r.groups->average << "\nwga " << r.groups->worst << "\ngroups";
    for (double g : r.groups->group_accuracy) std::cout << ' ' << g;
    std::cout << '\n';
  }
}

template <typename Scalar>
void export_images(const std::string& checkpoint, const GroupedDataset& data, Index first, Index count,
                   const std::string& out, Scalarization rule) {
  auto net = load_checkpoint<Scalar>(checkpoint);
  std::vector<Index> idx;
  for (Index i = first; i < std::min(data.size(), first + count); ++i) idx.push_back(i);
  if (idx.empty()) throw ArgumentError("saliency: no samples selected");
  for (const auto& p : export_saliency_images(net, data, idx, out, rule)) std::cout << p << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Student/teacher training against spurious correlations"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare_cmd = app.add_subcommand("prepare-data", "Build and serialize datasets");
  prepare_cmd->add_option("--kind", prep.kind, "mnist | mnist-sc | colored-mnist | synthetic")
      ->required()
      ->check(CLI::IsMember({"mnist", "mnist-sc", "colored-mnist", "synthetic"}));
  prepare_cmd->add_option("--mnist-dir", prep.mnist_dir, "Directory with {train,test}-{images-idx3,labels-idx1}-ubyte");
  prepare_cmd->add_option("--out", prep.out, "Output directory");
  prepare_cmd->add_option("--n", prep.syn.n, "Synthetic training samples");
  prepare_cmd->add_option("--val-n", prep.val_n, "Synthetic validation samples (balanced)");
  prepare_cmd->add_option("--test-n", prep.test_n, "Synthetic test samples (balanced)");
  prepare_cmd->add_option("--rho", prep.syn.rho, "P(a == y) in the synthetic training split");
  prepare_cmd->add_option("--seed", prep.syn.seed, "Synthetic generator seed");

  std::string config_path, out_dir, mode;
  int repeats = 0, workers = 0;
  auto* train_cmd = app.add_subcommand("train", "Train erm or ule from a config file");
  train_cmd->add_option("--config", config_path, "Experiment config")->required();
  train_cmd->add_option("--mode", mode, "Override [train] method")->check(CLI::IsMember({"erm", "ule"}));
  train_cmd->add_option("--out", out_dir, "Run directory (default: [output] dir)");

  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over lambda, learning rate and weight decay");
  sweep_cmd->add_option("--config", config_path, "Experiment config")->required();
  sweep_cmd->add_option("--mode", mode, "Override [train] method")->check(CLI::IsMember({"erm", "ule"}));
  sweep_cmd->add_option("--repeats", repeats, "Override [sweep] repeats");
  sweep_cmd->add_option("--workers", workers, "Override [sweep] workers");
  sweep_cmd->add_option("--out", out_dir, "Sweep directory (default: [output] dir)");

  std::string checkpoint, data_path, predictions_in, predictions_out, records_out, split_name = "eval";
  auto* eval_cmd = app.add_subcommand("eval", "Group metrics of a checkpoint or a predictions file");
  eval_cmd->add_option("--data", data_path, "Dataset file")->required();
  auto* ckpt_opt = eval_cmd->add_option("--checkpoint", checkpoint, "Network checkpoint");
  auto* pred_opt = eval_cmd->add_option("--predictions", predictions_in, "Stored predictions, one per line");
  ckpt_opt->excludes(pred_opt);
  eval_cmd->add_option("--save-predictions", predictions_out, "Write the checkpoint's predictions here");
  eval_cmd->add_option("--records", records_out, "Append an eval record to this file");
  eval_cmd->add_option("--split", split_name, "Split name stored in the record");

  Index first = 0, count = 8;
  std::string rule = "predicted_logit";
  auto* sal_cmd = app.add_subcommand("saliency", "Export |d score / d x| as PGM images");
  sal_cmd->add_option("--checkpoint", checkpoint, "Network checkpoint")->required();
  sal_cmd->add_option("--data", data_path, "Dataset file")->required();
  sal_cmd->add_option("--out", out_dir, "Image directory")->required();
  sal_cmd->add_option("--first", first, "First sample index");
  sal_cmd->add_option("--count", count, "Number of samples");
  sal_cmd->add_option("--scalarization", rule, "predicted_logit | logit_sum | predicted_log_prob | centered_logit");

  std::string records_in, csv_prefix;
  auto* report_cmd = app.add_subcommand("report", "Tables from a records file or directory");
  report_cmd->add_option("--records", records_in, "Records file or directory of *.jsonl")->required();
  report_cmd->add_option("--csv", csv_prefix, "Also write <prefix>table1.csv and <prefix>lambda.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*prepare_cmd) {
      prepare(prep);
    } else if (*train_cmd || *sweep_cmd) {
      require_file(config_path, "config");
      auto cfg = ExperimentConfig::load(config_path);
      if (!mode.empty()) cfg.method = parse_method(mode);
      if (repeats > 0) cfg.sweep.repeats = repeats;
      if (workers > 0) cfg.sweep.workers = workers;
      const auto out = out_dir.empty() ? cfg.out_dir : out_dir;
      if (*train_cmd) {
        cfg.double_precision ? train_run<double>(cfg, out) : train_run<float>(cfg, out);
      } else {
        cfg.double_precision ? sweep_run<double>(cfg, out) : sweep_run<float>(cfg, out);
      }
    } else if (*eval_cmd) {
      if (checkpoint.empty() && predictions_in.empty()) throw ArgumentError("eval: give --checkpoint or --predictions");
      const auto data = load_split(data_path, "dataset");
      std::vector<int> predictions;
      if (!checkpoint.empty()) {
        require_file(checkpoint, "checkpoint");
        predictions = checkpoint_scalar_width(checkpoint) == 8 ? predict_checkpoint<double>(checkpoint, data)
                                                              : predict_checkpoint<float>(checkpoint, data);
        if (!predictions_out.empty()) save_predictions(predictions_out, predictions);
      } else {
        require_file(predictions_in, "predictions file");
        predictions = load_predictions(predictions_in);
      }
      const auto result = evaluate_predictions(predictions, data);
      print_metrics(result);
      if (!records_out.empty()) {
        RecordWriter writer(records_out);
        writer.append(eval_record(result, split_name, data,
                                  {{"source", checkpoint.empty() ? predictions_in : checkpoint}}));
      }
    } else if (*sal_cmd) {
      require_file(checkpoint, "checkpoint");
      const auto data = load_split(data_path, "dataset");
      const auto r = parse_scalarization(rule);
      checkpoint_scalar_width(checkpoint) == 8 ? export_images<double>(checkpoint, data, first, count, out_dir, r)
                                               : export_images<float>(checkpoint, data, first, count, out_dir, r);
    } else if (*report_cmd) {
      const auto records = read_records(records_in);
      std::cout << render_report(records);
      if (!csv_prefix.empty()) {
        for (const auto& [name, text] : {std::pair{"table1.csv", table1_csv(records)}, {"lambda.csv", lambda_csv(records)}}) {
          std::ofstream f(csv_prefix + name);
          if (!f) throw IoError("report: cannot write '" + csv_prefix + name + "'");
          f << text;
        }
      }
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  return run(argc, argv);
}
