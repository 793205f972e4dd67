#pragma once

#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ule/config.hpp"
#include "ule/dataset.hpp"
#include "ule/metrics.hpp"

namespace ule {

using Json = nlohmann::json;

/// Line-delimited JSON records. Appends only; one writer may be shared by threads.
class RecordWriter {
 public:
  explicit RecordWriter(const std::string& path);
  void append(const Json& record);
  void append_all(const std::vector<Json>& records);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::mutex mutex_;
};

/// Reads a records file, or every *.jsonl file of a directory in name order.
std::vector<Json> read_records(const std::string& path);

struct EvalSplit {
  std::string name;
  GroupedDataset data;
};

/// "eval" record of one model on one split; `tags` are merged in.
Json eval_record(const EvalResult& result, const std::string& split, const GroupedDataset& data, const Json& tags);

template <typename Scalar>
struct TrainedRun {
  Network<Scalar> primary;                 // ERM network or ULE teacher
  std::optional<Network<Scalar>> student;  // ULE only
  std::vector<Json> records;
};

/// Builds and seeds the networks named by `cfg`, trains them on `train` and
/// evaluates every split at each evaluation point. Records carry `tags`.
template <typename Scalar>
TrainedRun<Scalar> run_training(const ExperimentConfig& cfg, const GroupedDataset& train,
                                const std::vector<EvalSplit>& splits, const Json& tags, bool evaluate_student = true);

struct SweepCell {
  double lambda = 0.0;
  double lr = 0.0;
  double weight_decay = 0.0;

  auto operator<=>(const SweepCell&) const = default;
};

/// Best validation evaluation point of one repeat.
struct RepeatScore {
  int repeat = 0;
  int epoch = 0;
  double val_wga = 0.0;
  double test_wga = 0.0;
  double test_average = 0.0;
};

struct CellSummary {
  int index = 0;
  SweepCell cell;
  std::vector<RepeatScore> repeats;
  int failed_repeats = 0;
  bool failed() const { return failed_repeats > 0 || repeats.empty(); }
  double mean_val_wga() const;
  double mean_test_wga() const;
  double std_test_wga() const;
};

struct SweepSummary {
  std::vector<CellSummary> cells;  // in cell-index order
  int failed_cells = 0;
  std::optional<std::size_t> winner;
};

/// Highest mean validation WGA among cells that did not fail; ties go to the
/// lexicographically smallest (lambda, lr, weight decay).
std::optional<std::size_t> select_winner(const std::vector<CellSummary>& cells);

/// Rebuilds the sweep table from "eval" (splits "val" and "test") and
/// "failure" records carrying the sweep tags.
SweepSummary summarize_sweep(const std::vector<Json>& records);

/// Seed of stream `stream` of a repeat of a cell.
std::uint64_t cell_seed(std::uint64_t master, int cell, int repeat, int stream);

/// Trains every (cell, repeat) of cfg.sweep on `train` with `cfg` as the
/// template, evaluating on `val` and `test`. Up to cfg.sweep.workers jobs run
/// at once; records are emitted in (cell, repeat) order whatever the timing.
template <typename Scalar>
SweepSummary run_sweep(const ExperimentConfig& cfg, const GroupedDataset& train, const GroupedDataset& val,
                       const GroupedDataset& test, RecordWriter* writer);

/// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, Index width, Index height, const std::vector<std::uint8_t>& pixels);

/// |g| collapsed over channels by max and scaled so the largest pixel is 255;
/// an all-zero map stays black. `g` holds one (C, H, W) sample.
std::vector<std::uint8_t> saliency_gray(const float* g, Index channels, Index height, Index width);
/// Channel max of a [0, 1] image, scaled to 255.
std::vector<std::uint8_t> image_gray(const float* x, Index channels, Index height, Index width);

/// Writes sal_<index>_y<label>_p<prediction>.pgm and the input/saliency pair
/// pair_<index>_y<label>_p<prediction>.pgm for each sample; returns the paths.
template <typename Scalar>
std::vector<std::string> export_saliency_images(Network<Scalar>& net, const GroupedDataset& data,
                                                const std::vector<Index>& indices, const std::string& out_dir,
                                                Scalarization rule = Scalarization::predicted_logit);

struct Table1Row {
  std::string train_dataset;
  std::string test_dataset;
  std::optional<double> erm_train, ule_train, erm_test, ule_test;
};

/// Last evaluation point of each run; ERM columns fall back to the ULE student.
std::vector<Table1Row> table1_rows(const std::vector<Json>& records);

struct LambdaRow {
  double lambda = 0.0;
  double lr = 0.0;
  double weight_decay = 0.0;
  int repeat = 0;
  double val_wga = 0.0;
  double test_wga = 0.0;
};

/// One row per (lambda, repeat) using the best (lr, weight decay) of each lambda.
std::vector<LambdaRow> lambda_rows(const std::vector<Json>& records);

/// Plain-text Table 1 matrix, lambda table and sweep winner.
std::string render_report(const std::vector<Json>& records);
std::string table1_csv(const std::vector<Json>& records);
std::string lambda_csv(const std::vector<Json>& records);

}  // namespace ule
