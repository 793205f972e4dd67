#include "ule/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "ule/engine.hpp"
#include "ule/ops.hpp"

namespace ule {

namespace fs = std::filesystem;

RecordWriter::RecordWriter(const std::string& path) : path_(path), out_(path, std::ios::app) {
  if (!out_) throw IoError("records: cannot open '" + path + "' for appending");
}

void RecordWriter::append(const Json& record) {
  std::lock_guard lock(mutex_);
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("records: write to '" + path_ + "' failed");
}

void RecordWriter::append_all(const std::vector<Json>& records) {
  std::lock_guard lock(mutex_);
  for (const auto& r : records) out_ << r.dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("records: write to '" + path_ + "' failed");
}

namespace {

void read_file(const fs::path& path, std::vector<Json>& out) {
  std::ifstream in(path);
  if (!in) throw IoError("records: cannot open '" + path.string() + "'");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw IoError("records: " + path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<Json> read_records(const std::string& path) {
  std::vector<Json> out;
  if (!fs::exists(path)) throw IoError("records: '" + path + "' does not exist");
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) read_file(f, out);
  } else {
    read_file(path, out);
  }
  return out;
}

Json eval_record(const EvalResult& result, const std::string& split, const GroupedDataset& data, const Json& tags) {
  Json r = tags;
  r["type"] = "eval";
  r["split"] = split;
  r["dataset"] = data.name;
  r["accuracy"] = result.accuracy;
  r["samples"] = result.samples;
  if (result.groups) {
    r["group_accuracy"] = result.groups->group_accuracy;
    r["group_counts"] = result.groups->group_counts;
    r["average"] = result.groups->average;
    r["wga"] = result.groups->worst;
  }
  return r;
}

namespace {

template <typename Scalar>
Network<Scalar> make_net(const std::string& arch, const ExperimentConfig& cfg, std::uint64_t seed) {
  auto net = build_from_arch<Scalar>(arch);
  if (!cfg.tap.empty()) net.set_tap(cfg.tap);
  init_params(net, seed);
  if (cfg.last_layer_only) net.freeze_all_but_last();
  return net;
}

}  // namespace

template <typename Scalar>
TrainedRun<Scalar> run_training(const ExperimentConfig& cfg, const GroupedDataset& train,
                                const std::vector<EvalSplit>& splits, const Json& tags, bool evaluate_student) {
  TrainedRun<Scalar> run{make_net<Scalar>(cfg.student_arch, cfg, cfg.student_seed), std::nullopt, {}};
  if (run.primary.input_shape() != train.sample_shape) {
    throw ShapeError("run: network input " + shape_str(run.primary.input_shape()) + " does not match dataset '" +
                     train.name + "' samples " + shape_str(train.sample_shape));
  }
  Json base = tags;
  base["method"] = to_string(cfg.method);
  base["train_dataset"] = train.name;

  auto evaluate = [&](Network<Scalar>& net, const std::string& model, int epoch) {
    Json t = base;
    t["model"] = model;
    t["epoch"] = epoch;
    for (const auto& split : splits) {
      run.records.push_back(eval_record(evaluate_predictions(predict(net, split.data), split.data), split.name,
                                        split.data, t));
    }
  };

  BatchStream stream(train.size(), cfg.train.batch_size, cfg.shuffle_seed);
  if (cfg.method == Method::erm) {
    const auto trace = train_erm(run.primary, train, stream, cfg.train, [&](int epoch) {
      evaluate(run.primary, "erm", epoch);
    });
    for (std::size_t e = 0; e < trace.loss.size(); ++e) {
      Json r = base;
      r["type"] = "loss";
      r["epoch"] = static_cast<int>(e + 1);
      r["ce"] = trace.loss[e];
      run.records.push_back(r);
    }
  } else {
    run.student = std::move(run.primary);
    const auto& teacher_arch = cfg.teacher_arch.empty() ? cfg.student_arch : cfg.teacher_arch;
    run.primary = make_net<Scalar>(teacher_arch, cfg, cfg.teacher_seed);
    const auto trace = train_ule(*run.student, run.primary, train, stream, cfg.train, [&](int epoch) {
      evaluate(run.primary, "teacher", epoch);
      if (evaluate_student) evaluate(*run.student, "student", epoch);
    });
    for (std::size_t e = 0; e < trace.teacher_ce.size(); ++e) {
      Json r = base;
      r["type"] = "loss";
      r["epoch"] = static_cast<int>(e + 1);
      r["student_ce"] = trace.student_ce[e];
      r["teacher_ce"] = trace.teacher_ce[e];
      r["teacher_sal"] = trace.teacher_sal[e];
      r["teacher_total"] = trace.teacher_total[e];
      run.records.push_back(r);
    }
  }
  return run;
}

double CellSummary::mean_val_wga() const {
  if (repeats.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : repeats) s += r.val_wga;
  return s / static_cast<double>(repeats.size());
}

double CellSummary::mean_test_wga() const {
  if (repeats.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : repeats) s += r.test_wga;
  return s / static_cast<double>(repeats.size());
}

double CellSummary::std_test_wga() const {
  if (repeats.size() < 2) return 0.0;
  const double m = mean_test_wga();
  double s = 0.0;
  for (const auto& r : repeats) s += (r.test_wga - m) * (r.test_wga - m);
  return std::sqrt(s / static_cast<double>(repeats.size() - 1));
}

std::optional<std::size_t> select_winner(const std::vector<CellSummary>& cells) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].failed()) continue;
    if (!best) {
      best = i;
      continue;
    }
    const double a = cells[i].mean_val_wga(), b = cells[*best].mean_val_wga();
    if (a > b || (a == b && cells[i].cell < cells[*best].cell)) best = i;
  }
  return best;
}

namespace {

struct EvalPoint {
  std::optional<double> val_wga;
  std::optional<double> test_wga;
  std::optional<double> test_average;
};

bool is_sweep_record(const Json& r) { return r.contains("cell") && r.contains("repeat"); }

}  // namespace

SweepSummary summarize_sweep(const std::vector<Json>& records) {
  // cell -> repeat -> epoch -> point
  std::map<int, std::map<int, std::map<int, EvalPoint>>> points;
  std::map<int, SweepCell> params;
  std::map<int, std::set<int>> failed;
  for (const auto& r : records) {
    if (!is_sweep_record(r)) continue;
    const int cell = r.at("cell").get<int>();
    const int repeat = r.at("repeat").get<int>();
    params[cell] = {r.at("lambda").get<double>(), r.at("lr").get<double>(), r.at("weight_decay").get<double>()};
    const auto type = r.value("type", "");
    if (type == "failure") {
      failed[cell].insert(repeat);
      continue;
    }
    if (type != "eval" || !r.contains("wga")) continue;
    if (r.value("model", "") == "student") continue;
    auto& p = points[cell][repeat][r.at("epoch").get<int>()];
    const auto split = r.value("split", "");
    if (split == "val") {
      p.val_wga = r.at("wga").get<double>();
    } else if (split == "test") {
      p.test_wga = r.at("wga").get<double>();
      p.test_average = r.at("average").get<double>();
    }
  }
  SweepSummary s;
  for (const auto& [cell, sc] : params) {
    CellSummary c;
    c.index = cell;
    c.cell = sc;
    c.failed_repeats = static_cast<int>(failed[cell].size());
    for (const auto& [repeat, epochs] : points[cell]) {
      if (failed[cell].count(repeat)) continue;
      std::optional<RepeatScore> best;
      for (const auto& [epoch, p] : epochs) {
        if (!p.val_wga || !p.test_wga) continue;
        if (!best || *p.val_wga > best->val_wga) {
          best = RepeatScore{repeat, epoch, *p.val_wga, *p.test_wga, *p.test_average};
        }
      }
      if (best) c.repeats.push_back(*best);
    }
    if (c.failed()) ++s.failed_cells;
    s.cells.push_back(std::move(c));
  }
  s.winner = select_winner(s.cells);
  return s;
}

std::uint64_t cell_seed(std::uint64_t master, int cell, int repeat, int stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  std::uint64_t x = mix(master);
  x = mix(x ^ static_cast<std::uint64_t>(cell));
  x = mix(x ^ static_cast<std::uint64_t>(repeat));
  return mix(x ^ static_cast<std::uint64_t>(stream));
}

template <typename Scalar>
SweepSummary run_sweep(const ExperimentConfig& cfg, const GroupedDataset& train, const GroupedDataset& val,
                       const GroupedDataset& test, RecordWriter* writer) {
  const auto& spec = cfg.sweep;
  spec.validate();
  std::vector<SweepCell> cells;
  for (double l : spec.lambdas) {
    for (double lr : spec.lrs) {
      for (double wd : spec.weight_decays) cells.push_back({l, lr, wd});
    }
  }
  const std::vector<EvalSplit> splits{{"val", val}, {"test", test}};
  const int repeats = spec.repeats;
  const std::size_t jobs = cells.size() * static_cast<std::size_t>(repeats);

  std::vector<std::vector<Json>> results(jobs);
  std::vector<char> done(jobs, 0);
  std::size_t next_to_write = 0;
  std::mutex mutex;
  std::atomic<std::size_t> next_job{0};
  std::vector<Json> all;

  auto run_job = [&](std::size_t job) {
    const int cell = static_cast<int>(job / static_cast<std::size_t>(repeats));
    const int repeat = static_cast<int>(job % static_cast<std::size_t>(repeats));
    const auto& sc = cells[static_cast<std::size_t>(cell)];
    Json tags = {{"cell", cell}, {"repeat", repeat}, {"lambda", sc.lambda}, {"lr", sc.lr}, {"weight_decay", sc.weight_decay}};
    ExperimentConfig c = cfg;
    c.train.lambda = sc.lambda;
    c.train.optimizer.lr = sc.lr;
    c.train.optimizer.weight_decay = sc.weight_decay;
    c.student_seed = cell_seed(spec.seed, cell, repeat, 0);
    c.teacher_seed = cell_seed(spec.seed, cell, repeat, 1);
    c.shuffle_seed = cell_seed(spec.seed, cell, repeat, 2);
    std::vector<Json> out;
    try {
      out = run_training<Scalar>(c, train, splits, tags, false).records;
    } catch (const Error& e) {
      Json f = tags;
      f["type"] = "failure";
      f["method"] = to_string(c.method);
      f["error"] = e.what();
      out = {f};
    }
    std::lock_guard lock(mutex);
    results[job] = std::move(out);
    done[job] = 1;
    while (next_to_write < jobs && done[next_to_write]) {
      if (writer) writer->append_all(results[next_to_write]);
      all.insert(all.end(), results[next_to_write].begin(), results[next_to_write].end());
      results[next_to_write].clear();
      ++next_to_write;
    }
  };

  auto worker = [&] {
    for (std::size_t job = next_job++; job < jobs; job = next_job++) run_job(job);
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(spec.workers), jobs);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  auto summary = summarize_sweep(all);
  Json s = {{"type", "sweep_summary"},
            {"method", to_string(cfg.method)},
            {"cells", cells.size()},
            {"repeats", repeats},
            {"failed_cells", summary.failed_cells}};
  if (summary.winner) {
    const auto& w = summary.cells[*summary.winner];
    s["winner"] = {{"cell", w.index},
                   {"lambda", w.cell.lambda},
                   {"lr", w.cell.lr},
                   {"weight_decay", w.cell.weight_decay},
                   {"mean_val_wga", w.mean_val_wga()},
                   {"mean_test_wga", w.mean_test_wga()},
                   {"std_test_wga", w.std_test_wga()}};
  }
  if (writer) writer->append(s);
  return summary;
}

void write_pgm(const std::string& path, Index width, Index height, const std::vector<std::uint8_t>& pixels) {
  if (static_cast<Index>(pixels.size()) != width * height) {
    throw ArgumentError("pgm: " + std::to_string(pixels.size()) + " pixels for a " + std::to_string(width) + "x" +
                        std::to_string(height) + " image");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("pgm: cannot write '" + path + "'");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("pgm: write to '" + path + "' failed");
}

std::vector<std::uint8_t> saliency_gray(const float* g, Index channels, Index height, Index width) {
  const Index plane = height * width;
  std::vector<float> m(static_cast<std::size_t>(plane), 0.0f);
  for (Index c = 0; c < channels; ++c) {
    for (Index p = 0; p < plane; ++p) m[static_cast<std::size_t>(p)] = std::max(m[static_cast<std::size_t>(p)], std::abs(g[c * plane + p]));
  }
  const float top = *std::max_element(m.begin(), m.end());
  std::vector<std::uint8_t> out(m.size(), 0);
  if (top > 0.0f) {
    for (std::size_t p = 0; p < m.size(); ++p) out[p] = static_cast<std::uint8_t>(std::lround(255.0f * m[p] / top));
  }
  return out;
}

std::vector<std::uint8_t> image_gray(const float* x, Index channels, Index height, Index width) {
  const Index plane = height * width;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(plane), 0);
  for (Index p = 0; p < plane; ++p) {
    float v = 0.0f;
    for (Index c = 0; c < channels; ++c) v = std::max(v, x[c * plane + p]);
    out[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(v, 0.0f, 1.0f)));
  }
  return out;
}

template <typename Scalar>
std::vector<std::string> export_saliency_images(Network<Scalar>& net, const GroupedDataset& data,
                                                const std::vector<Index>& indices, const std::string& out_dir,
                                                Scalarization rule) {
  if (data.sample_shape.size() != 3) {
    throw ShapeError("saliency export: expected (C,H,W) samples, got " + shape_str(data.sample_shape));
  }
  for (Index i : indices) {
    if (i < 0 || i >= data.size()) throw ArgumentError("saliency export: sample index " + std::to_string(i) + " out of range");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("saliency export: cannot create directory '" + out_dir + "'");

  const Index c = data.sample_shape[0], h = data.sample_shape[1], w = data.sample_shape[2];
  const Index size = c * h * w;
  const auto subset = data.subset(indices);
  const auto predictions = predict(net, subset);
  std::vector<std::string> paths;
  constexpr Index kChunk = 100;
  for (Index start = 0; start < subset.size(); start += kChunk) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(subset.size(), start + kChunk); ++i) idx.push_back(i);
    const auto g = saliency(net, subset.batch_inputs<Scalar>(idx), SaliencyMode::input, false, rule);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto i = static_cast<std::size_t>(idx[k]);
      std::vector<float> gs(static_cast<std::size_t>(size));
      for (Index p = 0; p < size; ++p) gs[static_cast<std::size_t>(p)] = static_cast<float>(g.data()[static_cast<Index>(k) * size + p]);
      const auto sal = saliency_gray(gs.data(), c, h, w);
      const auto img = image_gray(subset.inputs.data() + static_cast<std::ptrdiff_t>(i) * size, c, h, w);
      const std::string stem = std::to_string(indices[i]) + "_y" + std::to_string(subset.labels[i]) + "_p" +
                               std::to_string(predictions[i]) + ".pgm";
      const auto sal_path = (fs::path(out_dir) / ("sal_" + stem)).string();
      write_pgm(sal_path, w, h, sal);
      std::vector<std::uint8_t> pair(static_cast<std::size_t>(2 * w * h));
      for (Index r = 0; r < h; ++r) {
        for (Index q = 0; q < w; ++q) {
          pair[static_cast<std::size_t>(r * 2 * w + q)] = img[static_cast<std::size_t>(r * w + q)];
          pair[static_cast<std::size_t>(r * 2 * w + w + q)] = sal[static_cast<std::size_t>(r * w + q)];
        }
      }
      const auto pair_path = (fs::path(out_dir) / ("pair_" + stem)).string();
      write_pgm(pair_path, 2 * w, h, pair);
      paths.push_back(sal_path);
      paths.push_back(pair_path);
    }
  }
  return paths;
}

namespace {

std::string display_name(const std::string& dataset) {
  if (dataset == "mnist" || dataset == "mnist-rgb") return "MNIST";
  if (dataset == "mnist-sc") return "MNIST-SC";
  if (dataset == "colored-mnist") return "ColoredMNIST";
  return dataset;
}

int row_rank(const std::string& train, const std::string& test) {
  static const std::vector<std::pair<std::string, std::string>> order{{"MNIST", "MNIST"},
                                                                      {"MNIST-SC", "MNIST-SC"},
                                                                      {"MNIST-SC", "MNIST"},
                                                                      {"ColoredMNIST", "ColoredMNIST"},
                                                                      {"ColoredMNIST", "MNIST"}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i].first == train && order[i].second == test) return static_cast<int>(i);
  }
  return static_cast<int>(order.size());
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * *v << '%';
  return os.str();
}

std::string num(const std::optional<double>& v, int precision = 4) {
  if (!v) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

std::string pad(const std::string& s, std::size_t width) { return s.size() >= width ? s : s + std::string(width - s.size(), ' '); }

}  // namespace

std::vector<Table1Row> table1_rows(const std::vector<Json>& records) {
  // (train, split, dataset, model) -> latest accuracy
  std::map<std::tuple<std::string, std::string, std::string, std::string>, double> latest;
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& r : records) {
    if (r.value("type", "") != "eval" || is_sweep_record(r)) continue;
    const auto train = display_name(r.value("train_dataset", ""));
    const auto split = r.value("split", "");
    const auto dataset = display_name(r.value("dataset", ""));
    latest[{train, split, dataset, r.value("model", "")}] = r.at("accuracy").get<double>();
    if (split != "train") pairs.insert({train, dataset});
  }
  auto lookup = [&](const std::string& train, const std::string& split, const std::string& dataset,
                    std::initializer_list<const char*> models) -> std::optional<double> {
    for (const char* m : models) {
      const auto it = latest.find({train, split, dataset, m});
      if (it != latest.end()) return it->second;
    }
    return std::nullopt;
  };
  std::vector<Table1Row> rows;
  for (const auto& [train, test] : pairs) {
    Table1Row row{train, test, {}, {}, {}, {}};
    row.erm_test = lookup(train, "test", test, {"erm", "student"});
    row.ule_test = lookup(train, "test", test, {"teacher"});
    if (!row.erm_test && !row.ule_test) {
      // Splits named after something other than "test".
      for (const auto& [key, acc] : latest) {
        const auto& [t, split, d, model] = key;
        if (t != train || d != test || split == "train") continue;
        if (model == "teacher") row.ule_test = acc;
        else if (model == "erm" || (model == "student" && !row.erm_test)) row.erm_test = acc;
      }
    }
    for (const auto& [key, acc] : latest) {
      const auto& [t, split, d, model] = key;
      if (t != train || split != "train") continue;
      if (model == "teacher") row.ule_train = acc;
      else if (model == "erm" || (model == "student" && !row.erm_train)) row.erm_train = acc;
    }
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Table1Row& a, const Table1Row& b) {
    const int ra = row_rank(a.train_dataset, a.test_dataset), rb = row_rank(b.train_dataset, b.test_dataset);
    if (ra != rb) return ra < rb;
    return std::tie(a.train_dataset, a.test_dataset) < std::tie(b.train_dataset, b.test_dataset);
  });
  return rows;
}

std::vector<LambdaRow> lambda_rows(const std::vector<Json>& records) {
  const auto summary = summarize_sweep(records);
  std::map<double, std::vector<CellSummary>> by_lambda;
  for (const auto& c : summary.cells) by_lambda[c.cell.lambda].push_back(c);
  std::vector<LambdaRow> rows;
  for (const auto& [lambda, cells] : by_lambda) {
    const auto best = select_winner(cells);
    if (!best) continue;
    const auto& c = cells[*best];
    for (const auto& r : c.repeats) {
      rows.push_back({lambda, c.cell.lr, c.cell.weight_decay, r.repeat, r.val_wga, r.test_wga});
    }
  }
  return rows;
}

std::string render_report(const std::vector<Json>& records) {
  std::ostringstream os;
  const auto rows = table1_rows(records);
  if (!rows.empty()) {
    os << "Accuracy matrix (ULE = teacher)\n";
    os << pad("Train", 14) << pad("Test", 14) << pad("Train ERM", 11) << pad("Train ULE", 11) << pad("Test ERM", 11)
       << "Test ULE\n";
    for (const auto& r : rows) {
      os << pad(r.train_dataset, 14) << pad(r.test_dataset, 14) << pad(pct(r.erm_train), 11) << pad(pct(r.ule_train), 11)
         << pad(pct(r.erm_test), 11) << pct(r.ule_test) << '\n';
    }
  }
  const auto lrows = lambda_rows(records);
  if (!lrows.empty()) {
    if (!rows.empty()) os << '\n';
    os << "Lambda sensitivity (best lr / weight decay per lambda)\n";
    os << pad("lambda", 8) << pad("repeat", 8) << pad("lr", 10) << pad("wd", 10) << pad("val WGA", 10) << "test WGA\n";
    std::map<double, std::vector<double>> per_lambda;
    for (const auto& r : lrows) {
      std::ostringstream lr, wd;
      lr << r.lr;
      wd << r.weight_decay;
      os << pad(num(r.lambda, 1), 8) << pad(std::to_string(r.repeat), 8) << pad(lr.str(), 10) << pad(wd.str(), 10)
         << pad(num(r.val_wga), 10) << num(r.test_wga) << '\n';
      per_lambda[r.lambda].push_back(r.test_wga);
    }
    os << "mean test WGA:";
    for (const auto& [l, v] : per_lambda) {
      os << ' ' << num(l, 1) << '=' << num(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    }
    os << '\n';
    const auto summary = summarize_sweep(records);
    if (summary.winner) {
      const auto& w = summary.cells[*summary.winner];
      os << "winner: lambda " << w.cell.lambda << ", lr " << w.cell.lr << ", wd " << w.cell.weight_decay
         << ", mean val WGA " << num(w.mean_val_wga()) << ", test WGA " << num(w.mean_test_wga()) << " +- "
         << num(w.std_test_wga()) << '\n';
    }
    os << "failed cells: " << summary.failed_cells << '\n';
  }
  if (rows.empty() && lrows.empty()) os << "no evaluation records\n";
  return os.str();
}

std::string table1_csv(const std::vector<Json>& records) {
  std::ostringstream os;
  os << "train_dataset,test_dataset,erm_train,ule_train,erm_test,ule_test\n";
  for (const auto& r : table1_rows(records)) {
    os << r.train_dataset << ',' << r.test_dataset << ',' << num(r.erm_train) << ',' << num(r.ule_train) << ','
       << num(r.erm_test) << ',' << num(r.ule_test) << '\n';
  }
  return os.str();
}

std::string lambda_csv(const std::vector<Json>& records) {
  std::ostringstream os;
  os << "lambda,repeat,lr,weight_decay,val_wga,test_wga\n";
  for (const auto& r : lambda_rows(records)) {
    os << r.lambda << ',' << r.repeat << ',' << r.lr << ',' << r.weight_decay << ',' << num(r.val_wga) << ','
       << num(r.test_wga) << '\n';
  }
  return os.str();
}

#define ULE_INSTANTIATE_EXPERIMENT(S)                                                                           \
  template TrainedRun<S> run_training(const ExperimentConfig&, const GroupedDataset&, const std::vector<EvalSplit>&, \
                                      const Json&, bool);                                                       \
  template SweepSummary run_sweep<S>(const ExperimentConfig&, const GroupedDataset&, const GroupedDataset&,     \
                                     const GroupedDataset&, RecordWriter*);                                     \
  template std::vector<std::string> export_saliency_images(Network<S>&, const GroupedDataset&,                  \
                                                           const std::vector<Index>&, const std::string&,        \
                                                           Scalarization);

ULE_INSTANTIATE_EXPERIMENT(float)
ULE_INSTANTIATE_EXPERIMENT(double)

}  // namespace ule
