#include "ule/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "ule/ops.hpp"

namespace ule {

namespace {

void check_lengths(const std::vector<int>& predictions, std::size_t n) {
  if (predictions.size() != n) {
    throw ArgumentError("metrics: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(n) +
                        " samples");
  }
}

}  // namespace

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  check_lengths(predictions, labels.size());
  if (labels.empty()) throw ArgumentError("metrics: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

GroupMetrics group_metrics(const std::vector<int>& predictions, const GroupedDataset& data) {
  check_lengths(predictions, data.labels.size());
  GroupMetrics m;
  const auto groups = static_cast<std::size_t>(data.num_groups());
  m.group_counts.assign(groups, 0);
  std::vector<Index> hits(groups, 0);
  for (Index i = 0; i < data.size(); ++i) {
    const auto g = static_cast<std::size_t>(data.group_of(i));
    ++m.group_counts[g];
    hits[g] += predictions[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(i)];
  }
  m.group_accuracy.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    if (m.group_counts[g] == 0) {
      throw ArgumentError("metrics: group " + std::to_string(g) + " (y=" +
                          std::to_string(g / static_cast<std::size_t>(data.num_attributes)) + ", a=" +
                          std::to_string(g % static_cast<std::size_t>(data.num_attributes)) + ") has no samples");
    }
    m.group_accuracy[g] = static_cast<double>(hits[g]) / static_cast<double>(m.group_counts[g]);
  }
  m.average = std::accumulate(m.group_accuracy.begin(), m.group_accuracy.end(), 0.0) / static_cast<double>(groups);
  m.worst = *std::min_element(m.group_accuracy.begin(), m.group_accuracy.end());
  return m;
}

EvalResult evaluate_predictions(const std::vector<int>& predictions, const GroupedDataset& data) {
  EvalResult r;
  r.accuracy = accuracy(predictions, data.labels);
  r.samples = data.size();
  const auto counts = data.group_counts();
  if (std::all_of(counts.begin(), counts.end(), [](Index c) { return c > 0; })) {
    r.groups = group_metrics(predictions, data);
  }
  return r;
}

template <typename Scalar>
std::vector<int> predict(Network<Scalar>& net, const GroupedDataset& data, Index batch_size) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  for (Index start = 0; start < data.size(); start += batch_size) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto logits = net.forward(data.batch_inputs<Scalar>(idx), false).logits;
    const auto p = ops::argmax_rows(logits);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void save_predictions(const std::string& path, const std::vector<int>& predictions) {
  std::ofstream out(path);
  if (!out) throw IoError("predictions: cannot write '" + path + "'");
  for (int p : predictions) out << p << '\n';
  if (!out) throw IoError("predictions: write to '" + path + "' failed");
}

std::vector<int> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("predictions: cannot open '" + path + "'");
  std::vector<int> out;
  int p;
  while (in >> p) out.push_back(p);
  if (!in.eof()) throw IoError("predictions: '" + path + "' holds a non-integer entry");
  return out;
}

template std::vector<int> predict(Network<float>&, const GroupedDataset&, Index);
template std::vector<int> predict(Network<double>&, const GroupedDataset&, Index);

}  // namespace ule
