#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ule/dataset.hpp"
#include "ule/network.hpp"

namespace ule {

struct GroupMetrics {
  std::vector<double> group_accuracy;  // indexed by group id y * |a| + a
  std::vector<Index> group_counts;
  double average = 0.0;  // unweighted mean over groups
  double worst = 0.0;    // worst-group accuracy
};

/// Overall accuracy plus group metrics when every group has samples.
struct EvalResult {
  double accuracy = 0.0;
  Index samples = 0;
  std::optional<GroupMetrics> groups;
};

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Per-group accuracy, its unweighted mean and its minimum. Throws
/// ArgumentError when a group has no samples.
GroupMetrics group_metrics(const std::vector<int>& predictions, const GroupedDataset& data);

EvalResult evaluate_predictions(const std::vector<int>& predictions, const GroupedDataset& data);

/// Evaluation-mode argmax predictions for every sample, in order.
template <typename Scalar>
std::vector<int> predict(Network<Scalar>& net, const GroupedDataset& data, Index batch_size = 250);

template <typename Scalar>
GroupMetrics evaluate_groups(Network<Scalar>& net, const GroupedDataset& data, Index batch_size = 250) {
  return group_metrics(predict(net, data, batch_size), data);
}

/// One prediction per line.
void save_predictions(const std::string& path, const std::vector<int>& predictions);
std::vector<int> load_predictions(const std::string& path);

}  // namespace ule
