#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ule/engine.hpp"

namespace ule {

/// Sectioned key/value text:
///
///   # comment
///   [section]
///   key = value
///
/// Keys before the first section header belong to the unnamed section "".
/// Section and key order is preserved; a repeated key within a section is an error.
class ConfigFile {
 public:
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
    bool operator==(const Section&) const = default;
  };

  static ConfigFile parse(const std::string& text, const std::string& origin = "<config>");
  static ConfigFile load(const std::string& path);

  std::string serialize() const;
  void save(const std::string& path) const;

  bool has(const std::string& section, const std::string& key) const;
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  /// Overwrites an existing key in place or appends it (creating the section).
  void set(const std::string& section, const std::string& key, const std::string& value);

  const std::vector<Section>& sections() const { return sections_; }
  const Section* section(const std::string& name) const;

  bool operator==(const ConfigFile&) const = default;

 private:
  std::vector<Section> sections_;
};

enum class Method { erm, ule };
std::string to_string(Method method);
Method parse_method(const std::string& text);

/// Grid searched by `run_sweep`. Every combination (lambda, lr, weight decay)
/// is one cell, trained `repeats` times with distinct seeds.
struct SweepSpec {
  std::vector<double> lambdas;
  std::vector<double> lrs;
  std::vector<double> weight_decays;
  int repeats = 5;
  int workers = 1;
  std::uint64_t seed = 0;

  static SweepSpec defaults();
  void validate() const;
};

struct ExperimentConfig {
  // [data]
  std::string train_path;
  std::string val_path;   // sweep selection split
  std::string test_path;  // sweep re-evaluation split
  // [eval]: split name -> dataset path, evaluated at every evaluation point
  std::vector<std::pair<std::string, std::string>> eval_splits;

  // [model]
  std::string student_arch = "poc_cnn:1";
  std::string teacher_arch;  // empty: same as the student
  std::string tap;           // empty: architecture default
  bool last_layer_only = false;
  bool double_precision = false;

  // [train]
  Method method = Method::ule;
  TrainConfig train;
  std::uint64_t student_seed = 1;
  std::uint64_t teacher_seed = 0;
  std::uint64_t shuffle_seed = 0;

  // [sweep]
  SweepSpec sweep = SweepSpec::defaults();

  // [output]
  std::string out_dir = "runs";

  /// Unknown sections or keys and malformed values raise ArgumentError.
  static ExperimentConfig from_file(const ConfigFile& file);
  static ExperimentConfig load(const std::string& path);
  ConfigFile to_file() const;
};

}  // namespace ule
