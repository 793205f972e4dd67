#include "ule/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "ule/error.hpp"

namespace ule {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + format_double(values[i]);
  return out;
}

std::string where(const std::string& section, const std::string& key) { return "config [" + section + "] " + key; }

double to_double(const std::string& section, const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ArgumentError(where(section, key) + ": '" + text + "' is not a number");
  }
  return v;
}

long long to_int(const std::string& section, const std::string& key, const std::string& text) {
  long long v = 0;
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ArgumentError(where(section, key) + ": '" + text + "' is not an integer");
  }
  return v;
}

std::uint64_t to_seed(const std::string& section, const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ArgumentError(where(section, key) + ": '" + text + "' is not an unsigned integer");
  }
  return v;
}

bool to_bool(const std::string& section, const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ArgumentError(where(section, key) + ": expected true or false, got '" + text + "'");
}

std::vector<double> to_list(const std::string& section, const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(section, key, item));
  if (out.empty()) throw ArgumentError(where(section, key) + ": empty list");
  return out;
}

template <typename F>
auto wrap(const std::string& section, const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ArgumentError& e) {
    throw ArgumentError(where(section, key) + ": " + e.what());
  }
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  std::stringstream ss(text);
  std::string raw;
  std::string current;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ArgumentError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header '" + line + "'");
      current = trim(line.substr(1, line.size() - 2));
      if (!valid_name(current)) fail("bad section name '" + current + "'");
      if (cfg.section(current)) fail("section [" + current + "] appears twice");
      cfg.sections_.push_back({current, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!valid_name(key)) fail("bad key '" + key + "'");
    if (cfg.has(current, key)) fail("key '" + key + "' repeated in section [" + current + "]");
    cfg.set(current, key, value);
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

std::string ConfigFile::serialize() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : sections_) {
    if (!s.name.empty()) {
      os << (first ? "" : "\n") << '[' << s.name << "]\n";
    }
    for (const auto& [k, v] : s.entries) os << k << " = " << v << '\n';
    first = false;
  }
  return os.str();
}

void ConfigFile::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot write '" + path + "'");
  out << serialize();
  if (!out) throw IoError("config: write to '" + path + "' failed");
}

const ConfigFile::Section* ConfigFile::section(const std::string& name) const {
  for (const auto& s : sections_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

bool ConfigFile::has(const std::string& section, const std::string& key) const { return get(section, key).has_value(); }

std::optional<std::string> ConfigFile::get(const std::string& section, const std::string& key) const {
  if (const auto* s = this->section(section)) {
    for (const auto& [k, v] : s->entries) {
      if (k == key) return v;
    }
  }
  return std::nullopt;
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
  if (value.find('\n') != std::string::npos) throw ArgumentError("config: value of '" + key + "' spans lines");
  auto it = std::find_if(sections_.begin(), sections_.end(), [&](const Section& s) { return s.name == section; });
  if (it == sections_.end()) {
    // The unnamed section must stay first so that it serializes without a header.
    it = section.empty() ? sections_.insert(sections_.begin(), Section{"", {}})
                         : sections_.insert(sections_.end(), Section{section, {}});
  }
  for (auto& [k, v] : it->entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  it->entries.emplace_back(key, value);
}

std::string to_string(Method method) { return method == Method::erm ? "erm" : "ule"; }

Method parse_method(const std::string& text) {
  if (text == "erm") return Method::erm;
  if (text == "ule") return Method::ule;
  throw ArgumentError("unknown method '" + text + "' (expected erm or ule)");
}

SweepSpec SweepSpec::defaults() {
  SweepSpec s;
  for (int i = 0; i <= 10; ++i) s.lambdas.push_back(i / 10.0);
  s.lrs = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5};
  s.weight_decays = {1e-4, 1.0};
  return s;
}

void SweepSpec::validate() const {
  if (lambdas.empty() || lrs.empty() || weight_decays.empty()) throw ArgumentError("sweep: every grid must be nonempty");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ArgumentError("sweep: lambda " + format_double(l) + " outside [0, 1]");
  }
  for (double lr : lrs) {
    if (!(lr > 0.0)) throw ArgumentError("sweep: learning rate must be positive");
  }
  for (double wd : weight_decays) {
    if (!(wd >= 0.0)) throw ArgumentError("sweep: weight decay must be non-negative");
  }
  if (repeats < 1) throw ArgumentError("sweep: repeats must be at least 1");
  if (workers < 1) throw ArgumentError("sweep: workers must be at least 1");
}

ExperimentConfig ExperimentConfig::from_file(const ConfigFile& file) {
  ExperimentConfig c;
  static const std::set<std::string> known{"data", "eval", "model", "train", "sweep", "output"};
  for (const auto& s : file.sections()) {
    if (!known.count(s.name)) throw ArgumentError("config: unknown section [" + s.name + "]");
    for (const auto& [key, value] : s.entries) {
      const auto& sec = s.name;
      auto unknown = [&] { throw ArgumentError("config: unknown key '" + key + "' in [" + sec + "]"); };
      if (sec == "eval") {
        c.eval_splits.emplace_back(key, value);
      } else if (sec == "data") {
        if (key == "train") c.train_path = value;
        else if (key == "val") c.val_path = value;
        else if (key == "test") c.test_path = value;
        else unknown();
      } else if (sec == "model") {
        if (key == "student") c.student_arch = value;
        else if (key == "teacher") c.teacher_arch = value;
        else if (key == "tap") c.tap = value;
        else if (key == "last_layer_only") c.last_layer_only = to_bool(sec, key, value);
        else if (key == "precision") {
          if (value != "f32" && value != "f64") throw ArgumentError(where(sec, key) + ": expected f32 or f64");
          c.double_precision = value == "f64";
        } else unknown();
      } else if (sec == "train") {
        auto& t = c.train;
        if (key == "method") c.method = wrap(sec, key, [&] { return parse_method(value); });
        else if (key == "epochs") t.epochs = static_cast<int>(to_int(sec, key, value));
        else if (key == "batch_size") t.batch_size = to_int(sec, key, value);
        else if (key == "optimizer") {
          if (value != "adam" && value != "sgd") throw ArgumentError(where(sec, key) + ": expected adam or sgd");
          t.optimizer.kind = value == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
        } else if (key == "lr") t.optimizer.lr = to_double(sec, key, value);
        else if (key == "momentum") t.optimizer.momentum = to_double(sec, key, value);
        else if (key == "weight_decay") t.optimizer.weight_decay = to_double(sec, key, value);
        else if (key == "lambda") t.lambda = to_double(sec, key, value);
        else if (key == "distance") t.distance = wrap(sec, key, [&] { return parse_distance(value); });
        else if (key == "saliency") t.mode = wrap(sec, key, [&] { return parse_saliency_mode(value); });
        else if (key == "scalarization") t.scalarization = wrap(sec, key, [&] { return parse_scalarization(value); });
        else if (key == "ema_decay") t.ema_decay = to_double(sec, key, value);
        else if (key == "balance_erm") t.balance_erm = to_bool(sec, key, value);
        else if (key == "eval_every") t.eval_every = static_cast<int>(to_int(sec, key, value));
        else if (key == "max_steps") t.max_steps = to_int(sec, key, value);
        else if (key == "student_seed") c.student_seed = to_seed(sec, key, value);
        else if (key == "teacher_seed") c.teacher_seed = to_seed(sec, key, value);
        else if (key == "shuffle_seed") c.shuffle_seed = to_seed(sec, key, value);
        else unknown();
      } else if (sec == "sweep") {
        auto& w = c.sweep;
        if (key == "lambdas") w.lambdas = to_list(sec, key, value);
        else if (key == "lrs") w.lrs = to_list(sec, key, value);
        else if (key == "weight_decays") w.weight_decays = to_list(sec, key, value);
        else if (key == "repeats") w.repeats = static_cast<int>(to_int(sec, key, value));
        else if (key == "workers") w.workers = static_cast<int>(to_int(sec, key, value));
        else if (key == "seed") w.seed = to_seed(sec, key, value);
        else unknown();
      } else if (sec == "output") {
        if (key == "dir") c.out_dir = value;
        else unknown();
      }
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return from_file(ConfigFile::load(path)); }

ConfigFile ExperimentConfig::to_file() const {
  ConfigFile f;
  if (!train_path.empty()) f.set("data", "train", train_path);
  if (!val_path.empty()) f.set("data", "val", val_path);
  if (!test_path.empty()) f.set("data", "test", test_path);
  for (const auto& [name, path] : eval_splits) f.set("eval", name, path);

  f.set("model", "student", student_arch);
  if (!teacher_arch.empty()) f.set("model", "teacher", teacher_arch);
  if (!tap.empty()) f.set("model", "tap", tap);
  f.set("model", "last_layer_only", last_layer_only ? "true" : "false");
  f.set("model", "precision", double_precision ? "f64" : "f32");

  const auto& t = train;
  f.set("train", "method", to_string(method));
  f.set("train", "epochs", std::to_string(t.epochs));
  f.set("train", "batch_size", std::to_string(t.batch_size));
  f.set("train", "optimizer", t.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd");
  f.set("train", "lr", format_double(t.optimizer.lr));
  f.set("train", "momentum", format_double(t.optimizer.momentum));
  f.set("train", "weight_decay", format_double(t.optimizer.weight_decay));
  f.set("train", "lambda", format_double(t.lambda));
  f.set("train", "distance", to_string(t.distance));
  f.set("train", "saliency", to_string(t.mode));
  f.set("train", "scalarization", to_string(t.scalarization));
  f.set("train", "ema_decay", format_double(t.ema_decay));
  f.set("train", "balance_erm", t.balance_erm ? "true" : "false");
  f.set("train", "eval_every", std::to_string(t.eval_every));
  f.set("train", "max_steps", std::to_string(t.max_steps));
  f.set("train", "student_seed", std::to_string(student_seed));
  f.set("train", "teacher_seed", std::to_string(teacher_seed));
  f.set("train", "shuffle_seed", std::to_string(shuffle_seed));

  f.set("sweep", "lambdas", format_list(sweep.lambdas));
  f.set("sweep", "lrs", format_list(sweep.lrs));
  f.set("sweep", "weight_decays", format_list(sweep.weight_decays));
  f.set("sweep", "repeats", std::to_string(sweep.repeats));
  f.set("sweep", "workers", std::to_string(sweep.workers));
  f.set("sweep", "seed", std::to_string(sweep.seed));

  f.set("output", "dir", out_dir);
  return f;
}

}  // namespace ule
