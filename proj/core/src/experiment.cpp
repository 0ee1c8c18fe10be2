#include "sdprune/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "sdprune/binary_io.hpp"
#include "sdprune/error.hpp"

namespace sdprune {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class Seq, class F>
std::string join(const Seq& seq, const char* sep, F&& f) {
  std::string out;
  for (const auto& v : seq) {
    if (!out.empty()) out += sep;
    out += f(v);
  }
  return out;
}

class ConfigReader {
 public:
  ConfigReader(std::string source, std::size_t line, std::string key,
               std::string value)
      : source_(std::move(source)),
        line_(line),
        key_(std::move(key)),
        value_(std::move(value)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(source_ + ":" + std::to_string(line_) + ": " + key_ +
                      ": " + what + " (got \"" + value_ + "\")");
  }

  double real(std::string_view text) const {
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() ||
        text.empty()) {
      fail("expected a number");
    }
    return v;
  }
  double real() const { return real(value_); }

  std::uint64_t unsigned_int(std::string_view text) const {
    std::uint64_t v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() ||
        text.empty()) {
      fail("expected a non-negative integer");
    }
    return v;
  }
  std::uint64_t unsigned_int() const { return unsigned_int(value_); }
  std::size_t size() const { return static_cast<std::size_t>(unsigned_int()); }

  bool boolean() const {
    if (value_ == "true") return true;
    if (value_ == "false") return false;
    fail("expected true or false");
  }

  std::vector<double> reals() const {
    std::vector<double> out;
    for (const auto& item : split(value_, ',')) out.push_back(real(item));
    return out;
  }

  std::vector<std::uint64_t> unsigned_ints() const {
    std::vector<std::uint64_t> out;
    for (const auto& item : split(value_, ',')) out.push_back(unsigned_int(item));
    return out;
  }

  Shape shape() const {
    Shape out;
    for (const auto& item : split(value_, 'x')) {
      const auto v = unsigned_int(item);
      if (v == 0) fail("shape extents must be positive");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  const std::string& text() const { return value_; }

 private:
  std::string source_;
  std::size_t line_;
  std::string key_;
  std::string value_;
};

void read_distill(DistillConfig& d, const std::string& key,
                  const ConfigReader& r) {
  if (key == "temperature") {
    d.temperature = r.real();
  } else if (key == "alpha") {
    d.alpha = r.real();
  } else if (key == "beta") {
    d.beta = r.real();
  } else if (key == "epsilon") {
    d.epsilon = r.real();
  } else {
    r.fail("unknown key");
  }
}

void write_distill(std::ostringstream& os, const char* section,
                   const DistillConfig& d) {
  os << "[" << section << "]\n"
     << "temperature = " << fmt(d.temperature) << "\n"
     << "alpha = " << fmt(d.alpha) << "\n"
     << "beta = " << fmt(d.beta) << "\n"
     << "epsilon = " << fmt(d.epsilon) << "\n";
}

std::string shape_text(const Shape& s) {
  return join(s, "x", [](std::size_t v) { return std::to_string(v); });
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void require_artifact(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) {
    throw MissingArtifactError("missing artifact " + path.string() +
                               " (produce it with `sdprune " + producer + "`)");
  }
}

std::uint64_t file_hash(const fs::path& path) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : io::read_file(path)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

OptimizerConfig with_epochs(OptimizerConfig opt, std::size_t epochs) {
  opt.max_epochs = epochs;
  return opt;
}

DatasetSplits converted(DatasetSplits s, Precision precision) {
  return {s.train.to(precision), s.val.to(precision), s.test.to(precision)};
}

MetricsCallback metrics_sink(MetricsWriter& writer, const std::string& run_id) {
  if (!writer.enabled()) return {};
  return [&writer, run_id](const EpochMetrics& m) { writer.write(run_id, m); };
}

std::string kd_method(double temperature) { return "ours-kd-T" + fmt(temperature); }

std::string cell_id(std::uint64_t seed, double p, const std::string& method) {
  return "s" + std::to_string(seed) + "-p" + fmt(p) + "-" + method;
}

// (D - k) / D from the mask counts.
double mask_sparsity(const PruneMask& mask) {
  const std::size_t d = mask.total();
  return d == 0 ? 0.0
                : static_cast<double>(d - mask.ones()) / static_cast<double>(d);
}

void fill_mask_fields(RunRecord& r, const PruneMask& mask) {
  r.retained = mask.ones();
  r.prunable = mask.total();
  r.achieved_sparsity = mask_sparsity(mask);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.kind != "synthetic" && dataset.kind != "idx" &&
      dataset.kind != "csv") {
    throw ConfigError("dataset kind must be synthetic, idx or csv, got \"" +
                      dataset.kind + "\"");
  }
  if (dataset.classes < 2) throw ConfigError("dataset needs at least 2 classes");
  if (dataset.per_class < 1) throw ConfigError("per_class must be >= 1");
  if (!(dataset.separation > 0.0)) throw ConfigError("separation must be > 0");
  if (!(dataset.val_fraction > 0.0 && dataset.val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0, 1)");
  }
  if (dataset.kind == "idx" &&
      (dataset.train_images.empty() || dataset.train_labels.empty() ||
       dataset.test_images.empty() || dataset.test_labels.empty())) {
    throw ConfigError(
        "idx datasets need train_images, train_labels, test_images and "
        "test_labels");
  }
  if (dataset.kind == "csv" &&
      (dataset.train_csv.empty() || dataset.test_csv.empty())) {
    throw ConfigError("csv datasets need train_csv and test_csv");
  }
  const auto& archs = registered_architectures();
  for (const auto* name : {&teacher_arch, &student_arch}) {
    if (std::find(archs.begin(), archs.end(), *name) == archs.end()) {
      throw ConfigError("unknown architecture \"" + *name + "\"");
    }
  }
  finetune.validate();
  score.validate();
  retrain.validate();
  if (retrain_temperatures.empty()) {
    throw ConfigError("retrain temperatures must not be empty");
  }
  for (double t : retrain_temperatures) {
    DistillConfig d = retrain;
    d.temperature = t;
    d.validate();
  }
  if (sparsities.empty()) throw ConfigError("sparsities must not be empty");
  for (double p : sparsities) {
    if (!(p >= 0.0 && p < 1.0)) {
      throw ConfigError("sparsity must lie in [0, 1), got " + fmt(p));
    }
  }
  if (!(gamma >= 0.0 && gamma < 1.0)) {
    throw ConfigError("gamma must lie in [0, 1), got " + fmt(gamma));
  }
  if (score_epochs == 0) throw ConfigError("score_epochs must be >= 1");
  optimizer.validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  const std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ConfigError("seeds must be distinct");
  if (iterative_cycles == 0) throw ConfigError("iterative_cycles must be >= 1");
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  ExperimentConfig c;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) {
      raw = raw.substr(0, hash);
    }
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(source + ":" + std::to_string(line_no) +
                          ": malformed section header \"" + line + "\"");
      }
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      static const std::set<std::string> known{
          "dataset",       "models",          "distill.finetune",
          "distill.score", "distill.retrain", "prune",
          "optim",         "run"};
      if (!known.count(section)) {
        throw ConfigError(source + ":" + std::to_string(line_no) +
                          ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": expected key = value, got \"" + line + "\"");
    }
    if (section.empty()) {
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": key outside of any section");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const ConfigReader r(source, line_no, section + "." + key,
                         trim(std::string_view(line).substr(eq + 1)));
    auto& d = c.dataset;
    if (section == "dataset") {
      if (key == "kind") d.kind = r.text();
      else if (key == "classes") d.classes = static_cast<int>(r.unsigned_int());
      else if (key == "per_class") d.per_class = r.size();
      else if (key == "shape") d.sample_shape = r.shape();
      else if (key == "separation") d.separation = r.real();
      else if (key == "seed") d.seed = r.unsigned_int();
      else if (key == "train_images") d.train_images = r.text();
      else if (key == "train_labels") d.train_labels = r.text();
      else if (key == "test_images") d.test_images = r.text();
      else if (key == "test_labels") d.test_labels = r.text();
      else if (key == "train_csv") d.train_csv = r.text();
      else if (key == "test_csv") d.test_csv = r.text();
      else if (key == "csv_header") d.csv_header = r.boolean();
      else if (key == "val_fraction") d.val_fraction = r.real();
      else r.fail("unknown key");
    } else if (section == "models") {
      if (key == "teacher") c.teacher_arch = r.text();
      else if (key == "student") c.student_arch = r.text();
      else r.fail("unknown key");
    } else if (section == "distill.finetune") {
      read_distill(c.finetune, key, r);
    } else if (section == "distill.score") {
      read_distill(c.score, key, r);
    } else if (section == "distill.retrain") {
      if (key == "temperatures") c.retrain_temperatures = r.reals();
      else read_distill(c.retrain, key, r);
    } else if (section == "prune") {
      if (key == "sparsities") c.sparsities = r.reals();
      else if (key == "gamma") c.gamma = r.real();
      else if (key == "score_epochs") c.score_epochs = r.size();
      else if (key == "lth_warmup_epochs") c.lth_warmup_epochs = r.size();
      else r.fail("unknown key");
    } else if (section == "optim") {
      auto& o = c.optimizer;
      if (key == "learning_rate") o.learning_rate = r.real();
      else if (key == "min_learning_rate") o.min_learning_rate = r.real();
      else if (key == "momentum") o.momentum = r.real();
      else if (key == "batch_size") o.batch_size = r.size();
      else if (key == "patience") o.patience = r.size();
      else if (key == "early_stopping") o.early_stopping = r.boolean();
      else if (key == "teacher_epochs") c.teacher_epochs = r.size();
      else if (key == "student_epochs") c.student_epochs = r.size();
      else if (key == "retrain_epochs") o.max_epochs = r.size();
      else r.fail("unknown key");
    } else if (section == "run") {
      if (key == "seeds") c.seeds = r.unsigned_ints();
      else if (key == "output") c.output_dir = r.text();
      else if (key == "precision") {
        const auto bits = r.unsigned_int();
        if (bits == 32) c.precision = Precision::F32;
        else if (bits == 64) c.precision = Precision::F64;
        else r.fail("precision must be 32 or 64");
      } else if (key == "latency_baseline") c.latency_baseline = r.boolean();
      else if (key == "iterative_cycles") c.iterative_cycles = r.size();
      else r.fail("unknown key");
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) {
    throw ConfigError("config file " + path.string() + " does not exist");
  }
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  const auto& d = c.dataset;
  os << "[dataset]\n"
     << "kind = " << d.kind << "\n"
     << "classes = " << d.classes << "\n"
     << "per_class = " << d.per_class << "\n"
     << "shape = " << shape_text(d.sample_shape) << "\n"
     << "separation = " << fmt(d.separation) << "\n"
     << "seed = " << d.seed << "\n";
  const std::pair<const char*, const std::string*> paths[] = {
      {"train_images", &d.train_images}, {"train_labels", &d.train_labels},
      {"test_images", &d.test_images},   {"test_labels", &d.test_labels},
      {"train_csv", &d.train_csv},       {"test_csv", &d.test_csv}};
  for (const auto& [key, value] : paths) {
    if (!value->empty()) os << key << " = " << *value << "\n";
  }
  os << "csv_header = " << (d.csv_header ? "true" : "false") << "\n"
     << "val_fraction = " << fmt(d.val_fraction) << "\n\n"
     << "[models]\n"
     << "teacher = " << c.teacher_arch << "\n"
     << "student = " << c.student_arch << "\n\n";
  write_distill(os, "distill.finetune", c.finetune);
  os << "\n";
  write_distill(os, "distill.score", c.score);
  os << "\n";
  write_distill(os, "distill.retrain", c.retrain);
  os << "temperatures = " << join(c.retrain_temperatures, ", ", fmt) << "\n\n"
     << "[prune]\n"
     << "sparsities = " << join(c.sparsities, ", ", fmt) << "\n"
     << "gamma = " << fmt(c.gamma) << "\n"
     << "score_epochs = " << c.score_epochs << "\n"
     << "lth_warmup_epochs = " << c.lth_warmup_epochs << "\n\n";
  const auto& o = c.optimizer;
  os << "[optim]\n"
     << "learning_rate = " << fmt(o.learning_rate) << "\n"
     << "min_learning_rate = " << fmt(o.min_learning_rate) << "\n"
     << "momentum = " << fmt(o.momentum) << "\n"
     << "batch_size = " << o.batch_size << "\n"
     << "patience = " << o.patience << "\n"
     << "early_stopping = " << (o.early_stopping ? "true" : "false") << "\n"
     << "teacher_epochs = " << c.teacher_epochs << "\n"
     << "student_epochs = " << c.student_epochs << "\n"
     << "retrain_epochs = " << o.max_epochs << "\n\n"
     << "[run]\n"
     << "seeds = "
     << join(c.seeds, ", ", [](std::uint64_t s) { return std::to_string(s); })
     << "\n"
     << "output = " << c.output_dir << "\n"
     << "precision = " << (c.precision == Precision::F64 ? 64 : 32) << "\n"
     << "latency_baseline = " << (c.latency_baseline ? "true" : "false") << "\n"
     << "iterative_cycles = " << c.iterative_cycles << "\n";
  return os.str();
}

DatasetSplits load_dataset(const DatasetConfig& d) {
  if (d.kind == "synthetic") {
    return make_synthetic({d.classes, d.per_class, d.sample_shape,
                           d.separation, d.seed});
  }
  Dataset train, test;
  if (d.kind == "idx") {
    train = load_idx(d.train_images, d.train_labels, d.classes);
    test = load_idx(d.test_images, d.test_labels, d.classes);
  } else if (d.kind == "csv") {
    train = load_csv(d.train_csv, d.sample_shape, d.csv_header, d.classes);
    test = load_csv(d.test_csv, d.sample_shape, d.csv_header, d.classes);
  } else {
    throw ConfigError("unknown dataset kind \"" + d.kind + "\"");
  }
  auto [fit, val] = holdout_split(train, d.val_fraction, d.seed);
  test.split = Split::Test;
  return {std::move(fit), std::move(val), std::move(test)};
}

void write_manifest(const DatasetConfig& d, const DatasetSplits& s,
                    const fs::path& path) {
  std::ostringstream os;
  os << "kind = " << d.kind << "\n"
     << "split_seed = " << d.seed << "\n"
     << "classes = " << s.train.class_count << "\n"
     << "sample_shape = " << shape_text(s.train.sample_shape()) << "\n";
  if (d.kind == "synthetic") {
    os << "per_class = " << d.per_class << "\n"
       << "separation = " << fmt(d.separation) << "\n"
       << "split_rule = stratified 80/10/10 per class\n";
  } else {
    os << "val_fraction = " << fmt(d.val_fraction) << "\n"
       << "split_rule = seeded holdout of the training file\n";
  }
  for (const Dataset* part : {&s.train, &s.val, &s.test}) {
    os << split_name(part->split) << "_size = " << part->size() << "\n";
    os << split_name(part->split) << "_fingerprint = "
       << fingerprint({{"inputs", part->inputs}}) << "\n";
  }
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream(path) << os.str();
}

ModelConfig teacher_model_config(const ExperimentConfig& cfg,
                                 const DatasetSplits& data) {
  return {cfg.teacher_arch, data.train.sample_shape(), data.train.class_count,
          cfg.precision};
}

ModelConfig student_model_config(const ExperimentConfig& cfg,
                                 const DatasetSplits& data) {
  return {cfg.student_arch, data.train.sample_shape(), data.train.class_count,
          cfg.precision};
}

std::uint64_t teacher_seed(std::uint64_t seed) { return mix64(seed * 4 + 1); }
std::uint64_t student_seed(std::uint64_t seed) { return mix64(seed * 4 + 2); }
std::uint64_t shuffle_seed(std::uint64_t seed, std::string_view phase) {
  std::uint64_t h = mix64(seed * 4 + 3);
  for (char ch : phase) h = mix64(h ^ static_cast<std::uint8_t>(ch));
  return h;
}

MetricsWriter::MetricsWriter(const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw Error("cannot open " + path.string() + " for writing");
  if (fresh) out_ << header() << "\n";
}

const char* MetricsWriter::header() {
  return "run_id,phase,epoch,train_loss,val_loss,val_acc,sparsity,wall_clock_s";
}

void MetricsWriter::write(const std::string& run_id, const EpochMetrics& m) {
  if (!out_.is_open()) return;
  out_ << run_id << "," << m.phase << "," << m.epoch << "," << fmt(m.train_loss)
       << "," << fmt(m.val_loss) << "," << fmt(m.val_acc) << ","
       << fmt(m.sparsity) << "," << fmt(m.wall_clock_s) << "\n";
  out_.flush();
}

const char* run_record_header() {
  return "run_id,method,seed,target_sparsity,achieved_sparsity,retained,"
         "prunable,accuracy,retrain_epochs,phase_seconds,total_seconds";
}

std::string run_record_row(const RunRecord& r) {
  std::ostringstream os;
  os << r.run_id << "," << r.method << "," << r.seed << ","
     << fmt(r.target_sparsity) << "," << fmt(r.achieved_sparsity) << ","
     << r.retained << "," << r.prunable << "," << fmt(r.accuracy) << ","
     << r.retrain_epochs << ","
     << join(r.phase_seconds, ";",
             [](const auto& kv) { return kv.first + "=" + fmt(kv.second); })
     << "," << fmt(r.total_seconds);
  return os.str();
}

void append_run_records(const fs::path& path,
                        const std::vector<RunRecord>& records) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  if (fresh) out << run_record_header() << "\n";
  for (const auto& r : records) out << run_record_row(r) << "\n";
}

std::vector<RunRecord> read_run_records(const fs::path& path) {
  require_artifact(path, "retrain");
  std::ifstream in(path);
  std::string line;
  std::vector<RunRecord> out;
  std::size_t row = 0;
  auto bad = [&](const std::string& what) -> FormatError {
    return FormatError(path.string() + ": row " + std::to_string(row) + ": " +
                       what);
  };
  auto number = [&](const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw bad("expected a number, got \"" + s + "\"");
    }
    return v;
  };
  auto integer = [&](const std::string& s) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw bad("expected an integer, got \"" + s + "\"");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++row;
    if (row == 1) {
      if (line != run_record_header()) throw bad("unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 11) throw bad("expected 11 fields");
    RunRecord r;
    r.run_id = f[0];
    r.method = f[1];
    r.seed = integer(f[2]);
    r.target_sparsity = number(f[3]);
    r.achieved_sparsity = number(f[4]);
    r.retained = integer(f[5]);
    r.prunable = integer(f[6]);
    r.accuracy = number(f[7]);
    r.retrain_epochs = integer(f[8]);
    if (!f[9].empty()) {
      for (const auto& kv : split(f[9], ';')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw bad("malformed phase entry");
        r.phase_seconds[kv.substr(0, eq)] = number(kv.substr(eq + 1));
      }
    }
    r.total_seconds = number(f[10]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<const RunRecord*> ComparisonReport::find(std::string_view method,
                                                     double sparsity) const {
  std::vector<const RunRecord*> out;
  for (const auto& r : records) {
    if (r.method == method && r.target_sparsity == sparsity) out.push_back(&r);
  }
  return out;
}

double ComparisonReport::mean_accuracy(std::string_view method,
                                       double sparsity) const {
  const auto rows = find(method, sparsity);
  if (rows.empty()) {
    throw ContractError("no records for " + std::string(method) + " at p=" +
                        fmt(sparsity));
  }
  double sum = 0.0;
  for (const auto* r : rows) sum += r->accuracy;
  return sum / static_cast<double>(rows.size());
}

std::string ComparisonReport::summary() const {
  std::ostringstream os;
  os << std::fixed;
  if (!seeds.empty()) {
    os << "Dense models\n"
       << "  seed  teacher_acc  student_acc  teacher_params  student_params\n";
    for (const auto& s : seeds) {
      os << "  " << std::setw(4) << s.seed << "  " << std::setprecision(4)
         << std::setw(11) << s.teacher_accuracy << "  " << std::setw(11)
         << s.student_accuracy << "  " << std::setw(14) << s.teacher_params
         << "  " << std::setw(14) << s.student_params << "\n";
    }
    os << "\n";
  }

  std::vector<std::string> methods;
  std::vector<double> ps;
  for (const auto& r : records) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
      methods.push_back(r.method);
    }
    if (std::find(ps.begin(), ps.end(), r.target_sparsity) == ps.end()) {
      ps.push_back(r.target_sparsity);
    }
  }
  os << "Accuracy (mean [min, max] across seeds)\n"
     << "  " << std::left << std::setw(20) << "method" << std::right
     << std::setw(9) << "p" << std::setw(10) << "mean" << std::setw(22)
     << "range" << std::setw(8) << "epochs" << std::setw(4) << "n" << "\n";
  for (double p : ps) {
    for (const auto& m : methods) {
      const auto rows = find(m, p);
      if (rows.empty()) continue;
      double lo = 1.0, hi = 0.0, sum = 0.0, epochs = 0.0;
      for (const auto* r : rows) {
        lo = std::min(lo, r->accuracy);
        hi = std::max(hi, r->accuracy);
        sum += r->accuracy;
        epochs += static_cast<double>(r->retrain_epochs);
      }
      const double n = static_cast<double>(rows.size());
      std::ostringstream range;
      range << std::fixed << std::setprecision(4) << "[" << lo << ", " << hi
            << "]";
      os << "  " << std::left << std::setw(20) << m << std::right
         << std::setprecision(4) << std::setw(9) << p << std::setw(10)
         << sum / n << std::setw(22) << range.str() << std::setprecision(1)
         << std::setw(8) << epochs / n << std::setw(4) << rows.size() << "\n";
    }
  }

  os << "\nWall-clock totals per method (seconds)\n";
  for (const auto& m : methods) {
    std::map<std::string, double> phases;
    double total = 0.0;
    for (const auto& r : records) {
      if (r.method != m) continue;
      for (const auto& [k, v] : r.phase_seconds) phases[k] += v;
      total += r.total_seconds;
    }
    os << "  " << std::left << std::setw(20) << m << std::right
       << std::setprecision(2) << std::setw(10) << total << "  ("
       << join(phases, ", ",
               [](const auto& kv) {
                 std::ostringstream e;
                 e << std::fixed << std::setprecision(2) << kv.first << " "
                   << kv.second;
                 return e.str();
               })
       << ")\n";
  }

  if (!latency.empty()) {
    os << "\nOne-shot vs iterative magnitude schedule (wall-clock ratio)\n"
       << "  seed        p  one_shot_s  iterative_s   ratio  one_shot_acc  "
          "iterative_acc\n";
    for (const auto& l : latency) {
      os << "  " << std::setw(4) << l.seed << std::setprecision(4)
         << std::setw(9) << l.sparsity << std::setprecision(2) << std::setw(12)
         << l.one_shot_seconds << std::setw(13) << l.iterative_seconds
         << std::setprecision(3) << std::setw(8) << l.ratio()
         << std::setprecision(4) << std::setw(14) << l.one_shot_accuracy
         << std::setw(15) << l.iterative_accuracy << "\n";
    }
  }
  return os.str();
}

std::vector<std::string> comparison_methods(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (double t : cfg.retrain_temperatures) out.push_back(kd_method(t));
  out.insert(out.end(), {"ours-no-kd", "lth-oneshot", "magnitude-oneshot"});
  return out;
}

namespace {

struct DenseStage {
  Model teacher;
  Model student;
  InitSnapshot student_init;
  SeedSummary summary;
};

DenseStage train_dense(const ExperimentConfig& cfg, std::uint64_t seed,
                       const DatasetSplits& data, MetricsWriter& metrics) {
  DenseStage out;
  const auto start = Clock::now();
  const std::string prefix = "s" + std::to_string(seed);
  auto teacher = build_model(teacher_model_config(cfg, data), teacher_seed(seed));
  auto t = train_supervised(std::move(teacher.model), data.train, data.val,
                            with_epochs(cfg.optimizer, cfg.teacher_epochs),
                            shuffle_seed(seed, "teacher"),
                            metrics_sink(metrics, prefix + "-teacher"));
  out.teacher = std::move(t.model);
  auto student = build_model(student_model_config(cfg, data), student_seed(seed));
  out.student_init = student.snapshot;
  auto s = kd_finetune(std::move(student.model), out.teacher, data.train,
                       data.val, cfg.finetune,
                       with_epochs(cfg.optimizer, cfg.student_epochs),
                       shuffle_seed(seed, "distill"),
                       metrics_sink(metrics, prefix + "-distill"));
  out.student = std::move(s.model);
  out.summary.dense_seconds = seconds_since(start);
  out.summary.seed = seed;
  out.summary.teacher_accuracy = evaluate(out.teacher, data.test);
  out.summary.student_accuracy = evaluate(out.student, data.test);
  out.summary.teacher_epochs = t.epochs_run;
  out.summary.student_epochs = s.epochs_run;
  out.summary.teacher_params = out.teacher.parameter_count();
  out.summary.student_params = out.student.parameter_count();
  return out;
}

ImportanceConfig importance_config(const ExperimentConfig& cfg,
                                   std::uint64_t seed) {
  ImportanceConfig ic;
  ic.distill = cfg.score;
  ic.gamma = cfg.gamma;
  ic.epochs = cfg.score_epochs;
  ic.batch_size = cfg.optimizer.batch_size;
  ic.seed = shuffle_seed(seed, "score");
  return ic;
}

// Iterative magnitude schedule: `cycles` rounds of prune-to-target then a
// fixed retraining budget, with the per-round sparsity growing geometrically
// in the retained fraction and the final round landing exactly on p.
std::pair<double, double> iterative_magnitude(const ExperimentConfig& cfg,
                                              std::uint64_t seed, double p,
                                              const Model& dense,
                                              const DatasetSplits& data,
                                              const OptimizerConfig& opt) {
  const auto start = Clock::now();
  Model current = dense;
  for (std::size_t i = 1; i <= cfg.iterative_cycles; ++i) {
    const double step =
        i == cfg.iterative_cycles
            ? p
            : 1.0 - std::pow(1.0 - p, static_cast<double>(i) /
                                          static_cast<double>(cfg.iterative_cycles));
    const PruneMask mask = make_global_mask(magnitude_scores(current), step);
    apply_mask(current, mask);
    current = retrain_plain(std::move(current), mask, data.train, data.val, opt,
                            shuffle_seed(seed, "iterative"))
                  .model;
  }
  const double seconds = seconds_since(start);
  return {seconds, evaluate(current, data.test)};
}

}  // namespace

ComparisonReport run_comparison(const ExperimentConfig& cfg,
                                const fs::path& out_dir) {
  cfg.validate();
  const DatasetSplits data = converted(load_dataset(cfg.dataset), cfg.precision);
  MetricsWriter metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_manifest(cfg.dataset, data, out_dir / artifacts::kManifest);
    std::ofstream(out_dir / "compare_config.txt") << to_text(cfg);
    metrics = MetricsWriter(out_dir / artifacts::kMetrics);
  }

  ComparisonReport report;
  for (const std::uint64_t seed : cfg.seeds) {
    DenseStage dense = train_dense(cfg, seed, data, metrics);
    report.seeds.push_back(dense.summary);

    auto t0 = Clock::now();
    Model scoring_copy = dense.student;
    const auto importance = compute_importance(dense.teacher, scoring_copy,
                                               data.train,
                                               importance_config(cfg, seed));
    const double score_s = seconds_since(t0);

    t0 = Clock::now();
    auto warm = build_model(student_model_config(cfg, data), student_seed(seed));
    OptimizerConfig warm_opt = with_epochs(cfg.optimizer, cfg.lth_warmup_epochs);
    warm_opt.early_stopping = false;
    const Model warmed =
        train_supervised(std::move(warm.model), data.train, data.val, warm_opt,
                         shuffle_seed(seed, "warmup"),
                         metrics_sink(metrics, "s" + std::to_string(seed) +
                                                   "-lth-warmup"))
            .model;
    const double warmup_s = seconds_since(t0);

    const std::uint64_t retrain_seed = shuffle_seed(seed, "retrain");
    for (const double p : cfg.sparsities) {
      t0 = Clock::now();
      const PruneMask ours_mask = make_global_mask(importance.scores, p);
      Model ours_pruned = dense.student;
      apply_mask(ours_pruned, ours_mask);
      const double ours_prune_s = seconds_since(t0);

      auto finish = [&](RunRecord& r, const TrainResult& tr,
                        Clock::time_point cell_start, double shared_s) {
        const auto e0 = Clock::now();
        r.accuracy = evaluate(tr.model, data.test);
        r.phase_seconds["eval"] = seconds_since(e0);
        r.retrain_epochs = tr.epochs_run;
        r.seed = seed;
        r.target_sparsity = p;
        r.run_id = cell_id(seed, p, r.method);
        r.total_seconds = shared_s + seconds_since(cell_start);
        report.records.push_back(std::move(r));
      };

      for (const double t : cfg.retrain_temperatures) {
        RunRecord r;
        r.method = kd_method(t);
        const auto c0 = Clock::now();
        DistillConfig d = cfg.retrain;
        d.temperature = t;
        auto tr = retrain_kd(ours_pruned, dense.teacher, ours_mask, data.train,
                             data.val, d, cfg.optimizer, retrain_seed,
                             metrics_sink(metrics, cell_id(seed, p, r.method)));
        r.phase_seconds = {{"score", score_s},
                           {"prune", ours_prune_s},
                           {"retrain", tr.seconds}};
        fill_mask_fields(r, ours_mask);
        finish(r, tr, c0, score_s + ours_prune_s);
      }
      {
        RunRecord r;
        r.method = "ours-no-kd";
        const auto c0 = Clock::now();
        auto tr = retrain_plain(ours_pruned, ours_mask, data.train, data.val,
                                cfg.optimizer, retrain_seed,
                                metrics_sink(metrics, cell_id(seed, p, r.method)));
        r.phase_seconds = {{"score", score_s},
                           {"prune", ours_prune_s},
                           {"retrain", tr.seconds}};
        fill_mask_fields(r, ours_mask);
        finish(r, tr, c0, score_s + ours_prune_s);
      }
      {
        RunRecord r;
        r.method = "lth-oneshot";
        const auto c0 = Clock::now();
        const PruneMask mask = make_global_mask(magnitude_scores(warmed), p);
        Model reset = warmed;
        lth_reset(reset, dense.student_init, mask);
        const double prune_s = seconds_since(c0);
        const auto c1 = Clock::now();
        auto tr = retrain_plain(std::move(reset), mask, data.train, data.val,
                                cfg.optimizer, retrain_seed,
                                metrics_sink(metrics, cell_id(seed, p, r.method)));
        r.phase_seconds = {{"warmup", warmup_s},
                           {"prune", prune_s},
                           {"retrain", tr.seconds}};
        fill_mask_fields(r, mask);
        finish(r, tr, c1, warmup_s + prune_s);
      }
      {
        RunRecord r;
        r.method = "magnitude-oneshot";
        const auto c0 = Clock::now();
        const PruneMask mask = make_global_mask(magnitude_scores(dense.student), p);
        Model pruned = dense.student;
        apply_mask(pruned, mask);
        const double prune_s = seconds_since(c0);
        const auto c1 = Clock::now();
        auto tr = retrain_plain(std::move(pruned), mask, data.train, data.val,
                                cfg.optimizer, retrain_seed,
                                metrics_sink(metrics, cell_id(seed, p, r.method)));
        r.phase_seconds = {{"prune", prune_s}, {"retrain", tr.seconds}};
        fill_mask_fields(r, mask);
        finish(r, tr, c1, prune_s);
      }

      if (cfg.latency_baseline && p > 0.0) {
        // Both schedules run their full epoch budget.
        OptimizerConfig fixed = cfg.optimizer;
        fixed.early_stopping = false;
        LatencyRecord l;
        l.seed = seed;
        l.sparsity = p;
        l.retrain_epochs_per_cycle = fixed.max_epochs;

        const auto c0 = Clock::now();
        Model student = dense.student;
        const auto scores = compute_importance(dense.teacher, student, data.train,
                                               importance_config(cfg, seed));
        const PruneMask mask = make_global_mask(scores.scores, p);
        apply_mask(student, mask);
        DistillConfig d = cfg.retrain;
        d.temperature = cfg.retrain_temperatures.front();
        auto tr = retrain_kd(std::move(student), dense.teacher, mask, data.train,
                             data.val, d, fixed, retrain_seed);
        l.one_shot_seconds = seconds_since(c0);
        l.one_shot_accuracy = evaluate(tr.model, data.test);

        std::tie(l.iterative_seconds, l.iterative_accuracy) =
            iterative_magnitude(cfg, seed, p, dense.student, data, fixed);
        report.latency.push_back(l);
      }
    }
  }

  if (!out_dir.empty()) {
    const fs::path runs = out_dir / "compare_runs.csv";
    fs::remove(runs);
    append_run_records(runs, report.records);
    if (!report.latency.empty()) {
      std::ofstream lat(out_dir / "compare_latency.csv");
      lat << "seed,sparsity,one_shot_s,iterative_s,ratio,one_shot_acc,"
             "iterative_acc,retrain_epochs_per_cycle\n";
      for (const auto& l : report.latency) {
        lat << l.seed << "," << fmt(l.sparsity) << "," << fmt(l.one_shot_seconds)
            << "," << fmt(l.iterative_seconds) << "," << fmt(l.ratio()) << ","
            << fmt(l.one_shot_accuracy) << "," << fmt(l.iterative_accuracy)
            << "," << l.retrain_epochs_per_cycle << "\n";
      }
    }
    std::ofstream(out_dir / "compare_summary.txt") << report.summary();
  }
  return report;
}

namespace artifacts {
std::string pruned_checkpoint(double sparsity) {
  return "pruned_p" + fmt(sparsity) + ".ckpt";
}
std::string mask_file(double sparsity) { return "mask_p" + fmt(sparsity) + ".sdmk"; }
std::string retrained_checkpoint(const std::string& mode, double sparsity) {
  return "retrained_" + mode + "_p" + fmt(sparsity) + ".ckpt";
}
}  // namespace artifacts

namespace {

DatasetSplits prepare_data(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  DatasetSplits data = converted(load_dataset(cfg.dataset), cfg.precision);
  fs::create_directories(out);
  write_manifest(cfg.dataset, data, out / artifacts::kManifest);
  return data;
}

Model load_model(const fs::path& path, const char* producer,
                 Precision precision) {
  require_artifact(path, producer);
  return load_checkpoint(path).to(precision);
}

}  // namespace

StepResult cmd_train_teacher(const ExperimentConfig& cfg, std::uint64_t seed,
                             const fs::path& out) {
  const auto start = Clock::now();
  const DatasetSplits data = prepare_data(cfg, out);
  MetricsWriter metrics(out / artifacts::kMetrics);
  auto built = build_model(teacher_model_config(cfg, data), teacher_seed(seed));
  auto tr = train_supervised(std::move(built.model), data.train, data.val,
                             with_epochs(cfg.optimizer, cfg.teacher_epochs),
                             shuffle_seed(seed, "teacher"),
                             metrics_sink(metrics, "s" + std::to_string(seed) +
                                                       "-teacher"));
  StepResult r;
  r.artifact = out / artifacts::kTeacher;
  save_checkpoint(tr.model, r.artifact);
  r.accuracy = evaluate(tr.model, data.test);
  r.seconds = seconds_since(start);
  return r;
}

StepResult cmd_distill_student(const ExperimentConfig& cfg, std::uint64_t seed,
                               const fs::path& out, const fs::path& teacher_ckpt) {
  const auto start = Clock::now();
  const Model teacher = load_model(teacher_ckpt, "train-teacher", cfg.precision);
  const DatasetSplits data = prepare_data(cfg, out);
  MetricsWriter metrics(out / artifacts::kMetrics);
  auto built = build_model(student_model_config(cfg, data), student_seed(seed));
  save_checkpoint(built.model, out / artifacts::kStudentInit);
  auto tr = kd_finetune(std::move(built.model), teacher, data.train, data.val,
                        cfg.finetune, with_epochs(cfg.optimizer, cfg.student_epochs),
                        shuffle_seed(seed, "distill"),
                        metrics_sink(metrics, "s" + std::to_string(seed) +
                                                  "-distill"));
  StepResult r;
  r.artifact = out / artifacts::kStudentDense;
  save_checkpoint(tr.model, r.artifact);
  r.accuracy = evaluate(tr.model, data.test);
  r.seconds = seconds_since(start);
  return r;
}

StepResult cmd_score(const ExperimentConfig& cfg, std::uint64_t seed,
                     const fs::path& out, const fs::path& teacher_ckpt,
                     const fs::path& student_ckpt) {
  const auto start = Clock::now();
  const Model teacher = load_model(teacher_ckpt, "train-teacher", cfg.precision);
  require_artifact(student_ckpt, "distill");
  const std::uint64_t file_before = file_hash(student_ckpt);
  Model student = load_model(student_ckpt, "distill", cfg.precision);
  const std::uint64_t params_before = fingerprint(student.named_tensors());
  const DatasetSplits data = prepare_data(cfg, out);

  const auto result = compute_importance(teacher, student, data.train,
                                         importance_config(cfg, seed));
  if (fingerprint(student.named_tensors()) != params_before ||
      file_hash(student_ckpt) != file_before) {
    throw ContractError("scoring modified the student checkpoint " +
                        student_ckpt.string());
  }
  ScoreFile file;
  file.scores = result.scores;
  file.gamma = cfg.gamma;
  file.batch_count = result.batches;
  file.epochs = static_cast<std::uint32_t>(cfg.score_epochs);
  file.distill = cfg.score;
  StepResult r;
  r.artifact = out / artifacts::kScores;
  save_scores(file, r.artifact);
  r.seconds = seconds_since(start);
  return r;
}

PruneStepResult cmd_prune(const ExperimentConfig& cfg, const fs::path& out,
                          const fs::path& student_ckpt,
                          const fs::path& scores_file, double sparsity) {
  Model student = load_model(student_ckpt, "distill", cfg.precision);
  require_artifact(scores_file, "score");
  const ScoreFile scores = load_scores(scores_file);
  const PruneMask mask = make_global_mask(scores.scores, sparsity);
  check_mask_matches(student, mask);
  apply_mask(student, mask);
  fs::create_directories(out);
  PruneStepResult r;
  r.checkpoint = out / artifacts::pruned_checkpoint(sparsity);
  r.mask = out / artifacts::mask_file(sparsity);
  save_checkpoint(student, r.checkpoint);
  save_mask(mask, r.mask);
  r.retained = mask.ones();
  r.prunable = mask.total();
  r.sparsity = mask_sparsity(mask);
  return r;
}

RunRecord cmd_retrain(const ExperimentConfig& cfg, std::uint64_t seed,
                      const fs::path& out, const fs::path& pruned_ckpt,
                      const fs::path& mask_path, const std::string& mode,
                      const fs::path& teacher_ckpt) {
  if (mode != "plain" && mode != "kd") {
    throw ConfigError("retrain mode must be plain or kd, got \"" + mode + "\"");
  }
  const auto start = Clock::now();
  Model pruned = load_model(pruned_ckpt, "prune", cfg.precision);
  require_artifact(mask_path, "prune");
  const PruneMask mask = load_mask(mask_path);
  check_mask_matches(pruned, mask);
  const DatasetSplits data = prepare_data(cfg, out);
  MetricsWriter metrics(out / artifacts::kMetrics);

  RunRecord r;
  r.method = mode == "kd" ? kd_method(cfg.retrain.temperature) : "ours-no-kd";
  r.seed = seed;
  r.target_sparsity = mask.target_sparsity;
  r.run_id = cell_id(seed, mask.target_sparsity, r.method);
  const auto sink = metrics_sink(metrics, r.run_id);
  const std::uint64_t retrain_seed = shuffle_seed(seed, "retrain");
  TrainResult tr = [&] {
    if (mode == "kd") {
      const Model teacher =
          load_model(teacher_ckpt.empty() ? out / artifacts::kTeacher
                                          : teacher_ckpt,
                     "train-teacher", cfg.precision);
      return retrain_kd(std::move(pruned), teacher, mask, data.train, data.val,
                        cfg.retrain, cfg.optimizer, retrain_seed, sink);
    }
    return retrain_plain(std::move(pruned), mask, data.train, data.val,
                         cfg.optimizer, retrain_seed, sink);
  }();
  save_checkpoint(tr.model, out / artifacts::retrained_checkpoint(
                                      mode, mask.target_sparsity));
  const auto e0 = Clock::now();
  r.accuracy = evaluate(tr.model, data.test);
  r.retrain_epochs = tr.epochs_run;
  fill_mask_fields(r, mask);
  r.phase_seconds = {{"retrain", tr.seconds}, {"eval", seconds_since(e0)}};
  r.total_seconds = seconds_since(start);
  r.phase_seconds["io"] =
      std::max(0.0, r.total_seconds - tr.seconds - r.phase_seconds["eval"]);
  append_run_records(out / artifacts::kRuns, {r});
  return r;
}

double cmd_eval(const ExperimentConfig& cfg, const fs::path& out,
                const fs::path& checkpoint, const std::string& split_name_arg) {
  const auto start = Clock::now();
  const Model model = load_model(checkpoint, "train-teacher", cfg.precision);
  const DatasetSplits data = prepare_data(cfg, out);
  const Dataset* part = nullptr;
  if (split_name_arg == "train") part = &data.train;
  else if (split_name_arg == "val") part = &data.val;
  else if (split_name_arg == "test") part = &data.test;
  else throw ConfigError("split must be train, val or test, got \"" +
                         split_name_arg + "\"");
  EpochMetrics m;
  m.phase = "eval-" + split_name_arg;
  m.val_acc = evaluate(model, *part);
  m.val_loss = mean_cross_entropy(model, *part);
  m.sparsity = measure_sparsity(model);
  m.wall_clock_s = seconds_since(start);
  MetricsWriter metrics(out / artifacts::kMetrics);
  metrics.write(checkpoint.filename().string(), m);
  return m.val_acc;
}

}  // namespace sdprune
