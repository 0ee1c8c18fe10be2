#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sdprune/data.hpp"
#include "sdprune/distill.hpp"
#include "sdprune/importance.hpp"
#include "sdprune/model.hpp"
#include "sdprune/pruning.hpp"
#include "sdprune/train.hpp"

namespace sdprune {

struct DatasetConfig {
  // synthetic, idx or csv
  std::string kind = "synthetic";
  int classes = 10;
  std::size_t per_class = 120;
  Shape sample_shape{1, 28, 28};
  double separation = 2.0;
  std::uint64_t seed = 0;
  // idx / csv sources; the validation split is carved from train.
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_csv, test_csv;
  bool csv_header = false;
  double val_fraction = 0.1;

  bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::string teacher_arch = "cnn-teacher";
  std::string student_arch = "cnn-small";
  DistillConfig finetune{4.0, 0.7, 0.5, 1e-6};
  DistillConfig score{5.0, 0.7, 0.5, 1e-6};
  // The retrain subcommand uses this as is; compare keeps alpha/beta/epsilon
  // and runs once per entry of retrain_temperatures.
  DistillConfig retrain{3.0, 0.7, 0.5, 1e-6};
  std::vector<double> retrain_temperatures{3.0, 5.0};
  std::vector<double> sparsities{0.5, 0.9, 0.95};
  double gamma = 0.9;
  std::size_t score_epochs = 3;
  std::size_t lth_warmup_epochs = 1;
  // max_epochs is the retraining budget; dense phases use their own caps.
  OptimizerConfig optimizer;
  std::size_t teacher_epochs = 20;
  std::size_t student_epochs = 20;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "sdprune-out";
  Precision precision = Precision::F32;
  // Adds the 5-cycle iterative magnitude baseline used for latency ratios.
  bool latency_baseline = false;
  std::size_t iterative_cycles = 5;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Sectioned key = value text. Unknown sections or keys are errors.
ExperimentConfig parse_config(std::string_view text,
                              const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
// Inverse of parse_config; parse_config(to_text(c)) reproduces c exactly.
std::string to_text(const ExperimentConfig& config);

DatasetSplits load_dataset(const DatasetConfig& config);
void write_manifest(const DatasetConfig& config, const DatasetSplits& splits,
                    const std::filesystem::path& path);

ModelConfig teacher_model_config(const ExperimentConfig& cfg,
                                 const DatasetSplits& data);
ModelConfig student_model_config(const ExperimentConfig& cfg,
                                 const DatasetSplits& data);

// Seeds derived from a run seed so that teacher, student and batch order use
// independent streams.
std::uint64_t teacher_seed(std::uint64_t seed);
std::uint64_t student_seed(std::uint64_t seed);
std::uint64_t shuffle_seed(std::uint64_t seed, std::string_view phase);

/// One row of the comparison table.
struct RunRecord {
  std::string run_id;
  std::string method;  // ours-kd-T3, ours-kd-T5, ours-no-kd, lth-oneshot,
                       // magnitude-oneshot
  std::uint64_t seed = 0;
  double target_sparsity = 0.0;
  double achieved_sparsity = 0.0;
  std::size_t retained = 0;  // k
  std::size_t prunable = 0;  // D
  double accuracy = 0.0;
  std::size_t retrain_epochs = 0;
  // Phase name -> seconds. Shared phases (scoring, warm-up) are included in
  // every record that depends on them.
  std::map<std::string, double> phase_seconds;
  double total_seconds = 0.0;
};

// Appends per-epoch rows to a CSV with the fixed header
// run_id,phase,epoch,train_loss,val_loss,val_acc,sparsity,wall_clock_s
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const std::string& run_id, const EpochMetrics& m);
  bool enabled() const { return out_.is_open(); }

  static const char* header();

 private:
  std::ofstream out_;
};

const char* run_record_header();
std::string run_record_row(const RunRecord& r);
void append_run_records(const std::filesystem::path& path,
                        const std::vector<RunRecord>& records);
std::vector<RunRecord> read_run_records(const std::filesystem::path& path);

struct SeedSummary {
  std::uint64_t seed = 0;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
  std::size_t teacher_epochs = 0;
  std::size_t student_epochs = 0;
  std::size_t teacher_params = 0;
  std::size_t student_params = 0;
  // Teacher training plus student distillation.
  double dense_seconds = 0.0;
};

struct LatencyRecord {
  std::uint64_t seed = 0;
  double sparsity = 0.0;
  double one_shot_seconds = 0.0;   // score + prune + retrain
  double iterative_seconds = 0.0;  // all prune/retrain cycles
  double one_shot_accuracy = 0.0;
  double iterative_accuracy = 0.0;
  std::size_t retrain_epochs_per_cycle = 0;
  double ratio() const { return one_shot_seconds / iterative_seconds; }
};

struct ComparisonReport {
  std::vector<SeedSummary> seeds;
  std::vector<RunRecord> records;
  std::vector<LatencyRecord> latency;

  std::vector<const RunRecord*> find(std::string_view method,
                                     double sparsity) const;
  double mean_accuracy(std::string_view method, double sparsity) const;
  std::string summary() const;
};

std::vector<std::string> comparison_methods(const ExperimentConfig& cfg);

// Runs every (seed, sparsity, method) cell. When `out_dir` is non-empty the
// runs CSV, per-epoch metrics, latency CSV and summary are written there.
ComparisonReport run_comparison(const ExperimentConfig& cfg,
                                const std::filesystem::path& out_dir = {});

// File names used by the CLI subcommands inside the output directory.
namespace artifacts {
inline constexpr const char* kTeacher = "teacher.ckpt";
inline constexpr const char* kStudentDense = "student_dense.ckpt";
inline constexpr const char* kStudentInit = "student_init.ckpt";
inline constexpr const char* kScores = "scores.sdis";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kRuns = "runs.csv";
inline constexpr const char* kManifest = "dataset_manifest.txt";
std::string pruned_checkpoint(double sparsity);
std::string mask_file(double sparsity);
std::string retrained_checkpoint(const std::string& mode, double sparsity);
}  // namespace artifacts

// Pipeline steps behind the CLI. Each reads its inputs from and writes its
// outputs to `out`; missing inputs raise MissingArtifactError naming the
// file and the subcommand that produces it.
struct StepResult {
  std::filesystem::path artifact;
  double accuracy = 0.0;  // test accuracy where meaningful
  double seconds = 0.0;
};

StepResult cmd_train_teacher(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::filesystem::path& out);
StepResult cmd_distill_student(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::filesystem::path& out,
                               const std::filesystem::path& teacher_ckpt);
StepResult cmd_score(const ExperimentConfig& cfg, std::uint64_t seed,
                     const std::filesystem::path& out,
                     const std::filesystem::path& teacher_ckpt,
                     const std::filesystem::path& student_ckpt);
struct PruneStepResult {
  std::filesystem::path checkpoint;
  std::filesystem::path mask;
  std::size_t retained = 0;
  std::size_t prunable = 0;
  double sparsity = 0.0;
};
PruneStepResult cmd_prune(const ExperimentConfig& cfg,
                          const std::filesystem::path& out,
                          const std::filesystem::path& student_ckpt,
                          const std::filesystem::path& scores_file,
                          double sparsity);
// mode is "plain" or "kd"; the KD temperature comes from cfg.retrain.
RunRecord cmd_retrain(const ExperimentConfig& cfg, std::uint64_t seed,
                      const std::filesystem::path& out,
                      const std::filesystem::path& pruned_ckpt,
                      const std::filesystem::path& mask_file,
                      const std::string& mode,
                      const std::filesystem::path& teacher_ckpt = {});
double cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& out,
                const std::filesystem::path& checkpoint,
                const std::string& split = "test");

}  // namespace sdprune
