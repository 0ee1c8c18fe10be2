#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sdprune/error.hpp"
#include "sdprune/experiment.hpp"

namespace fs = std::filesystem;
using namespace sdprune;

namespace {

enum ExitCode : int {
  kOk = 0,
  kConfig = 1,
  kData = 2,
  kNumerical = 3,
  kMissing = 4,
};

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> precision;
};

ExperimentConfig resolve(const GlobalOptions& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{}
                                          : load_config(g.config);
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.precision) {
    cfg.precision = *g.precision == 64 ? Precision::F64 : Precision::F32;
  }
  if (g.seed) cfg.seeds = {*g.seed};
  cfg.validate();
  for (const auto* d : {&cfg.finetune, &cfg.score, &cfg.retrain}) {
    for (const auto& w : d->warnings()) std::cerr << "warning: " << w << "\n";
  }
  return cfg;
}

fs::path or_default(const std::string& given, const fs::path& out,
                    const std::string& name) {
  return given.empty() ? out / name : fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep per-batch activations on the heap instead of fresh mmap pages.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Teacher-guided one-shot pruning with distillation-based retraining"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed (overrides [run] seeds)");
  app.add_option("--out", g.out, "Output directory (overrides [run] output)");
  app.add_option("--precision", g.precision, "Floating point width")
      ->check(CLI::IsMember({32, 64}));

  auto* train_teacher = app.add_subcommand("train-teacher", "Train the dense teacher");

  std::string teacher_path, student_path, scores_path, pruned_path, mask_path;
  std::string checkpoint_path, mode = "plain", split = "test";
  double sparsity = 0.0;

  auto* distill = app.add_subcommand("distill", "Fine-tune the dense student by distillation");
  distill->add_option("--teacher", teacher_path, "Teacher checkpoint");

  auto* score = app.add_subcommand("score", "Compute importance scores");
  score->add_option("--teacher", teacher_path, "Teacher checkpoint");
  score->add_option("--student", student_path, "Dense student checkpoint");

  auto* prune = app.add_subcommand("prune", "Prune the student to a global sparsity");
  prune->add_option("--student", student_path, "Dense student checkpoint");
  prune->add_option("--scores", scores_path, "Importance score file");
  prune->add_option("-p,--sparsity", sparsity, "Target sparsity in [0, 1)")
      ->required();

  auto* retrain = app.add_subcommand("retrain", "Retrain a pruned student under its mask");
  retrain->add_option("--pruned", pruned_path, "Pruned checkpoint")->required();
  retrain->add_option("--mask", mask_path, "Mask file")->required();
  retrain->add_option("--mode", mode, "plain or kd")
      ->check(CLI::IsMember({"plain", "kd"}));
  retrain->add_option("--teacher", teacher_path, "Teacher checkpoint (kd mode)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")
      ->required();
  eval->add_option("--split", split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* compare = app.add_subcommand("compare", "Run every method over seeds and sparsities");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const ExperimentConfig cfg = resolve(g);
    const fs::path out = cfg.output_dir;
    const std::uint64_t seed = cfg.seeds.front();

    if (*train_teacher) {
      const auto r = cmd_train_teacher(cfg, seed, out);
      std::cout << "teacher: " << r.artifact.string() << "  test_acc "
                << r.accuracy << "  (" << r.seconds << " s)\n";
    } else if (*distill) {
      const auto r = cmd_distill_student(
          cfg, seed, out, or_default(teacher_path, out, artifacts::kTeacher));
      std::cout << "student: " << r.artifact.string() << "  test_acc "
                << r.accuracy << "  (" << r.seconds << " s)\n";
    } else if (*score) {
      const auto r = cmd_score(
          cfg, seed, out, or_default(teacher_path, out, artifacts::kTeacher),
          or_default(student_path, out, artifacts::kStudentDense));
      std::cout << "scores: " << r.artifact.string() << "  (" << r.seconds
                << " s)\n";
    } else if (*prune) {
      const auto r = cmd_prune(
          cfg, out, or_default(student_path, out, artifacts::kStudentDense),
          or_default(scores_path, out, artifacts::kScores), sparsity);
      std::cout << "pruned: " << r.checkpoint.string() << "  mask "
                << r.mask.string() << "  retained " << r.retained << "/"
                << r.prunable << "  sparsity " << r.sparsity << "\n";
    } else if (*retrain) {
      const auto r = cmd_retrain(cfg, seed, out, pruned_path, mask_path, mode,
                                 teacher_path);
      std::cout << r.run_id << "  acc " << r.accuracy << "  sparsity "
                << r.achieved_sparsity << "  epochs " << r.retrain_epochs
                << "  (" << r.total_seconds << " s)\n";
    } else if (*eval) {
      const double acc = cmd_eval(cfg, out, checkpoint_path, split);
      std::cout << split << " accuracy " << acc << "\n";
    } else if (*compare) {
      const auto report = run_comparison(cfg, out);
      std::cout << report.summary();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
