#include "sdprune/importance.hpp"

#include <algorithm>
#include <cmath>

#include "sdprune/binary_io.hpp"
#include "sdprune/error.hpp"
#include "sdprune/train.hpp"

namespace sdprune {

ImportanceState::ImportanceState(const Model& student, double gamma)
    : gamma_(gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) {
    throw ConfigError("EMA decay gamma must lie in [0, 1), got " +
                      std::to_string(gamma));
  }
  for (const auto& p : student.params()) {
    if (!p.prunable) continue;
    scores_.push_back({p.name, Tensor::zeros(p.value.shape(), Precision::F64)});
    first_raw_.push_back({p.name, Tensor::zeros(p.value.shape(), Precision::F64)});
  }
}

void ImportanceState::check_open() const {
  if (finalized_) {
    throw ContractError("importance scores were already finalized");
  }
}

void ImportanceState::fold(std::size_t k, std::span<const double> raw) {
  auto acc = scores_[k].tensor.mutable_data();
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i] = gamma_ * acc[i] + (1.0 - gamma_) * raw[i];
  }
  if (batch_count_ == 0) {
    auto keep = first_raw_[k].tensor.mutable_data();
    std::copy(raw.begin(), raw.end(), keep.begin());
  }
}

void ImportanceState::accumulate(const Model& student) {
  check_open();
  std::vector<double> raw;
  for (std::size_t k = 0; k < scores_.size(); ++k) {
    const auto& s = scores_[k];
    const Parameter* p = student.find(s.name);
    if (p == nullptr || p->value.shape() != s.tensor.shape()) {
      throw ContractError("student does not match the importance state at \"" +
                          s.name + "\"");
    }
    if (!p->value.has_grad()) {
      // Left untouched; the global batch counter still advances.
      ++missing_gradients_;
      continue;
    }
    const auto w = p->value.data();
    const auto g = p->value.grad();
    raw.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) raw[i] = std::fabs(w[i] * g[i]);
    fold(k, raw);
  }
  if (++batch_count_ == 2) first_raw_.clear();
}

void ImportanceState::accumulate_raw(const NamedTensors& raw) {
  check_open();
  if (raw.size() != scores_.size()) {
    throw ContractError("raw score list does not match the importance state");
  }
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (raw[k].name != scores_[k].name ||
        raw[k].tensor.shape() != scores_[k].tensor.shape()) {
      throw ContractError("raw score \"" + raw[k].name +
                          "\" does not match the importance state");
    }
  }
  for (const auto& r : raw) {
    for (double v : r.tensor.data()) {
      if (!(v >= 0.0)) throw ContractError("raw scores must be >= 0");
    }
  }
  for (std::size_t k = 0; k < raw.size(); ++k) fold(k, raw[k].tensor.data());
  if (++batch_count_ == 2) first_raw_.clear();
}

NamedTensors ImportanceState::finalize() {
  check_open();
  if (batch_count_ == 0) {
    throw ContractError("cannot finalize importance scores: no batches accumulated");
  }
  if (batch_count_ == 1) {
    for (std::size_t k = 0; k < scores_.size(); ++k) {
      scores_[k].tensor = first_raw_[k].tensor;
    }
    first_raw_.clear();
  } else {
    const double correction =
        1.0 - std::pow(gamma_, static_cast<double>(batch_count_));
    for (auto& s : scores_) {
      for (auto& v : s.tensor.mutable_data()) v /= correction;
    }
  }
  finalized_ = true;
  NamedTensors out;
  for (const auto& s : scores_) out.push_back({s.name, s.tensor.clone()});
  return out;
}

ImportanceResult compute_importance(const Model& teacher, Model& student,
                                    const Dataset& data,
                                    const ImportanceConfig& cfg) {
  cfg.distill.validate();
  data.validate();
  if (cfg.epochs == 0) throw ConfigError("scoring needs at least one epoch");
  // The student keeps its own requires_grad flags; scoring needs gradients on
  // every weight, so they are switched on for the duration and restored.
  std::vector<bool> flags;
  for (const auto& p : student.params()) flags.push_back(p.value.requires_grad());
  student.set_trainable(true);

  const Dataset converted = data.to(student.precision());
  const Tensor teacher_logits = predict_logits(teacher, converted);
  ImportanceState state(student, cfg.gamma);
  std::size_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& b : batches(converted, cfg.batch_size, cfg.seed, epoch)) {
      Tape tape;
      try {
        const Tensor logits = student.forward(b.inputs, &tape);
        const Tensor loss =
            total_loss(logits, gather_rows(teacher_logits, b.indices), b.labels,
                       cfg.distill, &tape);
        tape.backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("importance scoring: non-finite loss at batch " +
                             std::to_string(batch_index) + " (" + e.what() + ")");
      }
      state.accumulate(student);
      student.zero_grads();
      ++batch_index;
    }
  }
  student.clear_grads();
  for (std::size_t i = 0; i < flags.size(); ++i) {
    student.params()[i].value.set_requires_grad(flags[i]);
  }
  ImportanceResult result;
  result.batches = state.batch_count();
  result.missing_gradients = state.missing_gradients();
  result.scores = state.finalize();
  return result;
}

constexpr std::uint32_t kScoreVersion = 1;

std::vector<std::uint8_t> serialize_scores(const ScoreFile& file) {
  io::BinaryWriter w;
  w.magic("SDIS");
  w.u32(kScoreVersion);
  w.f64(file.gamma);
  w.u64(file.batch_count);
  w.u32(file.epochs);
  w.f64(file.distill.temperature);
  w.f64(file.distill.alpha);
  w.f64(file.distill.beta);
  w.f64(file.distill.epsilon);
  w.u32(static_cast<std::uint32_t>(file.scores.size()));
  for (const auto& s : file.scores) io::write_tensor_record(w, s.name, s.tensor);
  return w.buffer();
}

ScoreFile parse_scores(std::vector<std::uint8_t> bytes,
                       const std::string& source) {
  io::BinaryReader r(std::move(bytes), source);
  r.expect_magic("SDIS");
  const auto version = r.u32();
  if (version != kScoreVersion) {
    r.fail("unsupported score file version " + std::to_string(version));
  }
  ScoreFile f;
  f.gamma = r.f64();
  f.batch_count = r.u64();
  f.epochs = r.u32();
  f.distill.temperature = r.f64();
  f.distill.alpha = r.f64();
  f.distill.beta = r.f64();
  f.distill.epsilon = r.f64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto rec = io::read_tensor_record(r);
    for (double v : rec.tensor.data()) {
      if (v < 0.0) r.fail("negative importance score in \"" + rec.name + "\"");
    }
    f.scores.push_back({std::move(rec.name), std::move(rec.tensor)});
  }
  if (!r.at_end()) r.fail("trailing bytes after score records");
  return f;
}

void save_scores(const ScoreFile& file, const std::filesystem::path& path) {
  io::BinaryWriter w;
  w.bytes(serialize_scores(file));
  w.save(path);
}

ScoreFile load_scores(const std::filesystem::path& path) {
  return parse_scores(io::read_file(path), path.string());
}

}  // namespace sdprune
