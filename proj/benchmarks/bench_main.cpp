#include <benchmark/benchmark.h>

#include <random>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "sdprune/autodiff.hpp"
#include "sdprune/data.hpp"
#include "sdprune/distill.hpp"
#include "sdprune/importance.hpp"
#include "sdprune/model.hpp"
#include "sdprune/pruning.hpp"
#include "sdprune/train.hpp"

using namespace sdprune;

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

const DatasetSplits& bench_data() {
  static const DatasetSplits data = make_synthetic({10, 40, {1, 28, 28}, 2.0, 0});
  return data;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_tensor({n, n}, 1);
  Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto cin = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({32, cin, hw, hw}, 3);
  Tensor k = random_tensor({2 * cin, cin, 3, 3}, 4);
  k.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    const Tensor y = conv2d(x, k, {1, 1}, &tape);
    tape.backward(sum(y, &tape));
    k.zero_grad();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({1, 28})->Args({8, 14});

void BM_StudentTrainStep(benchmark::State& state) {
  const auto& data = bench_data();
  auto built = build_model({"cnn-small", {1, 28, 28}, 10}, 0);
  Model& model = built.model;
  model.set_trainable(true);
  const auto batch = batches(data.train, 32, 0, 0).front();
  SgdMomentum opt(model, 0.9);
  for (auto _ : state) {
    Tape tape;
    const Tensor loss = cross_entropy(model.forward(batch.inputs, &tape),
                                      batch.labels, &tape);
    tape.backward(loss);
    opt.step(model, 0.01);
    model.zero_grads();
  }
}
BENCHMARK(BM_StudentTrainStep);

void BM_TeacherForward(benchmark::State& state) {
  const auto& data = bench_data();
  const auto built = build_model({"cnn-teacher", {1, 28, 28}, 10}, 0);
  const auto batch = batches(data.train, 32, 0, 0).front();
  for (auto _ : state) {
    benchmark::DoNotOptimize(built.model.forward(batch.inputs).data().data());
  }
}
BENCHMARK(BM_TeacherForward);

void BM_ScoringEpoch(benchmark::State& state) {
  const auto& data = bench_data();
  const auto teacher = build_model({"cnn-teacher", {1, 28, 28}, 10}, 1);
  auto student = build_model({"cnn-small", {1, 28, 28}, 10}, 2);
  ImportanceConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        compute_importance(teacher.model, student.model, data.train, cfg));
  }
}
BENCHMARK(BM_ScoringEpoch)->Unit(benchmark::kMillisecond);

void BM_GlobalMask(benchmark::State& state) {
  const auto student = build_model({"cnn-small", {1, 28, 28}, 10}, 2);
  const NamedTensors scores = magnitude_scores(student.model);
  for (auto _ : state) {
    benchmark::DoNotOptimize(make_global_mask(scores, 0.95));
  }
}
BENCHMARK(BM_GlobalMask);

void BM_CaKld(benchmark::State& state) {
  Tensor s = random_tensor({32, 10}, 5);
  const Tensor t = random_tensor({32, 10}, 6);
  s.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    tape.backward(ca_kld(s, t, DistillConfig{}, &tape));
    s.zero_grad();
  }
}
BENCHMARK(BM_CaKld);

}  // namespace
int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
