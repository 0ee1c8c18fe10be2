#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdprune/error.hpp"
#include "sdprune/importance.hpp"
#include "test_support.hpp"

using namespace sdprune;
using namespace sdprune::testing;

namespace {

// One prunable 1 x 2 weight; checks look at its first entry.
Model scalar_model() { return Model({LayerSpec::linear(1, 2)}, {1}, 2, Precision::F64); }

NamedTensors raw(double v) {
  return {{"0.weight", Tensor({1, 2}, {v, v}, Precision::F64)}};
}

Model tiny_student(std::uint64_t seed) {
  return build_model({"mlp-small", {6}, 3, Precision::F64}, seed).model;
}

Dataset tiny_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.class_count = 3;
  d.inputs = random_tensor({n, 6}, rng, 1.0, Precision::F64);
  d.labels = random_labels(n, 3, rng);
  return d;
}

}  // namespace

TEST_CASE("EMA recurrence") {
  const Model m = scalar_model();
  SUBCASE("first batch is (1 - gamma) * raw") {
    ImportanceState s(m, 0.9);
    s.accumulate_raw(raw(3.0));
    CHECK(s.scores()[0].tensor.at(0) == (1.0 - 0.9) * 3.0);
    CHECK(s.batch_count() == 1);
  }
  SUBCASE("zero batch decays by gamma") {
    ImportanceState s(m, 0.9);
    s.accumulate_raw(raw(3.0));
    const double before = s.scores()[0].tensor.at(0);
    s.accumulate_raw(raw(0.0));
    CHECK(s.scores()[0].tensor.at(0) == 0.9 * before);
  }
  SUBCASE("worked example 1.0 then 2.0") {
    ImportanceState s(m, 0.9);
    s.accumulate_raw(raw(1.0));
    s.accumulate_raw(raw(2.0));
    CHECK(s.scores()[0].tensor.at(0) == doctest::Approx(0.29).epsilon(1e-15));
    const auto fin = s.finalize();
    CHECK(std::abs(fin[0].tensor.at(0) - 29.0 / 19.0) <= 1e-12);
  }
}

TEST_CASE("bias correction") {
  const Model m = scalar_model();
  SUBCASE("t = 1 returns the raw score") {
    for (double x : {0.0, 1e-7, 0.3, 5.0, 1234.5}) {
      ImportanceState s(m, 0.9);
      s.accumulate_raw(raw(x));
      CHECK(s.finalize()[0].tensor.at(0) == x);
    }
  }
  SUBCASE("constant raw score is preserved for every t") {
    for (std::size_t t = 1; t <= 50; ++t) {
      ImportanceState s(m, 0.9);
      for (std::size_t i = 0; i < t; ++i) s.accumulate_raw(raw(0.7));
      CHECK(std::abs(s.finalize()[0].tensor.at(0) - 0.7) <= 1e-12);
    }
  }
  SUBCASE("lifecycle errors") {
    ImportanceState s(m, 0.9);
    CHECK_THROWS_AS(s.finalize(), ContractError);
    s.accumulate_raw(raw(1.0));
    s.finalize();
    CHECK(s.finalized());
    CHECK_THROWS_AS(s.finalize(), ContractError);
    CHECK_THROWS_AS(s.accumulate_raw(raw(1.0)), ContractError);
  }
  CHECK_THROWS_AS(ImportanceState(m, 1.0), ConfigError);
  CHECK_THROWS_AS(ImportanceState(m, -0.1), ConfigError);
  ImportanceState s(m, 0.9);
  CHECK_THROWS_AS(s.accumulate_raw(raw(-1.0)), ContractError);
}

TEST_CASE("accumulate reads |W * grad|") {
  Model m = tiny_student(1);
  m.set_trainable(true);
  const Dataset d = tiny_data(5, 2);
  Tape tape;
  tape.backward(cross_entropy(m.forward(d.inputs, &tape), d.labels, &tape));
  ImportanceState s(m, 0.9);
  s.accumulate(m);
  for (const auto& sc : s.scores()) {
    const Parameter* p = m.find(sc.name);
    REQUIRE(p != nullptr);
    CHECK(p->prunable);
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      CHECK(sc.tensor.at(i) == (1.0 - 0.9) * std::fabs(p->value.at(i) * p->value.grad()[i]));
      CHECK(sc.tensor.at(i) >= 0.0);
    }
  }
  CHECK(s.missing_gradients() == 0);

  SUBCASE("missing gradients are skipped and counted") {
    Model fresh = tiny_student(1);
    ImportanceState t(fresh, 0.9);
    t.accumulate(fresh);
    CHECK(t.missing_gradients() == 2);
    CHECK(t.batch_count() == 1);
    for (double v : flat_values(t.scores())) CHECK(v == 0.0);
  }
}

TEST_CASE("compute_importance") {
  const Model teacher = build_model({"mlp-teacher", {6}, 3, Precision::F64}, 5).model;
  const Dataset data = tiny_data(40, 3);
  ImportanceConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;

  SUBCASE("student is left unchanged") {
    Model student = tiny_student(7);
    const auto before = parameter_hash(student);
    const auto result = compute_importance(teacher, student, data, cfg);
    CHECK(parameter_hash(student) == before);
    CHECK(result.batches == 6);
    CHECK(result.missing_gradients == 0);
    for (const auto& p : student.params()) CHECK_FALSE(p.value.has_grad());
  }
  SUBCASE("identical seeds give identical score bytes") {
    Model a = tiny_student(7);
    Model b = tiny_student(7);
    const auto ra = compute_importance(teacher, a, data, cfg);
    const auto rb = compute_importance(teacher, b, data, cfg);
    CHECK(serialize_scores({ra.scores, 0.9, ra.batches, 2, cfg.distill}) ==
          serialize_scores({rb.scores, 0.9, rb.batches, 2, cfg.distill}));
  }
  SUBCASE("one epoch over one batch is |W * grad| of that batch") {
    Model student = tiny_student(7);
    ImportanceConfig one = cfg;
    one.epochs = 1;
    one.batch_size = 40;
    const auto result = compute_importance(teacher, student, data, one);

    Model probe = student;
    probe.set_trainable(true);
    const Tensor zt = teacher.forward(data.inputs);
    Tape tape;
    // Batch order differs from dataset order, so reuse the library's batch.
    const auto b = batches(data, 40, one.seed, 0).front();
    tape.backward(total_loss(probe.forward(b.inputs, &tape),
                             gather_rows(zt, b.indices), b.labels, one.distill,
                             &tape));
    std::size_t k = 0;
    for (const auto& p : probe.params()) {
      if (!p.prunable) continue;
      const auto& s = result.scores[k++];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        CHECK(s.tensor.at(i) ==
              doctest::Approx(std::fabs(p.value.at(i) * p.value.grad()[i])).epsilon(1e-12));
      }
    }
  }
  SUBCASE("zero epochs is a config error") {
    Model student = tiny_student(7);
    ImportanceConfig zero = cfg;
    zero.epochs = 0;
    CHECK_THROWS_AS(compute_importance(teacher, student, data, zero), ConfigError);
  }
}

TEST_CASE("raw score scales with the loss") {
  Model m = tiny_student(3);
  m.set_trainable(true);
  const Dataset d = tiny_data(8, 4);
  auto raw_scores = [&](double c) {
    Model copy = m;
    copy.set_trainable(true);
    Tape tape;
    tape.backward(scale(cross_entropy(copy.forward(d.inputs, &tape), d.labels, &tape), c, &tape));
    ImportanceState s(copy, 0.9);
    s.accumulate(copy);
    return flat_values(s.finalize());
  };
  const auto one = raw_scores(1.0);
  const auto neg = raw_scores(-2.5);
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(neg[i] == doctest::Approx(2.5 * one[i]).epsilon(1e-12));
  }
  auto ranking = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
  };
  CHECK(ranking(raw_scores(4.0)) == ranking(one));
}

TEST_CASE("score file") {
  TempDir dir("scores");
  Rng rng(6);
  ScoreFile f;
  f.gamma = 0.9;
  f.batch_count = 120;
  f.epochs = 3;
  f.distill = {5.0, 0.7, 0.5, 1e-6};
  for (const char* name : {"0.weight", "3.weight"}) {
    Tensor t = random_tensor({3, 4}, rng, 1.0, Precision::F32);
    for (auto& v : t.mutable_data()) v = std::fabs(v);
    t.quantize();
    f.scores.push_back({name, t});
  }
  save_scores(f, dir / "s.sdis");
  const ScoreFile g = load_scores(dir / "s.sdis");
  CHECK(g.gamma == f.gamma);
  CHECK(g.batch_count == f.batch_count);
  CHECK(g.epochs == f.epochs);
  CHECK(g.distill == f.distill);
  REQUIRE(g.scores.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(g.scores[i].name == f.scores[i].name);
    CHECK(bit_equal(g.scores[i].tensor, f.scores[i].tensor));
  }
  CHECK(serialize_scores(g) == serialize_scores(f));

  auto bytes = serialize_scores(f);
  SUBCASE("bad magic") {
    bytes[3] = 'X';
    CHECK_THROWS_AS(parse_scores(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.pop_back();
    CHECK_THROWS_AS(parse_scores(bytes), FormatError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(parse_scores(bytes), FormatError);
  }
}
