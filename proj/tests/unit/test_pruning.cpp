#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "sdprune/error.hpp"
#include "sdprune/pruning.hpp"
#include "test_support.hpp"

using namespace sdprune;
using namespace sdprune::testing;

namespace {

NamedTensors one_tensor(std::vector<double> v) {
  const std::size_t n = v.size();
  return {{"0.weight", Tensor({n}, std::move(v), Precision::F64)}};
}

// Splits `v` into tensors of the given sizes, in order.
NamedTensors split_scores(const std::vector<double>& v,
                          const std::vector<std::size_t>& sizes) {
  NamedTensors out;
  std::size_t at = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::vector<double> part(v.begin() + static_cast<long>(at),
                             v.begin() + static_cast<long>(at + sizes[i]));
    out.push_back({std::to_string(i) + ".weight",
                   Tensor({sizes[i]}, std::move(part), Precision::F64)});
    at += sizes[i];
  }
  return out;
}

std::vector<std::size_t> retained_indices(const PruneMask& m) {
  const auto bits = flat_bits(m);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out.push_back(i);
  }
  return out;
}

Model small_model(std::uint64_t seed) {
  return build_model({"mlp-small", {10}, 4, Precision::F64}, seed).model;
}

}  // namespace

TEST_CASE("global_threshold examples") {
  const auto v = one_tensor({0.1, 0.2, 0.3, 0.4});
  const auto t = global_threshold(v, 0.5);
  CHECK(t.k == 2);
  CHECK(t.tau == 0.3);
  CHECK(t.total == 4);

  const auto all = global_threshold(v, 0.0);
  CHECK(all.k == 4);
  CHECK(all.tau == 0.1);

  for (double p : {0.0, 0.3, 0.5, 0.7}) {
    CHECK(global_threshold(one_tensor(std::vector<double>(10, 2.5)), p).tau == 2.5);
  }

  CHECK_THROWS_AS(global_threshold(v, 1.0), ConfigError);
  CHECK_THROWS_AS(global_threshold(v, -0.1), ConfigError);
  CHECK_THROWS_AS(global_threshold(v, 0.9), ConfigError);  // k = 0
  CHECK_THROWS_AS(global_threshold({}, 0.5), ContractError);
  CHECK_THROWS_AS(global_threshold(one_tensor({0.1, -1.0}), 0.5), ContractError);
}

TEST_CASE("retained_count uses the floor") {
  CHECK(retained_count(0.9, 10) == 1);
  CHECK(retained_count(0.5, 5) == 2);
  CHECK(retained_count(0.95, 9064) == 453);
  CHECK(retained_count(0.0, 7) == 7);
  CHECK(retained_count(0.99, 50) == 0);
  for (std::size_t d = 1; d <= 200; ++d) {
    for (int pct = 0; pct < 100; ++pct) {
      CHECK(retained_count(pct / 100.0, d) == (static_cast<std::size_t>(100 - pct) * d) / 100);
    }
  }
}

TEST_CASE("build_mask examples") {
  const auto v = one_tensor({0.1, 0.2, 0.3, 0.4});
  CHECK(flat_bits(build_mask(v, 0.3, 2)) == std::vector<std::uint8_t>{0, 0, 1, 1});
  const auto eq = one_tensor(std::vector<double>(5, 1.0));
  CHECK(retained_indices(build_mask(eq, 1.0, 3)) == std::vector<std::size_t>{0, 1, 2});
  CHECK(flat_bits(build_mask(v, 0.1, 4)) == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK_THROWS_AS(build_mask(v, 0.3, 3), ContractError);
  CHECK_THROWS_AS(build_mask(v, 0.25, 1), ContractError);
  CHECK_THROWS_AS(build_mask(v, 0.3, 0), ContractError);
}

TEST_CASE("exact k against a sort oracle, with heavy ties") {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dsize(1, 400);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = dsize(rng);
    std::vector<double> v(d);
    const int levels = 1 + static_cast<int>(rng() % 6);
    for (auto& x : v) {
      x = u(rng) < 0.5 ? static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels
                       : u(rng);
    }
    const double p = 0.1 + 0.89 * u(rng);
    const std::size_t k = retained_count(p, d);
    std::vector<std::size_t> sizes;
    for (std::size_t left = d; left > 0;) {
      const std::size_t s = std::min<std::size_t>(left, 1 + rng() % 50);
      sizes.push_back(s);
      left -= s;
    }
    const auto scores = split_scores(v, sizes);
    if (k == 0) {
      CHECK_THROWS_AS(make_global_mask(scores, p), ConfigError);
      continue;
    }
    const PruneMask m = make_global_mask(scores, p);
    CHECK(m.ones() == k);
    CHECK(m.retained == k);
    CHECK(retained_indices(m) == top_k_oracle(v, k));
  }
}

TEST_CASE("monotonicity and idempotence") {
  Model model = small_model(1);
  std::vector<double> v;
  for (double x : flat_values(magnitude_scores(model))) v.push_back(std::round(x * 20.0));
  NamedTensors scores = magnitude_scores(model);
  std::size_t at = 0;
  for (auto& s : scores) {
    for (auto& x : s.tensor.mutable_data()) x = v[at++];
  }
  const PruneMask m = make_global_mask(scores, 0.8);
  const auto bits = flat_bits(m);
  double min_kept = 1e300, max_dropped = -1.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (bits[i]) min_kept = std::min(min_kept, v[i]);
    else max_dropped = std::max(max_dropped, v[i]);
  }
  CHECK(min_kept >= max_dropped);

  apply_mask(model, m);
  const auto once = parameter_hash(model);
  apply_mask(model, m);
  CHECK(parameter_hash(model) == once);
}

TEST_CASE("thresholding is global, not per layer") {
  Model model = small_model(2);
  NamedTensors scores = magnitude_scores(model);
  REQUIRE(scores.size() == 2);
  for (auto& x : scores[0].tensor.mutable_data()) x = 0.01 * std::fabs(x);
  for (auto& x : scores[1].tensor.mutable_data()) x = 10.0 + std::fabs(x);
  const PruneMask m = make_global_mask(scores, 0.9);
  const std::size_t d1 = scores[1].tensor.numel();
  CHECK(m.tensors[1].ones() == std::min(d1, m.retained));
  CHECK(m.tensors[0].ones() == m.retained - m.tensors[1].ones());
  const auto oracle = top_k_oracle(flat_values(scores), m.retained);
  const std::size_t d0 = scores[0].tensor.numel();
  CHECK(static_cast<std::size_t>(std::count_if(oracle.begin(), oracle.end(),
                                               [&](std::size_t i) { return i < d0; })) ==
        m.tensors[0].ones());
}

TEST_CASE("apply_mask") {
  Model model = small_model(3);
  const Model ref = model;
  const auto before = serialize_checkpoint(model);

  SUBCASE("all-ones mask leaves the model byte-identical") {
    apply_mask(model, full_mask(model));
    CHECK(serialize_checkpoint(model) == before);
  }
  SUBCASE("all-zero mask on one layer") {
    PruneMask m = full_mask(model);
    std::fill(m.tensors[1].keep.begin(), m.tensors[1].keep.end(), 0);
    apply_mask(model, m);
    for (double v : model.find("2.weight")->value.data()) {
      CHECK(v == 0.0);
      CHECK_FALSE(std::signbit(v));
    }
    CHECK(bit_equal(model.find("0.weight")->value, ref.find("0.weight")->value));
  }
  SUBCASE("measured sparsity is exactly 1 - k/D") {
    for (double p : {0.5, 0.9, 0.95}) {
      Model copy = small_model(3);
      const PruneMask m = make_global_mask(magnitude_scores(copy), p);
      apply_mask(copy, m);
      const std::size_t d = copy.prunable_count();
      CHECK(count_zero_weights(copy) == d - m.retained);
      CHECK(measure_sparsity(copy) ==
            static_cast<double>(d - m.retained) / static_cast<double>(d));
    }
  }
  SUBCASE("biases are untouched") {
    PruneMask m = full_mask(model);
    for (auto& t : m.tensors) std::fill(t.keep.begin(), t.keep.end(), 0);
    apply_mask(model, m);
    CHECK(bit_equal(model.find("0.bias")->value, ref.find("0.bias")->value));
    CHECK(measure_sparsity(model) == 1.0);
  }
  SUBCASE("shape mismatch") {
    PruneMask m = full_mask(model);
    m.tensors[0].shape = {1, 1};
    m.tensors[0].keep.resize(1);
    CHECK_THROWS_AS(apply_mask(model, m), ContractError);
    PruneMask missing = full_mask(model);
    missing.tensors.pop_back();
    CHECK_THROWS_AS(apply_mask(model, missing), ContractError);
  }
}

TEST_CASE("mask file") {
  TempDir dir("mask");
  const Model model = small_model(4);
  const PruneMask m = make_global_mask(magnitude_scores(model), 0.9);
  save_mask(m, dir / "m.sdmk");
  const PruneMask g = load_mask(dir / "m.sdmk");
  CHECK(flat_bits(g) == flat_bits(m));
  CHECK(g.retained == m.retained);
  CHECK(g.threshold == m.threshold);
  CHECK(g.target_sparsity == m.target_sparsity);
  for (std::size_t i = 0; i < m.tensors.size(); ++i) {
    CHECK(g.tensors[i].name == m.tensors[i].name);
    CHECK(g.tensors[i].shape == m.tensors[i].shape);
  }
  CHECK(serialize_mask(g) == serialize_mask(m));

  SUBCASE("bits are packed most significant first") {
    PruneMask tiny;
    tiny.tensors.push_back({"0.weight", {10}, {1, 0, 0, 0, 0, 0, 0, 1, 1, 0}});
    tiny.retained = 3;
    const auto bytes = serialize_mask(tiny);
    CHECK(bytes[bytes.size() - 2] == 0x81);
    CHECK(bytes[bytes.size() - 1] == 0x80);
    CHECK(flat_bits(parse_mask(bytes)) == flat_bits(tiny));
  }
  auto bytes = serialize_mask(m);
  SUBCASE("bad magic") {
    bytes[0] = 'Z';
    CHECK_THROWS_AS(parse_mask(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(parse_mask(bytes), FormatError);
  }
  SUBCASE("recorded k disagrees with the bitmap") {
    PruneMask bad = m;
    bad.retained += 1;
    CHECK_THROWS_AS(parse_mask(serialize_mask(bad)), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_mask(dir / "nope.sdmk"), MissingArtifactError);
  }
}
