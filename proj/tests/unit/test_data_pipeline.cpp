#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "sdprune/error.hpp"
#include "sdprune/data.hpp"
#include "test_support.hpp"

using namespace sdprune;
using namespace sdprune::testing;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c,
                                     const std::vector<std::uint8_t>& px) {
  std::vector<std::uint8_t> b;
  be32(b, 0x803);
  be32(b, n);
  be32(b, r);
  be32(b, c);
  b.insert(b.end(), px.begin(), px.end());
  return b;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& y) {
  std::vector<std::uint8_t> b;
  be32(b, 0x801);
  be32(b, static_cast<std::uint32_t>(y.size()));
  b.insert(b.end(), y.begin(), y.end());
  return b;
}

std::vector<std::vector<double>> rows_of(const Dataset& d) {
  std::vector<std::vector<double>> out;
  const std::size_t w = d.inputs.numel() / d.size();
  const auto v = d.inputs.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.emplace_back(v.begin() + static_cast<long>(i * w),
                     v.begin() + static_cast<long>((i + 1) * w));
  }
  return out;
}

}  // namespace

TEST_CASE("make_synthetic") {
  const SyntheticSpec spec{4, 30, {1, 8, 8}, 2.0, 3};
  const DatasetSplits a = make_synthetic(spec);

  SUBCASE("seeded and deterministic") {
    const DatasetSplits b = make_synthetic(spec);
    CHECK(bit_equal(a.train.inputs, b.train.inputs));
    CHECK(a.train.labels == b.train.labels);
    CHECK(bit_equal(a.test.inputs, b.test.inputs));
    SyntheticSpec other = spec;
    other.seed = 4;
    CHECK_FALSE(bit_equal(make_synthetic(other).train.inputs, a.train.inputs));
  }
  SUBCASE("80/10/10 split with image shapes") {
    CHECK(a.train.size() == 4 * 24);
    CHECK(a.val.size() == 4 * 3);
    CHECK(a.test.size() == 4 * 3);
    CHECK(a.train.inputs.shape() == Shape{96, 1, 8, 8});
    CHECK(a.train.split == Split::Train);
    CHECK(a.test.split == Split::Test);
    for (int c = 0; c < 4; ++c) {
      CHECK(std::count(a.test.labels.begin(), a.test.labels.end(), c) == 3);
    }
    CHECK_NOTHROW(a.train.validate());
  }
  SUBCASE("splits are disjoint and complete") {
    std::set<std::vector<double>> seen;
    std::size_t total = 0;
    for (const Dataset* d : {&a.train, &a.val, &a.test}) {
      for (auto& r : rows_of(*d)) {
        seen.insert(std::move(r));
        ++total;
      }
    }
    CHECK(total == 4 * 30);
    CHECK(seen.size() == total);
  }
  SUBCASE("flat shape") {
    const DatasetSplits f = make_synthetic({3, 10, {5}, 1.0, 0});
    CHECK(f.train.inputs.shape() == Shape{24, 5});
  }
  SUBCASE("very large separation: nearest centroid is perfect") {
    const DatasetSplits d = make_synthetic({10, 40, {1, 8, 8}, 50.0, 1});
    const std::size_t w = 64;
    std::vector<std::vector<double>> centroid(10, std::vector<double>(w, 0.0));
    std::vector<int> count(10, 0);
    const auto rows = rows_of(d.train);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int y = d.train.labels[i];
      for (std::size_t j = 0; j < w; ++j) centroid[y][j] += rows[i][j];
      ++count[y];
    }
    for (int c = 0; c < 10; ++c) {
      for (auto& x : centroid[c]) x /= count[c];
    }
    std::size_t correct = 0;
    const auto test = rows_of(d.test);
    for (std::size_t i = 0; i < test.size(); ++i) {
      int best = 0;
      double best_d = 1e300;
      for (int c = 0; c < 10; ++c) {
        double dist = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          dist += (test[i][j] - centroid[c][j]) * (test[i][j] - centroid[c][j]);
        }
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (best == d.test.labels[i]) ++correct;
    }
    CHECK(correct == test.size());
  }
  SUBCASE("invalid specs") {
    CHECK_THROWS_AS(make_synthetic({1, 10, {4}, 1.0, 0}), ConfigError);
    CHECK_THROWS_AS(make_synthetic({3, 0, {4}, 1.0, 0}), ConfigError);
    CHECK_THROWS_AS(make_synthetic({3, 10, {4}, 0.0, 0}), ConfigError);
    CHECK_THROWS_AS(make_synthetic({3, 10, {2, 4}, 1.0, 0}), ConfigError);
    CHECK_THROWS_AS(make_synthetic({3, 10, {1, 0, 4}, 1.0, 0}), ConfigError);
  }
}

TEST_CASE("IDX loading") {
  TempDir dir("idx");
  write_bytes(dir / "img", idx_images(2, 2, 2, {0, 255, 51, 102, 255, 0, 0, 0}));
  write_bytes(dir / "lab", idx_labels({1, 0}));
  const Dataset d = load_idx(dir / "img", dir / "lab");
  CHECK(d.inputs.shape() == Shape{2, 1, 2, 2});
  CHECK(d.inputs.at(0) == 0.0);
  CHECK(d.inputs.at(1) == 1.0);
  CHECK(d.inputs.at(2) == doctest::Approx(0.2).epsilon(1e-7));
  CHECK(d.labels == std::vector<int>{1, 0});
  CHECK(d.class_count == 2);
  for (double v : d.inputs.data()) CHECK((v >= 0.0 && v <= 1.0));

  SUBCASE("bad image magic") {
    auto b = idx_images(2, 2, 2, std::vector<std::uint8_t>(8, 0));
    b[3] = 0x01;
    write_bytes(dir / "bad", b);
    CHECK_THROWS_AS(load_idx(dir / "bad", dir / "lab"), FormatError);
  }
  SUBCASE("truncated label file names expected and actual lengths") {
    auto b = idx_labels({1, 0});
    b.pop_back();
    write_bytes(dir / "short", b);
    try {
      load_idx(dir / "img", dir / "short");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected 2") != std::string::npos);
      CHECK(msg.find("found 1") != std::string::npos);
    }
  }
  SUBCASE("truncated images") {
    write_bytes(dir / "timg", idx_images(2, 2, 2, {1, 2, 3}));
    CHECK_THROWS_AS(load_idx(dir / "timg", dir / "lab"), FormatError);
  }
  SUBCASE("label out of range") {
    CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab", 1), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(dir / "none", dir / "lab"), MissingArtifactError);
  }
}

TEST_CASE("CSV round trip") {
  TempDir dir("csv");
  const DatasetSplits s = make_synthetic({3, 10, {1, 2, 3}, 1.0, 5});
  for (bool header : {false, true}) {
    write_csv(s.train, dir / "d.csv", header);
    const Dataset back = load_csv(dir / "d.csv", {1, 2, 3}, header, 3);
    CHECK(back.labels == s.train.labels);
    CHECK(back.inputs.shape() == s.train.inputs.shape());
    CHECK(bit_equal(back.inputs, s.train.inputs));
  }
  SUBCASE("row errors name the row") {
    std::ofstream(dir / "bad.csv") << "0,1,2\n1,3\n";
    try {
      load_csv(dir / "bad.csv", {2});
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
    std::ofstream(dir / "lab.csv") << "7,1,2\n";
    CHECK_THROWS_AS(load_csv(dir / "lab.csv", {2}, false, 3), FormatError);
    std::ofstream(dir / "txt.csv") << "0,x,2\n";
    CHECK_THROWS_AS(load_csv(dir / "txt.csv", {2}), FormatError);
  }
}

TEST_CASE("batches") {
  const DatasetSplits s = make_synthetic({3, 20, {4}, 1.0, 2});
  const Dataset& d = s.train;

  SUBCASE("an epoch covers every sample once") {
    for (std::size_t bs : {1, 5, 7, 48, 100}) {
      std::vector<std::size_t> all;
      const auto bl = batches(d, bs, 9, 3);
      for (const auto& b : bl) {
        CHECK(b.labels.size() <= bs);
        CHECK(b.inputs.dim(0) == b.labels.size());
        all.insert(all.end(), b.indices.begin(), b.indices.end());
      }
      std::sort(all.begin(), all.end());
      std::vector<std::size_t> expect(d.size());
      std::iota(expect.begin(), expect.end(), 0);
      CHECK(all == expect);
    }
  }
  SUBCASE("rows and labels follow the indices") {
    for (const auto& b : batches(d, 7, 1, 0)) {
      for (std::size_t r = 0; r < b.indices.size(); ++r) {
        CHECK(b.labels[r] == d.labels[b.indices[r]]);
        CHECK(b.inputs.at(r * 4) == d.inputs.at(b.indices[r] * 4));
      }
    }
  }
  SUBCASE("order is a function of seed and epoch") {
    CHECK(epoch_permutation(50, 1, 2) == epoch_permutation(50, 1, 2));
    CHECK(epoch_permutation(50, 1, 2) != epoch_permutation(50, 1, 3));
    CHECK(epoch_permutation(50, 1, 2) != epoch_permutation(50, 2, 2));
  }
  SUBCASE("drop_last and no shuffle") {
    const auto kept = batches(d, 10, 0, 0);
    const auto dropped = batches(d, 10, 0, 0, true);
    CHECK(kept.size() == 5);
    CHECK(kept.back().labels.size() == 8);
    CHECK(dropped.size() == 4);
    const auto plain = batches(d, 10, 0, 0, false, false);
    CHECK(plain.front().indices.front() == 0);
    CHECK(plain.back().indices.back() == d.size() - 1);
  }
  CHECK_THROWS_AS(batches(d, 0, 0, 0), ConfigError);
}

TEST_CASE("holdout split") {
  const DatasetSplits s = make_synthetic({2, 50, {3}, 1.0, 7});
  const auto [train, val] = holdout_split(s.train, 0.1, 4);
  CHECK(val.size() == 8);
  CHECK(train.size() + val.size() == s.train.size());
  std::set<std::vector<double>> rows;
  for (auto& r : rows_of(train)) rows.insert(r);
  for (auto& r : rows_of(val)) CHECK(rows.count(r) == 0);
  CHECK_THROWS_AS(holdout_split(s.train, 0.0, 4), ConfigError);
}
