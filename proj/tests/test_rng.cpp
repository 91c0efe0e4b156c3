#include "cfl/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <vector>

using cfl::Rng;

TEST_CASE("same seed reproduces the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("split streams are independent of parent consumption") {
  Rng a(7);
  Rng child_before = a.split(3);
  a.next_u64();
  a.next_u64();
  Rng child_after = a.split(3);
  for (int i = 0; i < 20; ++i) REQUIRE(child_before.next_u64() == child_after.next_u64());

  Rng other = a.split(4);
  bool all_equal = true;
  Rng c3 = a.split(3);
  for (int i = 0; i < 20; ++i) all_equal = all_equal && (c3.next_u64() == other.next_u64());
  REQUIRE_FALSE(all_equal);
}

TEST_CASE("normal draws have the right first two moments") {
  Rng rng(123);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.01);
  REQUIRE(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform_int stays in range and covers it") {
  Rng rng(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = rng.uniform_int(7);
    REQUIRE(v >= 0);
    REQUIRE(v < 7);
    ++hits[static_cast<std::size_t>(v)];
  }
  for (int h : hits) REQUIRE(h > 0);
}

TEST_CASE("shuffle is a permutation and deterministic") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  Rng a(9), b(9);
  auto v1 = v, v2 = v;
  a.shuffle(v1);
  b.shuffle(v2);
  REQUIRE(v1 == v2);
  std::sort(v1.begin(), v1.end());
  REQUIRE(v1 == v);
}
