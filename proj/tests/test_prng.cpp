#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "endtask/prng.hpp"

using namespace endtask;

TEST_CASE("splitmix64 matches the reference sequence from state 0") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(state) == 0x6e789e6aa1b965f4ULL);
  CHECK(splitmix64(state) == 0x06c45d188009454fULL);
  CHECK(splitmix64(state) == 0xf88bb8a8724c81ecULL);
}

TEST_CASE("xoshiro256** seeded by splitmix64 matches an independent evaluation") {
  // Expected values computed outside this code base from the published
  // reference algorithms.
  Rng rng(0);
  CHECK(rng.next_u64() == 0x99ec5f36cb75f2b4ULL);
  CHECK(rng.next_u64() == 0xbf6e1f784956452aULL);
  CHECK(rng.next_u64() == 0x1a5f849d4933e6e0ULL);
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("substreams are reproducible and distinct") {
  auto draw = [](Rng r) {
    std::vector<std::uint64_t> v;
    for (int i = 0; i < 4; ++i) v.push_back(r.next_u64());
    return v;
  };
  CHECK(draw(Rng::substream(7, Stream::data, 3)) == draw(Rng::substream(7, Stream::data, 3)));
  std::set<std::vector<std::uint64_t>> seen;
  for (Stream s : {Stream::init, Stream::data, Stream::masking, Stream::meta_head, Stream::permutation})
    for (std::uint64_t idx = 0; idx < 3; ++idx)
      for (std::uint64_t root : {0ULL, 1ULL}) seen.insert(draw(Rng::substream(root, s, idx)));
  CHECK(seen.size() == 5 * 3 * 2);
}

TEST_CASE("stream labels are the documented names") {
  CHECK(stream_label(Stream::init) == "init");
  CHECK(stream_label(Stream::data) == "data");
  CHECK(stream_label(Stream::masking) == "masking");
  CHECK(stream_label(Stream::meta_head) == "meta_head");
  CHECK(stream_label(Stream::permutation) == "permutation");
}

TEST_CASE("uniform and below stay in range with plausible moments") {
  Rng rng(42);
  double sum = 0.0;
  const int n = 100000;
  std::vector<int> counts(7, 0);
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    const auto k = rng.below(7);
    REQUIRE(k < 7);
    ++counts[k];
  }
  CHECK(std::abs(sum / n - 0.5) < 5 * std::sqrt(1.0 / 12.0 / n));
  for (int c : counts) CHECK(std::abs(c - n / 7.0) < 5 * std::sqrt(n * (1.0 / 7) * (6.0 / 7)));
  CHECK_THROWS_AS(rng.below(0), std::invalid_argument);
}

TEST_CASE("normal draws have unit variance") {
  Rng rng(3);
  const int n = 200000;
  double s = 0.0, ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    ss += z * z;
  }
  CHECK(std::abs(s / n) < 0.02);
  CHECK(std::abs(ss / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is a permutation and deterministic") {
  std::vector<int> a(50);
  std::iota(a.begin(), a.end(), 0);
  std::vector<int> b(a);
  Rng r1(9), r2(9);
  r1.shuffle(std::span<int>(a));
  r2.shuffle(std::span<int>(b));
  CHECK(a == b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("derive_seed separates indices") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 1000; ++i) seeds.insert(derive_seed(5, i));
  CHECK(seeds.size() == 1000);
  CHECK(derive_seed(5, 1) == derive_seed(5, 1));
}
