#include "endtask/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "endtask/prng.hpp"

namespace endtask {

void SampleSet::validate() const {
  if (values.empty()) throw std::invalid_argument("sample set '" + label + "' is empty");
  for (double v : values)
    if (!std::isfinite(v)) throw std::invalid_argument("sample set '" + label + "' has a non-finite value");
}

namespace {

double mean_of(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

// C(n, k) with early exit once it exceeds `cap`.
std::size_t binomial_capped(std::size_t n, std::size_t k, std::size_t cap) {
  k = std::min(k, n - k);
  double c = 1.0;
  for (std::size_t i = 1; i <= k; ++i) {
    c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
    if (c > static_cast<double>(cap)) return cap + 1;
  }
  return static_cast<std::size_t>(std::llround(c));
}

}  // namespace

double permutation_test(const SampleSet& a, const SampleSet& b, std::size_t n_permutations, std::uint64_t seed) {
  a.validate();
  b.validate();
  std::vector<double> pooled = a.values;
  pooled.insert(pooled.end(), b.values.begin(), b.values.end());
  const std::size_t na = a.values.size();
  const std::size_t nb = b.values.size();
  const std::size_t n = pooled.size();

  if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled.front(); })) return 1.0;

  const double total = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  auto statistic = [&](double sum_first) {
    return std::abs(sum_first / static_cast<double>(na) - (total - sum_first) / static_cast<double>(nb));
  };
  const double observed = std::abs(mean_of(a.values) - mean_of(b.values));
  const double threshold = observed - 1e-9 * std::max(1.0, observed);

  if (n_permutations == 0) {
    if (binomial_capped(n, na, kMaxExhaustivePartitions) > kMaxExhaustivePartitions) {
      throw std::invalid_argument("exhaustive permutation test limited to 200000 partitions");
    }
    // Lexicographic walk over index combinations of size na.
    std::vector<std::size_t> idx(na);
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t hits = 0, count = 0;
    while (true) {
      double s = 0.0;
      for (std::size_t i : idx) s += pooled[i];
      ++count;
      if (statistic(s) >= threshold) ++hits;
      std::size_t pos = na;
      while (pos > 0 && idx[pos - 1] == n - na + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t j = pos; j < na; ++j) idx[j] = idx[j - 1] + 1;
    }
    return static_cast<double>(hits) / static_cast<double>(count);
  }

  Rng rng = Rng::substream(seed, Stream::permutation, 0);
  std::vector<double> work = pooled;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < n_permutations; ++p) {
    rng.shuffle(std::span<double>(work));
    const double s = std::accumulate(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(na), 0.0);
    if (statistic(s) >= threshold) ++hits;
  }
  return static_cast<double>(1 + hits) / static_cast<double>(1 + n_permutations);
}

std::string format_mean_std(double mean, double std, int decimals) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.*f_{%.*f}", decimals, mean, decimals, std);
  return buf;
}

std::string format_p_value(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", p);
  return buf;
}

std::string Aggregate::formatted(int decimals) const { return format_mean_std(mean, std, decimals); }

Aggregate aggregate_values(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("cannot aggregate zero values");
  Aggregate agg;
  agg.values.assign(values.begin(), values.end());
  agg.mean = mean_of(values);
  if (values.size() == 1) {
    agg.std = 0.0;
    agg.note = "single value: sample std undefined, reported as 0";
    return agg;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
  agg.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return agg;
}

Aggregate aggregate_runs(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("aggregate_runs needs at least one record");
  std::vector<double> values;
  for (const auto& r : records) {
    if (r.strategy != records.front().strategy || r.task_ids != records.front().task_ids) {
      throw std::invalid_argument("aggregate_runs: records mix strategies or task sets");
    }
    values.push_back(r.test_metric);
  }
  return aggregate_values(values);
}

}  // namespace endtask
