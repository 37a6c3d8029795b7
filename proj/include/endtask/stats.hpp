#pragma once

// Multi-seed aggregation and two-sample permutation tests on the absolute
// difference of means.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "endtask/strategies.hpp"

namespace endtask {

struct SampleSet {
  std::string label;
  std::vector<double> values;

  void validate() const;
};

// n_permutations >= 1: Monte Carlo, p = (1 + #{stat >= observed}) / (1 + n),
// permutations drawn from Rng::substream(seed, permutation, 0).
// n_permutations == 0: exhaustive over all C(|a|+|b|, |a|) relabelings
// (at most 200000), p = exact proportion.
// Ties are counted with a relative tolerance of 1e-9 on the statistic.
double permutation_test(const SampleSet& a, const SampleSet& b, std::size_t n_permutations, std::uint64_t seed);

inline constexpr std::size_t kMaxExhaustivePartitions = 200000;

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 when n == 1
  std::vector<double> values;
  std::string note;  // set when the std is a convention rather than an estimate

  std::string formatted(int decimals = 2) const;
};

Aggregate aggregate_values(std::span<const double> values);
// Aggregates test_metric across records of one strategy and task list.
Aggregate aggregate_runs(const std::vector<RunRecord>& records);

// "MEAN_{STD}", e.g. "67.74_{3.68}".
std::string format_mean_std(double mean, double std, int decimals = 2);
// Three decimals, e.g. "0.040".
std::string format_p_value(double p);

}  // namespace endtask
