#pragma once

// Small numeric and formatting helpers shared by the experiments and CSV writers.

#include <span>
#include <string>
#include <vector>

namespace tokenhalt {

/// Shortest round-trip decimal form, so CSVs are byte-stable across runs.
std::string fmt_num(double v);

/// Median of a non-empty sample (mean of the middle pair for even sizes).
double median(std::vector<double> values);

/// Least-squares slope of y against x; needs two or more distinct x.
double fit_slope(std::span<const double> x, std::span<const double> y);

}  // namespace tokenhalt
