#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stainforge/image.hpp"

namespace stainforge::gating {

struct CellRecord {
  std::string tile_id;
  std::int64_t cell_id = 0;
  double x = 0.0;  // centroid, pixels
  double y = 0.0;
  std::size_t area = 0;
  std::vector<double> mean_expr;      // one per marker
  std::vector<double> posterior;      // empty until gated
  std::vector<std::uint8_t> label;    // empty until gated
};

struct CellTable {
  std::vector<std::string> markers;
  std::vector<CellRecord> rows;

  std::size_t marker_index(const std::string& name) const;
  std::vector<double> expression(std::size_t marker) const;
  std::vector<std::uint8_t> labels(std::size_t marker) const;
  void append(const CellTable& other);
};

/// Per-instance mean of every channel over the instance's pixels. `markers`
/// names the channels of `channels` in order.
CellTable extract_cell_expression(const ChannelStack& channels, const InstanceMask& cells,
                                  const std::vector<std::string>& markers, const std::string& tile_id);

struct GmmOptions {
  double tolerance = 1e-8;         // on mean per-sample log-likelihood
  int max_iterations = 500;
  double variance_floor = 1e-6;    // relative to the sample variance
  std::size_t max_samples = 0;     // 0: use every sample
  std::uint64_t seed = 0;          // drives subsampling when max_samples is exceeded
};

/// Two-component 1-D Gaussian mixture, components ordered by mean so the
/// positive (higher-mean) component is index 1.
struct GmmFit {
  std::array<double, 2> means{};
  std::array<double, 2> variances{};
  std::array<double, 2> weights{};
  int positive_component = 1;
  double loglik = 0.0;  // mean per-sample log-likelihood at the returned parameters
  int iterations = 0;
  bool converged = false;
  std::vector<double> loglik_trace;
};

/// EM from a deterministic start: means at the 25th/75th percentiles, equal
/// weights, both variances equal to the sample variance. The input is sorted
/// first, so the result does not depend on sample order.
GmmFit fit_gmm_1d(std::span<const double> values, const GmmOptions& options = {});

double log_normal_pdf(double x, double mean, double variance);

/// P(positive component | x).
double posterior_positive(const GmmFit& fit, double x);

/// Writes posterior and label (posterior > cutoff) for one marker.
void gate_marker(CellTable& table, std::size_t marker, const GmmFit& fit, double posterior_cutoff = 0.5);

struct HierarchyRule {
  std::string child;
  std::string parent;
};

/// Validated, topologically ordered rule set.
class Hierarchy {
 public:
  Hierarchy() = default;

  /// Throws UserError on unknown markers or cyclic rules.
  static Hierarchy build(const std::vector<HierarchyRule>& rules, const std::vector<std::string>& markers);

  /// Forces child labels to false wherever the parent label is false;
  /// posteriors are left untouched.
  void apply(CellTable& table) const;

  /// (child, parent) marker index pairs, parents resolved before children.
  const std::vector<std::pair<std::size_t, std::size_t>>& ordered() const { return ordered_; }

 private:
  std::vector<std::pair<std::size_t, std::size_t>> ordered_;
};

void write_csv(const CellTable& table, std::ostream& out);
CellTable read_csv(std::istream& in);
void write_jsonl(const CellTable& table, std::ostream& out);

}  // namespace stainforge::gating
