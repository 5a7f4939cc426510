#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/common.hpp"

namespace stainforge::eval {

struct Interval {
  double low = kNaN;
  double high = kNaN;
  int used = 0;
  int skipped = 0;
};

struct MarkerReport {
  std::string marker;
  double psnr = kNaN;
  double ssim = kNaN;
  double pearson = kNaN;
  std::string pearson_note;  // reason when undefined
  double auprc = kNaN;
  double f1 = kNaN;
  Interval auprc_ci;
  Interval f1_ci;
  bool probe_skipped = false;
  std::string skip_reason;
  std::size_t fit_cells = 0;
  std::size_t score_cells = 0;
  double prevalence = kNaN;
};

struct BaselineMarker {
  std::string marker;
  double auprc = kNaN;
  double f1 = kNaN;
  bool skipped = false;
};

struct BaselineReport {
  std::string name;
  std::vector<BaselineMarker> markers;
  double macro_auprc = kNaN;
  double macro_f1 = kNaN;
};

struct CountReport {
  std::string marker;
  double pearson = kNaN;
  double slope = kNaN;
  double intercept = kNaN;
  std::vector<double> predicted;
  std::vector<double> reference;
};

struct MetricReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string protocol;           // "in_domain" or "external"
  std::string prediction_source;  // "model" or "targets"
  std::string label_source;       // "pseudo" or "planted"
  double probe_l2 = 1.0;
  int bootstrap_samples = 0;
  std::vector<MarkerReport> markers;
  double macro_psnr = kNaN, macro_ssim = kNaN, macro_pearson = kNaN, macro_auprc = kNaN, macro_f1 = kNaN;
  std::vector<BaselineReport> baselines;
  std::vector<CountReport> counts;
  std::vector<std::string> notes;

  /// Mean over finite entries; NaN if none.
  void compute_macros();
  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
};

/// JSON encoding of a metric value: NaN -> null, +-inf -> "inf"/"-inf".
nlohmann::ordered_json metric_json(double v);

/// Per-marker bars of `metric` ("auprc" or "f1") with CI whiskers.
std::string bar_chart_svg(const MetricReport& report, const std::string& metric);
/// Predicted vs reference tile counts with the fitted line.
std::string count_scatter_svg(const CountReport& counts);

}  // namespace stainforge::eval
