#include "stainforge/gating.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stainforge/imgproc.hpp"
#include "stainforge/textio.hpp"

namespace stainforge::gating {

std::size_t CellTable::marker_index(const std::string& name) const {
  const auto it = std::find(markers.begin(), markers.end(), name);
  if (it == markers.end()) throw UserError("unknown marker '" + name + "'");
  return static_cast<std::size_t>(it - markers.begin());
}

std::vector<double> CellTable::expression(std::size_t marker) const {
  std::vector<double> v;
  v.reserve(rows.size());
  for (const auto& r : rows) v.push_back(r.mean_expr.at(marker));
  return v;
}

std::vector<std::uint8_t> CellTable::labels(std::size_t marker) const {
  std::vector<std::uint8_t> v;
  v.reserve(rows.size());
  for (const auto& r : rows) v.push_back(r.label.at(marker));
  return v;
}

void CellTable::append(const CellTable& other) {
  if (markers.empty()) markers = other.markers;
  if (other.markers != markers) throw Error("appending cell tables with different panels");
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

CellTable extract_cell_expression(const ChannelStack& channels, const InstanceMask& cells,
                                  const std::vector<std::string>& markers, const std::string& tile_id) {
  if (channels.size() != markers.size()) throw UserError("channel count does not match marker list");
  for (const auto& ch : channels) {
    if (ch.width != cells.width || ch.height != cells.height) {
      throw UserError("extract_cell_expression: image and mask shapes differ");
    }
  }
  const auto n = static_cast<std::size_t>(cells.max_label()) + 1;
  const std::size_t m = channels.size();
  std::vector<double> sums(n * m, 0.0), sx(n, 0.0), sy(n, 0.0);
  std::vector<std::size_t> area(n, 0);
  for (int y = 0; y < cells.height; ++y) {
    for (int x = 0; x < cells.width; ++x) {
      const auto id = cells.at(x, y);
      if (id <= 0) continue;
      ++area[id];
      sx[id] += x;
      sy[id] += y;
      const auto p = static_cast<std::size_t>(y) * cells.width + x;
      for (std::size_t c = 0; c < m; ++c) sums[id * m + c] += channels[c].pixels[p];
    }
  }
  CellTable table;
  table.markers = markers;
  for (std::size_t id = 1; id < n; ++id) {
    if (area[id] == 0) continue;
    const double a = static_cast<double>(area[id]);
    CellRecord r;
    r.tile_id = tile_id;
    r.cell_id = static_cast<std::int64_t>(id);
    r.x = sx[id] / a;
    r.y = sy[id] / a;
    r.area = area[id];
    r.mean_expr.resize(m);
    for (std::size_t c = 0; c < m; ++c) r.mean_expr[c] = sums[id * m + c] / a;
    table.rows.push_back(std::move(r));
  }
  return table;
}

double log_normal_pdf(double x, double mean, double variance) {
  constexpr double kLog2Pi = 1.8378770664093453;
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(variance) + d * d / variance);
}

namespace {

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (!std::isfinite(m)) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double mean_loglik(const std::vector<double>& x, const GmmFit& f) {
  const double lw0 = std::log(f.weights[0]), lw1 = std::log(f.weights[1]);
  double total = 0.0;
  for (double v : x) {
    total += log_sum_exp(lw0 + log_normal_pdf(v, f.means[0], f.variances[0]),
                         lw1 + log_normal_pdf(v, f.means[1], f.variances[1]));
  }
  return total / static_cast<double>(x.size());
}

}  // namespace

GmmFit fit_gmm_1d(std::span<const double> values, const GmmOptions& options) {
  if (values.size() < 8) throw UserError("fit_gmm_1d needs at least 8 samples");
  std::vector<double> x(values.begin(), values.end());
  for (double v : x) {
    if (!std::isfinite(v)) throw UserError("fit_gmm_1d: non-finite sample");
  }
  std::sort(x.begin(), x.end());
  if (x.front() == x.back()) throw UserError("degenerate distribution");

  if (options.max_samples > 0 && x.size() > options.max_samples) {
    // Partial Fisher-Yates over the sorted sample keeps this order-invariant.
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_samples; ++i) {
      std::swap(x[i], x[i + rng.below(x.size() - i)]);
    }
    x.resize(options.max_samples);
    std::sort(x.begin(), x.end());
    if (x.front() == x.back()) throw UserError("degenerate distribution");
  }

  const auto n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double floor = options.variance_floor * var;

  GmmFit fit;
  fit.means = {imgproc::interpolated_percentile(x, 0.25), imgproc::interpolated_percentile(x, 0.75)};
  if (fit.means[0] == fit.means[1]) {
    // Heavy ties at the quartiles: anchor on the side that still has spread.
    if (fit.means[1] < x.back()) {
      fit.means[1] = x.back();
    } else {
      fit.means[0] = x.front();
    }
  }
  fit.variances = {var, var};
  fit.weights = {0.5, 0.5};

  std::vector<double> resp(x.size());
  double previous = -kInf;
  for (int it = 0;; ++it) {
    const double ll = mean_loglik(x, fit);
    fit.loglik_trace.push_back(ll);
    fit.loglik = ll;
    fit.iterations = it;
    if (it > 0 && ll - previous < options.tolerance) {
      fit.converged = true;
      break;
    }
    if (it >= options.max_iterations) break;
    previous = ll;

    // E-step: responsibility of component 1.
    const double lw0 = std::log(fit.weights[0]), lw1 = std::log(fit.weights[1]);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double a = lw0 + log_normal_pdf(x[i], fit.means[0], fit.variances[0]);
      const double b = lw1 + log_normal_pdf(x[i], fit.means[1], fit.variances[1]);
      resp[i] = std::exp(b - log_sum_exp(a, b));
    }
    // M-step.
    double n1 = 0, s1 = 0, s0 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      n1 += resp[i];
      s1 += resp[i] * x[i];
      s0 += (1 - resp[i]) * x[i];
    }
    const double n0 = n - n1;
    if (n0 <= 0 || n1 <= 0) throw Error("fit_gmm_1d: a component collapsed to zero weight");
    fit.means = {s0 / n0, s1 / n1};
    double q0 = 0, q1 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      q0 += (1 - resp[i]) * (x[i] - fit.means[0]) * (x[i] - fit.means[0]);
      q1 += resp[i] * (x[i] - fit.means[1]) * (x[i] - fit.means[1]);
    }
    fit.variances = {std::max(q0 / n0, floor), std::max(q1 / n1, floor)};
    fit.weights = {n0 / n, n1 / n};
  }

  if (fit.means[0] > fit.means[1]) {
    std::swap(fit.means[0], fit.means[1]);
    std::swap(fit.variances[0], fit.variances[1]);
    std::swap(fit.weights[0], fit.weights[1]);
  }
  fit.positive_component = 1;
  return fit;
}

double posterior_positive(const GmmFit& fit, double x) {
  const int pos = fit.positive_component;
  const int neg = 1 - pos;
  const double lp = std::log(fit.weights[pos]) + log_normal_pdf(x, fit.means[pos], fit.variances[pos]);
  const double ln = std::log(fit.weights[neg]) + log_normal_pdf(x, fit.means[neg], fit.variances[neg]);
  // Logistic of the log-odds; exact 0.5 when the two terms tie.
  const double d = lp - ln;
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

void gate_marker(CellTable& table, std::size_t marker, const GmmFit& fit, double posterior_cutoff) {
  if (!(posterior_cutoff > 0 && posterior_cutoff < 1)) throw UserError("posterior cutoff must be in (0, 1)");
  const std::size_t m = table.markers.size();
  if (marker >= m) throw UserError("gate_marker: marker index out of range");
  for (auto& r : table.rows) {
    if (r.posterior.size() != m) r.posterior.assign(m, kNaN);
    if (r.label.size() != m) r.label.assign(m, 0);
    r.posterior[marker] = posterior_positive(fit, r.mean_expr.at(marker));
    r.label[marker] = r.posterior[marker] > posterior_cutoff;
  }
}

Hierarchy Hierarchy::build(const std::vector<HierarchyRule>& rules, const std::vector<std::string>& markers) {
  auto index_of = [&](const std::string& name) {
    const auto it = std::find(markers.begin(), markers.end(), name);
    if (it == markers.end()) throw UserError("hierarchy rule references unknown marker '" + name + "'");
    return static_cast<std::size_t>(it - markers.begin());
  };
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (const auto& r : rules) {
    const auto c = index_of(r.child), p = index_of(r.parent);
    if (c == p) throw UserError("hierarchy rule is cyclic: " + r.child + " is its own parent");
    edges.emplace_back(c, p);
  }
  // Kahn's algorithm over parent -> child edges, lowest marker index first.
  const std::size_t n = markers.size();
  std::vector<int> indegree(n, 0);
  for (const auto& [c, p] : edges) ++indegree[c];
  std::vector<std::size_t> order_pos(n, 0);
  std::vector<bool> done(n, false);
  for (std::size_t placed = 0; placed < n; ++placed) {
    std::size_t next = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!done[i] && indegree[i] == 0) {
        next = i;
        break;
      }
    }
    if (next == n) throw UserError("hierarchy rules contain a cycle");
    done[next] = true;
    order_pos[next] = placed;
    for (const auto& [c, p] : edges) {
      if (p == next) --indegree[c];
    }
  }
  Hierarchy h;
  h.ordered_ = edges;
  std::stable_sort(h.ordered_.begin(), h.ordered_.end(), [&](const auto& a, const auto& b) {
    return order_pos[a.second] < order_pos[b.second];
  });
  return h;
}

void Hierarchy::apply(CellTable& table) const {
  for (auto& r : table.rows) {
    if (r.label.empty()) continue;
    for (const auto& [child, parent] : ordered_) {
      if (!r.label.at(parent)) r.label.at(child) = 0;
    }
  }
}

void write_csv(const CellTable& table, std::ostream& out) {
  out << "tile_id,cell_id,x,y,area";
  for (const auto& m : table.markers) out << ",expr_" << m;
  const bool gated = !table.rows.empty() && !table.rows.front().label.empty();
  if (gated) {
    for (const auto& m : table.markers) out << ",post_" << m;
    for (const auto& m : table.markers) out << ",label_" << m;
  }
  out << '\n';
  for (const auto& r : table.rows) {
    out << r.tile_id << ',' << r.cell_id << ',' << textio::fmt(r.x) << ',' << textio::fmt(r.y) << ',' << r.area;
    for (double v : r.mean_expr) out << ',' << textio::fmt(v);
    if (gated) {
      for (double v : r.posterior) out << ',' << textio::fmt(v);
      for (auto v : r.label) out << ',' << static_cast<int>(v);
    }
    out << '\n';
  }
}

CellTable read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw UserError("cell table CSV is empty");
  const auto header = textio::split(line, ',');
  if (header.size() < 5 || header[0] != "tile_id" || header[1] != "cell_id") {
    throw UserError("cell table CSV has an unexpected header");
  }
  CellTable table;
  std::vector<std::size_t> expr_cols, post_cols, label_cols;
  for (std::size_t i = 5; i < header.size(); ++i) {
    const auto& h = header[i];
    if (h.rfind("expr_", 0) == 0) {
      table.markers.push_back(h.substr(5));
      expr_cols.push_back(i);
    } else if (h.rfind("post_", 0) == 0) {
      post_cols.push_back(i);
    } else if (h.rfind("label_", 0) == 0) {
      label_cols.push_back(i);
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = textio::split(line, ',');
    if (f.size() != header.size()) throw UserError("cell table CSV row has wrong field count");
    CellRecord r;
    r.tile_id = f[0];
    r.cell_id = std::stoll(f[1]);
    r.x = textio::parse_double(f[2]);
    r.y = textio::parse_double(f[3]);
    r.area = static_cast<std::size_t>(std::stoull(f[4]));
    for (auto c : expr_cols) r.mean_expr.push_back(textio::parse_double(f[c]));
    for (auto c : post_cols) r.posterior.push_back(textio::parse_double(f[c]));
    for (auto c : label_cols) r.label.push_back(static_cast<std::uint8_t>(std::stoi(f[c]) != 0));
    table.rows.push_back(std::move(r));
  }
  return table;
}

void write_jsonl(const CellTable& table, std::ostream& out) {
  for (const auto& r : table.rows) {
    nlohmann::ordered_json j;
    j["tile_id"] = r.tile_id;
    j["cell_id"] = r.cell_id;
    j["x"] = r.x;
    j["y"] = r.y;
    j["area"] = r.area;
    for (std::size_t m = 0; m < table.markers.size(); ++m) {
      const auto& name = table.markers[m];
      j["expr"][name] = r.mean_expr[m];
      if (!r.posterior.empty()) j["post"][name] = r.posterior[m];
      if (!r.label.empty()) j["label"][name] = static_cast<bool>(r.label[m]);
    }
    out << j.dump() << '\n';
  }
}

}  // namespace stainforge::gating
