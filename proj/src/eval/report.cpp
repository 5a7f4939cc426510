#include "stainforge/eval/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "stainforge/textio.hpp"

namespace stainforge::eval {

nlohmann::ordered_json metric_json(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

namespace {

double finite_mean(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : kNaN;
}

nlohmann::ordered_json interval_json(const Interval& i) {
  return {{"low", metric_json(i.low)}, {"high", metric_json(i.high)}, {"resamples_used", i.used},
          {"resamples_skipped", i.skipped}};
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

void MetricReport::compute_macros() {
  std::vector<double> p, s, r, a, f;
  for (const auto& m : markers) {
    p.push_back(m.psnr);
    s.push_back(m.ssim);
    r.push_back(m.pearson);
    a.push_back(m.auprc);
    f.push_back(m.f1);
  }
  macro_psnr = finite_mean(p);
  macro_ssim = finite_mean(s);
  macro_pearson = finite_mean(r);
  macro_auprc = finite_mean(a);
  macro_f1 = finite_mean(f);
  for (auto& b : baselines) {
    std::vector<double> ba, bf;
    for (const auto& m : b.markers) {
      ba.push_back(m.auprc);
      bf.push_back(m.f1);
    }
    b.macro_auprc = finite_mean(ba);
    b.macro_f1 = finite_mean(bf);
  }
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = "stainforge-metric-report";
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["protocol"] = protocol;
  j["prediction_source"] = prediction_source;
  j["label_source"] = label_source;
  j["probe"] = {{"l2", probe_l2}, {"decision_threshold", 0.5}, {"refit_per_resample", false}};
  j["bootstrap"] = {{"samples", bootstrap_samples}, {"percentiles", {2.5, 97.5}}, {"unit", "tile"}};
  auto& ms = j["markers"] = nlohmann::ordered_json::array();
  for (const auto& m : markers) {
    ms.push_back({{"marker", m.marker},
                  {"psnr", metric_json(m.psnr)},
                  {"ssim", metric_json(m.ssim)},
                  {"pearson", metric_json(m.pearson)},
                  {"pearson_note", m.pearson_note},
                  {"auprc", metric_json(m.auprc)},
                  {"f1", metric_json(m.f1)},
                  {"auprc_ci", interval_json(m.auprc_ci)},
                  {"f1_ci", interval_json(m.f1_ci)},
                  {"probe_skipped", m.probe_skipped},
                  {"skip_reason", m.skip_reason},
                  {"fit_cells", m.fit_cells},
                  {"score_cells", m.score_cells},
                  {"prevalence", metric_json(m.prevalence)}});
  }
  j["macro"] = {{"psnr", metric_json(macro_psnr)},
                {"ssim", metric_json(macro_ssim)},
                {"pearson", metric_json(macro_pearson)},
                {"auprc", metric_json(macro_auprc)},
                {"f1", metric_json(macro_f1)}};
  auto& bs = j["baselines"] = nlohmann::ordered_json::array();
  for (const auto& b : baselines) {
    nlohmann::ordered_json bm = nlohmann::ordered_json::array();
    for (const auto& m : b.markers) {
      bm.push_back({{"marker", m.marker}, {"auprc", metric_json(m.auprc)}, {"f1", metric_json(m.f1)},
                    {"skipped", m.skipped}});
    }
    bs.push_back({{"name", b.name},
                  {"macro_auprc", metric_json(b.macro_auprc)},
                  {"macro_f1", metric_json(b.macro_f1)},
                  {"markers", bm}});
  }
  auto& cs = j["count_correlation"] = nlohmann::ordered_json::array();
  for (const auto& c : counts) {
    cs.push_back({{"marker", c.marker},
                  {"pearson", metric_json(c.pearson)},
                  {"slope", metric_json(c.slope)},
                  {"intercept", metric_json(c.intercept)},
                  {"predicted", c.predicted},
                  {"reference", c.reference}});
  }
  j["notes"] = notes;
  return j;
}

std::string MetricReport::to_csv() const {
  std::string out = "marker,psnr,ssim,pearson,auprc,auprc_ci_low,auprc_ci_high,f1,f1_ci_low,f1_ci_high,prevalence,probe_skipped\n";
  auto row = [&](const std::string& name, const MarkerReport& m) {
    out += name + "," + textio::fmt(m.psnr) + "," + textio::fmt(m.ssim) + "," + textio::fmt(m.pearson) + "," +
           textio::fmt(m.auprc) + "," + textio::fmt(m.auprc_ci.low) + "," + textio::fmt(m.auprc_ci.high) + "," +
           textio::fmt(m.f1) + "," + textio::fmt(m.f1_ci.low) + "," + textio::fmt(m.f1_ci.high) + "," +
           textio::fmt(m.prevalence) + "," + (m.probe_skipped ? "1" : "0") + "\n";
  };
  for (const auto& m : markers) row(m.marker, m);
  MarkerReport macro;
  macro.psnr = macro_psnr;
  macro.ssim = macro_ssim;
  macro.pearson = macro_pearson;
  macro.auprc = macro_auprc;
  macro.f1 = macro_f1;
  row("macro", macro);
  return out;
}

std::string bar_chart_svg(const MetricReport& report, const std::string& metric) {
  const bool use_f1 = metric == "f1";
  const int bar = 36, gap = 12, left = 50, top = 30, plot_h = 200;
  const int n = static_cast<int>(report.markers.size());
  const int width = left + n * (bar + gap) + gap, height = top + plot_h + 70;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
                  std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"18\">" + (use_f1 ? "F1" : "AUPRC") + " per marker</text>\n";
  s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(top) + "\" x2=\"" + std::to_string(left) +
       "\" y2=\"" + std::to_string(top + plot_h) + "\" stroke=\"black\"/>\n";
  for (double t : {0.0, 0.5, 1.0}) {
    s += "<text x=\"" + std::to_string(left - 30) + "\" y=\"" + num(y_of(t) + 4) + "\">" + num(t) + "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    const auto& m = report.markers[i];
    const double v = use_f1 ? m.f1 : m.auprc;
    const auto& ci = use_f1 ? m.f1_ci : m.auprc_ci;
    const int x = left + gap + i * (bar + gap);
    if (std::isfinite(v)) {
      s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + num(y_of(v)) + "\" width=\"" + std::to_string(bar) +
           "\" height=\"" + num(top + plot_h - y_of(v)) + "\" fill=\"#4a78b5\"/>\n";
    }
    if (std::isfinite(ci.low) && std::isfinite(ci.high)) {
      const std::string cx = std::to_string(x + bar / 2);
      s += "<line x1=\"" + cx + "\" y1=\"" + num(y_of(ci.low)) + "\" x2=\"" + cx + "\" y2=\"" + num(y_of(ci.high)) +
           "\" stroke=\"black\"/>\n";
    }
    s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top + plot_h + 14) +
         "\" transform=\"rotate(30 " + std::to_string(x) + "," + std::to_string(top + plot_h + 14) + ")\">" +
         escape(m.marker) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string count_scatter_svg(const CountReport& c) {
  const int size = 260, pad = 40;
  double hi = 1;
  for (double v : c.predicted) hi = std::max(hi, v);
  for (double v : c.reference) hi = std::max(hi, v);
  auto px = [&](double v) { return pad + (size - 2 * pad) * v / hi; };
  auto py = [&](double v) { return size - pad - (size - 2 * pad) * v / hi; };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) + "\" height=\"" +
                  std::to_string(size) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<text x=\"" + std::to_string(pad) + "\" y=\"16\">" + escape(c.marker) + " tile counts, r=" +
       (std::isfinite(c.pearson) ? num(c.pearson) : std::string("n/a")) + "</text>\n";
  s += "<rect x=\"" + std::to_string(pad) + "\" y=\"" + std::to_string(pad) + "\" width=\"" +
       std::to_string(size - 2 * pad) + "\" height=\"" + std::to_string(size - 2 * pad) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < c.predicted.size() && i < c.reference.size(); ++i) {
    s += "<circle cx=\"" + num(px(c.predicted[i])) + "\" cy=\"" + num(py(c.reference[i])) +
         "\" r=\"3\" fill=\"#c0504d\"/>\n";
  }
  if (std::isfinite(c.slope)) {
    s += "<line x1=\"" + num(px(0)) + "\" y1=\"" + num(py(c.intercept)) + "\" x2=\"" + num(px(hi)) + "\" y2=\"" +
         num(py(c.intercept + c.slope * hi)) + "\" stroke=\"gray\"/>\n";
  }
  s += "<text x=\"" + std::to_string(size / 2 - 30) + "\" y=\"" + std::to_string(size - 10) +
       "\">predicted</text>\n<text x=\"4\" y=\"" + std::to_string(size / 2) + "\">reference</text>\n</svg>\n";
  return s;
}

}  // namespace stainforge::eval
